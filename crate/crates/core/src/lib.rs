//! Speculative decoding with signal-guided early exit of reasoning.
//!
//! A draft model proposes tokens, the target verifies them, and an extended
//! draft head predicts confidence, progress and remaining length from the
//! target's hidden state. Once the smoothed signals pass their thresholds the
//! engine closes the reasoning span at the next step-split token.

pub mod engine;
pub mod error;
pub mod exit;
pub mod linalg;
pub mod model;
pub mod seq;
pub mod suite;
pub mod trace;
pub mod train;

pub use engine::{generate, generate_target_only, DecodeOptions, GenerationResult, StepRecord};
pub use error::{Error, Result};
pub use exit::{should_exit, SmootherState, SmoothingMethod, StoppingConfig, StoppingFile, Thresholds};
pub use model::checkpoint::Checkpoint;
pub use model::{
    DraftHead, DraftModel, HiddenVector, MtpDraft, ScriptedDraft, Signal, SignalTriple, TableModel, TargetModel,
    TinyConfig, TinyTransformer,
};
pub use seq::{MarkerMode, MarkerSet, ReasoningTrace, TokenId, Vocabulary};
pub use trace::{AnnotatedTrace, SignalLabels, TraceRecord};
pub use train::{dynamic_weights, FitConfig, LossBreakdown, TrainExample, TrainLogRow, WeightState};
