//! Target and draft model abstractions.
//!
//! A [`TargetModel`] scores every position of a context and exposes its
//! hidden states; forward passes are incremental over a [`ModelCache`] so the
//! decoding engine can reuse the states of the committed prefix and roll back
//! rejected positions. A [`DraftModel`] proposes candidate tokens and carries
//! the [`DraftHead`] whose extra rows emit the reasoning signals.

pub mod checkpoint;
pub mod draft;
pub mod head;
pub mod table;
pub mod tiny;

pub use draft::{DraftModel, MtpDraft, Proposal, ScriptedDraft};
pub use head::{decode_signals, head_project, DraftHead, HiddenVector, Signal, SignalPrediction, SignalTriple};
pub use table::{TableEntry, TableModel};
pub use tiny::{TinyConfig, TinyTransformer};

use crate::error::{Error, Result};
use crate::seq::TokenId;

/// Output of the target model at one position: next-token logits and the
/// final hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionOutput {
    pub logits: Vec<f64>,
    pub hidden: HiddenVector,
}

/// Per-position state kept between incremental forward passes.
pub trait ModelCache: Send {
    /// Number of positions whose states are stored.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every position at index `>= len`.
    fn truncate(&mut self, len: usize);
}

pub trait TargetModel: Send + Sync {
    type Cache: ModelCache;

    fn vocab_size(&self) -> usize;

    fn hidden_dim(&self) -> usize;

    fn new_cache(&self) -> Self::Cache;

    /// Computes positions `cache.len()..context.len()` of `context`, appends
    /// their states to `cache` and returns their outputs in order.
    ///
    /// The first `cache.len()` tokens of `context` must be the ones the cache
    /// was built from.
    fn forward_cached(&self, cache: &mut Self::Cache, context: &[TokenId]) -> Result<Vec<PositionOutput>>;

    /// Uncached forward over the whole context.
    fn forward(&self, context: &[TokenId]) -> Result<Vec<PositionOutput>> {
        let mut cache = self.new_cache();
        self.forward_cached(&mut cache, context)
    }
}

/// Validates a context and runs a fresh forward over it.
pub fn target_forward<T: TargetModel>(model: &T, context: &[TokenId]) -> Result<Vec<PositionOutput>> {
    check_context(context, model.vocab_size())?;
    model.forward(context)
}

pub(crate) fn check_context(context: &[TokenId], vocab: usize) -> Result<()> {
    if context.is_empty() {
        return Err(Error::Usage("empty context".into()));
    }
    if let Some(t) = context.iter().find(|t| t.index() >= vocab) {
        return Err(Error::Usage(format!("token {t} outside vocabulary of size {vocab}")));
    }
    Ok(())
}

/// Greedy next token from a logit vector.
pub fn greedy(logits: &[f64]) -> TokenId {
    TokenId(crate::linalg::argmax(logits) as u32)
}
