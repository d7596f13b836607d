//! The models and tasks a command runs on: either the synthetic verbose
//! suite (scripted table target) or checkpoints plus a trace dataset.

use std::path::Path;

use anyhow::{bail, Context, Result};
use specexit_core::engine::{generate, generate_target_only, DecodeOptions, GenerationResult};
use specexit_core::exit::StoppingConfig;
use specexit_core::model::{DraftHead, PositionOutput, TargetModel};
use specexit_core::seq::{MarkerSet, TokenId, THINK_OPEN};
use specexit_core::suite::{verbose_suite, VerboseSuite};
use specexit_core::{Checkpoint, DraftModel, MtpDraft, ScriptedDraft, TableModel, TinyTransformer};

use crate::config::RunConfig;
use crate::data::read_traces;

/// Decoding method compared by the benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, clap::ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Method {
    TargetOnly,
    SpecOnly,
    Specexit,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::TargetOnly, Method::SpecOnly, Method::Specexit];

    pub fn name(self) -> &'static str {
        match self {
            Method::TargetOnly => "target_only",
            Method::SpecOnly => "spec_only",
            Method::Specexit => "specexit",
        }
    }
}

/// One prompt with its reference answer.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchTask {
    pub id: String,
    /// Generation prompt, ending with `<think>`.
    pub prompt: Vec<TokenId>,
    pub reference: Vec<TokenId>,
}

#[allow(clippy::large_enum_variant)]
pub enum Workload {
    Suite {
        suite: VerboseSuite,
        /// Scripted draft tokens with the suite's oracle head, or a trained
        /// head when a draft checkpoint is configured.
        draft: ScriptedDraft,
    },
    Checkpoints {
        target: TinyTransformer,
        draft: MtpDraft,
        tasks: Vec<BenchTask>,
        markers: MarkerSet,
    },
}

/// Target of either workload, for code that must be generic over it.
pub enum AnyTarget<'a> {
    Table(&'a TableModel),
    Tiny(&'a TinyTransformer),
}

impl Workload {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        match &cfg.models.target {
            None => {
                let suite = verbose_suite(&cfg.suite_config())?;
                let draft = match &cfg.models.draft {
                    None => suite.draft.clone(),
                    Some(p) => ScriptedDraft::new(suite.draft.script.clone(), load_head(p, &suite.target)?),
                };
                Ok(Workload::Suite { suite, draft })
            }
            Some(target_path) => {
                let target = Checkpoint::load(target_path)
                    .and_then(|c| c.to_tiny())
                    .with_context(|| format!("loading target {}", target_path.display()))?;
                let draft_path = cfg.models.draft.as_ref().context("draft checkpoint required")?;
                let draft = Checkpoint::load(draft_path)
                    .and_then(|c| c.to_mtp())
                    .with_context(|| format!("loading draft {}", draft_path.display()))?;
                if draft.head.dim() != target.hidden_dim() || draft.head.vocab_size() != target.vocab_size() {
                    bail!("draft and target checkpoints disagree on shapes");
                }
                let dataset = cfg.models.dataset.as_ref().context("dataset required")?;
                let markers = MarkerSet::toy();
                let tasks = read_traces(dataset)?
                    .records
                    .into_iter()
                    .map(|r| {
                        let mut prompt = r.prompt.clone();
                        prompt.push(THINK_OPEN);
                        BenchTask {
                            id: r.id,
                            prompt,
                            reference: r.answer,
                        }
                    })
                    .collect();
                Ok(Workload::Checkpoints {
                    target,
                    draft,
                    tasks,
                    markers,
                })
            }
        }
    }

    pub fn tasks(&self) -> Vec<BenchTask> {
        match self {
            Workload::Suite { suite, .. } => suite
                .tasks
                .iter()
                .map(|t| BenchTask {
                    id: t.id.clone(),
                    prompt: t.generation_prompt(),
                    reference: t.trace.answer.clone(),
                })
                .collect(),
            Workload::Checkpoints { tasks, .. } => tasks.clone(),
        }
    }

    pub fn markers(&self) -> &MarkerSet {
        match self {
            Workload::Suite { suite, .. } => &suite.markers,
            Workload::Checkpoints { markers, .. } => markers,
        }
    }

    pub fn target(&self) -> AnyTarget<'_> {
        match self {
            Workload::Suite { suite, .. } => AnyTarget::Table(&suite.target),
            Workload::Checkpoints { target, .. } => AnyTarget::Tiny(target),
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self.target() {
            AnyTarget::Table(t) => t.vocab_size(),
            AnyTarget::Tiny(t) => t.vocab_size(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        match self.target() {
            AnyTarget::Table(t) => t.hidden_dim(),
            AnyTarget::Tiny(t) => t.hidden_dim(),
        }
    }

    /// Rejects decoding options the draft cannot serve before any run starts.
    pub fn check_options(&self, opts: &DecodeOptions) -> Result<()> {
        opts.validate()?;
        if let Workload::Checkpoints { draft, .. } = self {
            if opts.gamma > draft.depth() {
                bail!(
                    "gamma {} exceeds the draft's {} prediction depths; lower --gamma or train with train.mtp_depth >= gamma",
                    opts.gamma,
                    draft.depth()
                );
            }
        }
        Ok(())
    }

    /// Runs one task with one method.
    pub fn run(
        &self,
        task: &BenchTask,
        method: Method,
        stopping: &StoppingConfig,
        opts: &DecodeOptions,
    ) -> specexit_core::Result<GenerationResult> {
        match self {
            Workload::Suite { suite, draft } => {
                run_method(&suite.target, draft, task, method, stopping, &suite.markers, opts)
            }
            Workload::Checkpoints {
                target, draft, markers, ..
            } => run_method(target, draft, task, method, stopping, markers, opts),
        }
    }

    /// Full uncached forward of the target.
    pub fn forward(&self, context: &[TokenId]) -> specexit_core::Result<Vec<PositionOutput>> {
        match self.target() {
            AnyTarget::Table(t) => t.forward(context),
            AnyTarget::Tiny(t) => t.forward(context),
        }
    }
}

fn run_method<T: TargetModel, D: DraftModel>(
    target: &T,
    draft: &D,
    task: &BenchTask,
    method: Method,
    stopping: &StoppingConfig,
    markers: &MarkerSet,
    opts: &DecodeOptions,
) -> specexit_core::Result<GenerationResult> {
    match method {
        Method::TargetOnly => generate_target_only(&task.prompt, target, markers, opts),
        Method::SpecOnly => generate(
            &task.prompt,
            draft,
            target,
            stopping,
            markers,
            &DecodeOptions {
                early_exit: false,
                ..*opts
            },
        ),
        Method::Specexit => generate(&task.prompt, draft, target, stopping, markers, opts),
    }
}

fn load_head<T: TargetModel>(path: &Path, target: &T) -> Result<DraftHead> {
    let draft = Checkpoint::load(path)
        .and_then(|c| c.to_mtp())
        .with_context(|| format!("loading draft {}", path.display()))?;
    if draft.head.dim() != target.hidden_dim() || draft.head.vocab_size() != target.vocab_size() {
        bail!("draft checkpoint shapes do not match the suite target");
    }
    Ok(draft.head)
}
