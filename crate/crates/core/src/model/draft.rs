use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{greedy, DraftHead, HiddenVector, SignalPrediction, TableModel};
use crate::seq::TokenId;

/// Candidates for one verify cycle plus the signals read at the last
/// accepted position.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub candidates: Vec<TokenId>,
    pub signals: SignalPrediction,
    /// Draft forward passes spent on this proposal.
    pub forwards: usize,
}

/// Proposes candidate tokens from the target's hidden state at the last
/// accepted position and the committed context.
///
/// `context` ends with the token the target will score next (the pending
/// recover token); `last_hidden` is the target state one position before it.
pub trait DraftModel: Send + Sync {
    fn head(&self) -> &DraftHead;

    /// Deepest proposal this draft supports.
    fn max_depth(&self) -> Option<usize> {
        None
    }

    /// Greedy candidates, exactly `gamma` of them.
    fn draft_tokens(&self, last_hidden: &HiddenVector, context: &[TokenId], gamma: usize) -> Result<Vec<TokenId>>;

    fn forwards_per_proposal(&self, gamma: usize) -> usize {
        gamma
    }

    /// Reads the signals from `last_hidden`, then drafts `gamma` candidates.
    fn propose(&self, last_hidden: &HiddenVector, context: &[TokenId], gamma: usize) -> Result<Proposal> {
        if gamma == 0 {
            return Err(Error::Usage("draft depth must be at least 1".into()));
        }
        if let Some(max) = self.max_depth() {
            if gamma > max {
                return Err(Error::Config(format!(
                    "draft depth {gamma} exceeds the supported maximum {max}"
                )));
            }
        }
        let signals = self.head().predict_signals(last_hidden)?;
        let candidates = self.draft_tokens(last_hidden, context, gamma)?;
        if candidates.len() != gamma {
            return Err(Error::Model(format!(
                "draft returned {} candidates, expected {gamma}",
                candidates.len()
            )));
        }
        Ok(Proposal {
            candidates,
            signals,
            forwards: self.forwards_per_proposal(gamma),
        })
    }
}

/// Draft whose tokens come from a scripted table, paired with a signal head.
#[derive(Clone, Debug)]
pub struct ScriptedDraft {
    pub script: TableModel,
    pub head: DraftHead,
}

impl ScriptedDraft {
    pub fn new(script: TableModel, head: DraftHead) -> Self {
        Self { script, head }
    }
}

impl DraftModel for ScriptedDraft {
    fn head(&self) -> &DraftHead {
        &self.head
    }

    fn draft_tokens(&self, _last_hidden: &HiddenVector, context: &[TokenId], gamma: usize) -> Result<Vec<TokenId>> {
        let mut ctx = context.to_vec();
        let mut out = Vec::with_capacity(gamma);
        for _ in 0..gamma {
            let t = self.script.successor(&ctx);
            out.push(t);
            ctx.push(t);
        }
        Ok(out)
    }
}

/// Multi-token-prediction draft: depth `k` projects the last accepted hidden
/// state onto the vocabulary to predict the token `k` places after the
/// pending one. Depth 1 is the token block of the extended [`DraftHead`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtpDraft {
    pub head: DraftHead,
    /// Projections for depths `2..`.
    pub deeper: Vec<Matrix>,
}

impl MtpDraft {
    pub fn random<R: Rng + ?Sized>(vocab: usize, dim: usize, depth: usize, std: f64, rng: &mut R) -> Self {
        let head = DraftHead::random(vocab, dim, std, rng);
        let deeper = (1..depth.max(1))
            .map(|_| Matrix::random(vocab, dim, std, rng))
            .collect();
        Self { head, deeper }
    }

    pub fn depth(&self) -> usize {
        1 + self.deeper.len()
    }

    /// Token projection used at `depth` (1-based).
    pub fn projection(&self, depth: usize) -> &Matrix {
        if depth <= 1 {
            &self.head.w_tok
        } else {
            &self.deeper[depth - 2]
        }
    }

    pub fn projection_mut(&mut self, depth: usize) -> &mut Matrix {
        if depth <= 1 {
            &mut self.head.w_tok
        } else {
            &mut self.deeper[depth - 2]
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        for m in &self.deeper {
            if m.rows() != self.head.vocab_size() || m.cols() != self.head.dim() {
                return Err(Error::Config("depth projection shape mismatch".into()));
            }
        }
        Ok(())
    }
}

impl DraftModel for MtpDraft {
    fn head(&self) -> &DraftHead {
        &self.head
    }

    fn max_depth(&self) -> Option<usize> {
        Some(self.depth())
    }

    fn forwards_per_proposal(&self, _gamma: usize) -> usize {
        1
    }

    fn draft_tokens(&self, last_hidden: &HiddenVector, _context: &[TokenId], gamma: usize) -> Result<Vec<TokenId>> {
        if last_hidden.dim() != self.head.dim() {
            return Err(Error::Config("hidden dimension does not match draft".into()));
        }
        Ok((1..=gamma)
            .map(|k| greedy(&self.projection(k).matvec(last_hidden.as_slice())))
            .collect())
    }
}
