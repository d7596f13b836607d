//! Synthetic workloads: randomly scripted target/draft table pairs, and a
//! verbose arithmetic suite whose redundant reasoning is known by
//! construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{argmax, dot, logit, sigmoid, Matrix};
use crate::model::table::margin_for_prob;
use crate::model::{DraftHead, HiddenVector, ScriptedDraft, TableEntry, TableModel};
use crate::seq::{
    MarkerSet, ReasoningTrace, TokenId, ALTERNATIVELY, BUT, EOS, PARAGRAPH, RESERVED_IDS, THEREFORE, THINK_CLOSE,
    THINK_OPEN, WAIT,
};
use crate::trace::{annotate_signals, SignalLabels};
use crate::train::TrainExample;

/// First id of the digit tokens in the toy vocabulary.
pub const DIGIT_BASE: u32 = RESERVED_IDS as u32;
pub const PLUS: TokenId = TokenId(DIGIT_BASE + 10);
pub const EQUALS: TokenId = TokenId(DIGIT_BASE + 11);
/// First plain word id.
pub const WORD_BASE: u32 = DIGIT_BASE + 12;

/// Decimal digits of `n` as toy tokens.
pub fn digits(n: u64) -> Vec<TokenId> {
    n.to_string()
        .bytes()
        .map(|b| TokenId(DIGIT_BASE + (b - b'0') as u32))
        .collect()
}

/// A scripted target, a draft that agrees with it some of the time, and a
/// prompt.
#[derive(Clone, Debug)]
pub struct TablePair {
    pub target: TableModel,
    pub draft: ScriptedDraft,
    pub prompt: Vec<TokenId>,
    pub gamma: usize,
}

/// Random pair: an order-1 or order-2 target over a small vocabulary and a
/// draft script that disagrees at a random fraction of contexts.
pub fn random_table_pair(seed: u64) -> Result<TablePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = rng.random_range(12..40usize);
    let dim = 3;
    let order = rng.random_range(1..=2usize);
    let mut target = TableModel::new(vocab, dim, Some(order), EOS)?.with_hidden_seed(rng.random());
    let mut ctx = vec![TokenId(0); order];
    let total = vocab.pow(order as u32);
    for code in 0..total {
        let mut c = code;
        for slot in ctx.iter_mut() {
            *slot = TokenId((c % vocab) as u32);
            c /= vocab;
        }
        let u: f64 = rng.random();
        let next = if u < 0.01 {
            EOS
        } else if u < 0.03 {
            THINK_CLOSE
        } else if u < 0.12 {
            PARAGRAPH
        } else {
            TokenId(rng.random_range(RESERVED_IDS..vocab) as u32)
        };
        let mut entry = TableEntry::new(next);
        entry.margin = rng.random_range(0.5..8.0);
        target.insert(&ctx, entry)?;
    }
    let rate = [0.0, 0.1, 0.3, 0.6, 1.0][rng.random_range(0..5)];
    let script = target.perturbed(rate, rng.random());
    let head = DraftHead::random(vocab, dim, 1.0, &mut rng);
    let len = rng.random_range(1..6);
    let prompt = (0..len)
        .map(|_| TokenId(rng.random_range(RESERVED_IDS..vocab) as u32))
        .collect();
    Ok(TablePair {
        target,
        draft: ScriptedDraft::new(script, head),
        prompt,
        gamma: rng.random_range(1..=6),
    })
}

/// Corpus where every signal is a fixed function of the hidden state:
/// confidence and progress are sigmoids of linear maps, `ln(1 + r)` is
/// linear, and the gold token is the argmax of a fixed random projection.
/// The last hidden coordinate is a constant 1.
pub fn linear_signal_corpus(n: usize, dim: usize, vocab: usize, seed: u64) -> Vec<TrainExample> {
    assert!(dim >= 2 && vocab >= 2);
    let mut world = ChaCha8Rng::seed_from_u64(0xc0ffee);
    let mut coef = |bias: f64| -> Vec<f64> {
        let mut v: Vec<f64> = (0..dim - 1).map(|_| world.random_range(-1.0..1.0)).collect();
        v.push(bias);
        v
    };
    let a = coef(0.3);
    let b = coef(0.0);
    let d: Vec<f64> = coef(3.0)
        .iter()
        .enumerate()
        .map(|(i, x)| if i + 1 < dim { 0.25 * x } else { *x })
        .collect();
    let w = Matrix::random(vocab, dim, 1.0, &mut world);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut x: Vec<f64> = (0..dim - 1).map(|_| StandardNormal.sample(&mut rng)).collect();
            x.push(1.0);
            TrainExample {
                conf: sigmoid(dot(&a, &x)),
                prog: sigmoid(dot(&b, &x)),
                rem: dot(&d, &x).max(0.0).exp_m1(),
                gold: TokenId(argmax(&w.matvec(&x)) as u32),
                hidden: HiddenVector(x),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub tasks: usize,
    /// Tokens per paragraph, delimiter included.
    pub paragraph_len: usize,
    /// Needed paragraphs per task are drawn from this inclusive range.
    pub min_needed: usize,
    pub max_needed: usize,
    /// Redundant paragraphs per needed paragraph.
    pub redundant_per_needed: usize,
    /// Probability the target puts on each reasoning token.
    pub token_prob: f64,
    pub vocab: usize,
    /// Fraction of draft contexts whose token disagrees with the target.
    pub draft_error_rate: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            tasks: 50,
            paragraph_len: 240,
            min_needed: 1,
            max_needed: 3,
            redundant_per_needed: 1,
            token_prob: 0.97,
            vocab: 64,
            draft_error_rate: 0.1,
            seed: 0,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.paragraph_len < 3 || self.min_needed == 0 || self.min_needed > self.max_needed {
            return Err(Error::Config("degenerate suite geometry".into()));
        }
        if (self.vocab as u32) < WORD_BASE + 8 {
            return Err(Error::Config("suite vocabulary too small".into()));
        }
        if !(self.token_prob > 0.0 && self.token_prob < 1.0) {
            return Err(Error::Config("token probability must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// One arithmetic task with scripted reasoning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerboseTask {
    pub id: String,
    pub trace: ReasoningTrace,
    /// Paragraphs that must be read before the answer is right.
    pub needed: usize,
}

impl VerboseTask {
    /// `prompt <think>`, the context generation starts from.
    pub fn generation_prompt(&self) -> Vec<TokenId> {
        let mut p = self.trace.prompt.clone();
        p.push(THINK_OPEN);
        p
    }

    /// Reasoning position of the last needed token.
    pub fn minimal_exit(&self) -> usize {
        self.trace.paragraph_ends[self.needed - 1]
    }

    pub fn redundant_fraction(&self) -> f64 {
        1.0 - (self.minimal_exit() + 1) as f64 / self.trace.reasoning.len() as f64
    }
}

/// Target, draft and an oracle signal head for a set of verbose tasks.
#[derive(Clone, Debug)]
pub struct VerboseSuite {
    pub tasks: Vec<VerboseTask>,
    pub target: TableModel,
    pub draft: ScriptedDraft,
    pub markers: MarkerSet,
}

/// Hidden-state width of the suite models.
pub const SUITE_DIM: usize = 4;

/// Hidden vector from which [`oracle_head`] reads back exactly
/// `(conf, prog, remaining)`.
pub fn oracle_hidden(conf: f64, prog: f64, remaining: f64) -> Vec<f64> {
    vec![logit(conf, 1e-12), logit(prog, 1e-12), remaining.ln_1p(), 1.0]
}

/// Head whose signal rows pick out the coordinates of [`oracle_hidden`].
pub fn oracle_head(vocab: usize) -> DraftHead {
    let unit = |i: usize| {
        let mut v = vec![0.0; SUITE_DIM];
        v[i] = 1.0;
        v
    };
    DraftHead::from_parts(Matrix::zeros(vocab, SUITE_DIM), unit(0), unit(1), unit(2)).expect("shapes agree")
}

/// Labels over the whole reasoning: the annotation labels up to the exit
/// point, then progress 1 and remaining 0 with confidence still running.
pub fn extended_labels(exit_pos: usize, token_probs: &[f64]) -> Result<SignalLabels> {
    let (mut labels, _) = annotate_signals(exit_pos, token_probs)?;
    let mut log_sum: f64 = token_probs[..=exit_pos].iter().map(|p| p.max(1e-12).ln()).sum();
    for (i, p) in token_probs.iter().enumerate().skip(exit_pos + 1) {
        log_sum += p.max(1e-12).ln();
        labels.conf.push((log_sum / (i + 1) as f64).exp());
        labels.prog.push(1.0);
        labels.remaining.push(0);
    }
    Ok(labels)
}

pub fn verbose_suite(cfg: &SuiteConfig) -> Result<VerboseSuite> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let markers = MarkerSet::toy();
    let vocab = cfg.vocab;
    let mut target = TableModel::new(vocab, SUITE_DIM, None, EOS)?.with_hidden_seed(cfg.seed);
    let word = |rng: &mut ChaCha8Rng| TokenId(rng.random_range(WORD_BASE as usize..vocab) as u32);
    let margin = margin_for_prob(cfg.token_prob, vocab);
    let mut tasks = Vec::with_capacity(cfg.tasks);

    for t in 0..cfg.tasks {
        let a: u64 = rng.random_range(10..1000);
        let b: u64 = rng.random_range(10..1000);
        // the task index keeps every prompt distinct
        let mut prompt = vec![word(&mut rng)];
        prompt.extend(digits(t as u64));
        prompt.push(word(&mut rng));
        prompt.extend(digits(a));
        prompt.push(PLUS);
        prompt.extend(digits(b));
        prompt.push(EQUALS);
        let answer = digits(a + b);
        let wrong = digits(a + b + 1 + rng.random_range(0..9));

        let needed = rng.random_range(cfg.min_needed..=cfg.max_needed);
        let n_par = needed * (1 + cfg.redundant_per_needed);
        let mut reasoning = Vec::with_capacity(n_par * cfg.paragraph_len);
        for p in 0..n_par {
            // derivation paragraphs open with "Therefore", rechecks with a contrastive marker
            let opener = if p < needed {
                THEREFORE
            } else {
                [WAIT, BUT, ALTERNATIVELY][rng.random_range(0..3)]
            };
            reasoning.push(opener);
            for _ in 0..cfg.paragraph_len - 2 {
                reasoning.push(word(&mut rng));
            }
            reasoning.push(PARAGRAPH);
        }
        let trace = ReasoningTrace::new(prompt.clone(), reasoning, answer.clone(), &markers);
        let task = VerboseTask {
            id: format!("task-{t:03}"),
            trace,
            needed,
        };
        let exit_pos = task.minimal_exit();
        let probs = vec![cfg.token_prob; task.trace.reasoning.len()];
        let labels = extended_labels(exit_pos, &probs)?;
        let hidden_at = |i: usize| oracle_hidden(labels.conf[i], labels.prog[i], labels.remaining[i] as f64);

        // full response, natural close after the last paragraph
        let gen_prompt = task.generation_prompt();
        let base = gen_prompt.len();
        let mut full = gen_prompt.clone();
        full.extend_from_slice(&task.trace.reasoning);
        full.push(THINK_CLOSE);
        full.extend_from_slice(&answer);
        full.push(EOS);
        let reasoning_len = task.trace.reasoning.len();
        target.insert_sequence(&full, base - 1, |i, next| {
            let mut e = TableEntry::new(next);
            if i + 1 < base + reasoning_len {
                // position i predicts reasoning token i + 1 - base
                e.margin = margin;
                e.hidden = Some(hidden_at(
                    (i + 1).saturating_sub(base).saturating_sub(1).min(reasoning_len - 1),
                ));
            }
            e
        })?;
        // a forced close right after any split token of any mode
        for (j, &tok) in task.trace.reasoning.iter().enumerate() {
            let is_split = markers.step_split_paragraph.contains(&tok) || markers.step_split_discourse.contains(&tok);
            if !is_split || j + 1 == reasoning_len {
                continue;
            }
            let mut seq = full[..base + j + 1].to_vec();
            seq.push(THINK_CLOSE);
            seq.extend_from_slice(if j >= exit_pos { &answer } else { &wrong });
            seq.push(EOS);
            target.insert_sequence(&seq, base + j + 1, |_, next| TableEntry::new(next))?;
        }
        tasks.push(task);
    }

    let script = target.perturbed(cfg.draft_error_rate, cfg.seed ^ 0x5eed);
    Ok(VerboseSuite {
        tasks,
        draft: ScriptedDraft::new(script, oracle_head(vocab)),
        target,
        markers,
    })
}

impl VerboseSuite {
    /// Oracle hidden state the target reports after reading `context`.
    pub fn hidden(&self, context: &[TokenId]) -> Option<HiddenVector> {
        self.target
            .entry(context)
            .and_then(|e| e.hidden.clone())
            .map(HiddenVector)
    }
}
