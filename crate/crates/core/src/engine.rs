//! Speculative decoding with signal-guided early exit.
//!
//! Each decode step reads the reasoning signals from the target's hidden
//! state at the last verified position, smooths them, drafts `gamma`
//! candidates and verifies them against the target's greedy choices in one
//! chain forward. While the model is still thinking, an accepted step-split
//! token together with a passing stop rule cuts the step short and commits
//! `</think>` right after the split.
//!
//! The last committed token is usually *pending*: its state is not in the
//! target cache yet and is computed by the next verify forward, which feeds
//! `pending + candidates`. This keeps every step at exactly one target
//! forward.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exit::{should_exit, SmootherState, StoppingConfig};
use crate::model::{
    check_context, greedy, DraftModel, HiddenVector, ModelCache, PositionOutput, SignalTriple, TargetModel,
};
use crate::seq::{is_step_split, MarkerSet, TokenId, EOS, THINK_CLOSE};

/// Decoding limits and switches shared by every method.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    /// Draft depth per step.
    pub gamma: usize,
    /// Reasoning-token budget; reaching it while thinking forces `</think>`.
    pub max_tokens: usize,
    /// Cap on answer tokens after `</think>`.
    pub max_answer_tokens: usize,
    pub eos: TokenId,
    /// When false the stop rule is never consulted.
    pub early_exit: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            gamma: 4,
            max_tokens: 1024,
            max_answer_tokens: 64,
            eos: EOS,
            early_exit: true,
        }
    }
}

impl DecodeOptions {
    pub fn validate(&self) -> Result<()> {
        if self.gamma == 0 {
            return Err(Error::Usage("gamma must be at least 1".into()));
        }
        if self.max_tokens == 0 {
            return Err(Error::Usage("max_tokens must be at least 1".into()));
        }
        if self.max_answer_tokens == 0 {
            return Err(Error::Usage("max_answer_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

/// Session state for one generation. Owns the target cache.
pub struct EngineState<C> {
    pub prompt: Vec<TokenId>,
    /// Generated tokens, prompt excluded.
    pub committed: Vec<TokenId>,
    pub cache: C,
    /// Target output at the last committed position, present only when that
    /// position is cached (right after prefill).
    next: Option<PositionOutput>,
    pub is_thinking: bool,
    pub smoother: SmootherState,
    pub last_hidden: HiddenVector,
    pub terminated: bool,
    reasoning_len: usize,
    answer_len: usize,
    /// Output index of a signal-forced `</think>`.
    pub exit_position: Option<usize>,
    /// Output index of a budget-forced `</think>`.
    pub budget_exit_position: Option<usize>,
    pub target_forwards: usize,
    /// Target positions computed, prefill included.
    pub target_positions: usize,
    pub draft_forwards: usize,
}

impl<C: ModelCache> EngineState<C> {
    /// Runs the prefill forward over the whole prompt.
    pub fn start<T>(target: &T, prompt: &[TokenId], cfg: &StoppingConfig) -> Result<Self>
    where
        T: TargetModel<Cache = C>,
    {
        check_context(prompt, target.vocab_size())?;
        let mut cache = target.new_cache();
        let outs = target.forward_cached(&mut cache, prompt)?;
        let next = outs
            .last()
            .cloned()
            .ok_or_else(|| Error::Model("prefill returned no outputs".into()))?;
        Ok(Self {
            prompt: prompt.to_vec(),
            committed: Vec::new(),
            cache,
            last_hidden: next.hidden.clone(),
            next: Some(next),
            is_thinking: true,
            smoother: SmootherState::new(cfg.smoothing),
            terminated: false,
            reasoning_len: 0,
            answer_len: 0,
            exit_position: None,
            budget_exit_position: None,
            target_forwards: 1,
            target_positions: prompt.len(),
            draft_forwards: 0,
        })
    }

    pub fn context(&self) -> Vec<TokenId> {
        let mut c = self.prompt.clone();
        c.extend_from_slice(&self.committed);
        c
    }

    /// Number of leading context positions whose target states are cached.
    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }
}

/// Cuts the generated tokens to `keep_len`, appends `replacement` and drops
/// cached states past the kept prefix. The replacement becomes the pending
/// token, so the next forward recomputes exactly the positions from
/// `keep_len` on.
pub fn truncate_state<C: ModelCache>(state: &mut EngineState<C>, keep_len: usize, replacement: TokenId) -> Result<()> {
    if keep_len > state.committed.len() {
        return Err(Error::Usage(format!(
            "cannot keep {keep_len} of {} committed tokens",
            state.committed.len()
        )));
    }
    state.committed.truncate(keep_len);
    state.committed.push(replacement);
    let valid = state.prompt.len() + keep_len;
    if state.cache.len() > valid {
        state.cache.truncate(valid);
    }
    state.next = None;
    Ok(())
}

/// Result of one chain verification.
#[derive(Clone, Debug, PartialEq)]
pub struct Verified {
    pub l_acpt: usize,
    pub t_rec: TokenId,
    /// Target greedy choice at each candidate slot and the bonus slot.
    pub greedy: Vec<TokenId>,
    /// Hidden state at each of those `gamma + 1` predicting positions.
    pub hidden: Vec<HiddenVector>,
}

/// Feeds the uncached committed tokens plus `candidates` through the target
/// in one forward and accepts the longest prefix matching its greedy
/// choices. The cache is left covering the committed context plus every
/// candidate; callers trim it.
pub fn verify_chain<T: TargetModel>(
    state: &mut EngineState<T::Cache>,
    candidates: &[TokenId],
    target: &T,
) -> Result<Verified> {
    if candidates.is_empty() {
        return Err(Error::Usage("verify needs at least one candidate".into()));
    }
    let mut ctx = state.context();
    let uncached = ctx.len() - state.cache.len();
    ctx.extend_from_slice(candidates);
    check_context(&ctx, target.vocab_size())?;
    let outs = target.forward_cached(&mut state.cache, &ctx)?;
    state.target_forwards += 1;
    state.target_positions += outs.len();
    if outs.len() != uncached + candidates.len() {
        return Err(Error::Model("target returned the wrong number of positions".into()));
    }
    // predictors[j] is the output whose logits choose the token at slot j
    let mut predictors: Vec<&PositionOutput> = Vec::with_capacity(candidates.len() + 1);
    match uncached {
        0 => predictors.push(
            state
                .next
                .as_ref()
                .ok_or_else(|| Error::Model("no output for the last committed position".into()))?,
        ),
        u => predictors.push(&outs[u - 1]),
    }
    predictors.extend(outs[uncached..].iter());
    let greedy_choice: Vec<TokenId> = predictors.iter().map(|o| greedy(&o.logits)).collect();
    let l_acpt = candidates
        .iter()
        .zip(&greedy_choice)
        .take_while(|(c, g)| c == g)
        .count();
    Ok(Verified {
        l_acpt,
        t_rec: greedy_choice[l_acpt],
        hidden: predictors.iter().map(|o| o.hidden.clone()).collect(),
        greedy: greedy_choice,
    })
}

/// What one decode step did.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub t_acpt: Vec<TokenId>,
    pub l_acpt: usize,
    /// Token committed after the accepted prefix: the target's recover
    /// token, or `</think>` on an exit.
    pub t_rec: TokenId,
    pub raw: SignalTriple,
    pub smoothed: SignalTriple,
    pub exited: bool,
}

/// One record of the per-generation JSONL log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_acpt: usize,
    pub t_rec: TokenId,
    pub conf_raw: f64,
    pub prog_raw: f64,
    pub rem_raw: f64,
    pub conf_s: f64,
    pub prog_s: f64,
    pub rem_s: f64,
    pub exited: bool,
}

impl StepRecord {
    pub fn new(step: usize, o: &StepOutcome) -> Self {
        Self {
            step,
            l_acpt: o.l_acpt,
            t_rec: o.t_rec,
            conf_raw: o.raw.confidence,
            prog_raw: o.raw.progress,
            rem_raw: o.raw.remaining,
            conf_s: o.smoothed.confidence,
            prog_s: o.smoothed.progress,
            rem_s: o.smoothed.remaining,
            exited: o.exited,
        }
    }
}

/// One draft/verify/exit cycle.
pub fn decode_step<T: TargetModel, D: DraftModel + ?Sized>(
    state: &mut EngineState<T::Cache>,
    draft: &D,
    target: &T,
    cfg: &StoppingConfig,
    markers: &MarkerSet,
    opts: &DecodeOptions,
) -> Result<StepOutcome> {
    if state.terminated {
        return Err(Error::Usage("generation already terminated".into()));
    }
    let ctx = state.context();
    let proposal = draft.propose(&state.last_hidden, &ctx, opts.gamma)?;
    state.draft_forwards += proposal.forwards;
    let raw = proposal.signals.decode();
    let smoothed = state.smoother.update(raw);
    let gate_open = opts.early_exit && state.is_thinking && should_exit(&smoothed, cfg);
    let is_split = |t: TokenId| is_step_split(t, markers, cfg.marker_mode);

    // Already sitting on a boundary: close without spending a target forward.
    if gate_open && state.committed.last().is_some_and(|&t| is_split(t)) {
        let keep = state.committed.len();
        truncate_state(state, keep, THINK_CLOSE)?;
        state.exit_position = Some(keep);
        let outcome = StepOutcome {
            t_acpt: Vec::new(),
            l_acpt: 0,
            t_rec: THINK_CLOSE,
            raw,
            smoothed,
            exited: true,
        };
        commit_walk(state, keep, markers, opts);
        return Ok(outcome);
    }

    let v = verify_chain(state, &proposal.candidates, target)?;
    let before = state.committed.len();
    let split_at = if gate_open {
        proposal.candidates[..v.l_acpt]
            .iter()
            .take_while(|&&t| t != THINK_CLOSE && t != opts.eos)
            .position(|&t| is_split(t))
    } else {
        None
    };
    let (l_acpt, t_rec, exited) = match split_at {
        Some(i) => (i + 1, THINK_CLOSE, true),
        None => (v.l_acpt, v.t_rec, false),
    };
    let t_acpt = proposal.candidates[..l_acpt].to_vec();
    // cached states stay valid through the last accepted candidate
    state.cache.truncate(state.prompt.len() + before + l_acpt);
    state.next = None;
    state.committed.extend_from_slice(&t_acpt);
    state.committed.push(t_rec);
    state.last_hidden = v.hidden[l_acpt].clone();
    if exited {
        state.exit_position = Some(before + l_acpt);
    }
    commit_walk(state, before, markers, opts);
    Ok(StepOutcome {
        t_acpt,
        l_acpt,
        t_rec,
        raw,
        smoothed,
        exited,
    })
}

/// Applies phase changes and limits to the tokens committed from `from`.
fn commit_walk<C: ModelCache>(state: &mut EngineState<C>, from: usize, markers: &MarkerSet, opts: &DecodeOptions) {
    let mut i = from;
    while i < state.committed.len() {
        let t = state.committed[i];
        if t == opts.eos {
            cut_after(state, i);
            state.terminated = true;
            return;
        }
        if state.is_thinking {
            if t == THINK_CLOSE {
                state.is_thinking = false;
            } else {
                state.reasoning_len += 1;
                if markers.is_paragraph_end(t) {
                    state.smoother.on_paragraph_boundary();
                }
                if state.reasoning_len >= opts.max_tokens {
                    let forced = state.committed.get(i + 1) != Some(&THINK_CLOSE);
                    if forced {
                        truncate_state(state, i + 1, THINK_CLOSE).expect("index in range");
                        state.budget_exit_position = Some(i + 1);
                        if state.exit_position.is_some_and(|p| p > i) {
                            state.exit_position = None;
                        }
                    }
                }
            }
        } else {
            state.answer_len += 1;
            if state.answer_len >= opts.max_answer_tokens {
                cut_after(state, i);
                state.terminated = true;
                return;
            }
        }
        i += 1;
    }
}

fn cut_after<C: ModelCache>(state: &mut EngineState<C>, i: usize) {
    state.committed.truncate(i + 1);
    let valid = state.prompt.len() + i + 1;
    if state.cache.len() > valid {
        state.cache.truncate(valid);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub output: Vec<TokenId>,
    pub reasoning_tokens: usize,
    pub answer_tokens: usize,
    /// Output index of the `</think>` forced by the stop rule.
    pub exit_position: Option<usize>,
    pub budget_exit: bool,
    pub steps: Vec<StepRecord>,
    pub accept_lengths: Vec<usize>,
    pub latency_s: f64,
    pub target_forwards: usize,
    pub target_positions: usize,
    pub draft_forwards: usize,
}

impl GenerationResult {
    fn from_state<C: ModelCache>(
        state: EngineState<C>,
        steps: Vec<StepRecord>,
        started: Instant,
        eos: TokenId,
    ) -> Self {
        let output = state.committed;
        let close = output.iter().position(|&t| t == THINK_CLOSE);
        let body_end = if output.last() == Some(&eos) {
            output.len() - 1
        } else {
            output.len()
        };
        let (reasoning_tokens, answer_tokens) = match close {
            Some(c) => (c, body_end.saturating_sub(c + 1)),
            None => (body_end, 0),
        };
        Self {
            accept_lengths: steps.iter().map(|s| s.l_acpt).collect(),
            reasoning_tokens,
            answer_tokens,
            exit_position: state.exit_position,
            budget_exit: state.budget_exit_position.is_some(),
            steps,
            latency_s: started.elapsed().as_secs_f64(),
            target_forwards: state.target_forwards,
            target_positions: state.target_positions,
            draft_forwards: state.draft_forwards,
            output,
        }
    }

    /// Tokens between `</think>` and end of sequence.
    pub fn answer(&self) -> &[TokenId] {
        match self.output.iter().position(|&t| t == THINK_CLOSE) {
            Some(c) => {
                let s = &self.output[c + 1..];
                s.strip_suffix(&[EOS]).unwrap_or(s)
            }
            None => &[],
        }
    }

    pub fn exited_early(&self) -> bool {
        self.exit_position.is_some()
    }

    pub fn accept_len_mean(&self) -> f64 {
        if self.accept_lengths.is_empty() {
            0.0
        } else {
            self.accept_lengths.iter().sum::<usize>() as f64 / self.accept_lengths.len() as f64
        }
    }

    /// True when the forced `</think>` (if any) directly follows a split
    /// token of the given mode.
    pub fn exit_follows_split(&self, markers: &MarkerSet, mode: crate::seq::MarkerMode) -> bool {
        match self.exit_position {
            None => true,
            Some(p) => {
                p > 0 && self.output.get(p) == Some(&THINK_CLOSE) && is_step_split(self.output[p - 1], markers, mode)
            }
        }
    }
}

/// Speculative generation from `prompt` until end of sequence or limits.
pub fn generate<T: TargetModel, D: DraftModel + ?Sized>(
    prompt: &[TokenId],
    draft: &D,
    target: &T,
    cfg: &StoppingConfig,
    markers: &MarkerSet,
    opts: &DecodeOptions,
) -> Result<GenerationResult> {
    opts.validate()?;
    cfg.validate()?;
    if draft.head().dim() != target.hidden_dim() {
        return Err(Error::Config(format!(
            "draft head dimension {} does not match target hidden dimension {}",
            draft.head().dim(),
            target.hidden_dim()
        )));
    }
    let started = Instant::now();
    let mut state = EngineState::start(target, prompt, cfg)?;
    let mut steps = Vec::new();
    while !state.terminated {
        let o = decode_step(&mut state, draft, target, cfg, markers, opts)?;
        steps.push(StepRecord::new(steps.len(), &o));
    }
    Ok(GenerationResult::from_state(state, steps, started, opts.eos))
}

/// Plain greedy decoding with the target alone, one forward per token,
/// under the same limits as [`generate`].
pub fn generate_target_only<T: TargetModel>(
    prompt: &[TokenId],
    target: &T,
    markers: &MarkerSet,
    opts: &DecodeOptions,
) -> Result<GenerationResult> {
    opts.validate()?;
    let started = Instant::now();
    let cfg = StoppingConfig::unreachable();
    let mut state = EngineState::start(target, prompt, &cfg)?;
    let mut logits = state.next.as_ref().map(|o| o.logits.clone()).unwrap_or_default();
    while !state.terminated {
        let before = state.committed.len();
        state.committed.push(greedy(&logits));
        commit_walk(&mut state, before, markers, opts);
        if state.terminated {
            break;
        }
        let ctx = state.context();
        let outs = target.forward_cached(&mut state.cache, &ctx)?;
        state.target_forwards += 1;
        state.target_positions += outs.len();
        let last = outs
            .last()
            .ok_or_else(|| Error::Model("target returned no outputs".into()))?;
        logits = last.logits.clone();
        state.last_hidden = last.hidden.clone();
    }
    state.next = None;
    Ok(GenerationResult::from_state(state, Vec::new(), started, opts.eos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exit::{SmoothingMethod, Thresholds};
    use crate::model::{DraftHead, ScriptedDraft, Signal, TableEntry, TableModel};
    use crate::seq::tokens;

    const OPEN: u32 = crate::seq::THINK_OPEN.0;
    const CLOSE: u32 = THINK_CLOSE.0;
    const END: u32 = EOS.0;
    const PARAGRAPH: u32 = crate::seq::PARAGRAPH.0;

    const A: u32 = 20;
    const B: u32 = 21;
    const C: u32 = 22;
    const X: u32 = 23;

    fn scripted(prompt: &[u32], cont: &[u32]) -> TableModel {
        let mut t = TableModel::new(32, 3, None, EOS).unwrap();
        let mut seq = tokens(prompt);
        seq.extend(tokens(cont));
        t.insert_sequence(&seq, prompt.len() - 1, |_, next| TableEntry::new(next))
            .unwrap();
        t
    }

    fn opts(gamma: usize) -> DecodeOptions {
        DecodeOptions {
            gamma,
            max_tokens: 100,
            max_answer_tokens: 100,
            eos: EOS,
            early_exit: true,
        }
    }

    /// Head whose confidence logit is `bias * h[0]`; with the table's
    /// default hidden states in [-1, 1] this never reaches 0.9 unless `bias`
    /// is huge and `h[0]` positive.
    fn always_confident_head() -> DraftHead {
        let mut head = DraftHead::zeros(32, 3);
        head.w_conf = vec![0.0; 3];
        head
    }

    fn conf_cfg(threshold: f64) -> StoppingConfig {
        StoppingConfig {
            thresholds: Thresholds {
                confidence: threshold,
                progress: 0.0,
                remaining: f64::INFINITY,
            },
            enabled: vec![Signal::Confidence],
            smoothing: SmoothingMethod::None,
            marker_mode: Default::default(),
        }
    }

    #[test]
    fn verify_examples() {
        let target = scripted(&[OPEN], &[A, B, C, B, A, END]);
        let cfg = StoppingConfig::unreachable();
        let mut s = EngineState::start(&target, &tokens(&[OPEN]), &cfg).unwrap();
        let v = verify_chain(&mut s, &tokens(&[A, B, X]), &target).unwrap();
        assert_eq!((v.l_acpt, v.t_rec), (2, TokenId(C)));

        let mut s = EngineState::start(&target, &tokens(&[OPEN]), &cfg).unwrap();
        let v = verify_chain(&mut s, &tokens(&[A, B, C]), &target).unwrap();
        assert_eq!((v.l_acpt, v.t_rec), (3, TokenId(B)));

        let mut s = EngineState::start(&target, &tokens(&[OPEN]), &cfg).unwrap();
        let v = verify_chain(&mut s, &tokens(&[X, A]), &target).unwrap();
        assert_eq!((v.l_acpt, v.t_rec), (0, TokenId(A)));
        assert!(verify_chain(&mut s, &[], &target).is_err());
    }

    #[test]
    fn speculative_matches_target_only() {
        let target = scripted(&[OPEN], &[A, B, PARAGRAPH, C, CLOSE, A, A, END]);
        let draft = ScriptedDraft::new(target.perturbed(0.4, 3), DraftHead::zeros(32, 3));
        let m = MarkerSet::toy();
        let base = generate_target_only(&tokens(&[OPEN]), &target, &m, &opts(1)).unwrap();
        assert_eq!(base.output, tokens(&[A, B, PARAGRAPH, C, CLOSE, A, A, END]));
        assert_eq!(base.reasoning_tokens, 4);
        assert_eq!(base.answer_tokens, 2);
        for gamma in 1..6 {
            let r = generate(
                &tokens(&[OPEN]),
                &draft,
                &target,
                &StoppingConfig::unreachable(),
                &m,
                &opts(gamma),
            )
            .unwrap();
            assert_eq!(r.output, base.output, "gamma {gamma}");
            // each step commits its accepted tokens plus one
            let total: usize = r.accept_lengths.iter().map(|l| l + 1).sum();
            assert!(total >= r.output.len());
            assert_eq!(r.target_forwards, r.steps.len() + 1);
        }
    }

    #[test]
    fn exit_truncates_after_the_split() {
        // accepted [w, SPLIT, y] with the gate open: y is discarded
        let cont = [A, PARAGRAPH, B, C, CLOSE, X, END];
        let mut target = scripted(&[OPEN], &cont);
        let mut seq = tokens(&[OPEN, A, PARAGRAPH, CLOSE]);
        seq.extend(tokens(&[X, END]));
        target
            .insert_sequence(&seq, 3, |_, next| TableEntry::new(next))
            .unwrap();
        let draft = ScriptedDraft::new(target.clone(), always_confident_head());
        let m = MarkerSet::toy();
        // sigmoid(0) = 0.5 > 0.4 always
        let r = generate(&tokens(&[OPEN]), &draft, &target, &conf_cfg(0.4), &m, &opts(3)).unwrap();
        assert_eq!(r.output, tokens(&[A, PARAGRAPH, CLOSE, X, END]));
        assert_eq!(r.exit_position, Some(2));
        assert!(r.steps[0].exited);
        assert_eq!(r.steps[0].l_acpt, 2);
        assert!(r.exit_follows_split(&m, Default::default()));
        assert_eq!(r.answer(), &tokens(&[X])[..]);
    }

    #[test]
    fn no_exit_without_an_accepted_split() {
        let cont = [A, B, C, CLOSE, X, END];
        let target = scripted(&[OPEN], &cont);
        let draft = ScriptedDraft::new(target.clone(), always_confident_head());
        let r = generate(
            &tokens(&[OPEN]),
            &draft,
            &target,
            &conf_cfg(0.4),
            &MarkerSet::toy(),
            &opts(2),
        )
        .unwrap();
        assert_eq!(r.output, tokens(&cont));
        assert_eq!(r.exit_position, None);
    }

    #[test]
    fn gate_closes_after_think_close() {
        // paragraph breaks inside the answer never trigger an exit
        let cont = [A, CLOSE, B, PARAGRAPH, C, END];
        let target = scripted(&[OPEN], &cont);
        let draft = ScriptedDraft::new(target.clone(), always_confident_head());
        let r = generate(
            &tokens(&[OPEN]),
            &draft,
            &target,
            &conf_cfg(0.4),
            &MarkerSet::toy(),
            &opts(4),
        )
        .unwrap();
        assert_eq!(r.output, tokens(&cont));
        assert_eq!(r.output.iter().filter(|&&t| t == THINK_CLOSE).count(), 1);
    }

    #[test]
    fn budget_of_one() {
        let target = scripted(&[OPEN], &[A, B, C, CLOSE, X, END]);
        let draft = ScriptedDraft::new(target.clone(), DraftHead::zeros(32, 3));
        let mut o = opts(3);
        o.max_tokens = 1;
        let r = generate(
            &tokens(&[OPEN]),
            &draft,
            &target,
            &StoppingConfig::unreachable(),
            &MarkerSet::toy(),
            &o,
        )
        .unwrap();
        assert!(r.budget_exit);
        assert_eq!(r.reasoning_tokens, 1);
        assert_eq!(r.output[..2], tokens(&[A, CLOSE])[..]);
        assert_eq!(r.exit_position, None);
        let base = generate_target_only(&tokens(&[OPEN]), &target, &MarkerSet::toy(), &o).unwrap();
        assert_eq!(base.output, r.output);
    }

    #[test]
    fn truncate_state_examples() {
        let target = scripted(&[OPEN], &[A, B, C, END]);
        let cfg = StoppingConfig::unreachable();
        let mut s = EngineState::start(&target, &tokens(&[OPEN]), &cfg).unwrap();
        s.committed = tokens(&[A, B]);
        truncate_state(&mut s, 2, TokenId(X)).unwrap();
        assert_eq!(s.committed, tokens(&[A, B, X]));
        truncate_state(&mut s, 0, TokenId(C)).unwrap();
        assert_eq!(s.committed, tokens(&[C]));
        assert!(truncate_state(&mut s, 5, TokenId(C)).is_err());
    }

    #[test]
    fn truncation_recomputes_only_the_dropped_positions() {
        let target = scripted(&[OPEN], &[A, B, C, A, B, END]);
        let cfg = StoppingConfig::unreachable();
        let mut s = EngineState::start(&target, &tokens(&[OPEN]), &cfg).unwrap();
        verify_chain(&mut s, &tokens(&[A, B, C, A]), &target).unwrap();
        s.committed = tokens(&[A, B, C, A]);
        assert_eq!(s.cache_len(), 5);
        truncate_state(&mut s, 2, TokenId(X)).unwrap();
        assert_eq!(s.cache_len(), 3);
        let before = s.target_positions;
        verify_chain(&mut s, &tokens(&[A]), &target).unwrap();
        // the replacement at index 3 plus one candidate
        assert_eq!(s.target_positions - before, 2);
    }

    #[test]
    fn terminated_session_rejects_steps() {
        let target = scripted(&[OPEN], &[END]);
        let draft = ScriptedDraft::new(target.clone(), DraftHead::zeros(32, 3));
        let cfg = StoppingConfig::unreachable();
        let mut s = EngineState::start(&target, &tokens(&[OPEN]), &cfg).unwrap();
        let m = MarkerSet::toy();
        decode_step(&mut s, &draft, &target, &cfg, &m, &opts(2)).unwrap();
        assert!(s.terminated);
        assert!(matches!(
            decode_step(&mut s, &draft, &target, &cfg, &m, &opts(2)),
            Err(Error::Usage(_))
        ));
    }
}
