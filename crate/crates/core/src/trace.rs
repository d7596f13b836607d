//! Training-data construction: locate the shortest reasoning prefix that
//! still yields the original answer, then label every retained token with
//! confidence, progress and remaining-length targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::log_softmax;
use crate::model::{greedy, ModelCache, TargetModel};
use crate::seq::{MarkerSet, ReasoningTrace, TokenId};

const MIN_PROB: f64 = 1e-12;

/// Splits a response at its think markers into `(reasoning, answer)`.
/// Tokens before `<think>` are ignored.
pub fn extract_think_span(full_output: &[TokenId], markers: &MarkerSet) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
    let find_all = |m: TokenId| -> Vec<usize> {
        full_output
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == m)
            .map(|(i, _)| i)
            .collect()
    };
    let opens = find_all(markers.think_open);
    let closes = find_all(markers.think_close);
    match (opens.as_slice(), closes.as_slice()) {
        ([o], [c]) if o < c => Ok((full_output[o + 1..*c].to_vec(), full_output[c + 1..].to_vec())),
        ([_], [_]) => Err(Error::MalformedTrace("</think> precedes <think>".into())),
        _ => Err(Error::MalformedTrace(format!(
            "expected one <think> and one </think>, found {} and {}",
            opens.len(),
            closes.len()
        ))),
    }
}

/// Runs the generating model with reasoning cut short and reports the answer
/// it then produces.
pub trait AnswerOracle {
    fn check(&self, prompt: &[TokenId], reasoning_prefix: &[TokenId], markers: &MarkerSet) -> Result<Vec<TokenId>>;
}

/// Greedy decoding after `prompt <think> prefix </think>` until the
/// end-of-sequence token or `max_answer` tokens.
pub struct GreedyAnswerOracle<'a, T> {
    pub model: &'a T,
    pub eos: TokenId,
    pub max_answer: usize,
}

impl<'a, T: TargetModel> GreedyAnswerOracle<'a, T> {
    pub fn new(model: &'a T, eos: TokenId, max_answer: usize) -> Self {
        Self { model, eos, max_answer }
    }
}

impl<T: TargetModel> AnswerOracle for GreedyAnswerOracle<'_, T> {
    fn check(&self, prompt: &[TokenId], reasoning_prefix: &[TokenId], markers: &MarkerSet) -> Result<Vec<TokenId>> {
        let mut ctx = Vec::with_capacity(prompt.len() + reasoning_prefix.len() + 2 + self.max_answer);
        ctx.extend_from_slice(prompt);
        ctx.push(markers.think_open);
        ctx.extend_from_slice(reasoning_prefix);
        ctx.push(markers.think_close);
        let mut cache = self.model.new_cache();
        let mut answer = Vec::new();
        while answer.len() < self.max_answer {
            let outs = self.model.forward_cached(&mut cache, &ctx)?;
            let next = greedy(&outs.last().expect("forward over a non-empty suffix").logits);
            if next == self.eos {
                break;
            }
            answer.push(next);
            ctx.push(next);
        }
        debug_assert!(cache.len() <= ctx.len());
        Ok(answer)
    }
}

/// Smallest paragraph index whose prefix reproduces `reference_answer`,
/// scanning from the first paragraph; the last index when none does.
pub fn minimal_prefix_search<O: AnswerOracle + ?Sized>(
    trace: &ReasoningTrace,
    oracle: &O,
    reference_answer: &[TokenId],
    markers: &MarkerSet,
) -> Result<usize> {
    let n = trace.num_paragraphs();
    if n == 0 {
        return Err(Error::MalformedTrace("trace has no paragraphs".into()));
    }
    for k in 0..n {
        let answer = oracle.check(&trace.prompt, trace.prefix_through(k), markers)?;
        if answer == reference_answer {
            return Ok(k);
        }
    }
    Ok(n - 1)
}

/// Per-token regression targets over reasoning positions `0..=E`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SignalLabels {
    pub conf: Vec<f64>,
    pub prog: Vec<f64>,
    pub remaining: Vec<u32>,
}

impl SignalLabels {
    pub fn len(&self) -> usize {
        self.conf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conf.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.conf.len();
        if self.prog.len() != n || self.remaining.len() != n || n == 0 {
            return Err(Error::MalformedTrace("label arrays differ in length".into()));
        }
        let ok = self.conf.iter().all(|c| *c > 0.0 && *c <= 1.0)
            && self.prog.iter().all(|p| (0.0..=1.0).contains(p))
            && self.prog.windows(2).all(|w| w[0] <= w[1])
            && self.remaining.windows(2).all(|w| w[0] == w[1] + 1)
            && self.remaining[n - 1] == 0
            && self.prog[n - 1] == 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::MalformedTrace("labels violate their range or ordering".into()))
        }
    }
}

/// Labels for reasoning positions `0..=exit_pos`.
///
/// Confidence is the running geometric mean of the realized-token
/// probabilities, progress rises linearly from 0 to 1 at the exit position,
/// and remaining counts the tokens left until it. Zero probabilities are
/// clamped to 1e-12; the number clamped is returned alongside.
pub fn annotate_signals(exit_pos: usize, token_probs: &[f64]) -> Result<(SignalLabels, usize)> {
    if exit_pos >= token_probs.len() {
        return Err(Error::Usage(format!(
            "exit position {exit_pos} outside {} token probabilities",
            token_probs.len()
        )));
    }
    let mut clamped = 0;
    let mut log_sum = 0.0;
    let mut labels = SignalLabels::default();
    for (i, &p) in token_probs[..=exit_pos].iter().enumerate() {
        if p.is_nan() || p > 1.0 {
            return Err(Error::Usage(format!("token probability {p} above 1")));
        }
        let p = if p < MIN_PROB {
            clamped += 1;
            MIN_PROB
        } else {
            p
        };
        log_sum += p.ln();
        labels.conf.push((log_sum / (i + 1) as f64).exp());
        labels
            .prog
            .push(if exit_pos == 0 { 1.0 } else { i as f64 / exit_pos as f64 });
        labels.remaining.push((exit_pos - i) as u32);
    }
    if clamped > 0 {
        tracing::warn!(clamped, "clamped zero token probabilities before taking logs");
    }
    Ok((labels, clamped))
}

/// Probability the model assigns to each realized reasoning token of
/// `prompt <think> reasoning`.
pub fn realized_token_probs<T: TargetModel>(
    model: &T,
    prompt: &[TokenId],
    reasoning: &[TokenId],
    markers: &MarkerSet,
) -> Result<Vec<f64>> {
    let mut ctx = prompt.to_vec();
    ctx.push(markers.think_open);
    ctx.extend_from_slice(reasoning);
    let outs = model.forward(&ctx)?;
    let base = prompt.len();
    Ok(reasoning
        .iter()
        .enumerate()
        .map(|(i, t)| log_softmax(&outs[base + i].logits)[t.index()].exp())
        .collect())
}

/// A trace cut at its minimal exit paragraph, with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedTrace {
    pub id: String,
    pub trace: ReasoningTrace,
    pub exit_paragraph: usize,
    pub original_paragraphs: usize,
    pub original_reasoning_len: usize,
    pub labels: SignalLabels,
    pub reference_answer: Vec<TokenId>,
}

impl AnnotatedTrace {
    /// Fraction of the original paragraphs cut away.
    pub fn pruned_fraction(&self) -> f64 {
        1.0 - (self.exit_paragraph + 1) as f64 / self.original_paragraphs as f64
    }

    /// Reasoning position of the retained exit token.
    pub fn exit_position(&self) -> usize {
        self.trace.reasoning.len() - 1
    }
}

/// Full data-construction pipeline for one trace.
pub fn annotate_trace<O: AnswerOracle + ?Sized>(
    id: impl Into<String>,
    trace: &ReasoningTrace,
    oracle: &O,
    token_probs: &[f64],
    markers: &MarkerSet,
) -> Result<AnnotatedTrace> {
    trace.validate(markers)?;
    if token_probs.len() != trace.reasoning.len() {
        return Err(Error::Usage(
            "one token probability per reasoning token is required".into(),
        ));
    }
    let k = minimal_prefix_search(trace, oracle, &trace.answer, markers)?;
    let exit_pos = trace.paragraph_ends[k];
    let (labels, _) = annotate_signals(exit_pos, token_probs)?;
    Ok(AnnotatedTrace {
        id: id.into(),
        trace: trace.truncated(k),
        exit_paragraph: k,
        original_paragraphs: trace.num_paragraphs(),
        original_reasoning_len: trace.reasoning.len(),
        labels,
        reference_answer: trace.answer.clone(),
    })
}

/// One line of the trace JSONL format. Raw traces omit `exit_paragraph`
/// and `labels`; annotated traces carry the retained reasoning only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    pub prompt: Vec<TokenId>,
    pub reasoning: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    pub paragraph_ends: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_paragraph: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<SignalLabels>,
}

impl TraceRecord {
    pub fn raw(id: impl Into<String>, trace: &ReasoningTrace) -> Self {
        Self {
            id: id.into(),
            prompt: trace.prompt.clone(),
            reasoning: trace.reasoning.clone(),
            answer: trace.answer.clone(),
            paragraph_ends: trace.paragraph_ends.clone(),
            exit_paragraph: None,
            labels: None,
        }
    }

    pub fn trace(&self) -> ReasoningTrace {
        ReasoningTrace {
            prompt: self.prompt.clone(),
            reasoning: self.reasoning.clone(),
            answer: self.answer.clone(),
            paragraph_ends: self.paragraph_ends.clone(),
        }
    }
}

impl From<&AnnotatedTrace> for TraceRecord {
    fn from(a: &AnnotatedTrace) -> Self {
        Self {
            exit_paragraph: Some(a.exit_paragraph),
            labels: Some(a.labels.clone()),
            ..Self::raw(a.id.clone(), &a.trace)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq::{tokens, PARAGRAPH, THINK_CLOSE, THINK_OPEN};
    use approx::assert_abs_diff_eq;
    use std::cell::Cell;

    #[test]
    fn extracts_reasoning_and_answer() {
        let m = MarkerSet::toy();
        let out = [THINK_OPEN, TokenId(20), TokenId(21), THINK_CLOSE, TokenId(30)];
        assert_eq!(
            extract_think_span(&out, &m).unwrap(),
            (tokens(&[20, 21]), tokens(&[30]))
        );
        let out = [THINK_OPEN, THINK_CLOSE, TokenId(30)];
        assert_eq!(extract_think_span(&out, &m).unwrap(), (vec![], tokens(&[30])));
        assert!(matches!(
            extract_think_span(&tokens(&[20, 21]), &m),
            Err(Error::MalformedTrace(_))
        ));
        let twice = [THINK_OPEN, THINK_OPEN, THINK_CLOSE];
        assert!(extract_think_span(&twice, &m).is_err());
        let reversed = [THINK_CLOSE, TokenId(20), THINK_OPEN];
        assert!(extract_think_span(&reversed, &m).is_err());
    }

    /// Answers correctly once the prefix holds `needed` paragraphs.
    struct CountingOracle {
        needed: usize,
        calls: Cell<usize>,
    }

    impl AnswerOracle for CountingOracle {
        fn check(&self, _p: &[TokenId], prefix: &[TokenId], _m: &MarkerSet) -> Result<Vec<TokenId>> {
            self.calls.set(self.calls.get() + 1);
            let paras = prefix.iter().filter(|t| **t == PARAGRAPH).count();
            Ok(if paras >= self.needed {
                tokens(&[9])
            } else {
                tokens(&[8])
            })
        }
    }

    fn four_paragraphs() -> ReasoningTrace {
        let p = 2;
        ReasoningTrace::new(
            tokens(&[30]),
            tokens(&[20, 21, p, 22, p, 23, 24, p, 25, p]),
            tokens(&[9]),
            &MarkerSet::toy(),
        )
    }

    #[test]
    fn minimal_prefix_examples() {
        let m = MarkerSet::toy();
        let t = four_paragraphs();
        for (needed, want) in [(3, 2), (4, 3), (1, 0), (9, 3)] {
            let o = CountingOracle {
                needed,
                calls: Cell::new(0),
            };
            assert_eq!(minimal_prefix_search(&t, &o, &tokens(&[9]), &m).unwrap(), want);
        }
        let o = CountingOracle {
            needed: 1,
            calls: Cell::new(0),
        };
        minimal_prefix_search(&t, &o, &tokens(&[9]), &m).unwrap();
        assert_eq!(o.calls.get(), 1, "scan stops at the first success");
    }

    #[test]
    fn label_examples() {
        let (l, _) = annotate_signals(3, &[1.0; 4]).unwrap();
        assert_eq!(l.conf, vec![1.0; 4]);
        let (l, _) = annotate_signals(1, &[0.25, 1.0]).unwrap();
        assert_abs_diff_eq!(l.conf[1], 0.5, epsilon = 1e-15);
        let (l, _) = annotate_signals(10, &[0.5; 11]).unwrap();
        assert_abs_diff_eq!(l.prog[5], 0.5);
        assert_eq!(l.remaining[5], 5);
        assert_eq!(l.prog[0], 0.0);
        assert_eq!(l.prog[10], 1.0);
        l.validate().unwrap();
        let (l, _) = annotate_signals(0, &[0.3]).unwrap();
        assert_eq!(l.prog, vec![1.0]);
        assert_eq!(l.remaining, vec![0]);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let (l, clamped) = annotate_signals(1, &[0.0, 1.0]).unwrap();
        assert_eq!(clamped, 1);
        assert_abs_diff_eq!(l.conf[1], 1e-6, epsilon = 1e-15);
        assert!(annotate_signals(2, &[0.5, 0.5]).is_err());
        assert!(annotate_signals(0, &[1.5]).is_err());
    }

    #[test]
    fn annotation_pipeline() {
        let m = MarkerSet::toy();
        let t = four_paragraphs();
        let o = CountingOracle {
            needed: 2,
            calls: Cell::new(0),
        };
        let a = annotate_trace("t0", &t, &o, &[0.9; 10], &m).unwrap();
        assert_eq!(a.exit_paragraph, 1);
        assert_eq!(a.trace.reasoning, tokens(&[20, 21, 2, 22, 2]));
        assert_eq!(a.labels.len(), 5);
        assert_abs_diff_eq!(a.pruned_fraction(), 0.5);
        let rec = TraceRecord::from(&a);
        let line = serde_json::to_string(&rec).unwrap();
        assert!(line.contains("\"exit_paragraph\":1"));
        let back: TraceRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rec);
        assert_eq!(back.trace().paragraph_ends, a.trace.paragraph_ends);
    }

    #[test]
    fn raw_record_omits_annotations() {
        let rec = TraceRecord::raw("x", &four_paragraphs());
        let line = serde_json::to_string(&rec).unwrap();
        assert!(!line.contains("labels"));
        let back: TraceRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back.labels, None);
    }
}
