//! Joint training of token classification and the three signal regressions.
//!
//! Confidence and progress use squared error after a sigmoid link, remaining
//! length uses squared error in `ln(1 + r)` space. The three regression
//! losses are reweighted every step by their share of the summed gradient
//! norms; the norms are taken over the signal-head rows, and the weights are
//! treated as constants when forming the update.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, log_softmax, norm, sigmoid, softmax, Matrix};
use crate::model::{DraftHead, HiddenVector, Signal};
use crate::seq::TokenId;

/// One supervised position: hidden state, gold token, and signal targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub hidden: HiddenVector,
    pub gold: TokenId,
    pub conf: f64,
    pub prog: f64,
    /// Remaining length in tokens.
    pub rem: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub id: usize,
    pub examples: Vec<TrainExample>,
}

impl TrainBatch {
    pub fn new(id: usize, examples: Vec<TrainExample>) -> Self {
        Self { id, examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn validate(&self, head: &DraftHead) -> Result<()> {
        if self.examples.is_empty() {
            return Err(Error::Usage("empty training batch".into()));
        }
        for (i, e) in self.examples.iter().enumerate() {
            if e.hidden.dim() != head.dim() {
                return Err(Error::Config(format!("example {i}: hidden dimension mismatch")));
            }
            if e.gold.index() >= head.vocab_size() {
                return Err(Error::Usage(format!("example {i}: gold token outside vocabulary")));
            }
            if !(0.0..=1.0).contains(&e.conf) || !(0.0..=1.0).contains(&e.prog) || e.rem.is_nan() || e.rem < 0.0 {
                return Err(Error::Usage(format!("example {i}: signal label out of range")));
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy of `gold` under `softmax(logits)`.
pub fn loss_cls(logits: &[Vec<f64>], gold: &[TokenId]) -> f64 {
    assert_eq!(logits.len(), gold.len());
    let sum: f64 = logits.iter().zip(gold).map(|(l, g)| -log_softmax(l)[g.index()]).sum();
    sum / gold.len() as f64
}

/// Mean of `(sigmoid(raw) - gold)^2`.
pub fn loss_conf(raw: &[f64], gold: &[f64]) -> f64 {
    assert_eq!(raw.len(), gold.len());
    raw.iter()
        .zip(gold)
        .map(|(r, g)| (sigmoid(*r) - g).powi(2))
        .sum::<f64>()
        / raw.len() as f64
}

/// Same form as [`loss_conf`].
pub fn loss_prog(raw: &[f64], gold: &[f64]) -> f64 {
    loss_conf(raw, gold)
}

/// Mean of `(raw - ln(1 + r))^2`.
pub fn loss_rem(raw: &[f64], gold: &[f64]) -> f64 {
    assert_eq!(raw.len(), gold.len());
    raw.iter().zip(gold).map(|(p, r)| (p - r.ln_1p()).powi(2)).sum::<f64>() / raw.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub conf: f64,
    pub prog: f64,
    pub rem: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn regression(&self, s: Signal) -> f64 {
        match s {
            Signal::Confidence => self.conf,
            Signal::Progress => self.prog,
            Signal::Remaining => self.rem,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.cls, self.conf, self.prog, self.rem, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightState {
    pub conf: f64,
    pub prog: f64,
    pub rem: f64,
}

impl WeightState {
    pub fn uniform() -> Self {
        Self {
            conf: 1.0 / 3.0,
            prog: 1.0 / 3.0,
            rem: 1.0 / 3.0,
        }
    }

    pub fn sum(&self) -> f64 {
        self.conf + self.prog + self.rem
    }

    pub fn get(&self, s: Signal) -> f64 {
        match s {
            Signal::Confidence => self.conf,
            Signal::Progress => self.prog,
            Signal::Remaining => self.rem,
        }
    }
}

/// Normalized gradient norms `[conf, prog, rem]`. All-zero norms give
/// uniform weights and `degenerate = true`.
pub fn dynamic_weights(norms: [f64; 3]) -> (WeightState, bool) {
    let total: f64 = norms.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return (WeightState::uniform(), true);
    }
    (
        WeightState {
            conf: norms[0] / total,
            prog: norms[1] / total,
            rem: norms[2] / total,
        },
        false,
    )
}

/// The loss terms a gradient can be taken of.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Cls,
    Conf,
    Prog,
    Rem,
}

impl Task {
    pub const REGRESSION: [Task; 3] = [Task::Conf, Task::Prog, Task::Rem];

    fn signal(self) -> Option<Signal> {
        match self {
            Task::Cls => None,
            Task::Conf => Some(Signal::Confidence),
            Task::Prog => Some(Signal::Progress),
            Task::Rem => Some(Signal::Remaining),
        }
    }
}

/// Unweighted losses `(cls, conf, prog, rem)` of a head on a batch.
pub fn head_losses(head: &DraftHead, batch: &TrainBatch) -> Result<[f64; 4]> {
    batch.validate(head)?;
    let n = batch.len() as f64;
    let mut out = [0.0; 4];
    for e in &batch.examples {
        let (logits, pred) = head.project(&e.hidden)?;
        out[0] -= log_softmax(&logits)[e.gold.index()];
        out[1] += (sigmoid(pred.conf_raw) - e.conf).powi(2);
        out[2] += (sigmoid(pred.prog_raw) - e.prog).powi(2);
        out[3] += (pred.rem_raw - e.rem.ln_1p()).powi(2);
    }
    Ok(out.map(|v| v / n))
}

/// Gradient of one loss term with respect to every head parameter, laid out
/// as a head. Only the block the term reads from is nonzero.
pub fn task_gradient(head: &DraftHead, batch: &TrainBatch, task: Task) -> Result<DraftHead> {
    batch.validate(head)?;
    let n = batch.len() as f64;
    let mut g = DraftHead::zeros(head.vocab_size(), head.dim());
    match task.signal() {
        None => {
            for e in &batch.examples {
                let mut p = softmax(&head.w_tok.matvec(e.hidden.as_slice()));
                p[e.gold.index()] -= 1.0;
                g.w_tok.add_outer(1.0 / n, &p, e.hidden.as_slice());
            }
        }
        Some(sig) => {
            let w = head.signal_row(sig);
            let row = g.signal_row_mut(sig);
            for e in &batch.examples {
                let h = e.hidden.as_slice();
                let z = dot(w, h);
                let coef = match sig {
                    Signal::Confidence | Signal::Progress => {
                        let target = if sig == Signal::Confidence { e.conf } else { e.prog };
                        let s = sigmoid(z);
                        2.0 * (s - target) * s * (1.0 - s)
                    }
                    Signal::Remaining => 2.0 * (z - e.rem.ln_1p()),
                };
                axpy(coef / n, h, row);
            }
        }
    }
    Ok(g)
}

fn head_norm(g: &DraftHead) -> f64 {
    (g.w_tok.norm_sq() + [&g.w_conf, &g.w_prog, &g.w_rem].iter().map(|r| dot(r, r)).sum::<f64>()).sqrt()
}

/// Plain stochastic gradient descent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Self { lr: 1e-2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Losses before the update, with `total` formed from `weights`.
    pub breakdown: LossBreakdown,
    pub weights: WeightState,
    pub degenerate: bool,
}

/// One update of `head` on `L_cls + Σ λ_j L_j`, with the λ computed from
/// this batch's regression-gradient norms.
pub fn train_step(batch: &TrainBatch, head: &mut DraftHead, opt: &Sgd) -> Result<StepReport> {
    step_impl(batch, head, opt, true)
}

/// Like [`train_step`] but only the token block is updated.
pub fn train_step_tokens_only(batch: &TrainBatch, head: &mut DraftHead, opt: &Sgd) -> Result<StepReport> {
    step_impl(batch, head, opt, false)
}

fn step_impl(batch: &TrainBatch, head: &mut DraftHead, opt: &Sgd, signals: bool) -> Result<StepReport> {
    let [cls, conf, prog, rem] = head_losses(head, batch)?;
    let grads: Vec<DraftHead> = [Task::Cls, Task::Conf, Task::Prog, Task::Rem]
        .iter()
        .map(|&t| task_gradient(head, batch, t))
        .collect::<Result<_>>()?;
    let norms = [head_norm(&grads[1]), head_norm(&grads[2]), head_norm(&grads[3])];
    let (weights, degenerate) = dynamic_weights(norms);
    if degenerate {
        tracing::debug!(
            batch = batch.id,
            "all regression gradients vanished; using uniform weights"
        );
    }
    let total = cls + weights.conf * conf + weights.prog * prog + weights.rem * rem;
    let breakdown = LossBreakdown {
        cls,
        conf,
        prog,
        rem,
        total,
    };
    let grad_finite = grads.iter().all(|g| head_norm(g).is_finite());
    if !breakdown.is_finite() || !grad_finite {
        return Err(Error::NonFinite {
            context: format!("training batch {}", batch.id),
        });
    }
    let lr = opt.lr;
    for (w, g) in head.w_tok.data_mut().iter_mut().zip(grads[0].w_tok.data()) {
        *w -= lr * g;
    }
    if !signals {
        return Ok(StepReport {
            breakdown,
            weights,
            degenerate,
        });
    }
    axpy(-lr * weights.conf, &grads[1].w_conf, &mut head.w_conf);
    axpy(-lr * weights.prog, &grads[2].w_prog, &mut head.w_prog);
    axpy(-lr * weights.rem, &grads[3].w_rem, &mut head.w_rem);
    Ok(StepReport {
        breakdown,
        weights,
        degenerate,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Largest magnitude of a regression gradient on a row its loss does
    /// not read, over both routes.
    pub max_cross_task: f64,
}

/// Central finite differences of each regression loss against its analytic
/// gradient, over every signal-head weight.
pub fn gradient_check(head: &DraftHead, batch: &TrainBatch, eps: f64) -> Result<GradCheck> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Usage(format!(
            "finite-difference step {eps} outside [1e-6, 1e-3]"
        )));
    }
    let mut report = GradCheck::default();
    let loss_index = |t: Task| match t {
        Task::Conf => 1,
        Task::Prog => 2,
        Task::Rem => 3,
        Task::Cls => 0,
    };
    for task in Task::REGRESSION {
        let analytic = task_gradient(head, batch, task)?;
        for sig in Signal::ALL {
            for k in 0..head.dim() {
                let mut plus = head.clone();
                plus.signal_row_mut(sig)[k] += eps;
                let mut minus = head.clone();
                minus.signal_row_mut(sig)[k] -= eps;
                let lp = head_losses(&plus, batch)?[loss_index(task)];
                let lm = head_losses(&minus, batch)?[loss_index(task)];
                let numeric = (lp - lm) / (2.0 * eps);
                let a = analytic.signal_row(sig)[k];
                let abs = (a - numeric).abs();
                report.max_abs_err = report.max_abs_err.max(abs);
                let denom = a.abs().max(numeric.abs());
                if denom > 1e-10 {
                    report.max_rel_err = report.max_rel_err.max(abs / denom);
                }
                if Some(sig) != task.signal() {
                    report.max_cross_task = report.max_cross_task.max(a.abs()).max(numeric.abs());
                }
            }
        }
        // the token block is never read by a regression loss
        report.max_cross_task = report.max_cross_task.max(norm(analytic.w_tok.data()));
    }
    Ok(report)
}

/// One row of the training CSV log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss_cls: f64,
    pub loss_conf: f64,
    pub loss_prog: f64,
    pub loss_rem: f64,
    pub lambda_c: f64,
    pub lambda_p: f64,
    pub lambda_r: f64,
    pub total: f64,
}

impl TrainLogRow {
    pub fn new(step: usize, r: &StepReport) -> Self {
        Self {
            step,
            loss_cls: r.breakdown.cls,
            loss_conf: r.breakdown.conf,
            loss_prog: r.breakdown.prog,
            loss_rem: r.breakdown.rem,
            lambda_c: r.weights.conf,
            lambda_p: r.weights.prog,
            lambda_r: r.weights.rem,
            total: r.breakdown.total,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// When false only the token block is trained.
    pub signals: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-2,
            seed: 0,
            signals: true,
        }
    }
}

/// Mini-batch training over shuffled examples; one log row per step.
pub fn fit_head(head: &mut DraftHead, data: &[TrainExample], cfg: &FitConfig) -> Result<Vec<TrainLogRow>> {
    if data.is_empty() {
        return Err(Error::Usage("no training examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let opt = Sgd { lr: cfg.lr };
    let mut log = Vec::new();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch = TrainBatch::new(step, chunk.iter().map(|&i| data[i].clone()).collect());
            let report = step_impl(&batch, head, &opt, cfg.signals)?;
            log.push(TrainLogRow::new(step, &report));
            step += 1;
        }
    }
    Ok(log)
}

/// Mean losses over a whole dataset, with uniform λ in `total`.
pub fn evaluate(head: &DraftHead, data: &[TrainExample]) -> Result<LossBreakdown> {
    let [cls, conf, prog, rem] = head_losses(head, &TrainBatch::new(0, data.to_vec()))?;
    let w = WeightState::uniform();
    Ok(LossBreakdown {
        cls,
        conf,
        prog,
        rem,
        total: cls + w.conf * conf + w.prog * prog + w.rem * rem,
    })
}

/// Trains a token-only projection (a deeper MTP head) with cross-entropy.
pub fn fit_projection(w: &mut Matrix, data: &[(HiddenVector, TokenId)], cfg: &FitConfig) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Usage("no training examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let n = chunk.len() as f64;
            let mut grad = Matrix::zeros(w.rows(), w.cols());
            let mut loss = 0.0;
            for &i in chunk {
                let (h, gold) = &data[i];
                let mut p = softmax(&w.matvec(h.as_slice()));
                loss -= p[gold.index()].max(1e-300).ln();
                p[gold.index()] -= 1.0;
                grad.add_outer(1.0 / n, &p, h.as_slice());
            }
            loss /= n;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: "projection training".into(),
                });
            }
            for (wi, gi) in w.data_mut().iter_mut().zip(grad.data()) {
                *wi -= cfg.lr * gi;
            }
            losses.push(loss);
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn cls_examples() {
        let mut l = vec![-50.0; 4];
        l[2] = 50.0;
        assert!(loss_cls(&[l.clone()], &[TokenId(2)]) < 1e-12);
        assert_abs_diff_eq!(loss_cls(&[vec![0.0; 4]], &[TokenId(1)]), 4f64.ln(), epsilon = 1e-12);
        assert!(loss_cls(&[l], &[TokenId(0)]) > 4f64.ln());
    }

    #[test]
    fn regression_examples() {
        assert_abs_diff_eq!(
            loss_conf(&[crate::linalg::logit(0.3, 1e-12)], &[0.3]),
            0.0,
            epsilon = 1e-24
        );
        assert_abs_diff_eq!(loss_conf(&[0.0], &[1.0]), 0.25);
        // sigmoid(0) = 0.5 against targets 0.4 and 0.6
        assert_abs_diff_eq!(loss_prog(&[0.0, 0.0], &[0.4, 0.6]), 0.01, epsilon = 1e-15);
        assert_eq!(loss_rem(&[7f64.ln_1p()], &[7.0]), 0.0);
        assert_eq!(loss_rem(&[0.0], &[0.0]), 0.0);
        assert_abs_diff_eq!(loss_rem(&[0.0], &[99.0]), 100f64.ln().powi(2), epsilon = 1e-12);
        assert_abs_diff_eq!(loss_rem(&[0.0], &[99.0]), 21.2076, epsilon = 1e-4);
    }

    #[test]
    fn weight_examples() {
        let (w, d) = dynamic_weights([2.0, 2.0, 2.0]);
        assert!(!d);
        assert_abs_diff_eq!(w.conf, 1.0 / 3.0);
        let (w, _) = dynamic_weights([1.0, 2.0, 1.0]);
        assert_eq!((w.conf, w.prog, w.rem), (0.25, 0.5, 0.25));
        let (w, _) = dynamic_weights([0.0, 0.0, 5.0]);
        assert_eq!((w.conf, w.prog, w.rem), (0.0, 0.0, 1.0));
        let (w, d) = dynamic_weights([0.0; 3]);
        assert!(d);
        assert_eq!(w, WeightState::uniform());
    }

    fn one_dim_head(w: f64) -> DraftHead {
        let mut h = DraftHead::zeros(2, 1);
        h.w_conf = vec![w];
        h
    }

    #[test]
    fn closed_form_conf_update() {
        let (w0, x, c, lr) = (0.3, 1.5, 0.9, 0.1);
        let mut head = one_dim_head(w0);
        // uniform token logits so L_cls is constant and its gradient only touches w_tok
        let batch = TrainBatch::new(
            0,
            vec![TrainExample {
                hidden: HiddenVector(vec![x]),
                gold: TokenId(0),
                conf: c,
                prog: 0.5,
                rem: 0.0,
            }],
        );
        let report = train_step(&batch, &mut head, &Sgd { lr }).unwrap();
        // prog and rem rows are zero with targets sigmoid(0)=0.5 and ln(1+0)=0: their gradients vanish
        assert_eq!(report.weights.conf, 1.0);
        let s = 1.0 / (1.0 + (-w0 * x).exp());
        let grad = 2.0 * (s - c) * s * (1.0 - s) * x;
        assert_abs_diff_eq!(head.w_conf[0], w0 - lr * grad, epsilon = 1e-12);
        assert_eq!(head.w_prog, vec![0.0]);
        assert_eq!(head.w_rem, vec![0.0]);
    }

    #[test]
    fn zero_loss_batch_leaves_parameters_unchanged() {
        let mut head = DraftHead::zeros(2, 1);
        head.w_tok.set(0, 0, 200.0);
        head.w_tok.set(1, 0, -200.0);
        let before = head.clone();
        let batch = TrainBatch::new(
            0,
            vec![TrainExample {
                hidden: HiddenVector(vec![1.0]),
                gold: TokenId(0),
                conf: 0.5,
                prog: 0.5,
                rem: 0.0,
            }],
        );
        let r = train_step(&batch, &mut head, &Sgd { lr: 0.5 }).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.breakdown.total, 0.0);
        assert_eq!(head, before);
    }

    #[test]
    fn zero_learning_rate_repeats_the_breakdown() {
        let mut head = DraftHead::zeros(3, 2);
        head.w_rem = vec![0.4, -0.2];
        let batch = TrainBatch::new(
            1,
            vec![TrainExample {
                hidden: HiddenVector(vec![1.0, 2.0]),
                gold: TokenId(1),
                conf: 0.2,
                prog: 0.7,
                rem: 12.0,
            }],
        );
        let a = train_step(&batch, &mut head, &Sgd { lr: 0.0 }).unwrap();
        let b = train_step(&batch, &mut head, &Sgd { lr: 0.0 }).unwrap();
        assert_eq!(a, b);
        let w = a.weights;
        let bd = a.breakdown;
        assert_abs_diff_eq!(bd.total, bd.cls + w.conf * bd.conf + w.prog * bd.prog + w.rem * bd.rem);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut head = DraftHead::zeros(2, 1);
        head.w_rem = vec![f64::MAX];
        let batch = TrainBatch::new(
            42,
            vec![TrainExample {
                hidden: HiddenVector(vec![10.0]),
                gold: TokenId(0),
                conf: 0.5,
                prog: 0.5,
                rem: 1.0,
            }],
        );
        let before = head.clone();
        match train_step(&batch, &mut head, &Sgd::default()) {
            Err(Error::NonFinite { context }) => assert!(context.contains("42")),
            other => panic!("expected non-finite error, got {other:?}"),
        }
        assert_eq!(head, before);
    }

    #[test]
    fn invalid_batches_are_rejected() {
        let head = DraftHead::zeros(2, 1);
        assert!(head_losses(&head, &TrainBatch::new(0, vec![])).is_err());
        let bad = TrainBatch::new(
            0,
            vec![TrainExample {
                hidden: HiddenVector(vec![1.0]),
                gold: TokenId(0),
                conf: 1.5,
                prog: 0.5,
                rem: 0.0,
            }],
        );
        assert!(head_losses(&head, &bad).is_err());
        assert!(gradient_check(&head, &bad, 1e-2).is_err());
    }

    proptest! {
        #[test]
        fn weights_sum_to_one_and_are_scale_invariant(
            a in 0.0f64..10.0, b in 0.0f64..10.0, c in 0.0f64..10.0, k in 1e-3f64..1e3,
        ) {
            prop_assume!(a + b + c > 0.0);
            let (w, _) = dynamic_weights([a, b, c]);
            prop_assert!((w.sum() - 1.0).abs() < 1e-9);
            for v in [w.conf, w.prog, w.rem] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let (ws, _) = dynamic_weights([k * a, k * b, k * c]);
            prop_assert!((ws.conf - w.conf).abs() < 1e-12);
            prop_assert!((ws.prog - w.prog).abs() < 1e-12);
            prop_assert!((ws.rem - w.rem).abs() < 1e-12);
        }

        #[test]
        fn losses_are_non_negative(raw in -20.0f64..20.0, c in 0.0f64..1.0, r in 0.0f64..1e4) {
            prop_assert!(loss_conf(&[raw], &[c]) >= 0.0);
            prop_assert!(loss_rem(&[raw], &[r]) >= 0.0);
        }
    }
}
