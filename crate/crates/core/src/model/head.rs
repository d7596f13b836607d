//! The extended draft projection: vocabulary logits plus three reasoning signals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, sigmoid, Matrix};

/// Activations of one position, dimension `D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HiddenVector(pub Vec<f64>);

impl HiddenVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for HiddenVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Raw head outputs before the link functions: logits for confidence and
/// progress, log-space estimate for remaining length.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SignalPrediction {
    pub conf_raw: f64,
    pub prog_raw: f64,
    pub rem_raw: f64,
}

impl SignalPrediction {
    pub fn decode(&self) -> SignalTriple {
        decode_signals(self)
    }
}

/// Decoded signals: confidence and progress in `[0, 1]`, remaining in tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SignalTriple {
    pub confidence: f64,
    pub progress: f64,
    pub remaining: f64,
}

impl SignalTriple {
    pub fn new(confidence: f64, progress: f64, remaining: f64) -> Self {
        Self {
            confidence,
            progress,
            remaining,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.confidence.is_finite() && self.progress.is_finite() && self.remaining.is_finite()
    }

    pub fn map(self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self::new(f(self.confidence), f(self.progress), f(self.remaining))
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.confidence, self.progress, self.remaining]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

/// `sigmoid` for confidence and progress, `exp(r) - 1` clamped at zero for
/// remaining, mirroring the links used by the regression losses.
pub fn decode_signals(pred: &SignalPrediction) -> SignalTriple {
    let remaining = (pred.rem_raw.exp() - 1.0).max(0.0);
    SignalTriple {
        confidence: sigmoid(pred.conf_raw),
        progress: sigmoid(pred.prog_raw),
        remaining: if remaining.is_finite() { remaining } else { f64::MAX },
    }
}

/// Which output row of the extended projection a signal occupies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    Confidence,
    Progress,
    Remaining,
}

impl Signal {
    pub const ALL: [Signal; 3] = [Signal::Confidence, Signal::Progress, Signal::Remaining];

    pub fn name(self) -> &'static str {
        match self {
            Signal::Confidence => "confidence",
            Signal::Progress => "progress",
            Signal::Remaining => "remaining",
        }
    }
}

impl std::str::FromStr for Signal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "confidence" | "conf" => Ok(Signal::Confidence),
            "progress" | "prog" => Ok(Signal::Progress),
            "remaining" | "rem" | "remain" => Ok(Signal::Remaining),
            other => Err(Error::Config(format!("unknown signal `{other}`"))),
        }
    }
}

/// Linear projection `[W_tok; w_conf; w_prog; w_rem] · h`.
///
/// The three signal rows are separate output coordinates from the vocabulary
/// rows, so their gradients never touch `w_tok` and vice versa.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DraftHead {
    pub w_tok: Matrix,
    pub w_conf: Vec<f64>,
    pub w_prog: Vec<f64>,
    pub w_rem: Vec<f64>,
}

impl DraftHead {
    pub fn zeros(vocab: usize, dim: usize) -> Self {
        Self {
            w_tok: Matrix::zeros(vocab, dim),
            w_conf: vec![0.0; dim],
            w_prog: vec![0.0; dim],
            w_rem: vec![0.0; dim],
        }
    }

    pub fn random<R: Rng + ?Sized>(vocab: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let w_tok = Matrix::random(vocab, dim, std, rng);
        let rows = Matrix::random(3, dim, std, rng);
        Self {
            w_tok,
            w_conf: rows.row(0).to_vec(),
            w_prog: rows.row(1).to_vec(),
            w_rem: rows.row(2).to_vec(),
        }
    }

    pub fn from_parts(w_tok: Matrix, w_conf: Vec<f64>, w_prog: Vec<f64>, w_rem: Vec<f64>) -> Result<Self> {
        let head = Self {
            w_tok,
            w_conf,
            w_prog,
            w_rem,
        };
        head.validate()?;
        Ok(head)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.w_tok.cols();
        for (name, row) in [
            ("w_conf", &self.w_conf),
            ("w_prog", &self.w_prog),
            ("w_rem", &self.w_rem),
        ] {
            if row.len() != d {
                return Err(Error::Config(format!("{name} has length {}, expected {d}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { context: name.into() });
            }
        }
        if !self.w_tok.is_finite() {
            return Err(Error::NonFinite {
                context: "w_tok".into(),
            });
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.w_tok.rows()
    }

    pub fn dim(&self) -> usize {
        self.w_tok.cols()
    }

    pub fn signal_row(&self, s: Signal) -> &[f64] {
        match s {
            Signal::Confidence => &self.w_conf,
            Signal::Progress => &self.w_prog,
            Signal::Remaining => &self.w_rem,
        }
    }

    pub fn signal_row_mut(&mut self, s: Signal) -> &mut Vec<f64> {
        match s {
            Signal::Confidence => &mut self.w_conf,
            Signal::Progress => &mut self.w_prog,
            Signal::Remaining => &mut self.w_rem,
        }
    }

    fn check_dim(&self, h: &HiddenVector) -> Result<()> {
        if h.dim() != self.dim() {
            return Err(Error::Config(format!(
                "hidden dimension {} does not match head dimension {}",
                h.dim(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Full extended projection of one hidden state.
    pub fn project(&self, h: &HiddenVector) -> Result<(Vec<f64>, SignalPrediction)> {
        self.check_dim(h)?;
        let logits = self.w_tok.matvec(h.as_slice());
        Ok((logits, self.signals_unchecked(h.as_slice())))
    }

    /// Only the three signal rows.
    pub fn predict_signals(&self, h: &HiddenVector) -> Result<SignalPrediction> {
        self.check_dim(h)?;
        Ok(self.signals_unchecked(h.as_slice()))
    }

    pub fn token_logits(&self, h: &HiddenVector) -> Result<Vec<f64>> {
        self.check_dim(h)?;
        Ok(self.w_tok.matvec(h.as_slice()))
    }

    fn signals_unchecked(&self, h: &[f64]) -> SignalPrediction {
        SignalPrediction {
            conf_raw: dot(&self.w_conf, h),
            prog_raw: dot(&self.w_prog, h),
            rem_raw: dot(&self.w_rem, h),
        }
    }
}

/// Free-function form of [`DraftHead::project`].
pub fn head_project(head: &DraftHead, h: &HiddenVector) -> Result<(Vec<f64>, SignalPrediction)> {
    head.project(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_hidden_projects_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = DraftHead::random(8, 5, 1.0, &mut rng);
        let (logits, pred) = head.project(&HiddenVector::zeros(5)).unwrap();
        assert!(logits.iter().all(|&l| l == 0.0));
        assert_eq!(pred, SignalPrediction::default());
    }

    #[test]
    fn unit_rows_select_coordinates() {
        let d = 4;
        let e = |k: usize| {
            let mut v = vec![0.0; d];
            v[k] = 1.0;
            v
        };
        let w_tok = Matrix::from_rows(&[e(0), e(1), e(2), e(3)]).unwrap();
        let head = DraftHead::from_parts(w_tok, e(1), e(2), e(3)).unwrap();
        let (logits, pred) = head.project(&HiddenVector(e(2))).unwrap();
        assert_eq!(logits, vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(pred.conf_raw, 0.0);
        assert_eq!(pred.prog_raw, 1.0);
        assert_eq!(pred.rem_raw, 0.0);
    }

    #[test]
    fn projection_matches_brute_force_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let head = DraftHead::random(16, 9, 0.7, &mut rng);
        let h = HiddenVector(Matrix::random(1, 9, 1.0, &mut rng).row(0).to_vec());
        let (logits, pred) = head.project(&h).unwrap();
        for (v, &got) in logits.iter().enumerate() {
            let mut want = 0.0;
            for k in 0..9 {
                want += head.w_tok.get(v, k) * h.0[k];
            }
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
        let manual = |w: &[f64]| (0..9).fold(0.0, |acc, k| acc + w[k] * h.0[k]);
        assert_abs_diff_eq!(pred.conf_raw, manual(&head.w_conf), epsilon = 1e-12);
        assert_abs_diff_eq!(pred.prog_raw, manual(&head.w_prog), epsilon = 1e-12);
        assert_abs_diff_eq!(pred.rem_raw, manual(&head.w_rem), epsilon = 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_a_config_error() {
        let head = DraftHead::zeros(8, 4);
        assert!(matches!(head.project(&HiddenVector::zeros(3)), Err(Error::Config(_))));
        let bad = DraftHead::from_parts(Matrix::zeros(8, 4), vec![0.0; 3], vec![0.0; 4], vec![0.0; 4]);
        assert!(bad.is_err());
    }

    #[test]
    fn decode_examples() {
        let s = decode_signals(&SignalPrediction::default());
        assert_eq!(s, SignalTriple::new(0.5, 0.5, 0.0));
        let s = decode_signals(&SignalPrediction {
            rem_raw: 101f64.ln(),
            ..Default::default()
        });
        assert_abs_diff_eq!(s.remaining, 100.0, epsilon = 1e-9);
        let s = decode_signals(&SignalPrediction {
            conf_raw: 60.0,
            rem_raw: -3.0,
            ..Default::default()
        });
        assert_abs_diff_eq!(s.confidence, 1.0, epsilon = 1e-12);
        assert_eq!(s.remaining, 0.0);
    }

    proptest! {
        #[test]
        fn projection_is_linear(
            a in prop::collection::vec(-3.0f64..3.0, 6),
            b in prop::collection::vec(-3.0f64..3.0, 6),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let head = DraftHead::random(8, 6, 1.0, &mut rng);
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let (la, pa) = head.project(&HiddenVector(a)).unwrap();
            let (lb, pb) = head.project(&HiddenVector(b)).unwrap();
            let (ls, ps) = head.project(&HiddenVector(sum)).unwrap();
            for i in 0..8 {
                prop_assert!((ls[i] - la[i] - lb[i]).abs() < 1e-9);
            }
            prop_assert!((ps.conf_raw - pa.conf_raw - pb.conf_raw).abs() < 1e-9);
            prop_assert!((ps.prog_raw - pa.prog_raw - pb.prog_raw).abs() < 1e-9);
            prop_assert!((ps.rem_raw - pa.rem_raw - pb.rem_raw).abs() < 1e-9);
        }

        #[test]
        fn decode_is_monotone(x in -30.0f64..30.0, dx in 0.0f64..5.0) {
            let lo = decode_signals(&SignalPrediction { conf_raw: x, prog_raw: x, rem_raw: x });
            let hi = decode_signals(&SignalPrediction { conf_raw: x + dx, prog_raw: x + dx, rem_raw: x + dx });
            prop_assert!(hi.confidence >= lo.confidence);
            prop_assert!(hi.progress >= lo.progress);
            prop_assert!(hi.remaining >= lo.remaining);
        }
    }
}
