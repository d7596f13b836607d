//! Signal smoothing and the threshold-gated stop decision.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Signal, SignalTriple};
use crate::seq::MarkerMode;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SmoothingMethod {
    None,
    Ewma { alpha: f64 },
    SlidingWindow { window: usize },
    Momentum { window: usize },
    ParagraphMean,
}

impl Default for SmoothingMethod {
    fn default() -> Self {
        SmoothingMethod::Ewma { alpha: 0.1 }
    }
}

impl SmoothingMethod {
    /// The five rows of the smoothing ablation, with N = 10 and alpha = 0.1.
    pub fn ablation_rows() -> [SmoothingMethod; 5] {
        [
            SmoothingMethod::None,
            SmoothingMethod::Momentum { window: 10 },
            SmoothingMethod::SlidingWindow { window: 10 },
            SmoothingMethod::ParagraphMean,
            SmoothingMethod::Ewma { alpha: 0.1 },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SmoothingMethod::Ewma { alpha } if !(alpha > 0.0 && alpha <= 1.0) => {
                Err(Error::Config(format!("ewma alpha {alpha} outside (0, 1]")))
            }
            SmoothingMethod::SlidingWindow { window } if window < 1 => {
                Err(Error::Config("sliding window needs N >= 1".into()))
            }
            SmoothingMethod::Momentum { window } if window < 2 => Err(Error::Config("momentum needs N >= 2".into())),
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            SmoothingMethod::None => "none".into(),
            SmoothingMethod::Ewma { alpha } => format!("ewma({alpha})"),
            SmoothingMethod::SlidingWindow { window } => format!("sliding_window({window})"),
            SmoothingMethod::Momentum { window } => format!("momentum({window})"),
            SmoothingMethod::ParagraphMean => "paragraph_mean".into(),
        }
    }

    fn history_len(&self) -> usize {
        match *self {
            SmoothingMethod::SlidingWindow { window } | SmoothingMethod::Momentum { window } => window,
            _ => 0,
        }
    }
}

/// Smoother for a single scalar stream.
#[derive(Clone, Debug)]
pub struct ScalarSmoother {
    method: SmoothingMethod,
    history: VecDeque<f64>,
    value: Option<f64>,
    para_sum: f64,
    para_count: usize,
}

impl ScalarSmoother {
    pub fn new(method: SmoothingMethod) -> Self {
        Self {
            method,
            history: VecDeque::with_capacity(method.history_len()),
            value: None,
            para_sum: 0.0,
            para_count: 0,
        }
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }

    pub fn update(&mut self, s: f64) -> f64 {
        let x = match self.method {
            SmoothingMethod::None => s,
            SmoothingMethod::Ewma { alpha } => match self.value {
                None => s,
                Some(prev) => alpha * s + (1.0 - alpha) * prev,
            },
            SmoothingMethod::SlidingWindow { window } => {
                self.push_history(s, window);
                self.history.iter().sum::<f64>() / self.history.len() as f64
            }
            SmoothingMethod::Momentum { window } => {
                self.push_history(s, window);
                let n = self.history.len();
                if n < 2 {
                    s
                } else {
                    let last = self.history[n - 1];
                    last + (last - self.history[0]) / (n - 1) as f64
                }
            }
            SmoothingMethod::ParagraphMean => {
                self.para_sum += s;
                self.para_count += 1;
                self.para_sum / self.para_count as f64
            }
        };
        self.value = Some(x);
        x
    }

    fn push_history(&mut self, s: f64, window: usize) {
        if self.history.len() == window {
            self.history.pop_front();
        }
        self.history.push_back(s);
    }

    pub fn on_paragraph_boundary(&mut self) {
        self.para_sum = 0.0;
        self.para_count = 0;
    }

    pub fn paragraph_count(&self) -> usize {
        self.para_count
    }
}

/// Per-session smoothing state for the three signals.
#[derive(Clone, Debug)]
pub struct SmootherState {
    method: SmoothingMethod,
    signals: [ScalarSmoother; 3],
}

impl SmootherState {
    pub fn new(method: SmoothingMethod) -> Self {
        Self {
            method,
            signals: std::array::from_fn(|_| ScalarSmoother::new(method)),
        }
    }

    pub fn method(&self) -> SmoothingMethod {
        self.method
    }

    pub fn update(&mut self, s: SignalTriple) -> SignalTriple {
        let raw = s.as_array();
        SignalTriple::from_array(std::array::from_fn(|i| self.signals[i].update(raw[i])))
    }

    pub fn current(&self) -> Option<SignalTriple> {
        let v = [
            self.signals[0].value()?,
            self.signals[1].value()?,
            self.signals[2].value()?,
        ];
        Some(SignalTriple::from_array(v))
    }

    pub fn on_paragraph_boundary(&mut self) {
        self.signals.iter_mut().for_each(ScalarSmoother::on_paragraph_boundary);
    }
}

pub fn smoother_update(state: &mut SmootherState, s: SignalTriple) -> SignalTriple {
    state.update(s)
}

pub fn on_paragraph_boundary(state: &mut SmootherState) {
    state.on_paragraph_boundary();
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Exit requires confidence strictly above this.
    pub confidence: f64,
    /// Exit requires progress strictly above this.
    pub progress: f64,
    /// Exit requires remaining tokens strictly below this.
    pub remaining: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoppingConfig {
    pub thresholds: Thresholds,
    pub enabled: Vec<Signal>,
    pub smoothing: SmoothingMethod,
    pub marker_mode: MarkerMode,
}

impl StoppingConfig {
    /// Combined gate: confidence > 0.8, progress > 0.3, remaining < 200,
    /// EWMA with alpha 0.1, paragraph delimiters.
    pub fn spec_exit_star() -> Self {
        Self {
            thresholds: Thresholds {
                confidence: 0.8,
                progress: 0.3,
                remaining: 200.0,
            },
            enabled: Signal::ALL.to_vec(),
            smoothing: SmoothingMethod::default(),
            marker_mode: MarkerMode::Paragraph,
        }
    }

    fn single(signal: Signal, thresholds: Thresholds) -> Self {
        Self {
            thresholds,
            enabled: vec![signal],
            ..Self::spec_exit_star()
        }
    }

    /// Confidence alone, above 0.9.
    pub fn confidence_only() -> Self {
        Self::single(
            Signal::Confidence,
            Thresholds {
                confidence: 0.9,
                ..Self::spec_exit_star().thresholds
            },
        )
    }

    /// Progress alone, above 0.8.
    pub fn progress_only() -> Self {
        Self::single(
            Signal::Progress,
            Thresholds {
                progress: 0.8,
                ..Self::spec_exit_star().thresholds
            },
        )
    }

    /// Remaining length alone, below 100 tokens.
    pub fn remaining_only() -> Self {
        Self::single(
            Signal::Remaining,
            Thresholds {
                remaining: 100.0,
                ..Self::spec_exit_star().thresholds
            },
        )
    }

    /// A gate that can never open: confidence alone above 1.0.
    pub fn unreachable() -> Self {
        Self::single(
            Signal::Confidence,
            Thresholds {
                confidence: 1.0,
                ..Self::spec_exit_star().thresholds
            },
        )
    }

    pub fn with_smoothing(mut self, smoothing: SmoothingMethod) -> Self {
        self.smoothing = smoothing;
        self
    }

    pub fn with_marker_mode(mut self, mode: MarkerMode) -> Self {
        self.marker_mode = mode;
        self
    }

    pub fn is_enabled(&self, s: Signal) -> bool {
        self.enabled.contains(&s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled.is_empty() {
            return Err(Error::Config("at least one signal must be enabled".into()));
        }
        let t = &self.thresholds;
        if !(0.0..=1.0).contains(&t.confidence) || !(0.0..=1.0).contains(&t.progress) {
            return Err(Error::Config(
                "confidence/progress thresholds must lie in [0, 1]".into(),
            ));
        }
        if t.remaining.is_nan() || t.remaining < 0.0 {
            return Err(Error::Config("remaining threshold must be non-negative".into()));
        }
        self.smoothing.validate()
    }
}

/// True iff every enabled condition holds for the smoothed signals.
pub fn should_exit(x: &SignalTriple, cfg: &StoppingConfig) -> bool {
    if !x.is_finite() {
        return false;
    }
    let t = &cfg.thresholds;
    cfg.enabled.iter().all(|s| match s {
        Signal::Confidence => x.confidence > t.confidence,
        Signal::Progress => x.progress > t.progress,
        Signal::Remaining => x.remaining < t.remaining,
    })
}

/// On-disk form of [`StoppingConfig`], using the dotted key names
/// `smoothing.kind`, `smoothing.alpha`, `smoothing.window`,
/// `thresholds.confidence`, `thresholds.progress`, `thresholds.remaining`,
/// `signals.enabled` and `markers.mode`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoppingFile {
    pub smoothing: SmoothingSection,
    pub thresholds: ThresholdSection,
    pub signals: SignalsSection,
    pub markers: MarkersSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingSection {
    pub kind: String,
    pub alpha: Option<f64>,
    pub window: Option<usize>,
}

impl Default for SmoothingSection {
    fn default() -> Self {
        Self {
            kind: "ewma".into(),
            alpha: Some(0.1),
            window: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdSection {
    pub confidence: f64,
    pub progress: f64,
    pub remaining: f64,
}

impl Default for ThresholdSection {
    fn default() -> Self {
        let t = StoppingConfig::spec_exit_star().thresholds;
        Self {
            confidence: t.confidence,
            progress: t.progress,
            remaining: t.remaining,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalsSection {
    pub enabled: Vec<String>,
}

impl Default for SignalsSection {
    fn default() -> Self {
        Self {
            enabled: Signal::ALL.iter().map(|s| s.name().to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarkersSection {
    pub mode: String,
}

impl Default for MarkersSection {
    fn default() -> Self {
        Self {
            mode: MarkerMode::Paragraph.name().into(),
        }
    }
}

impl TryFrom<&StoppingFile> for StoppingConfig {
    type Error = Error;

    fn try_from(f: &StoppingFile) -> Result<Self> {
        let s = &f.smoothing;
        let need_window = || {
            s.window
                .ok_or_else(|| Error::Config(format!("smoothing.window is required for `{}`", s.kind)))
        };
        let smoothing = match s.kind.as_str() {
            "none" => SmoothingMethod::None,
            "ewma" => SmoothingMethod::Ewma {
                alpha: s.alpha.unwrap_or(0.1),
            },
            "sliding_window" => SmoothingMethod::SlidingWindow { window: need_window()? },
            "momentum" => SmoothingMethod::Momentum { window: need_window()? },
            "paragraph_mean" => SmoothingMethod::ParagraphMean,
            other => return Err(Error::Config(format!("unknown smoothing.kind `{other}`"))),
        };
        let mut enabled = Vec::new();
        for name in &f.signals.enabled {
            let sig: Signal = name.parse()?;
            if !enabled.contains(&sig) {
                enabled.push(sig);
            }
        }
        let cfg = StoppingConfig {
            thresholds: Thresholds {
                confidence: f.thresholds.confidence,
                progress: f.thresholds.progress,
                remaining: f.thresholds.remaining,
            },
            enabled,
            smoothing,
            marker_mode: f.markers.mode.parse()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<&StoppingConfig> for StoppingFile {
    fn from(c: &StoppingConfig) -> Self {
        let (kind, alpha, window) = match c.smoothing {
            SmoothingMethod::None => ("none", None, None),
            SmoothingMethod::Ewma { alpha } => ("ewma", Some(alpha), None),
            SmoothingMethod::SlidingWindow { window } => ("sliding_window", None, Some(window)),
            SmoothingMethod::Momentum { window } => ("momentum", None, Some(window)),
            SmoothingMethod::ParagraphMean => ("paragraph_mean", None, None),
        };
        StoppingFile {
            smoothing: SmoothingSection {
                kind: kind.into(),
                alpha,
                window,
            },
            thresholds: ThresholdSection {
                confidence: c.thresholds.confidence,
                progress: c.thresholds.progress,
                remaining: c.thresholds.remaining,
            },
            signals: SignalsSection {
                enabled: c.enabled.iter().map(|s| s.name().to_string()).collect(),
            },
            markers: MarkersSection {
                mode: c.marker_mode.name().into(),
            },
        }
    }
}
