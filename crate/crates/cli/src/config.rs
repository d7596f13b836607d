//! Run configuration, read from TOML.
//!
//! ```toml
//! seed = 0
//! gamma = 4
//! max_tokens = 2048
//! max_answer_tokens = 64
//! out = "out"
//!
//! [models]            # optional; the synthetic suite is used without them
//! target = "target.ckpt.json"
//! draft = "draft.ckpt.json"
//! dataset = "traces.jsonl"
//!
//! [stopping.smoothing]
//! kind = "ewma"
//! alpha = 0.1
//!
//! [stopping.thresholds]
//! confidence = 0.8
//! progress = 0.3
//! remaining = 200
//!
//! [stopping.signals]
//! enabled = ["confidence", "progress", "remaining"]
//!
//! [stopping.markers]
//! mode = "paragraph"
//!
//! [suite]             # synthetic verbose arithmetic tasks
//! tasks = 50
//! paragraph_len = 240
//!
//! [train]
//! epochs = 200
//! lr = 0.01
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use specexit_core::engine::DecodeOptions;
use specexit_core::exit::{StoppingConfig, StoppingFile};
use specexit_core::suite::SuiteConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Fixes every stochastic choice: suite generation, initialization,
    /// shuffling.
    pub seed: u64,
    pub gamma: usize,
    pub max_tokens: usize,
    pub max_answer_tokens: usize,
    pub out: PathBuf,
    pub models: ModelPaths,
    pub stopping: StoppingFile,
    pub suite: SuiteConfig,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            gamma: 4,
            max_tokens: 4096,
            max_answer_tokens: 64,
            out: PathBuf::from("out"),
            models: ModelPaths::default(),
            stopping: StoppingFile::default(),
            suite: SuiteConfig::default(),
            train: TrainSection::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelPaths {
    /// Target checkpoint (tiny transformer).
    pub target: Option<PathBuf>,
    /// Draft checkpoint (MTP head with signal rows).
    pub draft: Option<PathBuf>,
    /// Trace JSONL supplying prompts and reference answers.
    pub dataset: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of examples held out for the reported losses.
    pub holdout: f64,
    pub mtp_depth: usize,
    pub init_std: f64,
    /// Epochs of language-model training for a tiny transformer target;
    /// zero keeps the configured target.
    pub tiny_epochs: usize,
    pub tiny_lr: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-2,
            batch_size: 32,
            holdout: 0.1,
            mtp_depth: 1,
            init_std: 0.1,
            tiny_epochs: 0,
            tiny_lr: 3e-3,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub gamma: Option<usize>,
    pub max_tokens: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }

    /// Loads `path` if given, otherwise the defaults, then applies overrides
    /// and validates.
    pub fn resolve(path: Option<&Path>, o: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = o.seed {
            cfg.seed = s;
        }
        if let Some(g) = o.gamma {
            cfg.gamma = g;
        }
        if let Some(m) = o.max_tokens {
            cfg.max_tokens = m;
        }
        if let Some(out) = &o.out {
            cfg.out = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.decode_options(true).validate()?;
        self.stopping()?;
        self.suite_config().validate()?;
        for p in [&self.models.target, &self.models.draft, &self.models.dataset]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                bail!("configured path {} does not exist", p.display());
            }
        }
        if self.models.target.is_some() && self.models.draft.is_none() {
            bail!("a target checkpoint needs a draft checkpoint");
        }
        if self.models.target.is_some() && self.models.dataset.is_none() {
            bail!("a target checkpoint needs a dataset of prompts");
        }
        if !(0.0..1.0).contains(&self.train.holdout) {
            bail!("train.holdout must lie in [0, 1)");
        }
        if self.train.mtp_depth == 0 {
            bail!("train.mtp_depth must be at least 1");
        }
        Ok(())
    }

    pub fn stopping(&self) -> Result<StoppingConfig> {
        Ok(StoppingConfig::try_from(&self.stopping)?)
    }

    pub fn suite_config(&self) -> SuiteConfig {
        SuiteConfig {
            seed: self.seed,
            ..self.suite
        }
    }

    pub fn decode_options(&self, early_exit: bool) -> DecodeOptions {
        DecodeOptions {
            gamma: self.gamma,
            max_tokens: self.max_tokens,
            max_answer_tokens: self.max_answer_tokens,
            early_exit,
            ..DecodeOptions::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_match_the_combined_preset() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.stopping().unwrap(), StoppingConfig::spec_exit_star());
    }

    #[test]
    fn partial_file_and_overrides() {
        let cfg: RunConfig = toml::from_str(
            r#"
            gamma = 2
            [stopping.smoothing]
            kind = "sliding_window"
            window = 10
            [suite]
            tasks = 3
            "#,
        )
        .unwrap();
        assert_eq!(cfg.gamma, 2);
        assert_eq!(cfg.suite.tasks, 3);
        assert_eq!(cfg.suite.paragraph_len, SuiteConfig::default().paragraph_len);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, toml::to_string(&cfg).unwrap()).unwrap();
        let o = Overrides {
            seed: Some(9),
            gamma: Some(5),
            ..Overrides::default()
        };
        let back = RunConfig::resolve(Some(&path), &o).unwrap();
        assert_eq!((back.seed, back.gamma), (9, 5));
        assert_eq!(back.suite_config().seed, 9);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
        let cfg = RunConfig {
            gamma: 0,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.models.target = Some("/definitely/not/here".into());
        assert!(cfg.validate().is_err());
    }
}
