//! JSON checkpoints of named real arrays.
//!
//! ```json
//! {"format": "specexit-checkpoint", "version": 1, "kind": "mtp_draft",
//!  "meta": {...},
//!  "tensors": [{"name": "w_tok", "shape": [V, D], "data": [...]}, ...]}
//! ```
//!
//! `data` is row-major and its length equals the product of `shape`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{DraftHead, MtpDraft, TinyConfig, TinyTransformer};

pub const FORMAT: &str = "specexit-checkpoint";
pub const VERSION: u32 = 1;

pub const KIND_TINY: &str = "tiny_transformer";
pub const KIND_MTP: &str = "mtp_draft";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }

    fn matrix(&self) -> Result<Matrix> {
        match self.shape.as_slice() {
            [r, c] => Matrix::from_vec(*r, *c, self.data.clone())
                .ok_or_else(|| Error::Config(format!("tensor `{}` data/shape mismatch", self.name))),
            _ => Err(Error::Config(format!("tensor `{}` is not a matrix", self.name))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta: serde_json::Value, tensors: Vec<NamedTensor>) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            kind: kind.into(),
            meta,
            tensors,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        for t in &self.tensors {
            if t.data.len() != t.shape.iter().product::<usize>() {
                return Err(Error::Config(format!("tensor `{}` data/shape mismatch", t.name)));
            }
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no tensor `{name}`")))
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        self.validate()?;
        if self.kind != kind {
            return Err(Error::Config(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        ck.validate()?;
        Ok(ck)
    }

    pub fn from_tiny(model: &TinyTransformer) -> Self {
        let tensors = model
            .tensors()
            .into_iter()
            .map(|(n, s, d)| NamedTensor::new(n, s.to_vec(), d.to_vec()))
            .collect();
        Self::new(
            KIND_TINY,
            serde_json::to_value(model.config()).expect("config serializes"),
            tensors,
        )
    }

    pub fn to_tiny(&self) -> Result<TinyTransformer> {
        self.expect_kind(KIND_TINY)?;
        let cfg: TinyConfig = serde_json::from_value(self.meta.clone())?;
        TinyTransformer::from_tensors(
            cfg,
            self.tensors
                .iter()
                .map(|t| (t.name.as_str(), t.shape.as_slice(), t.data.as_slice())),
        )
    }

    pub fn from_mtp(draft: &MtpDraft) -> Self {
        let h = &draft.head;
        let d = h.dim();
        let mut tensors = vec![
            NamedTensor::new("w_tok", vec![h.vocab_size(), d], h.w_tok.data().to_vec()),
            NamedTensor::new("w_conf", vec![1, d], h.w_conf.clone()),
            NamedTensor::new("w_prog", vec![1, d], h.w_prog.clone()),
            NamedTensor::new("w_rem", vec![1, d], h.w_rem.clone()),
        ];
        for (i, m) in draft.deeper.iter().enumerate() {
            tensors.push(NamedTensor::new(
                format!("w_tok_depth{}", i + 2),
                vec![m.rows(), m.cols()],
                m.data().to_vec(),
            ));
        }
        Self::new(
            KIND_MTP,
            serde_json::json!({ "depth": draft.depth(), "vocab": h.vocab_size(), "dim": d }),
            tensors,
        )
    }

    pub fn to_mtp(&self) -> Result<MtpDraft> {
        self.expect_kind(KIND_MTP)?;
        let row = |name: &str| -> Result<Vec<f64>> { Ok(self.tensor(name)?.data.clone()) };
        let head = DraftHead::from_parts(
            self.tensor("w_tok")?.matrix()?,
            row("w_conf")?,
            row("w_prog")?,
            row("w_rem")?,
        )?;
        let depth = self.meta.get("depth").and_then(|v| v.as_u64()).unwrap_or(1) as usize;
        let deeper = (2..=depth)
            .map(|k| self.tensor(&format!("w_tok_depth{k}"))?.matrix())
            .collect::<Result<Vec<_>>>()?;
        let draft = MtpDraft { head, deeper };
        draft.validate()?;
        Ok(draft)
    }
}
