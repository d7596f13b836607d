//! Token sequences, marker sets and paragraph segmentation.
//!
//! The toy vocabulary reserves the lowest ids for the structural markers so
//! that fixtures and golden files are stable:
//!
//! | id | surface        |
//! |----|----------------|
//! | 0  | `<think>`      |
//! | 1  | `</think>`     |
//! | 2  | `\n\n`         |
//! | 3  | `<eos>`        |
//! | 4  | `Wait`         |
//! | 5  | `But`          |
//! | 6  | `Therefore`    |
//! | 7  | `Alternatively`|

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const THINK_OPEN: TokenId = TokenId(0);
pub const THINK_CLOSE: TokenId = TokenId(1);
pub const PARAGRAPH: TokenId = TokenId(2);
pub const EOS: TokenId = TokenId(3);
pub const WAIT: TokenId = TokenId(4);
pub const BUT: TokenId = TokenId(5);
pub const THEREFORE: TokenId = TokenId(6);
pub const ALTERNATIVELY: TokenId = TokenId(7);

/// Number of ids reserved for markers at the bottom of every toy vocabulary.
pub const RESERVED_IDS: usize = 8;

/// Index into a [`Vocabulary`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Converts raw integers to token ids.
pub fn tokens(ids: &[u32]) -> Vec<TokenId> {
    ids.iter().copied().map(TokenId).collect()
}

/// Display strings for every id in `[0, V)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    surface: Vec<String>,
}

impl Vocabulary {
    pub fn new(surface: Vec<String>) -> Result<Self> {
        if surface.len() < RESERVED_IDS {
            return Err(Error::Config(format!(
                "vocabulary size {} is below the minimum of {RESERVED_IDS}",
                surface.len()
            )));
        }
        Ok(Self { surface })
    }

    /// Toy vocabulary of `size` entries: the reserved markers, the ten
    /// digits, `+`, `=`, and filler words `w0`, `w1`, ... for the rest.
    pub fn toy(size: usize) -> Result<Self> {
        let mut surface: Vec<String> = [
            "<think>",
            "</think>",
            "\n\n",
            "<eos>",
            "Wait",
            "But",
            "Therefore",
            "Alternatively",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for d in 0..10 {
            surface.push(d.to_string());
        }
        surface.push("+".into());
        surface.push("=".into());
        let mut w = 0;
        while surface.len() < size {
            surface.push(format!("w{w}"));
            w += 1;
        }
        surface.truncate(size.max(RESERVED_IDS));
        Self::new(surface)
    }

    pub fn size(&self) -> usize {
        self.surface.len()
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.surface.get(id.index()).map(String::as_str)
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id.index() < self.surface.len()
    }

    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&t| self.surface(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Which step-split set gates an early exit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerMode {
    #[default]
    Paragraph,
    Discourse,
    Contrastive,
}

impl MarkerMode {
    pub const ALL: [MarkerMode; 3] = [MarkerMode::Paragraph, MarkerMode::Discourse, MarkerMode::Contrastive];

    pub fn name(self) -> &'static str {
        match self {
            MarkerMode::Paragraph => "paragraph",
            MarkerMode::Discourse => "discourse",
            MarkerMode::Contrastive => "contrastive",
        }
    }
}

impl std::str::FromStr for MarkerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paragraph" => Ok(MarkerMode::Paragraph),
            "discourse" => Ok(MarkerMode::Discourse),
            "contrastive" => Ok(MarkerMode::Contrastive),
            other => Err(Error::Config(format!("unknown marker mode `{other}`"))),
        }
    }
}

/// Reasoning delimiters and the step-split token sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerSet {
    pub think_open: TokenId,
    pub think_close: TokenId,
    pub step_split_paragraph: BTreeSet<TokenId>,
    pub step_split_discourse: BTreeSet<TokenId>,
    pub discourse_contrastive: BTreeSet<TokenId>,
}

impl MarkerSet {
    pub fn new(
        think_open: TokenId,
        think_close: TokenId,
        paragraph: impl IntoIterator<Item = TokenId>,
        discourse: impl IntoIterator<Item = TokenId>,
        contrastive: impl IntoIterator<Item = TokenId>,
    ) -> Result<Self> {
        let set = Self {
            think_open,
            think_close,
            step_split_paragraph: paragraph.into_iter().collect(),
            step_split_discourse: discourse.into_iter().collect(),
            discourse_contrastive: contrastive.into_iter().collect(),
        };
        set.validate()?;
        Ok(set)
    }

    /// Markers of the toy vocabulary: `\n\n` splits paragraphs, the four
    /// discourse words split steps, and `Wait`/`But`/`Alternatively` are
    /// the contrastive subset.
    pub fn toy() -> Self {
        Self::new(
            THINK_OPEN,
            THINK_CLOSE,
            [PARAGRAPH],
            [WAIT, BUT, THEREFORE, ALTERNATIVELY],
            [WAIT, BUT, ALTERNATIVELY],
        )
        .expect("toy marker set is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.think_open == self.think_close {
            return Err(Error::Config("think_open and think_close must differ".into()));
        }
        let delims = [self.think_open, self.think_close];
        for set in [&self.step_split_paragraph, &self.step_split_discourse] {
            if delims.iter().any(|d| set.contains(d)) {
                return Err(Error::Config(
                    "step-split sets must not contain the think markers".into(),
                ));
            }
        }
        if !self.discourse_contrastive.is_subset(&self.step_split_discourse) {
            return Err(Error::Config(
                "contrastive markers must be a subset of the discourse markers".into(),
            ));
        }
        Ok(())
    }

    /// Checks every marker id against a vocabulary size.
    pub fn validate_for(&self, vocab_size: usize) -> Result<()> {
        self.validate()?;
        let all = [self.think_open, self.think_close]
            .into_iter()
            .chain(self.step_split_paragraph.iter().copied())
            .chain(self.step_split_discourse.iter().copied());
        for t in all {
            if t.index() >= vocab_size {
                return Err(Error::Config(format!(
                    "marker {t} outside vocabulary of size {vocab_size}"
                )));
            }
        }
        Ok(())
    }

    pub fn split_set(&self, mode: MarkerMode) -> &BTreeSet<TokenId> {
        match mode {
            MarkerMode::Paragraph => &self.step_split_paragraph,
            MarkerMode::Discourse => &self.step_split_discourse,
            MarkerMode::Contrastive => &self.discourse_contrastive,
        }
    }

    pub fn is_paragraph_end(&self, token: TokenId) -> bool {
        self.step_split_paragraph.contains(&token)
    }
}

/// Membership test of `token` against the step-split set selected by `mode`.
pub fn is_step_split(token: TokenId, markers: &MarkerSet, mode: MarkerMode) -> bool {
    markers.split_set(mode).contains(&token)
}

/// Returns the index of every paragraph delimiter in `reasoning`, plus the
/// final index when the sequence does not end on one.
pub fn segment_paragraphs(reasoning: &[TokenId], markers: &MarkerSet) -> Vec<usize> {
    let mut ends: Vec<usize> = reasoning
        .iter()
        .enumerate()
        .filter(|(_, t)| markers.is_paragraph_end(**t))
        .map(|(i, _)| i)
        .collect();
    if let Some(last) = reasoning.len().checked_sub(1) {
        if ends.last() != Some(&last) {
            ends.push(last);
        }
    }
    ends
}

/// Prompt, reasoning span and answer span of one model response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    /// Tokens preceding `<think>`.
    pub prompt: Vec<TokenId>,
    /// Tokens strictly between `<think>` and `</think>`.
    pub reasoning: Vec<TokenId>,
    /// Tokens after `</think>`, without the end-of-sequence token.
    pub answer: Vec<TokenId>,
    pub paragraph_ends: Vec<usize>,
}

impl ReasoningTrace {
    /// Builds a trace and segments its reasoning into paragraphs.
    pub fn new(prompt: Vec<TokenId>, reasoning: Vec<TokenId>, answer: Vec<TokenId>, markers: &MarkerSet) -> Self {
        let paragraph_ends = segment_paragraphs(&reasoning, markers);
        Self {
            prompt,
            reasoning,
            answer,
            paragraph_ends,
        }
    }

    pub fn num_paragraphs(&self) -> usize {
        self.paragraph_ends.len()
    }

    /// Reasoning tokens up to and including paragraph `k`.
    pub fn prefix_through(&self, k: usize) -> &[TokenId] {
        &self.reasoning[..=self.paragraph_ends[k]]
    }

    /// The trace cut after paragraph `k`.
    pub fn truncated(&self, k: usize) -> Self {
        Self {
            prompt: self.prompt.clone(),
            reasoning: self.prefix_through(k).to_vec(),
            answer: self.answer.clone(),
            paragraph_ends: self.paragraph_ends[..=k].to_vec(),
        }
    }

    pub fn validate(&self, markers: &MarkerSet) -> Result<()> {
        if self.reasoning.is_empty() {
            if self.paragraph_ends.is_empty() {
                return Ok(());
            }
            return Err(Error::MalformedTrace("paragraph_ends given for empty reasoning".into()));
        }
        let last = self.reasoning.len() - 1;
        if self.paragraph_ends.last() != Some(&last) {
            return Err(Error::MalformedTrace(format!("paragraph_ends must end at {last}")));
        }
        if self.paragraph_ends.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::MalformedTrace(
                "paragraph_ends must be strictly increasing".into(),
            ));
        }
        for &e in &self.paragraph_ends {
            if e != last && !markers.is_paragraph_end(self.reasoning[e]) {
                return Err(Error::MalformedTrace(format!("paragraph end {e} is not a delimiter")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: TokenId = TokenId(20);
    const B: TokenId = TokenId(21);
    const C: TokenId = TokenId(22);

    #[test]
    fn segments_on_delimiters() {
        let m = MarkerSet::toy();
        assert_eq!(segment_paragraphs(&[A, B, PARAGRAPH, C, PARAGRAPH], &m), vec![2, 4]);
        assert_eq!(segment_paragraphs(&[A, B, C], &m), vec![2]);
        assert_eq!(segment_paragraphs(&[PARAGRAPH], &m), vec![0]);
        assert_eq!(segment_paragraphs(&[A, PARAGRAPH, C], &m), vec![1, 2]);
        assert!(segment_paragraphs(&[], &m).is_empty());
    }

    #[test]
    fn step_split_modes() {
        let m = MarkerSet::toy();
        assert!(is_step_split(PARAGRAPH, &m, MarkerMode::Paragraph));
        assert!(!is_step_split(WAIT, &m, MarkerMode::Paragraph));
        assert!(is_step_split(WAIT, &m, MarkerMode::Contrastive));
        assert!(is_step_split(THEREFORE, &m, MarkerMode::Discourse));
        assert!(!is_step_split(THEREFORE, &m, MarkerMode::Contrastive));
        assert_eq!(MarkerMode::default(), MarkerMode::Paragraph);
    }

    #[test]
    fn marker_set_validation() {
        assert!(MarkerSet::new(THINK_OPEN, THINK_OPEN, [PARAGRAPH], [], []).is_err());
        assert!(MarkerSet::new(THINK_OPEN, THINK_CLOSE, [THINK_CLOSE], [], []).is_err());
        assert!(MarkerSet::new(THINK_OPEN, THINK_CLOSE, [PARAGRAPH], [WAIT], [BUT]).is_err());
        assert!(MarkerSet::toy().validate_for(8).is_ok());
        assert!(MarkerSet::toy().validate_for(6).is_err());
    }

    #[test]
    fn toy_vocabulary_layout() {
        let v = Vocabulary::toy(32).unwrap();
        assert_eq!(v.size(), 32);
        assert_eq!(v.surface(THINK_CLOSE), Some("</think>"));
        assert_eq!(v.surface(TokenId(8)), Some("0"));
        assert_eq!(v.surface(TokenId(20)), Some("w0"));
        assert!(Vocabulary::new(vec!["a".into()]).is_err());
    }

    #[test]
    fn trace_validation() {
        let m = MarkerSet::toy();
        let t = ReasoningTrace::new(vec![A], vec![A, PARAGRAPH, B, C], vec![C], &m);
        assert_eq!(t.paragraph_ends, vec![1, 3]);
        assert!(t.validate(&m).is_ok());
        assert_eq!(t.truncated(0).reasoning, vec![A, PARAGRAPH]);

        let mut bad = t.clone();
        bad.paragraph_ends = vec![0, 3];
        assert!(bad.validate(&m).is_err());
        bad.paragraph_ends = vec![1];
        assert!(bad.validate(&m).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn paragraphs_partition_the_sequence(ids in prop::collection::vec(0u32..6, 1..60)) {
                let m = MarkerSet::toy();
                let seq = tokens(&ids);
                let ends = segment_paragraphs(&seq, &m);
                prop_assert_eq!(*ends.last().unwrap(), seq.len() - 1);
                prop_assert!(ends.windows(2).all(|w| w[0] < w[1]));
                // spans [prev+1, end] tile [0, len)
                let mut covered = 0;
                let mut start = 0;
                for &e in &ends {
                    covered += e + 1 - start;
                    start = e + 1;
                }
                prop_assert_eq!(covered, seq.len());
                for (i, t) in seq.iter().enumerate() {
                    if m.is_paragraph_end(*t) {
                        prop_assert!(ends.contains(&i));
                    }
                }
            }
        }
    }
}
