//! Per-run rows and per-method aggregates.

use serde::{Deserialize, Serialize};
use specexit_core::engine::GenerationResult;

use crate::workload::{BenchTask, Method};

/// One generation of one task with one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub task: String,
    pub method: Method,
    /// Label of the stopping configuration (ablations); empty otherwise.
    pub config: String,
    pub correct: bool,
    pub reasoning_tokens: usize,
    pub answer_tokens: usize,
    pub total_tokens: usize,
    pub latency_s: f64,
    pub accept_len_mean: f64,
    pub exited: bool,
    pub budget_exit: bool,
    pub target_forwards: usize,
    pub draft_forwards: usize,
    /// Error message of a failed run, empty on success.
    pub error: String,
}

impl RunRow {
    pub fn new(task: &BenchTask, method: Method, config: &str, result: &Result<GenerationResult, String>) -> Self {
        match result {
            Ok(r) => Self {
                task: task.id.clone(),
                method,
                config: config.into(),
                correct: r.answer() == task.reference.as_slice(),
                reasoning_tokens: r.reasoning_tokens,
                answer_tokens: r.answer_tokens,
                total_tokens: r.output.len(),
                latency_s: r.latency_s,
                accept_len_mean: r.accept_len_mean(),
                exited: r.exited_early(),
                budget_exit: r.budget_exit,
                target_forwards: r.target_forwards,
                draft_forwards: r.draft_forwards,
                error: String::new(),
            },
            Err(e) => Self {
                task: task.id.clone(),
                method,
                config: config.into(),
                correct: false,
                reasoning_tokens: 0,
                answer_tokens: 0,
                total_tokens: 0,
                latency_s: 0.0,
                accept_len_mean: 0.0,
                exited: false,
                budget_exit: false,
                target_forwards: 0,
                draft_forwards: 0,
                error: e.clone(),
            },
        }
    }

    pub fn failed(&self) -> bool {
        !self.error.is_empty()
    }
}

/// Aggregate over the successful runs of one method. The first seven
/// fields are the report schema; the rest are extras.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub acc: f64,
    /// Mean generated tokens per run.
    pub tok_mean: f64,
    pub lat_mean_s: f64,
    pub accept_len_mean: f64,
    pub exit_rate: f64,
    /// Total target forwards over all runs.
    pub target_forwards: u64,
    #[serde(default)]
    pub reasoning_tok_mean: f64,
    #[serde(default)]
    pub runs: usize,
    #[serde(default)]
    pub failures: usize,
}

impl MethodReport {
    pub fn from_rows<'a>(label: &str, rows: impl IntoIterator<Item = &'a RunRow>) -> Self {
        let rows: Vec<&RunRow> = rows.into_iter().collect();
        let ok: Vec<&&RunRow> = rows.iter().filter(|r| !r.failed()).collect();
        let n = ok.len();
        let mean = |f: &dyn Fn(&RunRow) -> f64| {
            if n == 0 {
                0.0
            } else {
                ok.iter().map(|r| f(r)).sum::<f64>() / n as f64
            }
        };
        Self {
            method: label.into(),
            acc: mean(&|r| f64::from(u8::from(r.correct))),
            tok_mean: mean(&|r| r.total_tokens as f64),
            lat_mean_s: mean(&|r| r.latency_s),
            accept_len_mean: mean(&|r| r.accept_len_mean),
            exit_rate: mean(&|r| f64::from(u8::from(r.exited))),
            target_forwards: ok.iter().map(|r| r.target_forwards as u64).sum(),
            reasoning_tok_mean: mean(&|r| r.reasoning_tokens as f64),
            runs: rows.len(),
            failures: rows.len() - n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(correct: bool, tokens: usize, exited: bool, error: &str) -> RunRow {
        RunRow {
            task: "t".into(),
            method: Method::Specexit,
            config: String::new(),
            correct,
            reasoning_tokens: tokens,
            answer_tokens: 2,
            total_tokens: tokens + 3,
            latency_s: 0.5,
            accept_len_mean: 2.0,
            exited,
            budget_exit: false,
            target_forwards: 10,
            draft_forwards: 10,
            error: error.into(),
        }
    }

    #[test]
    fn failures_are_excluded_from_means() {
        let rows = [
            row(true, 10, true, ""),
            row(false, 30, false, ""),
            row(true, 999, true, "boom"),
        ];
        let r = MethodReport::from_rows("specexit", &rows);
        assert_eq!(r.acc, 0.5);
        assert_eq!(r.reasoning_tok_mean, 20.0);
        assert_eq!(r.tok_mean, 23.0);
        assert_eq!(r.exit_rate, 0.5);
        assert_eq!(r.target_forwards, 20);
        assert_eq!((r.runs, r.failures), (3, 1));
    }

    #[test]
    fn schema_keys() {
        let r = MethodReport::from_rows("spec_only", &[row(true, 4, false, "")]);
        let v = serde_json::to_value(&r).unwrap();
        for k in [
            "method",
            "acc",
            "tok_mean",
            "lat_mean_s",
            "accept_len_mean",
            "exit_rate",
            "target_forwards",
        ] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert!(v["target_forwards"].is_u64());
        let back: MethodReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
        // extras are optional on input
        let minimal = r#"{"method":"m","acc":1.0,"tok_mean":2.0,"lat_mean_s":0.1,"accept_len_mean":1.0,"exit_rate":0.0,"target_forwards":3}"#;
        assert!(serde_json::from_str::<MethodReport>(minimal).is_ok());
    }

    #[test]
    fn empty_method_reports_zeros() {
        let r = MethodReport::from_rows("x", &[]);
        assert_eq!((r.acc, r.tok_mean, r.runs), (0.0, 0.0, 0));
    }
}
