//! Parallel benchmark and ablation runners.

use rayon::prelude::*;
use specexit_core::engine::{DecodeOptions, GenerationResult};
use specexit_core::exit::{SmoothingMethod, StoppingConfig};
use specexit_core::seq::MarkerMode;

use crate::report::{MethodReport, RunRow};
use crate::workload::{BenchTask, Method, Workload};

/// A finished run with its full generation record.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub row: RunRow,
    pub result: Result<GenerationResult, String>,
    pub stopping: StoppingConfig,
}

/// Runs every `(config, method, task)` combination. Sessions run in
/// parallel; results come back in input order.
pub fn run_grid(
    workload: &Workload,
    tasks: &[BenchTask],
    grid: &[(String, Method, StoppingConfig)],
    opts: &DecodeOptions,
) -> Vec<RunOutcome> {
    let jobs: Vec<(&(String, Method, StoppingConfig), &BenchTask)> =
        grid.iter().flat_map(|g| tasks.iter().map(move |t| (g, t))).collect();
    jobs.par_iter()
        .map(|((label, method, stopping), task)| {
            let result = workload.run(task, *method, stopping, opts).map_err(|e| e.to_string());
            if let Err(e) = &result {
                tracing::warn!(task = %task.id, method = method.name(), "run failed: {e}");
            }
            RunOutcome {
                row: RunRow::new(task, *method, label, &result),
                result,
                stopping: stopping.clone(),
            }
        })
        .collect()
}

/// Benchmark of the given methods under one stopping configuration.
pub fn run_bench(
    workload: &Workload,
    tasks: &[BenchTask],
    methods: &[Method],
    stopping: &StoppingConfig,
    opts: &DecodeOptions,
) -> (Vec<RunOutcome>, Vec<MethodReport>) {
    let grid: Vec<_> = methods.iter().map(|&m| (String::new(), m, stopping.clone())).collect();
    let outcomes = run_grid(workload, tasks, &grid, opts);
    let reports = methods
        .iter()
        .map(|&m| MethodReport::from_rows(m.name(), outcomes.iter().filter(|o| o.row.method == m).map(|o| &o.row)))
        .collect();
    (outcomes, reports)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum AblationKind {
    Signals,
    Smoothing,
    SplitTokens,
}

impl AblationKind {
    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Signals => "signals",
            AblationKind::Smoothing => "smoothing",
            AblationKind::SplitTokens => "split_tokens",
        }
    }

    /// Labelled stopping configurations swept by this ablation, derived
    /// from `base` along one axis.
    pub fn configs(self, base: &StoppingConfig) -> Vec<(String, StoppingConfig)> {
        match self {
            AblationKind::Signals => vec![
                (
                    "confidence>0.9".into(),
                    StoppingConfig::confidence_only().with_smoothing(base.smoothing),
                ),
                (
                    "progress>0.8".into(),
                    StoppingConfig::progress_only().with_smoothing(base.smoothing),
                ),
                (
                    "remaining<100".into(),
                    StoppingConfig::remaining_only().with_smoothing(base.smoothing),
                ),
                (
                    "combined".into(),
                    StoppingConfig::spec_exit_star().with_smoothing(base.smoothing),
                ),
            ]
            .into_iter()
            .map(|(l, c)| (l, c.with_marker_mode(base.marker_mode)))
            .collect(),
            AblationKind::Smoothing => SmoothingMethod::ablation_rows()
                .into_iter()
                .map(|m| (m.label(), base.clone().with_smoothing(m)))
                .collect(),
            AblationKind::SplitTokens => [MarkerMode::Paragraph, MarkerMode::Discourse, MarkerMode::Contrastive]
                .into_iter()
                .map(|m| (m.name().to_string(), base.clone().with_marker_mode(m)))
                .collect(),
        }
    }
}

/// Sweep of one axis with SpecExit, plus a spec-only baseline row first.
pub fn run_ablation(
    workload: &Workload,
    tasks: &[BenchTask],
    kind: AblationKind,
    base: &StoppingConfig,
    opts: &DecodeOptions,
) -> (Vec<RunOutcome>, Vec<MethodReport>) {
    let mut grid = vec![("spec_only".to_string(), Method::SpecOnly, base.clone())];
    grid.extend(kind.configs(base).into_iter().map(|(l, c)| (l, Method::Specexit, c)));
    let outcomes = run_grid(workload, tasks, &grid, opts);
    let reports = grid
        .iter()
        .map(|(label, _, _)| {
            MethodReport::from_rows(
                label,
                outcomes.iter().filter(|o| &o.row.config == label).map(|o| &o.row),
            )
        })
        .collect();
    (outcomes, reports)
}

/// Outcomes whose signal-forced `</think>` does not directly follow a
/// split token of their configured mode.
pub fn exit_placement_violations<'a>(workload: &Workload, outcomes: &'a [RunOutcome]) -> Vec<&'a RunOutcome> {
    outcomes
        .iter()
        .filter(|o| match &o.result {
            Ok(r) => !r.exit_follows_split(workload.markers(), o.stopping.marker_mode),
            Err(_) => false,
        })
        .collect()
}
