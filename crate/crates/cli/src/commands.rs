//! Subcommand implementations. Each returns a small summary so tests can
//! check results without parsing stdout.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use specexit_core::engine::GenerationResult;
use specexit_core::model::TargetModel;
use specexit_core::seq::{MarkerSet, TokenId, THINK_CLOSE, THINK_OPEN};
use specexit_core::trace::{annotate_trace, realized_token_probs, GreedyAnswerOracle, TraceRecord};
use specexit_core::train::{evaluate, fit_head, fit_projection, FitConfig, LossBreakdown, TrainExample, TrainLogRow};
use specexit_core::{Checkpoint, HiddenVector, MtpDraft, TinyConfig, TinyTransformer};

use crate::bench::{exit_placement_violations, run_ablation, run_bench, AblationKind, RunOutcome};
use crate::config::RunConfig;
use crate::data::{read_jsonl, read_traces, write_csv, write_jsonl, TraceSet};
use crate::plot::render_bars;
use crate::report::{MethodReport, RunRow};
use crate::workload::{AnyTarget, Method, Workload};

/// Fraction of malformed input lines above which `build-data` fails.
pub const MAX_SKIPPED_FRACTION: f64 = 0.10;

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

// ---------------------------------------------------------------- build-data

#[derive(Debug)]
pub struct BuildSummary {
    pub written: usize,
    pub skipped: usize,
    pub mean_pruned_fraction: f64,
    pub output: PathBuf,
}

/// Annotates raw traces (the file at `input`, or the suite's own traces)
/// with their minimal exit paragraph and signal labels.
pub fn build_data(cfg: &RunConfig, input: Option<&Path>) -> Result<BuildSummary> {
    let workload = Workload::load(cfg)?;
    let set = match input {
        Some(p) => read_traces(p)?,
        None => match &workload {
            Workload::Suite { suite, .. } => TraceSet {
                records: suite.tasks.iter().map(|t| TraceRecord::raw(&t.id, &t.trace)).collect(),
                skipped: vec![],
            },
            Workload::Checkpoints { .. } => read_traces(cfg.models.dataset.as_ref().context("no dataset")?)?,
        },
    };
    if set.total() == 0 {
        bail!("no traces to annotate");
    }
    let markers = workload.markers().clone();
    let mut annotated = Vec::new();
    let mut skipped = set.skipped.len();
    for rec in &set.records {
        let res = match workload.target() {
            AnyTarget::Table(t) => annotate_one(t, rec, &markers, cfg),
            AnyTarget::Tiny(t) => annotate_one(t, rec, &markers, cfg),
        };
        match res {
            Ok(r) => annotated.push(r),
            Err(e) => {
                tracing::warn!(id = %rec.id, "skipping trace: {e:#}");
                skipped += 1;
            }
        }
    }
    let frac = skipped as f64 / set.total() as f64;
    if frac > MAX_SKIPPED_FRACTION {
        bail!("{skipped} of {} traces were malformed or rejected", set.total());
    }
    if annotated.is_empty() {
        bail!("no trace could be annotated");
    }
    ensure_dir(&cfg.out)?;
    let output = cfg.out.join("annotated.jsonl");
    let records: Vec<TraceRecord> = annotated.iter().map(|(r, _)| r.clone()).collect();
    write_jsonl(&output, &records)?;
    let mean = annotated.iter().map(|(_, f)| f).sum::<f64>() / annotated.len() as f64;
    Ok(BuildSummary {
        written: annotated.len(),
        skipped,
        mean_pruned_fraction: mean,
        output,
    })
}

fn annotate_one<T: TargetModel>(
    target: &T,
    rec: &TraceRecord,
    markers: &MarkerSet,
    cfg: &RunConfig,
) -> Result<(TraceRecord, f64)> {
    let trace = rec.trace();
    let oracle = GreedyAnswerOracle::new(target, specexit_core::seq::EOS, cfg.max_answer_tokens);
    let probs = realized_token_probs(target, &trace.prompt, &trace.reasoning, markers)?;
    let a = annotate_trace(&rec.id, &trace, &oracle, &probs, markers)?;
    Ok((TraceRecord::from(&a), a.pruned_fraction()))
}

// ---------------------------------------------------------------- train

#[derive(Debug)]
pub struct TrainSummary {
    pub examples: usize,
    pub held_out: usize,
    pub before: LossBreakdown,
    pub after: LossBreakdown,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Per-position training data from one annotated trace. The target state
/// at position `q` predicts the pending token `seq[q+1]`; the draft's depth
/// `k` projection targets `seq[q+1+k]`.
struct PositionData {
    example: TrainExample,
    deeper: Vec<Option<TokenId>>,
}

fn trace_positions(workload: &Workload, rec: &TraceRecord, depth: usize) -> Result<Vec<PositionData>> {
    let labels = rec
        .labels
        .as_ref()
        .with_context(|| format!("trace {} has no labels", rec.id))?;
    labels.validate()?;
    if labels.len() != rec.reasoning.len() {
        bail!("trace {}: labels do not cover the retained reasoning", rec.id);
    }
    let mut seq = rec.prompt.clone();
    seq.push(THINK_OPEN);
    let base = seq.len();
    seq.extend_from_slice(&rec.reasoning);
    seq.push(THINK_CLOSE);
    seq.extend_from_slice(&rec.answer);
    let outs = workload.forward(&seq[..seq.len() - 1])?;
    let n = labels.len();
    let mut data = Vec::new();
    // positions whose pending token is inside the reasoning or the close
    for (q, out) in outs.iter().enumerate().take(base + n - 1).skip(base - 1) {
        let Some(&gold) = seq.get(q + 2) else { break };
        let i = q.saturating_sub(base).min(n - 1);
        data.push(PositionData {
            example: TrainExample {
                hidden: out.hidden.clone(),
                gold,
                conf: labels.conf[i],
                prog: labels.prog[i],
                rem: f64::from(labels.remaining[i]),
            },
            deeper: (2..=depth).map(|k| seq.get(q + 1 + k).copied()).collect(),
        });
    }
    Ok(data)
}

/// Trains the draft head (tokens plus signals) on annotated traces.
pub fn train(cfg: &RunConfig, data_path: Option<&Path>) -> Result<TrainSummary> {
    let path = data_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out.join("annotated.jsonl"));
    if !path.exists() {
        bail!("{} not found; run build-data first", path.display());
    }
    let records: Vec<TraceRecord> = read_jsonl(&path)?;
    if records.is_empty() {
        bail!("{} holds no traces", path.display());
    }
    ensure_dir(&cfg.out)?;
    let mut workload = Workload::load(cfg)?;
    let t = &cfg.train;
    if t.tiny_epochs > 0 {
        if let Workload::Checkpoints { target, .. } = &mut workload {
            train_tiny(target, &records, cfg)?;
            Checkpoint::from_tiny(target).save(cfg.out.join("target.ckpt.json"))?;
        } else {
            tracing::info!("train.tiny_epochs ignored: the suite target is scripted");
        }
    }

    let mut positions = Vec::new();
    for rec in &records {
        positions.extend(trace_positions(&workload, rec, t.mtp_depth)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    positions.shuffle(&mut rng);
    let n_hold = ((positions.len() as f64) * t.holdout).round() as usize;
    let (held, train_set) = positions.split_at(n_hold);
    if train_set.is_empty() {
        bail!("no training positions left after the holdout split");
    }
    let train_ex: Vec<TrainExample> = train_set.iter().map(|p| p.example.clone()).collect();
    // with no holdout the reported losses are training losses
    let eval_ex: Vec<TrainExample> = if held.is_empty() {
        train_ex.clone()
    } else {
        held.iter().map(|p| p.example.clone()).collect()
    };

    let mut draft = MtpDraft::random(
        workload.vocab_size(),
        workload.hidden_dim(),
        t.mtp_depth,
        t.init_std,
        &mut rng,
    );
    let before = evaluate(&draft.head, &eval_ex)?;
    let fit = FitConfig {
        epochs: 1,
        batch_size: t.batch_size,
        lr: t.lr,
        seed: cfg.seed,
        signals: true,
    };
    let ckpt = cfg.out.join("draft.ckpt.json");
    let log_path = cfg.out.join("train.csv");
    let mut log: Vec<TrainLogRow> = Vec::new();
    for epoch in 0..t.epochs {
        let rows = fit_head(
            &mut draft.head,
            &train_ex,
            &FitConfig {
                seed: cfg.seed.wrapping_add(epoch as u64),
                ..fit
            },
        );
        match rows {
            Ok(rows) => {
                let offset = log.len();
                log.extend(rows.into_iter().map(|r| TrainLogRow {
                    step: r.step + offset,
                    ..r
                }));
            }
            Err(e) => {
                // the failing step left the head untouched: keep what we have
                Checkpoint::from_mtp(&draft).save(&ckpt)?;
                write_csv(&log_path, &log)?;
                return Err(e).context(format!(
                    "training diverged in epoch {epoch}; saved the last stable head"
                ));
            }
        }
    }
    for k in 2..=t.mtp_depth {
        let data: Vec<(HiddenVector, TokenId)> = train_set
            .iter()
            .filter_map(|p| p.deeper[k - 2].map(|g| (p.example.hidden.clone(), g)))
            .collect();
        if !data.is_empty() {
            fit_projection(
                draft.projection_mut(k),
                &data,
                &FitConfig {
                    epochs: t.epochs,
                    ..fit
                },
            )?;
        }
    }
    let after = evaluate(&draft.head, &eval_ex)?;
    Checkpoint::from_mtp(&draft).save(&ckpt)?;
    write_csv(&log_path, &log)?;
    Ok(TrainSummary {
        examples: train_ex.len(),
        held_out: held.len(),
        before,
        after,
        checkpoint: ckpt,
        log: log_path,
    })
}

/// Next-token training of a tiny transformer target on full responses.
fn train_tiny(model: &mut TinyTransformer, records: &[TraceRecord], cfg: &RunConfig) -> Result<()> {
    let mut opt = specexit_core::model::tiny::Adam::new(model.num_params(), cfg.train.tiny_lr);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e57);
    for epoch in 0..cfg.train.tiny_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let r = &records[i];
            let mut seq = r.prompt.clone();
            seq.push(THINK_OPEN);
            seq.extend_from_slice(&r.reasoning);
            seq.push(THINK_CLOSE);
            seq.extend_from_slice(&r.answer);
            seq.push(specexit_core::seq::EOS);
            let (loss, grad) = model.loss_and_grad(&seq, r.prompt.len())?;
            if !loss.is_finite() {
                bail!("target training diverged in epoch {epoch}");
            }
            total += loss;
            opt.step(model.params_mut(), &grad);
        }
        tracing::info!(epoch, loss = total / records.len() as f64, "target epoch");
    }
    Ok(())
}

// ---------------------------------------------------------------- generate

/// Runs one task and writes its per-step log.
pub fn generate_one(cfg: &RunConfig, task_id: Option<&str>, method: Method) -> Result<(GenerationResult, PathBuf)> {
    let workload = Workload::load(cfg)?;
    let tasks = workload.tasks();
    let task = match task_id {
        Some(id) => tasks
            .iter()
            .find(|t| t.id == id)
            .with_context(|| format!("unknown task {id}"))?,
        None => tasks.first().context("the workload has no tasks")?,
    };
    let opts = cfg.decode_options(true);
    workload.check_options(&opts)?;
    let result = workload.run(task, method, &cfg.stopping()?, &opts)?;
    let dir = cfg.out.join("logs");
    ensure_dir(&dir)?;
    let path = dir.join(format!("{}_{}.jsonl", task.id, method.name()));
    write_jsonl(&path, &result.steps)?;
    Ok((result, path))
}

// ---------------------------------------------------------------- bench

#[derive(Debug)]
pub struct BenchSummary {
    pub reports: Vec<MethodReport>,
    pub misplaced_exits: usize,
}

/// Output file names of one benchmark-like run.
struct OutputNames<'a> {
    prefix: &'a str,
    report: String,
    runs: String,
    svg: String,
}

fn write_outcomes(
    cfg: &RunConfig,
    names: &OutputNames,
    outcomes: &[RunOutcome],
    reports: &[MethodReport],
    title: &str,
) -> Result<()> {
    ensure_dir(&cfg.out)?;
    let logs = cfg.out.join("logs");
    ensure_dir(&logs)?;
    for o in outcomes {
        if let Ok(r) = &o.result {
            let label = if o.row.config.is_empty() {
                o.row.method.name().to_string()
            } else {
                sanitize(&o.row.config)
            };
            write_jsonl(
                &logs.join(format!("{}_{}_{label}.jsonl", names.prefix, o.row.task)),
                &r.steps,
            )?;
        }
    }
    let rows: Vec<&RunRow> = outcomes.iter().map(|o| &o.row).collect();
    write_csv(&cfg.out.join(&names.runs), rows)?;
    std::fs::write(cfg.out.join(&names.report), serde_json::to_string_pretty(reports)?)?;
    std::fs::write(cfg.out.join(&names.svg), render_bars(title, reports))?;
    Ok(())
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// The given methods on every task; writes `report.json`, `runs.csv` and
/// `plot.svg` under the output directory.
pub fn bench(cfg: &RunConfig, methods: &[Method]) -> Result<BenchSummary> {
    let workload = Workload::load(cfg)?;
    let tasks = workload.tasks();
    if tasks.is_empty() {
        bail!("the workload has no tasks");
    }
    let opts = cfg.decode_options(true);
    workload.check_options(&opts)?;
    let (outcomes, reports) = run_bench(&workload, &tasks, methods, &cfg.stopping()?, &opts);
    let misplaced = exit_placement_violations(&workload, &outcomes).len();
    let names = OutputNames {
        prefix: "bench",
        report: "report.json".into(),
        runs: "runs.csv".into(),
        svg: "plot.svg".into(),
    };
    write_outcomes(cfg, &names, &outcomes, &reports, "Benchmark")?;
    Ok(BenchSummary {
        reports,
        misplaced_exits: misplaced,
    })
}

/// One ablation sweep; writes `ablation_<kind>.{json,csv,svg}` and
/// `ablation_<kind>_runs.csv`.
pub fn ablate(cfg: &RunConfig, kind: AblationKind) -> Result<Vec<MethodReport>> {
    let workload = Workload::load(cfg)?;
    let tasks = workload.tasks();
    if tasks.is_empty() {
        bail!("the workload has no tasks");
    }
    let opts = cfg.decode_options(true);
    workload.check_options(&opts)?;
    let (outcomes, reports) = run_ablation(&workload, &tasks, kind, &cfg.stopping()?, &opts);
    let name = format!("ablation_{}", kind.name());
    let names = OutputNames {
        prefix: &name,
        report: format!("{name}.json"),
        runs: format!("{name}_runs.csv"),
        svg: format!("{name}.svg"),
    };
    write_outcomes(cfg, &names, &outcomes, &reports, &format!("Ablation: {}", kind.name()))?;
    write_csv(&cfg.out.join(format!("{name}.csv")), &reports)?;
    Ok(reports)
}

/// Re-renders a report file as SVG next to it (or at `out`).
pub fn plot(report: &Path, out: Option<&Path>) -> Result<PathBuf> {
    let text = std::fs::read_to_string(report).with_context(|| format!("reading {}", report.display()))?;
    let reports: Vec<MethodReport> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", report.display()))?;
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| report.with_extension("svg"));
    let title = report.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    std::fs::write(&out, render_bars(title, &reports))?;
    Ok(out)
}

// ---------------------------------------------------------------- checkpoint workflow helpers

/// Writes the suite's raw traces as a dataset file.
pub fn export_suite(cfg: &RunConfig, path: &Path) -> Result<usize> {
    let suite = specexit_core::suite::verbose_suite(&cfg.suite_config())?;
    let records: Vec<TraceRecord> = suite.tasks.iter().map(|t| TraceRecord::raw(&t.id, &t.trace)).collect();
    write_jsonl(path, &records)?;
    Ok(records.len())
}

/// Writes freshly initialized target and draft checkpoints.
pub fn init_models(cfg: &RunConfig, vocab: usize, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    ensure_dir(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let target = TinyTransformer::new(TinyConfig::desk(vocab), &mut rng)?;
    let draft = MtpDraft::random(
        vocab,
        target.hidden_dim(),
        cfg.train.mtp_depth,
        cfg.train.init_std,
        &mut rng,
    );
    let (tp, dp) = (dir.join("target.ckpt.json"), dir.join("draft.ckpt.json"));
    Checkpoint::from_tiny(&target).save(&tp)?;
    Checkpoint::from_mtp(&draft).save(&dp)?;
    Ok((tp, dp))
}
