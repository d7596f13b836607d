use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use specexit_cli::bench::AblationKind;
use specexit_cli::commands;
use specexit_cli::config::{Overrides, RunConfig};
use specexit_cli::report::MethodReport;
use specexit_cli::workload::Method;

#[derive(Parser)]
#[command(
    name = "specexit",
    version,
    about = "Speculative decoding with signal-guided early exit"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Draft depth per verify cycle.
    #[arg(long, global = true)]
    gamma: Option<usize>,
    /// Reasoning token budget.
    #[arg(long, global = true)]
    max_tokens: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Annotate traces with their minimal exit point and signal labels.
    BuildData {
        /// Raw trace JSONL; the synthetic suite's traces when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train the draft head on annotated traces.
    Train {
        /// Annotated JSONL; `<out>/annotated.jsonl` when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Decode one task and write its step log.
    Generate {
        #[arg(long)]
        task: Option<String>,
        #[arg(long, value_enum, default_value = "specexit")]
        method: Method,
    },
    /// Compare decoding methods on every task.
    Bench {
        /// Restrict to these methods (repeatable).
        #[arg(long, value_enum)]
        method: Vec<Method>,
    },
    /// Sweep one stopping axis.
    Ablate {
        #[arg(long, value_enum)]
        kind: AblationKind,
    },
    /// Render a report JSON file as SVG.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write the synthetic suite's raw traces to a JSONL dataset.
    ExportSuite {
        #[arg(long)]
        output: PathBuf,
    },
    /// Write randomly initialized tiny-transformer target and draft checkpoints.
    InitModels {
        #[arg(long, default_value_t = 64)]
        vocab: usize,
        #[arg(long)]
        dir: PathBuf,
    },
}

fn print_reports(reports: &[MethodReport]) {
    println!(
        "{:<22} {:>6} {:>9} {:>11} {:>9} {:>9} {:>9} {:>8}",
        "method", "acc", "tok", "reasoning", "lat_ms", "accept", "exits", "fwd"
    );
    for r in reports {
        println!(
            "{:<22} {:>6.3} {:>9.1} {:>11.1} {:>9.3} {:>9.2} {:>9.2} {:>8}",
            r.method,
            r.acc,
            r.tok_mean,
            r.reasoning_tok_mean,
            r.lat_mean_s * 1e3,
            r.accept_len_mean,
            r.exit_rate,
            r.target_forwards
        );
        if r.failures > 0 {
            println!("  {} of {} runs failed", r.failures, r.runs);
        }
    }
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let overrides = Overrides {
        seed: cli.seed,
        gamma: cli.gamma,
        max_tokens: cli.max_tokens,
        out: cli.out.clone(),
    };
    // plotting needs no run configuration
    if let Cmd::Plot { report, output } = &cli.cmd {
        let path = commands::plot(report, output.as_deref())?;
        println!("wrote {}", path.display());
        return Ok(());
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    match cli.cmd {
        Cmd::BuildData { input } => {
            let s = commands::build_data(&cfg, input.as_deref())?;
            println!(
                "annotated {} traces ({} skipped), mean pruned fraction {:.3}, wrote {}",
                s.written,
                s.skipped,
                s.mean_pruned_fraction,
                s.output.display()
            );
        }
        Cmd::Train { data } => {
            let s = commands::train(&cfg, data.as_deref())?;
            println!("trained on {} positions, {} held out", s.examples, s.held_out);
            println!("{:<6} {:>12} {:>12}", "loss", "initial", "final");
            for (name, a, b) in [
                ("cls", s.before.cls, s.after.cls),
                ("conf", s.before.conf, s.after.conf),
                ("prog", s.before.prog, s.after.prog),
                ("rem", s.before.rem, s.after.rem),
            ] {
                println!("{name:<6} {a:>12.6} {b:>12.6}");
            }
            println!("wrote {} and {}", s.checkpoint.display(), s.log.display());
        }
        Cmd::Generate { task, method } => {
            let (r, log) = commands::generate_one(&cfg, task.as_deref(), method)?;
            println!(
                "reasoning {} tokens, answer {:?}, exit at {:?}, {} target forwards, mean accept {:.2}",
                r.reasoning_tokens,
                r.answer().iter().map(|t| t.0).collect::<Vec<_>>(),
                r.exit_position,
                r.target_forwards,
                r.accept_len_mean()
            );
            println!("wrote {}", log.display());
        }
        Cmd::Bench { method } => {
            let methods = if method.is_empty() {
                Method::ALL.to_vec()
            } else {
                method
            };
            let s = commands::bench(&cfg, &methods)?;
            print_reports(&s.reports);
            if s.misplaced_exits > 0 {
                anyhow::bail!("{} forced exits did not follow a split token", s.misplaced_exits);
            }
            println!("wrote report.json, runs.csv and plot.svg to {}", cfg.out.display());
        }
        Cmd::Ablate { kind } => {
            let reports = commands::ablate(&cfg, kind)?;
            print_reports(&reports);
        }
        Cmd::ExportSuite { output } => {
            let n = commands::export_suite(&cfg, &output)?;
            println!("wrote {n} traces to {}", output.display());
        }
        Cmd::InitModels { vocab, dir } => {
            let (t, d) = commands::init_models(&cfg, vocab, &dir)?;
            println!("wrote {} and {}", t.display(), d.display());
        }
        Cmd::Plot { .. } => unreachable!(),
    }
    Ok(())
}
