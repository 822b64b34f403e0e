use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use cilab::harness::{run_experiment, run_sweep, run_theory_audit, ExperimentConfig, SweepGrid};
use cilab::theory::AuditMode;

#[derive(Parser)]
#[command(name = "cilab", version, about = "Class-incremental learning lab on a synthetic dual encoder")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the task stream and write reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the stream and audit every task against the approximation theory.
    Audit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        draws: usize,
        /// Replace the live projectors by leading singular directions of W*.
        #[arg(long)]
        equality: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One run per grid point and seed.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full property suite.
    Verify,
}

fn load(path: &Path, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(path).with_context(|| format!("loading {}", path.display()))?;
    if out.is_some() {
        cfg.output_dir = out;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<bool> {
    match Cli::parse().cmd {
        Cmd::Run { config, seed, out } => {
            let mut cfg = load(&config, out)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let report = run_experiment(&cfg)?;
            for s in &report.metrics.per_stage {
                println!(
                    "stage {}: A_t {:.4}  auroc {}  routing {:.4}  margin {}",
                    s.t,
                    s.a_t,
                    s.auroc.map_or("-".into(), |x| format!("{x:.4}")),
                    s.routing_acc,
                    s.mean_margin.map_or("-".into(), |x| format!("{x:.4}")),
                );
            }
            if let Some(s) = report.summary() {
                println!("avg_acc {:.4}  last_acc {:.4}", s.avg_acc, s.last_acc);
            }
            if let Some(f) = &report.failure {
                eprintln!("run failed at stage {}: {}", f.stage, f.error);
            }
            Ok(report.passed())
        }
        Cmd::Audit { config, draws, equality, out } => {
            let cfg = load(&config, out)?;
            let mode = if equality { AuditMode::Equality } else { AuditMode::Live };
            let out = run_theory_audit(&cfg, draws, mode)?;
            let failed = out.records.iter().filter(|r| !r.report.all_hold()).count();
            println!("{} reports, {} failing", out.records.len(), failed);
            Ok(out.all_pass)
        }
        Cmd::Sweep { config, grid, out } => {
            let cfg = load(&config, out)?;
            let text = std::fs::read_to_string(&grid).with_context(|| format!("reading {}", grid.display()))?;
            let table = run_sweep(&cfg, &SweepGrid::from_toml_str(&text)?)?;
            for s in &table.summary {
                println!(
                    "{:?}  runs {}  avg {:.4}±{:.4}  last {:.4}±{:.4}  routing {:.4}±{:.4}",
                    s.params, s.runs, s.avg_acc.mean, s.avg_acc.std, s.last_acc.mean, s.last_acc.std, s.routing_acc.mean, s.routing_acc.std
                );
            }
            Ok(true)
        }
        Cmd::Verify => {
            Ok(cilab::verify::print_checks(&cilab::verify::run_all()))
        }
    }
}
