use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kneedg::experiment::{
    cmd_augment_preview, cmd_generate, cmd_paper_stats, cmd_run, ExperimentConfig, ExperimentError, ModelChoice,
    RunOptions,
};
use kneedg::gin::GinConfig;

#[derive(Parser)]
#[command(
    version,
    about = "Cross-domain case/control classification experiments on 3D volumes"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic cohort described by a config file.
    Generate {
        #[arg(long, short)]
        config: PathBuf,
    },
    /// Train and evaluate across folds.
    Run {
        #[arg(long, short)]
        config: PathBuf,
        /// both, baseline or proposed
        #[arg(long, default_value = "both")]
        model: ModelChoice,
        /// Comma-separated fold indices (default: all).
        #[arg(long, value_delimiter = ',')]
        folds: Option<Vec<usize>>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Mean ± std per column and paired one-sided t-tests for
    /// baseline_<x>/proposed_<x> column pairs.
    PaperStats { csv: PathBuf },
    /// Write k GIN-augmented views of one volume plus center-slice previews.
    AugmentPreview {
        volume: PathBuf,
        #[arg(short, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "preview")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<u8, ExperimentError> {
    match cli.cmd {
        Cmd::Generate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let g = cmd_generate(&cfg)?;
            println!("{} rows -> {}", g.rows, g.manifest.display());
            println!("sha256 {}", g.digest);
        }
        Cmd::Run {
            config,
            model,
            folds,
            jobs,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = cmd_run(
                &cfg,
                &RunOptions {
                    models: model,
                    folds,
                    jobs,
                },
            )?;
            for r in &out.results {
                println!(
                    "{:<8} fold {}  epoch {:>3}{}  target_test {}",
                    r.model,
                    r.fold,
                    r.logs[r.selection.index].epoch,
                    if r.selection.fallback { " (fallback)" } else { "" },
                    r.report("target_test")
                );
            }
            if let Some(cmp) = &out.comparison {
                for c in cmp {
                    let p = c.test.map_or("NA".into(), |t| format!("{:.3e}", t.p));
                    println!(
                        "{:<12} baseline {:.4} ± {:.4}  proposed {:.4} ± {:.4}  p {p}",
                        c.split, c.baseline.0, c.baseline.1, c.proposed.0, c.proposed.1
                    );
                }
            }
            println!("results in {}", cfg.output_dir().display());
            if !out.failures.is_empty() {
                for f in &out.failures {
                    eprintln!("error: {f}");
                }
                return Ok(4);
            }
        }
        Cmd::PaperStats { csv } => print!("{}", cmd_paper_stats(&csv)?),
        Cmd::AugmentPreview { volume, k, seed, out } => {
            let alphas = cmd_augment_preview(&volume, k, seed, &out, &GinConfig::default())?;
            for (v, a) in alphas.iter().enumerate() {
                println!("view{v} alpha {a:.6}");
            }
            println!("wrote {} views to {}", alphas.len(), out.display());
        }
    }
    Ok(0)
}
