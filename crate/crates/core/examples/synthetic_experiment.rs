//! End-to-end run on a reduced synthetic cohort: generate, train both
//! models on every fold, print the comparison.
//!
//!     cargo run --release --example synthetic_experiment [-- out_dir]
//!
//! The full-size configuration lives in `configs/synthetic.toml` and is run
//! with the `kneedg` binary.

use std::path::PathBuf;

use kneedg::experiment::{cmd_generate, cmd_run, ExperimentConfig, RunOptions};
use kneedg::network::BlockSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| "synthetic-out".into());
    let mut cfg = ExperimentConfig::synthetic(1);
    cfg.cohort.n_pairs = 35;
    cfg.cohort.volume_dims = [8, 16, 16];
    cfg.net.input_shape = [1, 8, 16, 16];
    cfg.net.stem_channels = 4;
    cfg.net.channel_schedule = vec![
        BlockSpec { channels: 4, stride: 1 },
        BlockSpec { channels: 8, stride: 2 },
    ];
    cfg.source_val_size = 10;
    cfg.baseline.epochs = 25;
    cfg.proposed.epochs = 25;
    cfg.output_dir = Some(out.clone());
    cfg.validate()?;

    let g = cmd_generate(&cfg)?;
    println!("cohort: {} rows, sha256 {}", g.rows, &g.digest[..16]);
    let run = cmd_run(&cfg, &RunOptions::default())?;
    for f in &run.failures {
        eprintln!("failed: {f}");
    }
    for c in run.comparison.iter().flatten() {
        let p = c.test.map_or("NA".into(), |t| format!("{:.2e}", t.p));
        println!(
            "{:<12} baseline {:.3} ± {:.3}   proposed {:.3} ± {:.3}   p {p}",
            c.split, c.baseline.0, c.baseline.1, c.proposed.0, c.proposed.1
        );
    }
    println!("results in {}", out.display());
    Ok(())
}
