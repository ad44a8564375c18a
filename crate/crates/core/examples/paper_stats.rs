//! Summarize a per-fold results table: mean ± std per column and a paired
//! one-sided t-test for each baseline/proposed column pair.
//!
//!     cargo run --example paper_stats [-- path/to/table.csv]

use std::path::PathBuf;

use kneedg::experiment::cmd_paper_stats;

fn main() {
    let path = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/paper_tables.csv")));
    match cmd_paper_stats(&path) {
        Ok(stats) => print!("{stats}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
