//! The batch pipeline from a config file: runs, metrics CSVs, summary and
//! manifest. Output goes to the config's directory unless MGR_OUTPUT_DIR is set.
//!
//! cargo run --release --example run_experiment -- configs/smoke.toml

use std::path::PathBuf;

use mgr::cli::{load_config, run_experiment, Summary};
use mgr::{Error, Result};

fn main() -> Result<()> {
    let path: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.toml"));
    let cfg = load_config(&path)?;
    let dir = cfg.output_dir();
    let manifest = run_experiment(&cfg, &dir, cfg.grid.enabled)?;
    println!("config {} -> {}", &manifest.config_hash[..12], dir.display());
    println!(
        "{} runs, {} failed, {:.2} s",
        manifest.runs.len(),
        manifest.failed_runs(),
        manifest.wall_clock_secs
    );

    let summary_path = dir.join("summary.json");
    let bytes = std::fs::read(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    let summary: Summary = serde_json::from_slice(&bytes)?;
    for m in &summary.methods {
        println!(
            "{:<14} lambda {:.1}  test {:.4} +- {:.4}",
            m.method.as_str(),
            m.lambda,
            m.test_acc.mean,
            m.test_acc.std
        );
    }
    Ok(())
}
