//! Base against MGR on shrinking training sets, at the preset's epoch budget
//! unless one is given. Small fractions see few iterations per epoch, so short
//! budgets leave them undertrained.
//!
//! cargo run --release --example size_sweep -- 200

use std::path::Path;

use mgr::bench::{make_benchmark, size_sweep};
use mgr::cli::load_config;
use mgr::metalearn::{MetaConfig, Method};
use mgr::Result;

fn main() -> Result<()> {
    let exp = load_config(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/leaky-ring.toml"))?;
    let epochs = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(exp.meta.epochs);
    let cfg = MetaConfig {
        epochs,
        ..exp.meta.clone()
    };
    let fractions = [0.1, 0.25, 0.5, 1.0];
    let seeds = [0, 1, 2];
    let mut gaps = vec![Vec::new(); fractions.len()];
    for seed in seeds {
        let bench = make_benchmark(&exp.benchmark, seed)?;
        let cells = size_sweep(&bench, &fractions, &[Method::Base, Method::Mgr], &cfg, seed)?;
        for (i, pair) in cells.chunks(2).enumerate() {
            gaps[i].push(pair[1].record.final_test_acc - pair[0].record.final_test_acc);
            println!(
                "seed {seed} fraction {:<4} n={:<3} base {:.4} mgr {:.4}",
                pair[0].fraction, pair[0].train_size, pair[0].record.final_test_acc, pair[1].record.final_test_acc
            );
        }
    }
    for (f, g) in fractions.iter().zip(&gaps) {
        println!(
            "fraction {f:<4}: mean MGR - Base {:+.4}",
            g.iter().sum::<f64>() / g.len() as f64
        );
    }
    Ok(())
}
