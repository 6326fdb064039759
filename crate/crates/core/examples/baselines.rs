//! Generative augmentation baselines against consistency regularization on
//! the leaky ring, one seed and a shortened schedule.
//!
//! cargo run --release --example baselines -- 80

use std::path::Path;

use mgr::bench::make_benchmark;
use mgr::cli::load_config;
use mgr::metalearn::{train, MetaConfig, Method};
use mgr::Result;

fn main() -> Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(60);
    let exp = load_config(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/leaky-ring.toml"))?;
    let bench = make_benchmark(&exp.benchmark, 0)?;
    println!("{:<14} {:>9} {:>9} {:>8}", "method", "test acc", "val acc", "secs");
    for method in [
        Method::Base,
        Method::Gda,
        Method::GdaMh,
        Method::GdaSsl,
        Method::Pcr,
        Method::Mgr,
    ] {
        let cfg = MetaConfig {
            epochs,
            ..exp.method_config(method)
        };
        let rec = train(&bench, &cfg, 0)?.record;
        println!(
            "{:<14} {:>9.4} {:>9.4} {:>8.1}",
            method.as_str(),
            rec.final_test_acc,
            rec.selected.val_acc,
            rec.wall_clock_secs
        );
    }
    Ok(())
}
