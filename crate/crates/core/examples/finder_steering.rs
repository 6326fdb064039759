//! Trains MGR and probes where the finder moves prior draws: leakage rate of
//! F(z) against z, and the Fréchet distance of synthetic features to real ones.

use std::path::Path;

use mgr::bench::{leakage_rate, make_benchmark};
use mgr::cli::load_config;
use mgr::diffcore::RngStream;
use mgr::metalearn::{train, MetaConfig, Method};
use mgr::models::sample_prior;
use mgr::Result;

fn main() -> Result<()> {
    let exp = load_config(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/leaky-ring.toml"))?;
    let bench = make_benchmark(&exp.benchmark, 1)?;
    let cfg = MetaConfig {
        epochs: 100,
        ..exp.method_config(Method::Mgr)
    };
    let out = train(&bench, &cfg, 1)?;

    println!(
        "{:>5} {:>9} {:>9} {:>9} {:>9}",
        "epoch", "leak F(z)", "leak z", "FD mps", "FD prior"
    );
    for row in out.record.rows.iter().step_by(10) {
        println!(
            "{:>5} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            row.epoch, row.leak_rate, row.leak_rate_prior, row.frechet, row.frechet_prior
        );
    }

    let z = sample_prior(20_000, 3, &mut RngStream::new(99, "steering-probe"));
    let moved = out.last.finder.eval(&z)?;
    println!(
        "fresh probe: leakage {:.4} through the finder, {:.4} without",
        leakage_rate(&moved, &bench.generator),
        leakage_rate(&z, &bench.generator)
    );
    Ok(())
}
