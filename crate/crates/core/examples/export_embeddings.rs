//! Extractor features of real and finder-drawn synthetic samples, as CSV for
//! an external projection tool.
//!
//! cargo run --release --example export_embeddings -- embeddings.csv

use std::path::{Path, PathBuf};

use mgr::bench::{export_embeddings, make_benchmark, Dataset, Split};
use mgr::cli::load_config;
use mgr::diffcore::RngStream;
use mgr::metalearn::{train, MetaConfig, Method};
use mgr::models::sample_prior;
use mgr::Result;

fn main() -> Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "embeddings.csv".into())
        .into();
    let exp = load_config(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/leaky-ring.toml"))?;
    let bench = make_benchmark(&exp.benchmark, 0)?;
    let cfg = MetaConfig {
        epochs: 60,
        ..exp.method_config(Method::Mgr)
    };
    let run = train(&bench, &cfg, 0)?;

    let n = 800;
    let mut rng = RngStream::new(0, "export-example");
    let y: Vec<usize> = (0..n).map(|i| i % bench.spec.classes).collect();
    let z = run.best.finder.eval(&sample_prior(n, 3, &mut rng))?;
    let synthetic = Dataset {
        x: bench.generator.generate_eval(&z, &y)?,
        y,
        split: Split::Train,
    };
    let rows = export_embeddings(&run.best.model, &bench.train, &synthetic, &out)?;
    println!("wrote {rows} rows to {}", out.display());
    Ok(())
}
