use serde::{Deserialize, Serialize};

use super::dataset::Benchmark;
use crate::error::Result;
use crate::metalearn::{train, MetaConfig, Method, RunRecord};

/// Result of one (fraction, method) cell of a size sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepCell {
    pub fraction: f64,
    pub method: Method,
    pub train_size: usize,
    pub record: RunRecord,
}

/// Trains every method on every reduced training split.
pub fn size_sweep(
    bench: &Benchmark,
    fractions: &[f64],
    methods: &[Method],
    cfg: &MetaConfig,
    seed: u64,
) -> Result<Vec<SweepCell>> {
    let mut out = Vec::with_capacity(fractions.len() * methods.len());
    for &fraction in fractions {
        let reduced = bench.reduced(fraction)?;
        for &method in methods {
            let cfg = MetaConfig { method, ..cfg.clone() };
            let record = train(&reduced, &cfg, seed)?.record;
            out.push(SweepCell {
                fraction,
                method,
                train_size: reduced.train.len(),
                record,
            });
        }
    }
    Ok(out)
}
