//! Synthetic benchmarks, evaluation metrics, size sweeps and embedding export.

pub mod dataset;
pub mod export;
pub mod metrics;
pub mod sweep;

pub use dataset::{make_benchmark, Benchmark, BenchmarkSpec, Dataset, Split};
pub use export::{embeddings_csv, export_embeddings, write_atomic};
pub use metrics::{frechet_distance, leakage_rate, mean_leak_weight, EIGEN_FLOOR};
pub use sweep::{size_sweep, SweepCell};
