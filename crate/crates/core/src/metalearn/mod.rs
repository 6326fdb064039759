//! Alternating finder and classifier training with one-step meta-gradients.

pub mod config;
pub mod hyper;
pub mod problem;
pub mod trainer;

pub use config::{MetaConfig, MetaMode, Method, Selection};
pub use hyper::{cosine, inner_update, meta_gradient_exact, meta_gradient_fd, BilevelProblem, InnerStep, MetaGradient};
pub use problem::{IterationProblem, PseudoDraw, PseudoTerm};
pub use trainer::{
    hard_example_gradient, train, EpochRow, Iteration, RunOutput, RunRecord, Selected, Snapshot, TraceEvent, Trainer,
};
