//! Classifier, latent finder and the analytic leaky generator.

pub mod finder;
pub mod generator;
pub mod main_model;
pub mod mlp;

pub use finder::{Finder, FinderVariant};
pub use generator::{sample_prior, tau_for_rate, LeakyGenerator, TAU_CAP};
pub use main_model::{Architecture, MainModel, ModelVars};
pub use mlp::{dense_init, Mlp, LEAKY_SLOPE};
