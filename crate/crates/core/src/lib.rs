pub mod augment;
pub mod bench;
pub mod cli;
pub mod diffcore;
pub mod error;
pub mod metalearn;
pub mod models;
pub mod objectives;

pub use error::{Error, Result};
