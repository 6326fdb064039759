//! TOML experiment files.
//!
//! ```toml
//! methods = ["base", "gda", "mgr"]
//! seeds = [0, 1, 2, 3, 4]
//!
//! [benchmark]
//! leak-rate = 0.3
//!
//! [meta]
//! epochs = 200
//! lambda = 0.5
//!
//! [output]
//! dir = "runs/table1"
//! ```
//!
//! Every section is optional and every key defaults. The method is chosen by
//! the top-level `methods` list, so `[meta]` may not set `method`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::BenchmarkSpec;
use crate::error::{Error, Result};
use crate::metalearn::{MetaConfig, Method};

/// Environment variable that replaces `[output] dir`.
pub const OUTPUT_DIR_ENV: &str = "MGR_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write best, last and milestone checkpoints per run.
    pub checkpoints: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
            checkpoints: true,
        }
    }
}

/// Lambda grid search settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct GridConfig {
    /// Lets `run` perform the grid search before reporting.
    pub enabled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub benchmark: BenchmarkSpec,
    pub meta: MetaConfig,
    pub output: OutputConfig,
    pub grid: GridConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            methods: vec![Method::Base, Method::Gda, Method::Pcr, Method::Mgr],
            seeds: vec![0],
            benchmark: BenchmarkSpec::default(),
            meta: MetaConfig::default(),
            output: OutputConfig::default(),
            grid: GridConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::config("methods must list at least one method"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must list at least one seed"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::config(format!("method {m} is listed twice")));
            }
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(Error::config(format!("seed {s} is listed twice")));
            }
        }
        self.benchmark.validate()?;
        for &method in &self.methods {
            self.method_config(method).validate()?;
        }
        Ok(())
    }

    /// `[meta]` with the method filled in.
    pub fn method_config(&self, method: Method) -> MetaConfig {
        MetaConfig {
            method,
            ..self.meta.clone()
        }
    }

    /// Canonical JSON rendering, the input of [`ExperimentConfig::hash`].
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Hex SHA-256 of the canonical JSON.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.canonical_json()?.as_bytes()))
    }

    /// Output directory after the environment override.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output.dir.clone(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

/// Parses and validates an experiment file's contents. `origin` labels errors.
pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig> {
    let raw: toml::Table = toml::from_str(text).map_err(|e| located(text, origin, &e))?;
    if raw
        .get("meta")
        .and_then(|m| m.as_table())
        .is_some_and(|m| m.contains_key("method"))
    {
        return Err(Error::config(format!(
            "{origin}: [meta] may not set `method`; list methods in the top-level `methods` array"
        )));
    }
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| located(text, origin, &e))?;
    cfg.validate().map_err(|e| match e {
        Error::Config(msg) => Error::config(format!("{origin}: {msg}")),
        other => other,
    })?;
    Ok(cfg)
}

fn located(text: &str, origin: &str, e: &toml::de::Error) -> Error {
    let msg = e.message().trim_end();
    match e.span() {
        Some(span) => {
            let (line, col) = line_col(text, span.start);
            Error::config(format!("{origin}:{line}:{col}: {msg}"))
        }
        None => Error::config(format!("{origin}: {msg}")),
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text, &path.display().to_string())
}
