//! Run orchestration and on-disk artifacts.
//!
//! Layout under the output directory:
//!
//! ```text
//! config.json                    canonical config (hashed into the manifest)
//! <method>/seed-<s>/metrics.csv  one row per epoch
//! <method>/seed-<s>/record.json  full run record
//! <method>/seed-<s>/*.ckpt       best, last and milestone checkpoints
//! grid/<method>/lambda-<l>/seed-<s>/metrics.csv
//! grid.json                      lambda search results, when searched
//! summary.json                   mean and std across seeds per method
//! manifest.json                  written last
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{error, info};
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use crate::bench::{make_benchmark, write_atomic, Benchmark};
use crate::error::{Error, Result};
use crate::metalearn::{train, MetaConfig, Method, RunOutput, RunRecord};

/// Header of the per-run metrics CSV.
pub const METRICS_HEADER: &str = "epoch,train_loss,val_loss,val_acc,test_acc,frechet,leak_rate";

/// The lambda search domain: 0.1 to 1.0 in steps of 0.1.
pub fn lambda_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

pub fn metrics_csv(record: &RunRecord) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in &record.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.val_loss, r.val_acc, r.test_acc, r.frechet, r.leak_rate
        )
        .unwrap();
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRun {
    pub method: Method,
    pub seed: u64,
    pub lambda: f64,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub artifacts: Vec<String>,
}

/// Lambda chosen for a reported method and where it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaChoice {
    pub method: Method,
    pub lambda: f64,
    /// Method whose search produced `lambda`.
    pub searched_with: Method,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub code_version: String,
    pub wall_clock_secs: f64,
    pub status: RunStatus,
    pub runs: Vec<ManifestRun>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lambdas: Vec<LambdaChoice>,
    /// Every file written, relative to the output directory, manifest excluded.
    pub artifacts: Vec<String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn failed_runs(&self) -> usize {
        self.runs.iter().filter(|r| r.status == RunStatus::Failed).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        if values.is_empty() {
            return MeanStd {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub lambda: f64,
    pub runs: usize,
    /// Test accuracy at the selected epoch.
    pub test_acc: MeanStd,
    pub final_test_acc: MeanStd,
    pub val_acc: MeanStd,
    pub final_leak_rate: MeanStd,
    pub mean_frechet: MeanStd,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub methods: Vec<MethodSummary>,
}

pub fn summarize(method: Method, lambda: f64, records: &[&RunRecord]) -> MethodSummary {
    let col = |f: &dyn Fn(&RunRecord) -> f64| MeanStd::of(&records.iter().map(|r| f(r)).collect::<Vec<_>>());
    MethodSummary {
        method,
        lambda,
        runs: records.len(),
        test_acc: col(&|r| r.selected.test_acc),
        final_test_acc: col(&|r| r.final_test_acc),
        val_acc: col(&|r| r.selected.val_acc),
        final_leak_rate: col(&|r| r.final_row().leak_rate),
        mean_frechet: col(&|r| r.mean_frechet().0),
    }
}

/// One lambda candidate of a search, scored by final-epoch accuracies
/// averaged over seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda: f64,
    pub runs: usize,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridSearch {
    pub method: Method,
    pub points: Vec<GridPoint>,
    pub selected: f64,
}

/// Highest mean validation accuracy wins; ties go to the smaller lambda.
pub fn select_lambda(points: &[GridPoint]) -> Option<f64> {
    let mut best: Option<&GridPoint> = None;
    let mut sorted: Vec<&GridPoint> = points.iter().filter(|p| p.runs > 0).collect();
    sorted.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    for p in sorted {
        if best.is_none_or(|b| p.val_acc > b.val_acc) {
            best = Some(p);
        }
    }
    best.map(|p| p.lambda)
}

struct Writer {
    root: PathBuf,
    artifacts: Vec<String>,
}

impl Writer {
    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<String> {
        write_atomic(&self.root.join(rel), bytes)?;
        self.artifacts.push(rel.to_string());
        Ok(rel.to_string())
    }

    fn run_artifacts(
        &mut self,
        prefix: &str,
        out: &RunOutput,
        bench: &Benchmark,
        cfg: &MetaConfig,
        checkpoints: bool,
    ) -> Result<Vec<String>> {
        let mut files = vec![
            self.write(&format!("{prefix}/metrics.csv"), metrics_csv(&out.record).as_bytes())?,
            self.write(
                &format!("{prefix}/record.json"),
                serde_json::to_string_pretty(&out.record)?.as_bytes(),
            )?,
        ];
        if checkpoints {
            let seed = out.record.seed;
            let mut snaps = vec![("best".to_string(), &out.best), ("last".to_string(), &out.last)];
            for m in &out.milestones {
                snaps.push((format!("milestone-{}", m.epoch), m));
            }
            for (name, snap) in snaps {
                let ck = Checkpoint::new(snap, &bench.generator, &bench.spec, cfg, seed);
                files.push(self.write(&format!("{prefix}/{name}.ckpt"), &ck.to_bytes()?)?);
            }
        }
        Ok(files)
    }
}

fn lambda_tag(lambda: f64) -> String {
    format!("{lambda:.1}")
}

struct Trained {
    method: Method,
    seed: u64,
    lambda: f64,
    result: std::result::Result<RunOutput, String>,
}

fn train_cell(bench: &Benchmark, cfg: &MetaConfig, seed: u64) -> Trained {
    info!("training {} (lambda {}) seed {seed}", cfg.method, cfg.lambda);
    let result = train(bench, cfg, seed).map_err(|e| {
        error!("{} seed {seed} failed: {e}", cfg.method);
        e.to_string()
    });
    Trained {
        method: cfg.method,
        seed,
        lambda: cfg.lambda,
        result,
    }
}

/// Runs a configuration end to end. Individual run failures are recorded in
/// the manifest and do not stop the remaining runs. With `search` the lambda
/// of every method with a synthetic-sample term is picked by grid search first.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, search: bool) -> Result<Manifest> {
    cfg.validate()?;
    let start = Instant::now();
    let mut w = Writer {
        root: out_dir.to_path_buf(),
        artifacts: Vec::new(),
    };
    w.write("config.json", cfg.canonical_json()?.as_bytes())?;
    let benches = cfg
        .seeds
        .iter()
        .map(|&s| make_benchmark(&cfg.benchmark, s))
        .collect::<Result<Vec<_>>>()?;

    let mut lambdas: BTreeMap<Method, (f64, Method)> = BTreeMap::new();
    let mut reused: Vec<Trained> = Vec::new();
    let mut runs = Vec::new();
    if search {
        let mut sources: Vec<Method> = Vec::new();
        for m in &cfg.methods {
            if m.uses_pseudo() {
                let s = m.lambda_source().unwrap_or(*m);
                if !sources.contains(&s) {
                    sources.push(s);
                }
            }
        }
        let mut searches = Vec::new();
        for &source in &sources {
            let mut points = Vec::new();
            let mut by_lambda = Vec::new();
            for lambda in lambda_grid() {
                let mcfg = MetaConfig {
                    lambda,
                    ..cfg.method_config(source)
                };
                let cells: Vec<Trained> = cfg
                    .seeds
                    .iter()
                    .zip(&benches)
                    .map(|(&seed, bench)| train_cell(bench, &mcfg, seed))
                    .collect();
                for (cell, bench) in cells.iter().zip(&benches) {
                    let prefix = format!("grid/{source}/lambda-{}/seed-{}", lambda_tag(lambda), cell.seed);
                    runs.push(manifest_run(&mut w, cell, &prefix, bench, &mcfg, false)?);
                }
                let ok: Vec<&RunRecord> = cells
                    .iter()
                    .filter_map(|c| c.result.as_ref().ok())
                    .map(|o| &o.record)
                    .collect();
                let n = ok.len().max(1) as f64;
                points.push(GridPoint {
                    lambda,
                    runs: ok.len(),
                    val_acc: ok.iter().map(|r| r.final_row().val_acc).sum::<f64>() / n,
                    test_acc: ok.iter().map(|r| r.final_row().test_acc).sum::<f64>() / n,
                });
                by_lambda.push((lambda, cells));
            }
            let selected =
                select_lambda(&points).ok_or_else(|| Error::config(format!("every grid run of {source} failed")))?;
            info!("{source}: selected lambda {selected}");
            lambdas.insert(source, (selected, source));
            if let Some((_, cells)) = by_lambda.into_iter().find(|(l, _)| *l == selected) {
                if cfg.methods.contains(&source) {
                    reused.extend(cells);
                }
            }
            searches.push(GridSearch {
                method: source,
                points,
                selected,
            });
        }
        for m in &cfg.methods {
            if let Some(s) = m.lambda_source().filter(|_| m.uses_pseudo()) {
                let (l, _) = lambdas[&s];
                lambdas.insert(*m, (l, s));
            }
        }
        w.write("grid.json", serde_json::to_string_pretty(&searches)?.as_bytes())?;
    }

    let mut summaries = Vec::new();
    for &method in &cfg.methods {
        let lambda = lambdas.get(&method).map_or(cfg.meta.lambda, |(l, _)| *l);
        let mcfg = MetaConfig {
            lambda,
            ..cfg.method_config(method)
        };
        let mut cells = Vec::new();
        for (&seed, bench) in cfg.seeds.iter().zip(&benches) {
            let cell = match reused.iter().position(|c| c.method == method && c.seed == seed) {
                Some(i) => reused.swap_remove(i),
                None => train_cell(bench, &mcfg, seed),
            };
            let prefix = format!("{method}/seed-{seed}");
            runs.push(manifest_run(
                &mut w,
                &cell,
                &prefix,
                bench,
                &mcfg,
                cfg.output.checkpoints,
            )?);
            cells.push(cell);
        }
        let records: Vec<&RunRecord> = cells
            .iter()
            .filter_map(|c| c.result.as_ref().ok())
            .map(|o| &o.record)
            .collect();
        summaries.push(summarize(method, lambda, &records));
    }
    w.write(
        "summary.json",
        serde_json::to_string_pretty(&Summary { methods: summaries })?.as_bytes(),
    )?;

    let status = if runs.iter().all(|r| r.status == RunStatus::Completed) {
        RunStatus::Completed
    } else {
        RunStatus::Failed
    };
    let manifest = Manifest {
        config_hash: cfg.hash()?,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        status,
        runs,
        lambdas: cfg
            .methods
            .iter()
            .filter_map(|m| {
                lambdas.get(m).map(|&(lambda, searched_with)| LambdaChoice {
                    method: *m,
                    lambda,
                    searched_with,
                })
            })
            .collect(),
        artifacts: w.artifacts.clone(),
    };
    write_atomic(
        &out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(manifest)
}

fn manifest_run(
    w: &mut Writer,
    cell: &Trained,
    prefix: &str,
    bench: &Benchmark,
    cfg: &MetaConfig,
    checkpoints: bool,
) -> Result<ManifestRun> {
    Ok(match &cell.result {
        Ok(out) => ManifestRun {
            method: cell.method,
            seed: cell.seed,
            lambda: cell.lambda,
            status: RunStatus::Completed,
            error: None,
            artifacts: w.run_artifacts(prefix, out, bench, cfg, checkpoints)?,
        },
        Err(e) => ManifestRun {
            method: cell.method,
            seed: cell.seed,
            lambda: cell.lambda,
            status: RunStatus::Failed,
            error: Some(e.clone()),
            artifacts: Vec::new(),
        },
    })
}
