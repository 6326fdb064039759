use serde::{Deserialize, Serialize};

use crate::diffcore::{RngStream, Tensor};
use crate::error::{Error, Result};
use crate::models::{tau_for_rate, LeakyGenerator};

/// Which partition a dataset came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Labelled point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            split: self.split,
        }
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for &y in &self.y {
            c[y] += 1;
        }
        c
    }

    /// Per-class means `(K, d)` and the pooled within-class standard deviation.
    pub fn class_moments(&self, classes: usize) -> Result<(Tensor, f64)> {
        let d = self.dim();
        let counts = self.class_counts(classes);
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::config(format!("class {c} has no samples")));
        }
        let mut means = Tensor::zeros(&[classes, d]);
        for (i, &y) in self.y.iter().enumerate() {
            for j in 0..d {
                let v = means.at(y, j) + self.x.at(i, j) / counts[y] as f64;
                means.set(y, j, v);
            }
        }
        let mut ss = 0.0;
        for (i, &y) in self.y.iter().enumerate() {
            for j in 0..d {
                ss += (self.x.at(i, j) - means.at(y, j)).powi(2);
            }
        }
        let dof = (self.len() - classes).max(1) * d;
        Ok((means, (ss / dof as f64).sqrt()))
    }
}

/// Ring-of-Gaussians benchmark with a matching leaky generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct BenchmarkSpec {
    pub classes: usize,
    /// Data dimension; the ring lives in the first two coordinates.
    pub dim: usize,
    pub radius: f64,
    /// Standard deviation of every class blob.
    pub spread: f64,
    /// Labelled samples before the 9:1 train/validation split.
    pub n: usize,
    pub n_test: usize,
    /// Probability that a prior draw lands in the generator's leaked region.
    pub leak_rate: f64,
    pub latent_dim: usize,
    /// Sharpness of the leakage gate.
    pub alpha: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            classes: 8,
            dim: 2,
            radius: 2.0,
            spread: 0.6,
            n: 400,
            n_test: 4000,
            leak_rate: 0.3,
            latent_dim: 3,
            alpha: 2.0,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("benchmark needs at least 2 classes"));
        }
        if self.dim < 2 {
            return Err(Error::config("benchmark dimension must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.leak_rate) {
            return Err(Error::config(format!(
                "leak-rate must lie in [0, 1), got {}",
                self.leak_rate
            )));
        }
        if self.latent_dim < self.dim + 1 {
            return Err(Error::config(format!(
                "latent-dim must be at least dim + 1 = {}",
                self.dim + 1
            )));
        }
        if !(self.radius > 0.0 && self.spread > 0.0 && self.alpha > 0.0) {
            return Err(Error::config("radius, spread and alpha must be positive"));
        }
        if self.n < 10 || self.n_test == 0 {
            return Err(Error::config("benchmark needs n >= 10 and n-test >= 1"));
        }
        Ok(())
    }

    pub fn n_train(&self) -> usize {
        (self.n as f64 * 0.9).round() as usize
    }

    pub fn modes(&self) -> Tensor {
        let mut m = Tensor::zeros(&[self.classes, self.dim]);
        for c in 0..self.classes {
            let a = 2.0 * std::f64::consts::PI * c as f64 / self.classes as f64;
            m.set(c, 0, self.radius * a.cos());
            m.set(c, 1, self.radius * a.sin());
        }
        m
    }
}

/// All data for one benchmark instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub spec: BenchmarkSpec,
    pub seed: u64,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub generator: LeakyGenerator,
}

fn draw(spec: &BenchmarkSpec, modes: &Tensor, n: usize, split: Split, rng: &mut RngStream) -> Dataset {
    let mut x = Tensor::zeros(&[n, spec.dim]);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = rng.below(spec.classes);
        for j in 0..spec.dim {
            x.set(i, j, modes.at(c, j) + spec.spread * rng.normal());
        }
        y.push(c);
    }
    Dataset { x, y, split }
}

/// Builds the benchmark as a pure function of `(spec, seed)`.
pub fn make_benchmark(spec: &BenchmarkSpec, seed: u64) -> Result<Benchmark> {
    spec.validate()?;
    let root = RngStream::new(seed, "bench");
    let modes = spec.modes();
    let labelled = draw(spec, &modes, spec.n, Split::Train, &mut root.child("data"));
    let n_train = spec.n_train();
    let idx: Vec<usize> = (0..spec.n).collect();
    let train = labelled.subset(&idx[..n_train]);
    let mut val = labelled.subset(&idx[n_train..]);
    val.split = Split::Val;
    let test = draw(spec, &modes, spec.n_test, Split::Test, &mut root.child("test"));
    let tau = tau_for_rate(spec.leak_rate)?;
    let generator = LeakyGenerator::new(
        modes,
        spec.spread,
        tau,
        spec.alpha,
        spec.latent_dim,
        &mut root.child("generator"),
    )?;
    Ok(Benchmark {
        spec: spec.clone(),
        seed,
        train,
        val,
        test,
        generator,
    })
}

impl Benchmark {
    /// Keeps a `fraction` of the training split, sampled per class on a fixed
    /// stream, and refits the generator modes and spread to what remains.
    /// `fraction == 1.0` returns the benchmark unchanged.
    pub fn reduced(&self, fraction: f64) -> Result<Benchmark> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::config(format!(
                "train fraction must lie in (0, 1], got {fraction}"
            )));
        }
        if fraction == 1.0 {
            return Ok(self.clone());
        }
        let k = self.spec.classes;
        let target = (fraction * self.train.len() as f64).round() as usize;
        if target < k {
            return Err(Error::config(format!(
                "fraction {fraction} keeps {target} training samples, fewer than the {k} classes"
            )));
        }
        let mut rng = RngStream::new(self.seed, "bench/subsample");
        let mut keep = Vec::with_capacity(target);
        for c in 0..k {
            let mut members: Vec<usize> = (0..self.train.len()).filter(|&i| self.train.y[i] == c).collect();
            if members.is_empty() {
                return Err(Error::config(format!("class {c} is absent from the training split")));
            }
            rng.shuffle(&mut members);
            let take = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
            keep.extend_from_slice(&members[..take]);
        }
        keep.sort_unstable();
        let train = self.train.subset(&keep);
        let (modes, spread) = train.class_moments(k)?;
        let generator = self.generator.with_modes(modes, spread)?;
        Ok(Benchmark {
            train,
            generator,
            ..self.clone()
        })
    }
}
