//! Fixtures shared by the integration targets.
#![allow(dead_code)]

use mgr::augment::{TransformBatch, TransformSpec};
use mgr::bench::{make_benchmark, Benchmark, BenchmarkSpec};
use mgr::diffcore::{RngStream, Tape, Tensor, Var};
use mgr::metalearn::{BilevelProblem, InnerStep, IterationProblem, MetaConfig, Method, PseudoDraw};
use mgr::models::{sample_prior, Architecture, Finder, FinderVariant, MainModel};
use mgr::Result;

/// L = |A th - a|^2 / 2, P = |th - B ph|^2 / 2, L_val = |C th - c|^2 / 2, penalty mu |ph|^2 / 2.
pub struct Quadratic {
    pub a: Tensor,
    pub a0: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub c0: Tensor,
    pub mu: f64,
}

fn half_sq<'t>(m: &Tensor, x: Var<'t>, t: &Tensor) -> Result<Var<'t>> {
    let tape = x.tape();
    tape.constant(m.clone())
        .matmul(x)?
        .sub(tape.constant(t.clone()))?
        .sq_norm()?
        .scale(0.5)
}

impl BilevelProblem for Quadratic {
    fn train_loss<'t>(&self, _tape: &'t Tape, theta: &[Var<'t>]) -> Result<Var<'t>> {
        half_sq(&self.a, theta[0], &self.a0)
    }

    fn pseudo_loss<'t>(&self, tape: &'t Tape, theta: &[Var<'t>], phi: &[Var<'t>]) -> Result<Var<'t>> {
        theta[0]
            .sub(tape.constant(self.b.clone()).matmul(phi[0])?)?
            .sq_norm()?
            .scale(0.5)
    }

    fn val_loss<'t>(&self, _tape: &'t Tape, theta: &[Var<'t>]) -> Result<Var<'t>> {
        half_sq(&self.c, theta[0], &self.c0)
    }

    fn penalty<'t>(&self, _tape: &'t Tape, phi: &[Var<'t>]) -> Result<Option<Var<'t>>> {
        Ok(if self.mu == 0.0 {
            None
        } else {
            Some(phi[0].sq_norm()?.scale(0.5 * self.mu)?)
        })
    }
}

impl Quadratic {
    pub fn random(n: usize, m: usize, mu: f64, rng: &mut RngStream) -> Self {
        Quadratic {
            a: rng.normal_tensor(&[n, n]),
            a0: rng.normal_tensor(&[n, 1]),
            b: rng.normal_tensor(&[n, m]),
            c: rng.normal_tensor(&[n + 1, n]),
            c0: rng.normal_tensor(&[n + 1, 1]),
            mu,
        }
    }

    /// d L_val(th') / d ph = eta lambda B^T C^T (C th' - c) + mu ph, computed with plain matrices.
    pub fn closed_form(&self, theta: &Tensor, phi: &Tensor, eta: f64, lambda: f64) -> Tensor {
        let at = self.a.transpose().unwrap();
        let grad_l = at
            .matmul(&self.a.matmul(theta).unwrap().add_scaled(&self.a0, -1.0).unwrap())
            .unwrap();
        let grad_p = theta.add_scaled(&self.b.matmul(phi).unwrap(), -1.0).unwrap();
        let theta_p = theta
            .add_scaled(&grad_l.add_scaled(&grad_p, lambda).unwrap(), -eta)
            .unwrap();
        let v = self
            .c
            .transpose()
            .unwrap()
            .matmul(&self.c.matmul(&theta_p).unwrap().add_scaled(&self.c0, -1.0).unwrap())
            .unwrap();
        self.b
            .transpose()
            .unwrap()
            .matmul(&v)
            .unwrap()
            .scaled(eta * lambda)
            .add_scaled(phi, self.mu)
            .unwrap()
    }
}

pub fn small_bench(seed: u64) -> Benchmark {
    let spec = BenchmarkSpec {
        n: 120,
        n_test: 200,
        ..BenchmarkSpec::default()
    };
    make_benchmark(&spec, seed).unwrap()
}

pub fn small_cfg(method: Method) -> MetaConfig {
    MetaConfig {
        method,
        epochs: 2,
        lr: 0.05,
        hidden: vec![16],
        feature_dim: 8,
        batch_size: 32,
        pseudo_batch_size: 16,
        val_batch_size: 16,
        frechet_samples: 64,
        probe_samples: 256,
        ..MetaConfig::default()
    }
}

/// An MLP problem of the same kind the trainer builds, with a perturbed finder.
pub struct MlpInstance {
    pub bench: Benchmark,
    pub arch: Architecture,
    pub cfg: MetaConfig,
    pub theta: Vec<Tensor>,
    pub phi: Vec<Tensor>,
    pub pseudo: PseudoDraw,
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl MlpInstance {
    pub fn new(seed: u64, width: usize) -> Self {
        let cfg = MetaConfig {
            hidden: vec![width],
            ..small_cfg(Method::Mgr)
        };
        Self::build(seed, cfg, 16, 12)
    }

    /// Default architecture widened to `width`, with full-size batches.
    pub fn training_scale(seed: u64, width: usize) -> Self {
        let cfg = MetaConfig {
            hidden: vec![width, width],
            ..MetaConfig::default()
        };
        let (b, p) = (cfg.batch_size, cfg.pseudo_batch_size);
        Self::build(seed, cfg, b, p)
    }

    fn build(seed: u64, cfg: MetaConfig, batch: usize, pseudo_batch: usize) -> Self {
        let bench = small_bench(seed);
        let arch = Architecture {
            input_dim: 2,
            hidden: cfg.hidden.clone(),
            feature_dim: cfg.feature_dim,
            classes: bench.spec.classes,
            aux_head: false,
        };
        let mut rng = RngStream::new(seed, "mlp-instance");
        let theta = MainModel::new(&arch, &mut rng).unwrap().params();
        let phi: Vec<Tensor> = Finder::new(FinderVariant::ResidualMlp, 3, &mut rng)
            .unwrap()
            .params()
            .iter()
            .map(|p| rng.normal_tensor(p.shape()).scaled(0.3))
            .collect();
        let pseudo = PseudoDraw {
            z: sample_prior(pseudo_batch, 3, &mut rng),
            y: (0..pseudo_batch).map(|_| rng.below(8)).collect(),
            transform: TransformBatch::sample(&TransformSpec::default(), pseudo_batch, 2, &mut rng).unwrap(),
            latent_noise: Tensor::zeros(&[pseudo_batch, 3]),
        };
        let idx: Vec<usize> = (0..batch).collect();
        let x = bench.train.x.select_rows(&idx);
        let y = idx.iter().map(|&i| bench.train.y[i]).collect();
        MlpInstance {
            bench,
            arch,
            cfg,
            theta,
            phi,
            pseudo,
            x,
            y,
        }
    }

    pub fn problem(&self) -> IterationProblem<'_> {
        IterationProblem::new(
            &self.cfg,
            &self.arch,
            &self.bench.generator,
            (&self.x, &self.y),
            &self.pseudo,
        )
        .with_val(&self.bench.val.x, &self.bench.val.y)
    }
}

pub fn step(eta: f64, lambda: f64) -> InnerStep {
    InnerStep {
        eta,
        lambda,
        eps_const: 0.01,
    }
}
