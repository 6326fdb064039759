use std::time::Instant;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::config::{MetaConfig, MetaMode, Method, Selection};
use super::hyper::{meta_gradient_exact, meta_gradient_fd, BilevelProblem, InnerStep};
use super::problem::{IterationProblem, PseudoDraw, PseudoTerm};
use crate::augment::{latent_noise, TransformBatch};
use crate::bench::{frechet_distance, leakage_rate, Benchmark};
use crate::diffcore::{Adam, Optimizer, RngStream, Sgd, Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::{sample_prior, Architecture, Finder, FinderVariant, MainModel};
use crate::objectives::task_loss;

/// Instrumentation of the three updates an iteration may perform.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceEvent {
    /// A virtual classifier step was taken for the meta-gradient and discarded.
    VirtualUpdate,
    FinderUpdate,
    /// The finder step was skipped because the validation gradient vanished.
    FinderSkipped,
    ModelUpdate,
}

/// Metrics recorded at the end of an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    /// Fréchet distance between extractor features of synthetic samples (drawn
    /// through the finder) and of the training inputs.
    pub frechet: f64,
    /// Leakage rate of finder outputs on held-out prior draws.
    pub leak_rate: f64,
    /// As `frechet`, but for samples drawn straight from the prior.
    pub frechet_prior: f64,
    /// Leakage rate of the held-out prior draws themselves.
    pub leak_rate_prior: f64,
    pub lr: f64,
}

/// Epoch chosen as the run result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub epoch: usize,
    pub val_acc: f64,
    pub test_acc: f64,
}

/// Full trace and outcome of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub rows: Vec<EpochRow>,
    pub selected: Selected,
    pub final_test_acc: f64,
    pub meta_steps: usize,
    pub skipped_meta_steps: usize,
    pub wall_clock_secs: f64,
    /// Mean wall-clock of one finder update, when the method has one.
    pub mean_finder_step_secs: Option<f64>,
}

impl RunRecord {
    /// Mean validation loss over the first `fraction` of epochs (at least one).
    pub fn early_val_loss(&self, fraction: f64) -> f64 {
        let n = ((self.rows.len() as f64 * fraction).round() as usize).clamp(1, self.rows.len());
        self.rows[..n].iter().map(|r| r.val_loss).sum::<f64>() / n as f64
    }

    pub fn mean_frechet(&self) -> (f64, f64) {
        let n = self.rows.len() as f64;
        (
            self.rows.iter().map(|r| r.frechet).sum::<f64>() / n,
            self.rows.iter().map(|r| r.frechet_prior).sum::<f64>() / n,
        )
    }

    pub fn final_row(&self) -> &EpochRow {
        self.rows.last().expect("at least one epoch")
    }
}

/// Parameters at a given epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub model: MainModel,
    pub finder: Finder,
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub record: RunRecord,
    pub best: Snapshot,
    pub last: Snapshot,
    /// Parameters at the end of the epoch before each learning-rate drop.
    pub milestones: Vec<Snapshot>,
}

struct Streams {
    shuffle: RngStream,
    latent: RngStream,
    transform: RngStream,
    latent_noise: RngStream,
    val: RngStream,
}

/// One real batch plus the synthetic draw shared by the finder and
/// classifier updates of an iteration.
#[derive(Clone, Debug)]
pub struct Iteration {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub pseudo: PseudoDraw,
}

/// Owns the state of one training run.
pub struct Trainer<'b> {
    bench: &'b Benchmark,
    cfg: MetaConfig,
    seed: u64,
    arch: Architecture,
    model: MainModel,
    finder: Finder,
    sgd: Sgd,
    adam: Adam,
    streams: Streams,
    val_order: Vec<usize>,
    val_cursor: usize,
    epoch: usize,
    trace: Option<Vec<TraceEvent>>,
    meta_steps: usize,
    skipped: usize,
    finder_secs: f64,
    probe_z: Tensor,
    frechet_z: Tensor,
    frechet_y: Vec<usize>,
}

impl<'b> Trainer<'b> {
    pub fn new(bench: &'b Benchmark, cfg: MetaConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = RngStream::new(seed, "run");
        let arch = Architecture {
            input_dim: bench.spec.dim,
            hidden: cfg.hidden.clone(),
            feature_dim: cfg.feature_dim,
            classes: bench.spec.classes,
            aux_head: cfg.method.needs_aux_head(),
        };
        let model = MainModel::new(&arch, &mut root.child("init/model"))?;
        let finder = Finder::new(
            cfg.effective_finder(),
            bench.spec.latent_dim,
            &mut root.child("init/finder"),
        )?;
        let mut probe = root.child("probe");
        let probe_z = sample_prior(
            cfg.probe_samples.max(1),
            bench.spec.latent_dim,
            &mut probe.child("leak"),
        );
        let mut fr = probe.child("frechet");
        let frechet_z = sample_prior(cfg.frechet_samples, bench.spec.latent_dim, &mut fr);
        let frechet_y = (0..cfg.frechet_samples).map(|_| fr.below(bench.spec.classes)).collect();
        let _ = &mut probe;
        let sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.nesterov);
        let adam = Adam::new(cfg.finder_lr);
        Ok(Trainer {
            bench,
            seed,
            arch,
            model,
            finder,
            sgd,
            adam,
            streams: Streams {
                shuffle: root.child("shuffle"),
                latent: root.child("latent"),
                transform: root.child("transform"),
                latent_noise: root.child("latent-noise"),
                val: root.child("val"),
            },
            val_order: Vec::new(),
            val_cursor: 0,
            epoch: 0,
            trace: None,
            meta_steps: 0,
            skipped: 0,
            finder_secs: 0.0,
            probe_z,
            frechet_z,
            frechet_y,
            cfg,
        })
    }

    /// Starts recording [`TraceEvent`]s.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    /// Returns and clears the recorded events.
    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn note(&mut self, e: TraceEvent) {
        if let Some(t) = &mut self.trace {
            t.push(e);
        }
    }

    pub fn config(&self) -> &MetaConfig {
        &self.cfg
    }

    pub fn model(&self) -> &MainModel {
        &self.model
    }

    pub fn finder(&self) -> &Finder {
        &self.finder
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn skipped_meta_steps(&self) -> usize {
        self.skipped
    }

    /// Current classifier learning rate.
    pub fn lr(&self) -> f64 {
        self.sgd.lr()
    }

    /// Step size of the virtual update.
    pub fn inner_lr(&self) -> f64 {
        self.cfg.inner_lr.unwrap_or(self.sgd.lr())
    }

    fn inner_step(&self) -> InnerStep {
        InnerStep {
            eta: self.inner_lr(),
            lambda: self.cfg.lambda,
            eps_const: self.cfg.eps_const,
        }
    }

    /// Draws latent codes, labels and augmentation constants for one iteration.
    /// Every method consumes the same streams in the same order.
    pub fn draw_iteration(&mut self, idx: &[usize]) -> Result<Iteration> {
        let bp = self.cfg.pseudo_batch_size;
        let (k, l, d) = (self.bench.spec.classes, self.bench.spec.latent_dim, self.bench.spec.dim);
        let z = sample_prior(bp, l, &mut self.streams.latent);
        let y = (0..bp).map(|_| self.streams.latent.below(k)).collect();
        let transform = TransformBatch::sample(&self.cfg.transform, bp, d, &mut self.streams.transform)?;
        let latent_noise = latent_noise(&[bp, l], &mut self.streams.latent_noise);
        Ok(Iteration {
            x: self.bench.train.x.select_rows(idx),
            y: idx.iter().map(|&i| self.bench.train.y[i]).collect(),
            pseudo: PseudoDraw {
                z,
                y,
                transform,
                latent_noise,
            },
        })
    }

    fn next_val_batch(&mut self) -> (Tensor, Vec<usize>) {
        let n = self.bench.val.len();
        let b = self.cfg.val_batch_size.min(n);
        let mut idx = Vec::with_capacity(b);
        while idx.len() < b {
            if self.val_cursor >= self.val_order.len() {
                self.val_order = self.streams.val.permutation(n);
                self.val_cursor = 0;
            }
            idx.push(self.val_order[self.val_cursor]);
            self.val_cursor += 1;
        }
        (
            self.bench.val.x.select_rows(&idx),
            idx.iter().map(|&i| self.bench.val.y[i]).collect(),
        )
    }

    /// Synthetic inputs for an iteration under the current finder.
    pub fn synthetic(&self, it: &Iteration) -> Result<Tensor> {
        let found = self.finder.eval(&it.pseudo.z)?;
        self.bench.generator.generate_eval(&found, &it.pseudo.y)
    }

    /// Finder update: meta-gradient for MPS methods, loss ascent for the
    /// hard-example variants, nothing otherwise. Returns whether phi changed.
    pub fn finder_step(&mut self, it: &Iteration) -> Result<bool> {
        if !self.cfg.method.has_finder() || self.finder.params().is_empty() {
            return Ok(false);
        }
        let start = Instant::now();
        let theta = self.model.params();
        let phi = self.finder.params().to_vec();
        let grad = if self.cfg.method.uses_mps() {
            let (vx, vy) = self.next_val_batch();
            let problem =
                IterationProblem::new(&self.cfg, &self.arch, &self.bench.generator, (&it.x, &it.y), &it.pseudo)
                    .with_val(&vx, &vy);
            let step = self.inner_step();
            let res = match self.cfg.meta_mode {
                MetaMode::Fd => meta_gradient_fd(&problem, &theta, &phi, step),
                MetaMode::Exact => meta_gradient_exact(&problem, &theta, &phi, step),
            };
            self.note(TraceEvent::VirtualUpdate);
            match res {
                Ok(m) => m.grad,
                Err(Error::DegenerateEpsilon { norm }) => {
                    warn!("skipping finder step: validation gradient norm {norm:e}");
                    self.skipped += 1;
                    self.note(TraceEvent::FinderSkipped);
                    return Ok(false);
                }
                Err(e) => return Err(e),
            }
        } else {
            self.hard_example_grad(it, &theta, &phi)?
        };
        self.adam.step(self.finder.params_mut(), &grad)?;
        self.meta_steps += 1;
        self.finder_secs += start.elapsed().as_secs_f64();
        self.note(TraceEvent::FinderUpdate);
        Ok(true)
    }

    /// Gradient for one ascent step on the synthetic-sample loss (cross-entropy
    /// or consistency), with the KL penalty still descended.
    fn hard_example_grad(&self, it: &Iteration, theta: &[Tensor], phi: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut problem =
            IterationProblem::new(&self.cfg, &self.arch, &self.bench.generator, (&it.x, &it.y), &it.pseudo);
        problem.term = match self.cfg.method {
            Method::FHardCe => PseudoTerm::CrossEntropy,
            _ => PseudoTerm::Pcr,
        };
        hard_example_gradient(&problem, theta, phi)
    }

    /// Classifier update on `L + lambda P` with the synthetic batch regenerated
    /// from the current finder. Returns the objective value.
    pub fn model_step(&mut self, it: &Iteration) -> Result<f64> {
        let problem = IterationProblem::new(&self.cfg, &self.arch, &self.bench.generator, (&it.x, &it.y), &it.pseudo);
        let tape = Tape::new();
        let theta = self.model.bind(&tape, true).flat();
        let phi = self.finder.bind(&tape, false);
        let obj = problem.objective(&tape, &theta, &phi, self.cfg.lambda)?;
        let value = obj.item();
        let grads = tape.grad(obj, &theta)?;
        let mut params = self.model.params();
        self.sgd.step(&mut params, &grads)?;
        self.model.set_params(params)?;
        self.note(TraceEvent::ModelUpdate);
        Ok(value)
    }

    /// One outer iteration on the given training indices.
    pub fn step(&mut self, idx: &[usize]) -> Result<f64> {
        let it = self.draw_iteration(idx)?;
        self.finder_step(&it)?;
        self.model_step(&it)
    }

    /// One pass over the training split. Returns the mean objective.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let lr = self.cfg.lr_at(self.epoch);
        self.sgd.set_lr(lr);
        let n = self.bench.train.len();
        let order = self.streams.shuffle.permutation(n);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            total += self.step(chunk)?;
            batches += 1;
        }
        self.epoch += 1;
        Ok(total / batches as f64)
    }

    /// Evaluates the current parameters.
    pub fn evaluate(&self, train_loss: f64) -> Result<EpochRow> {
        let bench = self.bench;
        let val_loss = {
            let tape = Tape::new();
            let m = self.model.bind(&tape, false);
            task_loss(m.logits(tape.constant(bench.val.x.clone()))?, &bench.val.y)?.item()
        };
        let val_acc = self.model.accuracy(&bench.val.x, &bench.val.y)?;
        let test_acc = self.model.accuracy(&bench.test.x, &bench.test.y)?;
        let real_f = self.model.features(&bench.train.x)?;
        let found = self.finder.eval(&self.frechet_z)?;
        let synth = bench.generator.generate_eval(&found, &self.frechet_y)?;
        let frechet = frechet_distance(&self.model.features(&synth)?, &real_f)?;
        let frechet_prior = if self.finder.variant() == FinderVariant::Identity {
            frechet
        } else {
            let prior = bench.generator.generate_eval(&self.frechet_z, &self.frechet_y)?;
            frechet_distance(&self.model.features(&prior)?, &real_f)?
        };
        let leak_rate = leakage_rate(&self.finder.eval(&self.probe_z)?, &bench.generator);
        let leak_rate_prior = leakage_rate(&self.probe_z, &bench.generator);
        Ok(EpochRow {
            epoch: self.epoch,
            train_loss,
            val_loss,
            val_acc,
            test_acc,
            frechet,
            leak_rate,
            frechet_prior,
            leak_rate_prior,
            lr: self.sgd.lr(),
        })
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            epoch: self.epoch,
            model: self.model.clone(),
            finder: self.finder.clone(),
        }
    }

    /// Runs all epochs and selects the reported model.
    pub fn train(mut self) -> Result<RunOutput> {
        let start = Instant::now();
        let milestones = self.cfg.milestone_epochs();
        let mut rows = Vec::with_capacity(self.cfg.epochs);
        let mut best: Option<(f64, Snapshot)> = None;
        let mut saved = Vec::new();
        while self.epoch < self.cfg.epochs {
            let train_loss = self.run_epoch()?;
            let row = self.evaluate(train_loss)?;
            debug!(
                "{} seed {} epoch {}: train {:.4} val {:.4} acc {:.4}/{:.4} leak {:.3}",
                self.cfg.method,
                self.seed,
                row.epoch,
                row.train_loss,
                row.val_loss,
                row.val_acc,
                row.test_acc,
                row.leak_rate
            );
            if best.as_ref().is_none_or(|(acc, _)| row.val_acc >= *acc) {
                best = Some((row.val_acc, self.snapshot()));
            }
            if milestones.contains(&self.epoch) {
                saved.push(self.snapshot());
            }
            rows.push(row);
        }
        let best = best.expect("at least one epoch").1;
        let last = self.snapshot();
        let chosen = match self.cfg.selection {
            Selection::BestVal => &rows[best.epoch - 1],
            Selection::Final => rows.last().unwrap(),
        };
        let selected = Selected {
            epoch: chosen.epoch,
            val_acc: chosen.val_acc,
            test_acc: chosen.test_acc,
        };
        let final_test_acc = rows.last().unwrap().test_acc;
        let record = RunRecord {
            method: self.cfg.method,
            seed: self.seed,
            selected,
            final_test_acc,
            meta_steps: self.meta_steps,
            skipped_meta_steps: self.skipped,
            wall_clock_secs: start.elapsed().as_secs_f64(),
            mean_finder_step_secs: (self.meta_steps > 0).then(|| self.finder_secs / self.meta_steps as f64),
            rows,
        };
        Ok(RunOutput {
            record,
            best,
            last,
            milestones: saved,
        })
    }
}

/// Gradient for one ascent step on `P(theta, phi)` plus descent on the penalty.
pub fn hard_example_gradient<P: BilevelProblem + ?Sized>(
    problem: &P,
    theta: &[Tensor],
    phi: &[Tensor],
) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let th: Vec<_> = theta.iter().map(|t| tape.constant(t.clone())).collect();
    let ph: Vec<_> = phi.iter().map(|t| tape.leaf(t.clone())).collect();
    let mut obj = problem.pseudo_loss(&tape, &th, &ph)?.neg()?;
    if let Some(p) = problem.penalty(&tape, &ph)? {
        obj = obj.add(p)?;
    }
    tape.grad(obj, &ph)
}

/// Trains `cfg.method` on `bench` with the given seed.
pub fn train(bench: &Benchmark, cfg: &MetaConfig, seed: u64) -> Result<RunOutput> {
    Trainer::new(bench, cfg.clone(), seed)?.train()
}
