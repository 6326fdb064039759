//! Quick invariant suite behind the `check` verb.

use std::time::Instant;

use super::checkpoint::Checkpoint;
use super::runner::metrics_csv;
use crate::augment::{TransformBatch, TransformSpec};
use crate::bench::{frechet_distance, make_benchmark, BenchmarkSpec};
use crate::diffcore::{grad_check_many, RngStream, Tape, Tensor};
use crate::error::Result;
use crate::metalearn::{
    cosine, meta_gradient_exact, meta_gradient_fd, train, InnerStep, IterationProblem, MetaConfig, Method, PseudoDraw,
};
use crate::models::{sample_prior, Architecture, Finder, FinderVariant, MainModel, ModelVars};
use crate::objectives::{kl_penalty, pcr_loss, task_loss, KlForm};

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub secs: f64,
}

fn tiny_arch(aux: bool) -> Architecture {
    Architecture {
        input_dim: 2,
        hidden: vec![6],
        feature_dim: 4,
        classes: 3,
        aux_head: aux,
    }
}

fn gradients() -> Result<(bool, String)> {
    let arch = tiny_arch(false);
    let mut rng = RngStream::new(7, "check/grad");
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let model = MainModel::new(&arch, &mut rng)?;
        let x = rng.normal_tensor(&[5, 2]);
        let y: Vec<usize> = (0..5).map(|_| rng.below(3)).collect();
        let t = TransformBatch::sample(&TransformSpec::default(), 5, 2, &mut rng)?;
        let mut inputs = model.params();
        inputs.push(x);
        let n = inputs.len() - 1;
        let task = grad_check_many(
            |_, v| {
                let m = ModelVars::from_flat(&arch, v[..n].to_vec())?;
                task_loss(m.logits(v[n])?, &y)
            },
            &inputs,
            1e-6,
        )?;
        let pcr = grad_check_many(
            |_, v| {
                let m = ModelVars::from_flat(&arch, v[..n].to_vec())?;
                pcr_loss(&m, v[n], &t)
            },
            &inputs,
            1e-6,
        )?;
        let z = rng.normal_tensor(&[6, 3]);
        let kl = grad_check_many(|_, v| kl_penalty(v[0], KlForm::Variance), &[z], 1e-6)?;
        worst = worst.max(task).max(pcr).max(kl);
    }
    Ok((worst < 1e-4, format!("max relative error {worst:.2e}")))
}

fn head_isolation() -> Result<(bool, String)> {
    let arch = tiny_arch(false);
    let mut rng = RngStream::new(11, "check/pcr");
    let model = MainModel::new(&arch, &mut rng)?;
    let x = rng.normal_tensor(&[8, 2]);
    let t = TransformBatch::sample(&TransformSpec::default(), 8, 2, &mut rng)?;
    let tape = Tape::new();
    let m = model.bind(&tape, true);
    let head = m.head.clone();
    let loss = pcr_loss(&m, tape.constant(x), &t)?;
    let grads = tape.grad(loss, &head)?;
    let zero = grads.iter().all(|g| g.data().iter().all(|v| v.to_bits() == 0));
    Ok((zero, "head gradient of the consistency loss".into()))
}

fn hypergradient() -> Result<(bool, String)> {
    let spec = BenchmarkSpec {
        n: 60,
        n_test: 20,
        ..BenchmarkSpec::default()
    };
    let bench = make_benchmark(&spec, 3)?;
    let cfg = MetaConfig {
        method: Method::Mgr,
        hidden: vec![16],
        feature_dim: 8,
        inner_lr: Some(0.1),
        ..MetaConfig::default()
    };
    let arch = Architecture {
        input_dim: 2,
        hidden: cfg.hidden.clone(),
        feature_dim: cfg.feature_dim,
        classes: spec.classes,
        aux_head: false,
    };
    let mut rng = RngStream::new(3, "check/hyper");
    let model = MainModel::new(&arch, &mut rng)?;
    let mut finder = Finder::new(FinderVariant::ResidualMlp, spec.latent_dim, &mut rng)?;
    for p in finder.params_mut() {
        *p = rng.normal_tensor(p.shape()).scaled(0.3);
    }
    let pseudo = PseudoDraw {
        z: sample_prior(16, spec.latent_dim, &mut rng),
        y: (0..16).map(|_| rng.below(spec.classes)).collect(),
        transform: TransformBatch::sample(&cfg.transform, 16, 2, &mut rng)?,
        latent_noise: Tensor::zeros(&[16, spec.latent_dim]),
    };
    let idx: Vec<usize> = (0..16).collect();
    let (x, y) = (
        bench.train.x.select_rows(&idx),
        idx.iter().map(|&i| bench.train.y[i]).collect::<Vec<_>>(),
    );
    let problem =
        IterationProblem::new(&cfg, &arch, &bench.generator, (&x, &y), &pseudo).with_val(&bench.val.x, &bench.val.y);
    let step = InnerStep {
        eta: 0.1,
        lambda: 1.0,
        eps_const: cfg.eps_const,
    };
    let theta = model.params();
    let fd = meta_gradient_fd(&problem, &theta, finder.params(), step)?;
    let exact = meta_gradient_exact(&problem, &theta, finder.params(), step)?;
    let c = cosine(&fd.grad, &exact.grad);
    Ok((c >= 0.99, format!("cosine(fd, exact) = {c:.5}")))
}

fn kl_identity() -> Result<(bool, String)> {
    let tape = Tape::new();
    let standard = tape.constant(Tensor::from_rows(&[vec![-1.0, 1.0], vec![1.0, -1.0]])?);
    let shifted = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 2.0]])?);
    let a = kl_penalty(standard, KlForm::Variance)?.item();
    let b = kl_penalty(shifted, KlForm::Variance)?.item();
    Ok((
        a == 0.0 && (b - 0.5).abs() < 1e-12,
        format!("KL(0,1) = {a}, KL(1,1) = {b}"),
    ))
}

fn frechet() -> Result<(bool, String)> {
    let mut rng = RngStream::new(5, "check/frechet");
    let a = rng.normal_tensor(&[200, 3]);
    let b = rng.normal_tensor(&[150, 3]).scaled(1.5);
    let ab = frechet_distance(&a, &b)?;
    let ba = frechet_distance(&b, &a)?;
    let aa = frechet_distance(&a, &a)?;
    Ok((
        (ab - ba).abs() < 1e-8 && aa < 1e-8,
        format!("d(a,b) = {ab:.6}, d(b,a) = {ba:.6}, d(a,a) = {aa:.1e}"),
    ))
}

fn determinism_and_checkpoint() -> Result<(bool, String)> {
    let spec = BenchmarkSpec {
        n: 80,
        n_test: 100,
        ..BenchmarkSpec::default()
    };
    let bench = make_benchmark(&spec, 1)?;
    let cfg = MetaConfig {
        method: Method::Mgr,
        epochs: 2,
        hidden: vec![16],
        feature_dim: 8,
        probe_samples: 200,
        frechet_samples: 64,
        ..MetaConfig::default()
    };
    let a = train(&bench, &cfg, 9)?;
    let b = train(&bench, &cfg, 9)?;
    let same = metrics_csv(&a.record) == metrics_csv(&b.record);
    let ck = Checkpoint::new(&a.last, &bench.generator, &spec, &cfg, 9);
    let back = Checkpoint::from_bytes(&ck.to_bytes()?)?;
    let round = back.model == a.last.model && back.finder == a.last.finder && back.generator == bench.generator;
    Ok((
        same && round,
        format!("identical metrics: {same}, checkpoint round trip: {round}"),
    ))
}

type Check = (&'static str, fn() -> Result<(bool, String)>);

/// Runs every check; failures of the checks themselves count as failed checks.
pub fn run_checks() -> Vec<CheckOutcome> {
    let checks: [Check; 6] = [
        ("loss gradients match finite differences", gradients),
        ("consistency loss leaves the head untouched", head_isolation),
        ("finite-difference meta-gradient tracks the exact one", hypergradient),
        ("KL penalty identities", kl_identity),
        ("Fréchet distance symmetry and identity", frechet),
        (
            "same seed gives identical runs; checkpoints round-trip",
            determinism_and_checkpoint,
        ),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let (passed, detail) = match f() {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckOutcome {
                name,
                passed,
                detail,
                secs: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}
