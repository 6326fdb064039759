//! Training objectives: cross-entropy, generative augmentation, consistency
//! losses and the finder's KL penalty.

use serde::{Deserialize, Serialize};

use crate::augment::TransformBatch;
use crate::diffcore::{Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{LeakyGenerator, ModelVars};

/// Dissimilarity used by the SSL-style baseline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SslForm {
    /// KL(stop_grad(p(x)) || p(T(x))).
    #[default]
    Kl,
    /// Mean squared logit difference, summed over classes.
    SquaredLogits,
}

/// How the second batch statistic of the KL penalty is read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlForm {
    /// `-1/2 (1 + ln v - mu^2 - v)` with `v` the batch variance; this is the
    /// usual Gaussian KL to N(0, 1).
    #[default]
    Variance,
    /// Same expression with the batch standard deviation in place of `v`.
    StdDev,
}

/// A labelled batch bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'t, 'y> {
    pub x: Var<'t>,
    pub y: &'y [usize],
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(Error::InvalidLabel { label: c, classes });
        }
        t.set(i, c, 1.0);
    }
    Ok(t)
}

/// Mean cross-entropy of `(B, K)` logits against labels.
pub fn task_loss<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::shape(
            "task_loss",
            format!("logits {:?} for {} labels", shape, labels.len()),
        ));
    }
    let target = logits.tape().constant(one_hot(labels, shape[1])?);
    logits
        .log_softmax()?
        .mul(target)?
        .sum()?
        .scale(-1.0 / labels.len() as f64)
}

/// `L(theta) + lambda L_p(theta)` with cross-entropy on the synthetic batch.
/// A missing or empty synthetic batch contributes zero.
pub fn gda_objective<'t>(
    model: &ModelVars<'t>,
    real: Batch<'t, '_>,
    pseudo: Option<Batch<'t, '_>>,
    lambda: f64,
) -> Result<Var<'t>> {
    let base = task_loss(model.logits(real.x)?, real.y)?;
    match pseudo {
        Some(p) if !p.y.is_empty() => base.add(task_loss(model.logits(p.x)?, p.y)?.scale(lambda)?),
        _ => Ok(base),
    }
}

/// Batch mean of `|g(T(x_p)) - g(x_p)|^2`. Only the extractor is involved.
pub fn pcr_loss<'t>(model: &ModelVars<'t>, x_p: Var<'t>, transform: &TransformBatch) -> Result<Var<'t>> {
    let b = x_p.shape()[0];
    if b == 0 {
        return Ok(x_p.tape().scalar(0.0));
    }
    let strong = model.features(transform.apply(x_p)?)?;
    let clean = model.features(x_p)?;
    strong.sub(clean)?.sq_norm()?.scale(1.0 / b as f64)
}

/// Task loss on the main head plus `lambda` times the auxiliary-head loss on
/// synthetic samples.
pub fn multihead_loss<'t>(
    model: &ModelVars<'t>,
    real: Batch<'t, '_>,
    pseudo: Batch<'t, '_>,
    lambda: f64,
) -> Result<Var<'t>> {
    if model.aux_head.is_none() {
        return Err(Error::contract("multi-head loss needs a model with an auxiliary head"));
    }
    let base = task_loss(model.logits(real.x)?, real.y)?;
    if pseudo.y.is_empty() {
        return Ok(base);
    }
    base.add(task_loss(model.aux_logits(pseudo.x)?, pseudo.y)?.scale(lambda)?)
}

/// Consistency between predictions on `x_p` (detached) and on `T(x_p)`.
pub fn ssl_consistency_loss<'t>(
    model: &ModelVars<'t>,
    x_p: Var<'t>,
    transform: &TransformBatch,
    form: SslForm,
) -> Result<Var<'t>> {
    let b = x_p.shape()[0];
    if b == 0 {
        return Ok(x_p.tape().scalar(0.0));
    }
    let clean = model.logits(x_p)?.detach();
    let strong = model.logits(transform.apply(x_p)?)?;
    match form {
        SslForm::Kl => {
            let log_p = clean.log_softmax()?;
            let p = log_p.exp()?;
            let log_q = strong.log_softmax()?;
            p.mul(log_p.sub(log_q)?)?.sum()?.scale(1.0 / b as f64)
        }
        SslForm::SquaredLogits => strong.sub(clean)?.sq_norm()?.scale(1.0 / b as f64),
    }
}

/// KL penalty pulling the batch statistics of finder outputs towards N(0, 1),
/// averaged over latent coordinates.
pub fn kl_penalty<'t>(z_out: Var<'t>, form: KlForm) -> Result<Var<'t>> {
    let shape = z_out.shape();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::contract(format!(
            "KL penalty needs a batch of at least 2 latent rows, got {shape:?}"
        )));
    }
    let (b, l) = (shape[0], shape[1]);
    let inv_b = 1.0 / b as f64;
    let mean = z_out.sum_rows()?.scale(inv_b)?;
    let centered = z_out.sub(mean.expand_rows(b)?)?;
    let var = centered.mul(centered)?.sum_rows()?.scale(inv_b)?;
    let stat = match form {
        KlForm::Variance => var,
        KlForm::StdDev => var.ln()?.scale(0.5)?.exp()?,
    };
    // -1/2 (1 + ln s - mu^2 - s), averaged over coordinates
    let inner = stat.ln()?.sub(mean.mul(mean)?)?.sub(stat)?.add_scalar(1.0)?;
    inner.sum()?.scale(-0.5 / l as f64)
}

/// Mean squared feature distance between generations from `z` and `z + noise`.
pub fn latent_augment_loss<'t>(
    model: &ModelVars<'t>,
    generator: &LeakyGenerator,
    z: Var<'t>,
    labels: &[usize],
    noise: &Tensor,
) -> Result<Var<'t>> {
    let b = labels.len();
    if b == 0 {
        return Ok(z.tape().scalar(0.0));
    }
    let z_shift = z.add(z.tape().constant(noise.clone()))?;
    let a = model.features(generator.generate(z, labels)?)?;
    let s = model.features(generator.generate(z_shift, labels)?)?;
    s.sub(a)?.sq_norm()?.scale(1.0 / b as f64)
}
