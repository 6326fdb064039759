//! One-step bilevel meta-gradients.
//!
//! For an inner objective `L(theta) + lambda P(theta, phi)` and an outer
//! objective `L_val(theta')` with `theta' = theta - eta grad_theta(L + lambda P)`,
//! the gradient with respect to `phi` is
//!
//! ```text
//! -eta lambda  d/dphi [ grad_theta P(theta, phi) . v ],   v = grad L_val(theta')
//! ```
//!
//! plus the gradient of an optional `phi`-only penalty. The finite-difference
//! mode replaces the mixed second derivative by
//! `(grad_phi P(theta + eps v) - grad_phi P(theta - eps v)) / (2 eps)` with
//! `eps = c / |v|`.

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Losses defining a one-step bilevel problem.
pub trait BilevelProblem {
    /// `L(theta)`: the part of the inner objective that does not involve `phi`.
    fn train_loss<'t>(&self, tape: &'t Tape, theta: &[Var<'t>]) -> Result<Var<'t>>;

    /// `P(theta, phi)`, unweighted.
    fn pseudo_loss<'t>(&self, tape: &'t Tape, theta: &[Var<'t>], phi: &[Var<'t>]) -> Result<Var<'t>>;

    /// `L_val(theta)`.
    fn val_loss<'t>(&self, tape: &'t Tape, theta: &[Var<'t>]) -> Result<Var<'t>>;

    /// Weighted penalty on `phi` alone, if any.
    fn penalty<'t>(&self, _tape: &'t Tape, _phi: &[Var<'t>]) -> Result<Option<Var<'t>>> {
        Ok(None)
    }
}

/// Step sizes and weights of the one-step approximation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerStep {
    pub eta: f64,
    pub lambda: f64,
    pub eps_const: f64,
}

/// Result of a meta-gradient computation.
#[derive(Clone, Debug)]
pub struct MetaGradient {
    pub grad: Vec<Tensor>,
    /// `L_val(theta')`.
    pub val_loss: f64,
    /// Finite-difference radius, when one was used.
    pub eps: Option<f64>,
}

fn leaves<'t>(tape: &'t Tape, ts: &[Tensor]) -> Vec<Var<'t>> {
    ts.iter().map(|t| tape.leaf(t.clone())).collect()
}

fn constants<'t>(tape: &'t Tape, ts: &[Tensor]) -> Vec<Var<'t>> {
    ts.iter().map(|t| tape.constant(t.clone())).collect()
}

fn inner_objective<'t, P: BilevelProblem + ?Sized>(
    problem: &P,
    tape: &'t Tape,
    theta: &[Var<'t>],
    phi: &[Var<'t>],
    lambda: f64,
) -> Result<Var<'t>> {
    let l = problem.train_loss(tape, theta)?;
    if lambda == 0.0 {
        return Ok(l);
    }
    l.add(problem.pseudo_loss(tape, theta, phi)?.scale(lambda)?)
}

/// Virtual step `theta' = theta - eta grad_theta(L + lambda P)`; `theta` is not touched.
pub fn inner_update<P: BilevelProblem + ?Sized>(
    problem: &P,
    theta: &[Tensor],
    phi: &[Tensor],
    eta: f64,
    lambda: f64,
) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let th = leaves(&tape, theta);
    let ph = constants(&tape, phi);
    let obj = inner_objective(problem, &tape, &th, &ph, lambda)?;
    let g = tape.grad(obj, &th)?;
    theta.iter().zip(&g).map(|(t, g)| t.add_scaled(g, -eta)).collect()
}

fn val_grad<P: BilevelProblem + ?Sized>(problem: &P, theta: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let th = leaves(&tape, theta);
    let loss = problem.val_loss(&tape, &th)?;
    let value = loss.item();
    Ok((value, tape.grad(loss, &th)?))
}

fn pseudo_phi_grad<P: BilevelProblem + ?Sized>(problem: &P, theta: &[Tensor], phi: &[Tensor]) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let th = constants(&tape, theta);
    let ph = leaves(&tape, phi);
    let p = problem.pseudo_loss(&tape, &th, &ph)?;
    tape.grad(p, &ph)
}

fn penalty_grad<P: BilevelProblem + ?Sized>(problem: &P, phi: &[Tensor]) -> Result<Option<Vec<Tensor>>> {
    let tape = Tape::new();
    let ph = leaves(&tape, phi);
    match problem.penalty(&tape, &ph)? {
        Some(p) => Ok(Some(tape.grad(p, &ph)?)),
        None => Ok(None),
    }
}

fn global_norm(ts: &[Tensor]) -> f64 {
    ts.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

fn shifted(theta: &[Tensor], v: &[Tensor], c: f64) -> Result<Vec<Tensor>> {
    theta.iter().zip(v).map(|(t, v)| t.add_scaled(v, c)).collect()
}

/// Finite-difference meta-gradient. Fails with [`Error::DegenerateEpsilon`]
/// when the validation gradient vanishes and the finite-difference term is needed.
pub fn meta_gradient_fd<P: BilevelProblem + ?Sized>(
    problem: &P,
    theta: &[Tensor],
    phi: &[Tensor],
    step: InnerStep,
) -> Result<MetaGradient> {
    let theta_prime = inner_update(problem, theta, phi, step.eta, step.lambda)?;
    let mut grad: Vec<Tensor> = phi.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut eps = None;
    let (val_loss, v) = val_grad(problem, &theta_prime)?;
    if step.lambda != 0.0 && step.eta != 0.0 {
        let norm = global_norm(&v);
        if norm < 1e-12 {
            return Err(Error::DegenerateEpsilon { norm });
        }
        let e = step.eps_const / norm;
        let plus = pseudo_phi_grad(problem, &shifted(theta, &v, e)?, phi)?;
        let minus = pseudo_phi_grad(problem, &shifted(theta, &v, -e)?, phi)?;
        let scale = -step.eta * step.lambda / (2.0 * e);
        for ((g, p), m) in grad.iter_mut().zip(&plus).zip(&minus) {
            *g = p.add_scaled(m, -1.0)?.scaled(scale);
        }
        eps = Some(e);
    }
    if let Some(pg) = penalty_grad(problem, phi)? {
        for (g, p) in grad.iter_mut().zip(&pg) {
            *g = g.add_scaled(p, 1.0)?;
        }
    }
    Ok(MetaGradient { grad, val_loss, eps })
}

/// Exact meta-gradient through the unrolled virtual step (second order).
pub fn meta_gradient_exact<P: BilevelProblem + ?Sized>(
    problem: &P,
    theta: &[Tensor],
    phi: &[Tensor],
    step: InnerStep,
) -> Result<MetaGradient> {
    let tape = Tape::new();
    let th = leaves(&tape, theta);
    let ph = leaves(&tape, phi);
    let obj = inner_objective(problem, &tape, &th, &ph, step.lambda)?;
    let g = tape.grad_graph(obj, &th)?;
    let theta_prime = th
        .iter()
        .zip(&g)
        .map(|(t, g)| t.sub(g.scale(step.eta)?))
        .collect::<Result<Vec<_>>>()?;
    let val = problem.val_loss(&tape, &theta_prime)?;
    let val_loss = val.item();
    let total = match problem.penalty(&tape, &ph)? {
        Some(p) => val.add(p)?,
        None => val,
    };
    let grad = tape.grad(total, &ph)?;
    Ok(MetaGradient {
        grad,
        val_loss,
        eps: None,
    })
}

/// Cosine similarity between two gradient lists.
pub fn cosine(a: &[Tensor], b: &[Tensor]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.dot(y)).sum();
    let na = global_norm(a);
    let nb = global_norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}
