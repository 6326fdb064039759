use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Relative floor of the error denominator in [`grad_check`].
pub const GRADIENT_FLOOR: f64 = 1e-4;

/// Compares tape gradients of a scalar function against central differences.
///
/// Returns the maximum over coordinates of `|ad - fd| / max(|ad|, |fd|, floor)`
/// where `floor` is [`GRADIENT_FLOOR`] times the largest numeric gradient
/// entry. Coordinates far below the gradient's own scale are thereby judged
/// against that scale, where central differences lose their relative precision.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), step)
}

/// Multi-input version of [`grad_check`]; the error is maximized over every
/// coordinate of every input.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&tape, &vars)?;
        tape.grad(out, &vars)?
    };
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let mut inputs = xs.to_vec();
    let mut numeric = Vec::with_capacity(xs.len());
    for k in 0..xs.len() {
        let mut g = Vec::with_capacity(xs[k].numel());
        for i in 0..xs[k].numel() {
            let orig = inputs[k].data()[i];
            inputs[k].data_mut()[i] = orig + step;
            let up = eval(&inputs)?;
            inputs[k].data_mut()[i] = orig - step;
            let down = eval(&inputs)?;
            inputs[k].data_mut()[i] = orig;
            g.push((up - down) / (2.0 * step));
        }
        numeric.push(g);
    }
    let scale = numeric.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (GRADIENT_FLOOR * scale).max(f64::MIN_POSITIVE);
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&ad, &fd) in a.data().iter().zip(n) {
            worst = worst.max((ad - fd).abs() / ad.abs().max(fd.abs()).max(floor));
        }
    }
    Ok(worst)
}
