//! Reverse-mode gradients, a Hessian-vector product through `grad_graph`, and
//! finite-difference checks of both.

use mgr::diffcore::{grad_check, RngStream, Tape, Tensor};
use mgr::Result;

fn main() -> Result<()> {
    let mut rng = RngStream::new(0, "autodiff-example");
    let w = rng.normal_tensor(&[3, 4]);
    let x = rng.normal_tensor(&[4, 1]);
    let v = rng.normal_tensor(&[4, 1]);

    // f(x) = sum(tanh(W x))
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let f = tape.constant(w.clone()).matmul(xv)?.tanh()?.sum()?;
    let g = tape.grad_graph(f, &[xv])?[0];
    println!("f(x)     = {:.6}", f.item());
    println!("grad f   = {:?}", g.value().data());

    // d/dx (grad f . v) is the Hessian-vector product H v
    let gv = g.mul(tape.constant(v.clone()))?.sum()?;
    let hv = tape.grad(gv, &[xv])?;
    println!("H v      = {:?}", hv[0].data());

    let first = grad_check(|t, x| t.constant(w.clone()).matmul(x)?.tanh()?.sum(), &x, 1e-6)?;

    // H v against a central difference of the gradient along v
    let grad_at = |x: &Tensor| -> Result<Tensor> {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let f = tape.constant(w.clone()).matmul(xv)?.tanh()?.sum()?;
        Ok(tape.grad(f, &[xv])?.remove(0))
    };
    let h = 1e-5;
    let fd = grad_at(&x.add_scaled(&v, h)?)?
        .add_scaled(&grad_at(&x.add_scaled(&v, -h)?)?, -1.0)?
        .scaled(0.5 / h);
    let second = fd.add_scaled(&hv[0], -1.0)?.norm() / hv[0].norm();
    println!("relative error: gradient {first:.1e}, Hessian-vector {second:.1e}");
    Ok(())
}
