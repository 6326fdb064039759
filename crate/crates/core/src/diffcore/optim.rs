use super::tensor::Tensor;
use crate::error::{Error, Result};

/// First-order optimizer updating a fixed list of parameter tensors in place.
pub trait Optimizer {
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()>;
    fn lr(&self) -> f64;
    fn set_lr(&mut self, lr: f64);
}

fn check_alignment(params: &[Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::contract(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::contract(format!(
                "parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    Ok(())
}

fn init_buffers(buf: &mut Vec<Tensor>, params: &[Tensor]) -> Result<()> {
    if buf.is_empty() {
        *buf = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    } else if buf.len() != params.len() || buf.iter().zip(params).any(|(b, p)| b.shape() != p.shape()) {
        return Err(Error::contract("optimizer state does not match the parameter list"));
    }
    Ok(())
}

/// Stochastic gradient descent with optional (Nesterov) momentum.
///
/// Uses the `v <- mu v + g` buffer convention, so a constant gradient `g`
/// moves the parameter by `lr g`, then `lr g (1 + mu)`, and so on.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, nesterov: bool) -> Self {
        Sgd {
            lr,
            momentum,
            nesterov,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        check_alignment(params, grads)?;
        init_buffers(&mut self.velocity, params)?;
        let (lr, mu) = (self.lr, self.momentum);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv + gv;
                let d = if self.nesterov { gv + mu * *vv } else { *vv };
                *pv -= lr * d;
            }
        }
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        check_alignment(params, grads)?;
        init_buffers(&mut self.m, params)?;
        init_buffers(&mut self.v, params)?;
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut());
            for (((pv, &gv), mv), vv) in it {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mh = *mv / c1;
                let vh = *vv / c2;
                *pv -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}
