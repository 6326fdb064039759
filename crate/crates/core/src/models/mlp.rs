use crate::diffcore::{RngStream, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Negative-side slope of every leaky-ReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Weight `(fan_in, fan_out)` and bias `(1, fan_out)` drawn uniformly from
/// `±1/sqrt(fan_in)`.
pub fn dense_init(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> [Tensor; 2] {
    let bound = 1.0 / (fan_in as f64).sqrt();
    [
        rng.uniform_tensor(&[fan_in, fan_out], -bound, bound),
        rng.uniform_tensor(&[1, fan_out], -bound, bound),
    ]
}

/// Stack of affine layers with leaky-ReLU between them.
///
/// Parameters are stored flat as `[w0, b0, w1, b1, ...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    activate_last: bool,
    params: Vec<Tensor>,
}

impl Mlp {
    pub fn new(sizes: &[usize], activate_last: bool, rng: &mut RngStream) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::config(format!("invalid layer sizes {sizes:?}")));
        }
        let params = sizes.windows(2).flat_map(|w| dense_init(w[0], w[1], rng)).collect();
        Ok(Mlp {
            sizes: sizes.to_vec(),
            activate_last,
            params,
        })
    }

    pub fn zeros(sizes: &[usize], activate_last: bool) -> Self {
        let params = sizes
            .windows(2)
            .flat_map(|w| [Tensor::zeros(&[w[0], w[1]]), Tensor::zeros(&[1, w[1]])])
            .collect();
        Mlp {
            sizes: sizes.to_vec(),
            activate_last,
            params,
        }
    }

    pub fn from_params(sizes: &[usize], activate_last: bool, params: Vec<Tensor>) -> Result<Self> {
        let expected: Vec<Vec<usize>> = sizes
            .windows(2)
            .flat_map(|w| [vec![w[0], w[1]], vec![1, w[1]]])
            .collect();
        let got: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
        if expected != got {
            return Err(Error::shape("mlp", format!("expected {expected:?}, got {got:?}")));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            activate_last,
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn activate_last(&self) -> bool {
        self.activate_last
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Zeros the last affine layer.
    pub fn zero_last_layer(&mut self) {
        let n = self.params.len();
        for p in &mut self.params[n - 2..] {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// Forward pass with externally supplied parameter variables.
    pub fn forward<'t>(params: &[Var<'t>], x: Var<'t>, activate_last: bool) -> Result<Var<'t>> {
        let layers = params.len() / 2;
        let mut h = x;
        for (i, wb) in params.chunks(2).enumerate() {
            let in_dim = wb[0].shape()[0];
            if h.shape().get(1) != Some(&in_dim) {
                return Err(Error::shape(
                    "dense",
                    format!("layer {i} expects {in_dim} inputs, got {:?}", h.shape()),
                ));
            }
            h = h.matmul(wb[0])?.add_row(wb[1])?;
            if i + 1 < layers || activate_last {
                h = h.leaky_relu(LEAKY_SLOPE)?;
            }
        }
        Ok(h)
    }

    /// Forward pass on plain tensors.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        Ok(Self::forward(&params, tape.constant(x.clone()), self.activate_last)?.value())
    }
}
