//! Strong stochastic transformation for point data and latent perturbation.

use serde::{Deserialize, Serialize};

use crate::diffcore::{concat_cols, RngStream, Tensor, Var};
use crate::error::{Error, Result};

/// Variance of the latent perturbation noise.
pub const LATENT_NOISE_VARIANCE: f64 = 1e-3;

/// Parameters of the strong transformation: each sample gets `ops_per_sample`
/// distinct operations out of {rotation, isotropic scaling, additive noise}.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct TransformSpec {
    /// Angles are drawn from `[-rotation_max, rotation_max]` radians.
    pub rotation_max: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub noise_std: f64,
    pub ops_per_sample: usize,
}

impl Default for TransformSpec {
    fn default() -> Self {
        TransformSpec {
            rotation_max: 0.5,
            scale_min: 0.8,
            scale_max: 1.2,
            noise_std: 0.06,
            ops_per_sample: 2,
        }
    }
}

impl TransformSpec {
    pub fn identity() -> Self {
        TransformSpec {
            rotation_max: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            noise_std: 0.0,
            ops_per_sample: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.rotation_max, self.scale_min, self.scale_max, self.noise_std]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("transform parameters must be finite"));
        }
        if self.rotation_max < 0.0 || self.noise_std < 0.0 {
            return Err(Error::config(
                "transform rotation-max and noise-std must be non-negative",
            ));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::config(format!(
                "transform scale range ({}, {}) must be positive and ordered",
                self.scale_min, self.scale_max
            )));
        }
        if !(1..=3).contains(&self.ops_per_sample) {
            return Err(Error::config(format!(
                "ops-per-sample must be 1, 2 or 3, got {}",
                self.ops_per_sample
            )));
        }
        Ok(())
    }
}

/// One realized transformation for a batch: `x' = x * a + swap(x) * b + noise`
/// where `swap` exchanges the first two coordinates. The draws are constants,
/// so the map is affine in `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformBatch {
    a: Tensor,
    b: Tensor,
    noise: Tensor,
}

impl TransformBatch {
    pub fn sample(spec: &TransformSpec, batch: usize, dim: usize, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let mut a = Tensor::ones(&[batch, dim]);
        let mut b = Tensor::zeros(&[batch, dim]);
        let mut noise = Tensor::zeros(&[batch, dim]);
        for i in 0..batch {
            let mut ops = [0usize, 1, 2];
            rng.shuffle(&mut ops);
            let chosen = &ops[..spec.ops_per_sample];
            let angle = rng.uniform(-spec.rotation_max, spec.rotation_max);
            let scale = rng.uniform(spec.scale_min, spec.scale_max);
            let mut eps = vec![0.0; dim];
            for e in eps.iter_mut() {
                *e = spec.noise_std * rng.normal();
            }
            let s = if chosen.contains(&1) { scale } else { 1.0 };
            for j in 0..dim {
                a.set(i, j, s);
            }
            if chosen.contains(&0) && dim >= 2 {
                let (c, sn) = (angle.cos(), angle.sin());
                a.set(i, 0, s * c);
                a.set(i, 1, s * c);
                b.set(i, 0, -s * sn);
                b.set(i, 1, s * sn);
            }
            if chosen.contains(&2) {
                for (j, e) in eps.into_iter().enumerate() {
                    noise.set(i, j, e);
                }
            }
        }
        Ok(TransformBatch { a, b, noise })
    }

    pub fn identity(batch: usize, dim: usize) -> Self {
        TransformBatch {
            a: Tensor::ones(&[batch, dim]),
            b: Tensor::zeros(&[batch, dim]),
            noise: Tensor::zeros(&[batch, dim]),
        }
    }

    pub fn batch(&self) -> usize {
        self.a.rows()
    }

    pub fn dim(&self) -> usize {
        self.a.cols()
    }

    /// Linear part for sample `i` as a row-major `dim x dim` matrix, so that
    /// `x'_i = J x_i + noise_i`.
    pub fn jacobian(&self, i: usize) -> Tensor {
        let d = self.dim();
        let mut j = Tensor::zeros(&[d, d]);
        for k in 0..d {
            j.set(k, k, self.a.at(i, k));
        }
        if d >= 2 {
            j.set(0, 1, self.b.at(i, 0));
            j.set(1, 0, self.b.at(i, 1));
        }
        j
    }

    pub fn apply<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        if x.shape() != self.a.shape() {
            return Err(Error::shape(
                "transform",
                format!("input {:?} for transform drawn as {:?}", x.shape(), self.a.shape()),
            ));
        }
        let tape = x.tape();
        let d = self.dim();
        let scaled = x.mul(tape.constant(self.a.clone()))?;
        let mixed = if d >= 2 {
            let mut parts = vec![x.slice_cols(1, 2)?, x.slice_cols(0, 1)?];
            if d > 2 {
                parts.push(x.slice_cols(2, d)?);
            }
            let swapped = concat_cols(&parts)?;
            scaled.add(swapped.mul(tape.constant(self.b.clone()))?)?
        } else {
            scaled
        };
        mixed.add(tape.constant(self.noise.clone()))
    }

    pub fn apply_eval(&self, x: &Tensor) -> Result<Tensor> {
        let tape = crate::diffcore::Tape::new();
        Ok(self.apply(tape.constant(x.clone()))?.value())
    }
}

/// Gaussian noise with variance [`LATENT_NOISE_VARIANCE`] per coordinate.
pub fn latent_noise(shape: &[usize], rng: &mut RngStream) -> Tensor {
    rng.normal_tensor(shape).scaled(LATENT_NOISE_VARIANCE.sqrt())
}

/// `z + s` with `s` drawn from [`latent_noise`].
pub fn latent_perturb(z: &Tensor, rng: &mut RngStream) -> Tensor {
    let s = latent_noise(z.shape(), rng);
    z.add_scaled(&s, 1.0).expect("same shape")
}
