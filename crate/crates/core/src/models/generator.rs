use statrs::distribution::{ContinuousCDF, Normal};

use crate::diffcore::{RngStream, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Threshold used when the leakage rate is zero.
pub const TAU_CAP: f64 = 8.0;

/// Gate threshold so that a standard-normal `z1` exceeds it with probability `rho`.
pub fn tau_for_rate(rho: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::config(format!("leakage rate must lie in [0, 1), got {rho}")));
    }
    if rho == 0.0 {
        return Ok(TAU_CAP);
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(n.inverse_cdf(1.0 - rho).min(TAU_CAP))
}

/// `n` draws from the standard-normal latent prior.
pub fn sample_prior(n: usize, latent_dim: usize, rng: &mut RngStream) -> Tensor {
    rng.normal_tensor(&[n, latent_dim])
}

/// Analytic class-conditional generator with a latent-controlled leakage gate.
///
/// For label `y`, the sample interpolates between the class-`y` mode and the
/// mode of the next class `(y + 1) mod K`:
///
/// ```text
/// w   = sigmoid(alpha * (z[0] - tau))
/// x_p = (1 - w) (mu_y + s P_y z[1..]) + w (mu_{y+1} + s P_{y+1} z[1..])
/// ```
///
/// Each `P_c` has orthonormal columns, so with `w = 0` the samples of class `c`
/// are distributed like an isotropic Gaussian blob of standard deviation `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct LeakyGenerator {
    /// `(K, d)`: one mode per class.
    modes: Tensor,
    spread: f64,
    tau: f64,
    alpha: f64,
    latent_dim: usize,
    /// Per class, a `(latent_dim - 1, d)` projection.
    projections: Vec<Tensor>,
}

impl LeakyGenerator {
    pub fn new(
        modes: Tensor,
        spread: f64,
        tau: f64,
        alpha: f64,
        latent_dim: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if !modes.is_matrix() || modes.rows() < 2 {
            return Err(Error::config("generator needs a (K, d) mode matrix with K >= 2"));
        }
        let d = modes.cols();
        if latent_dim < d + 1 {
            return Err(Error::config(format!(
                "latent dimension {latent_dim} too small for data dimension {d}; need at least {}",
                d + 1
            )));
        }
        if !(spread >= 0.0 && alpha > 0.0 && tau.is_finite()) {
            return Err(Error::config("generator needs spread >= 0, alpha > 0 and finite tau"));
        }
        let projections = (0..modes.rows())
            .map(|_| orthonormal_columns(latent_dim - 1, d, rng))
            .collect();
        Ok(LeakyGenerator {
            modes,
            spread,
            tau,
            alpha,
            latent_dim,
            projections,
        })
    }

    /// Rebuilds a generator from stored parts, e.g. a checkpoint.
    pub fn from_parts(
        modes: Tensor,
        spread: f64,
        tau: f64,
        alpha: f64,
        latent_dim: usize,
        projections: Vec<Tensor>,
    ) -> Result<Self> {
        let (k, d) = (modes.rows(), modes.cols());
        if latent_dim < d + 1 || projections.len() != k || projections.iter().any(|p| p.shape() != [latent_dim - 1, d])
        {
            return Err(Error::shape(
                "generator",
                "projections do not match modes and latent dimension",
            ));
        }
        Ok(LeakyGenerator {
            modes,
            spread,
            tau,
            alpha,
            latent_dim,
            projections,
        })
    }

    pub fn classes(&self) -> usize {
        self.modes.rows()
    }

    pub fn data_dim(&self) -> usize {
        self.modes.cols()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn spread(&self) -> f64 {
        self.spread
    }

    pub fn modes(&self) -> &Tensor {
        &self.modes
    }

    pub fn projections(&self) -> &[Tensor] {
        &self.projections
    }

    pub fn leak_target(&self, class: usize) -> usize {
        (class + 1) % self.classes()
    }

    /// Copy with different modes and spread; gate and projections are kept.
    pub fn with_modes(&self, modes: Tensor, spread: f64) -> Result<Self> {
        if modes.shape() != self.modes.shape() {
            return Err(Error::shape(
                "generator",
                format!("{:?} vs {:?}", modes.shape(), self.modes.shape()),
            ));
        }
        Ok(LeakyGenerator {
            modes,
            spread,
            ..self.clone()
        })
    }

    /// Gate value `w(z)` for a single first latent coordinate.
    pub fn leak_weight(&self, z1: f64) -> f64 {
        let t = self.alpha * (z1 - self.tau);
        if t >= 0.0 {
            1.0 / (1.0 + (-t).exp())
        } else {
            let e = t.exp();
            e / (1.0 + e)
        }
    }

    fn check_labels(&self, y: &[usize]) -> Result<()> {
        let k = self.classes();
        match y.iter().find(|&&c| c >= k) {
            Some(&label) => Err(Error::InvalidLabel { label, classes: k }),
            None => Ok(()),
        }
    }

    /// Differentiable generation from a `(B, latent_dim)` latent batch.
    pub fn generate<'t>(&self, z: Var<'t>, y: &[usize]) -> Result<Var<'t>> {
        self.check_labels(y)?;
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != self.latent_dim || shape[0] != y.len() {
            return Err(Error::shape(
                "generate",
                format!(
                    "latent {:?} for {} labels and latent dim {}",
                    shape,
                    y.len(),
                    self.latent_dim
                ),
            ));
        }
        let tape = z.tape();
        let (k, d, l) = (self.classes(), self.data_dim(), self.latent_dim);
        let b = y.len();
        let w = z
            .slice_cols(0, 1)?
            .add_scalar(-self.tau)?
            .scale(self.alpha)?
            .sigmoid()?;
        let zt = z.slice_cols(1, l)?;

        // All class projections at once, then pick the wanted block per row.
        let mut stacked = Tensor::zeros(&[l - 1, k * d]);
        for (c, p) in self.projections.iter().enumerate() {
            for i in 0..l - 1 {
                for j in 0..d {
                    stacked.set(i, c * d + j, p.at(i, j));
                }
            }
        }
        let mut fold = Tensor::zeros(&[k * d, d]);
        for c in 0..k {
            for j in 0..d {
                fold.set(c * d + j, j, 1.0);
            }
        }
        let all = zt.matmul(tape.constant(stacked))?;
        let branch = |cls: &dyn Fn(usize) -> usize| -> Result<Var<'t>> {
            let mut mask = Tensor::zeros(&[b, k * d]);
            let mut base = Tensor::zeros(&[b, d]);
            for (i, &yi) in y.iter().enumerate() {
                let c = cls(yi);
                for j in 0..d {
                    mask.set(i, c * d + j, self.spread);
                    base.set(i, j, self.modes.at(c, j));
                }
            }
            all.mul(tape.constant(mask))?
                .matmul(tape.constant(fold.clone()))?
                .add(tape.constant(base))
        };
        let own = branch(&|c| c)?;
        let leaked = branch(&|c| self.leak_target(c))?;
        own.lerp(leaked, w)
    }

    pub fn generate_eval(&self, z: &Tensor, y: &[usize]) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.generate(tape.constant(z.clone()), y)?.value())
    }
}

/// `(rows, cols)` matrix with orthonormal columns via Gram-Schmidt on Gaussian draws.
fn orthonormal_columns(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor {
    loop {
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
        let mut ok = true;
        for _ in 0..cols {
            let mut v: Vec<f64> = (0..rows).map(|_| rng.normal()).collect();
            for u in &basis {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n < 1e-8 {
                ok = false;
                break;
            }
            v.iter_mut().for_each(|a| *a /= n);
            basis.push(v);
        }
        if ok {
            let mut t = Tensor::zeros(&[rows, cols]);
            for (j, u) in basis.iter().enumerate() {
                for (i, &x) in u.iter().enumerate() {
                    t.set(i, j, x);
                }
            }
            return t;
        }
    }
}
