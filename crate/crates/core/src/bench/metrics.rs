use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::models::LeakyGenerator;

/// Eigenvalues below this are treated as zero in matrix square roots.
pub const EIGEN_FLOOR: f64 = 1e-12;

fn moments(x: &Tensor) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = DVector::from_iterator(d, (0..d).map(|j| m.column(j).mean()));
    let mut centered = m.clone();
    for j in 0..d {
        centered.column_mut(j).add_scalar_mut(-mean[j]);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| if v > EIGEN_FLOOR { v.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two row samples:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^{1/2} S_b S_a^{1/2})^{1/2})`.
pub fn frechet_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if !a.is_matrix() || !b.is_matrix() || a.cols() != b.cols() {
        return Err(Error::shape(
            "frechet_distance",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::contract("Fréchet distance needs at least 2 rows per sample"));
    }
    let (ma, sa) = moments(a);
    let (mb, sb) = moments(b);
    let root_a = sym_sqrt(&sa);
    let cross = sym_sqrt(&(&root_a * &sb * &root_a));
    let d = (ma - mb).norm_squared() + sa.trace() + sb.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

/// Fraction of latent rows whose leak weight is strictly above one half.
pub fn leakage_rate(z: &Tensor, generator: &LeakyGenerator) -> f64 {
    let n = z.rows();
    if n == 0 {
        return 0.0;
    }
    let leaked = (0..n).filter(|&i| generator.leak_weight(z.at(i, 0)) > 0.5).count();
    leaked as f64 / n as f64
}

/// Mean leak weight over latent rows.
pub fn mean_leak_weight(z: &Tensor, generator: &LeakyGenerator) -> f64 {
    let n = z.rows();
    if n == 0 {
        return 0.0;
    }
    (0..n).map(|i| generator.leak_weight(z.at(i, 0))).sum::<f64>() / n as f64
}
