use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, shape_err, Result};
use crate::numerics::Tensor;

/// Projection width of [`DistStats`] features.
pub const DIST_FEATURES: usize = 64;

/// Attached to every output carrying a [`frechet_distance`].
pub const DIST_LABEL: &str = "random-projection Fréchet distance; a desk diagnostic, not comparable to published FID numbers";

const PROJECTION_SEED: u64 = 0x5eed_f1d0;

/// Mean and covariance of fixed random-projection features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistStats {
    pub mean: Vec<f64>,
    /// Row-major `K × K`.
    pub cov: Vec<f64>,
    pub n: usize,
}

impl DistStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Project each row of `samples` (`[N, …]`, flattened) onto
    /// [`DIST_FEATURES`] Gaussian directions drawn from a fixed seed.
    pub fn from_samples(samples: &Tensor<f32>) -> Result<Self> {
        let n = samples.dim(0);
        if samples.rank() < 2 || n < 2 {
            return Err(contract("need at least two samples"));
        }
        let d = samples.numel() / n;
        let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
        let scale = 1.0 / (d as f64).sqrt();
        let proj = DMatrix::<f64>::from_fn(d, DIST_FEATURES, |_, _| Distribution::<f64>::sample(&StandardNormal, &mut rng) * scale);
        let x = DMatrix::<f64>::from_row_iterator(n, d, samples.data().iter().map(|&v| v as f64));
        Ok(Self::from_features(&(x * proj)))
    }

    /// Statistics of feature rows `[N, K]` (unbiased covariance).
    pub fn from_features(f: &DMatrix<f64>) -> Self {
        let (n, k) = f.shape();
        let mean: DVector<f64> = f.row_mean().transpose();
        let mut centered = f.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        Self { mean: mean.iter().copied().collect(), cov: (0..k * k).map(|i| cov[(i / k, i % k)]).collect(), n }
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let k = self.dim();
        let m = DMatrix::from_row_slice(k, k, &self.cov);
        (&m + m.transpose()) * 0.5
    }
}

fn psd_sqrt(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m);
    let tol = 1e-9 * eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if eig.eigenvalues.iter().any(|&v| v < -tol) {
        return Err(contract(format!("{what} is not positive semidefinite")));
    }
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * root * eig.eigenvectors.transpose())
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`, with the trace term computed as
/// `Tr((Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})` in both orders and averaged so the
/// result is exactly symmetric.
pub fn frechet_distance(a: &DistStats, b: &DistStats) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.len() != a.dim() * a.dim() || b.cov.len() != b.dim() * b.dim() {
        return Err(shape_err("frechet_distance", format!("dims {} and {}", a.dim(), b.dim())));
    }
    let d2: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    let ra = psd_sqrt(sa.clone(), "first covariance")?;
    let rb = psd_sqrt(sb.clone(), "second covariance")?;
    let trace_root = |r: &DMatrix<f64>, s: &DMatrix<f64>| -> f64 {
        let inner = r * s * r;
        SymmetricEigen::new((&inner + inner.transpose()) * 0.5).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
    };
    let cross = 0.5 * (trace_root(&ra, &sb) + trace_root(&rb, &sa));
    Ok((d2 + (sa.trace() + sb.trace()) - 2.0 * cross).max(0.0))
}
