use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues below this are treated as numerical dust and clipped to zero.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Running first and second moments of feature vectors, in f64. Merging
/// and pushing are sums, so the result does not depend on batch order
/// beyond floating-point reassociation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMoments {
    pub n: u64,
    pub sum: Vec<f64>,
    /// Row-major sum of outer products.
    pub outer: Vec<f64>,
}

impl FeatureMoments {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            sum: vec![0.0; dim],
            outer: vec![0.0; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.sum.len()
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::Shape(format!("feature of length {} pushed into {d}-dim moments", x.len())));
        }
        self.n += 1;
        for i in 0..d {
            self.sum[i] += x[i];
            let row = &mut self.outer[i * d..(i + 1) * d];
            for j in 0..d {
                row[j] += x[i] * x[j];
            }
        }
        Ok(())
    }

    /// Adds every row of a (B, D) tensor.
    pub fn push_tensor(&mut self, features: &Tensor) -> Result<()> {
        for row in features.to_dtype(DType::F64)?.to_vec2::<f64>()? {
            self.push(&row)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(Error::Shape("merging moments of different dimension".into()));
        }
        self.n += other.n;
        self.sum.iter_mut().zip(&other.sum).for_each(|(a, b)| *a += b);
        self.outer.iter_mut().zip(&other.outer).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Mean and maximum-likelihood covariance.
    pub fn stats(&self) -> Result<FrechetStats> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("no features accumulated".into()));
        }
        let d = self.dim();
        let n = self.n as f64;
        let mu: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] = self.outer[i * d + j] / n - mu[i] * mu[j];
            }
        }
        FrechetStats::new(mu, cov)
    }
}

/// Gaussian summary of a feature distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrechetStats {
    pub mu: Vec<f64>,
    /// Row-major, symmetrized.
    pub cov: Vec<f64>,
}

impl FrechetStats {
    pub fn new(mu: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mu.len();
        if cov.len() != d * d {
            return Err(Error::Shape(format!("covariance has {} entries for dimension {d}", cov.len())));
        }
        let m = DMatrix::from_row_slice(d, d, &cov);
        let sym = (&m + m.transpose()) * 0.5;
        Ok(Self {
            mu,
            cov: sym.transpose().as_slice().to_vec(),
        })
    }

    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        let mut m = FeatureMoments::new(d);
        for r in rows {
            m.push(r)?;
        }
        m.stats()
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.cov)
    }
}

/// Symmetric square root, clipping eigenvalues in (-tol, 0) to zero.
fn psd_sqrt(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = m.symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min < -PSD_TOLERANCE {
        return Err(Error::Domain(format!("{what} is not positive semidefinite (eigenvalue {min:e})")));
    }
    let roots = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// ‖μa−μb‖² + tr(Σa + Σb − 2(ΣaΣb)^½).
///
/// tr((ΣaΣb)^½) is computed as tr((Σa^½ Σb Σa^½)^½): the inner product is
/// symmetric PSD and similar to ΣaΣb, so an eigendecomposition suffices.
pub fn frechet_distance(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    let (sa, sb) = (a.matrix(), b.matrix());
    let root_a = psd_sqrt(sa.clone(), "first covariance")?;
    // also validates the second covariance
    psd_sqrt(sb.clone(), "second covariance")?;
    let inner = &root_a * &sb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = inner.symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min < -PSD_TOLERANCE * (1.0 + eig.eigenvalues.amax()) {
        return Err(Error::Domain(format!("covariance product has eigenvalue {min:e}")));
    }
    let tr_cross: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let mean: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((mean + sa.trace() + sb.trace() - 2.0 * tr_cross).max(0.0))
}
