//! Two-pass sample placement along a ray: stratified coarse samples, then
//! inverse-CDF fine samples from the coarse compositing weights.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed::Rng;

/// Ordered samples along one ray, from the camera outwards.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
}

impl RaySamples {
    /// Spacings `t[i+1] - t[i]`; the last sample extends to `far`.
    pub fn from_sorted(t: Vec<f64>, far: f64) -> Self {
        let n = t.len();
        let delta = (0..n)
            .map(|i| if i + 1 < n { t[i + 1] - t[i] } else { (far - t[i]).max(0.0) })
            .collect();
        Self { t, delta }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Where inside each stratum a sample lands.
pub enum Jitter<'a> {
    /// Stratum centre.
    Midpoint,
    /// One uniform draw per stratum.
    Random(&'a mut Rng),
}

impl Jitter<'_> {
    fn offset(&mut self) -> f64 {
        match self {
            Jitter::Midpoint => 0.5,
            Jitter::Random(rng) => rng.random::<f64>(),
        }
    }
}

fn check_bounds(near: f64, far: f64) -> Result<()> {
    if !(near < far) || !near.is_finite() || !far.is_finite() {
        return Err(Error::InvalidArgument(format!("need near < far, got {near} >= {far}")));
    }
    Ok(())
}

/// `n` samples, one per equal-length bin of [near, far].
pub fn stratified(near: f64, far: f64, n: usize, jitter: &mut Jitter) -> Result<Vec<f64>> {
    check_bounds(near, far)?;
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one coarse sample".into()));
    }
    let step = (far - near) / n as f64;
    Ok((0..n).map(|k| near + (k as f64 + jitter.offset()) * step).collect())
}

/// `n` samples drawn by inverting the CDF of the piecewise-constant density
/// that assigns `weights[k]` to the k-th equal-length bin of [near, far].
/// All-zero weights fall back to a uniform density.
pub fn inverse_cdf(near: f64, far: f64, weights: &[f64], n: usize, jitter: &mut Jitter) -> Result<Vec<f64>> {
    check_bounds(near, far)?;
    let bins = weights.len();
    if bins == 0 {
        return Err(Error::InvalidArgument("empty coarse weights".into()));
    }
    let w: Vec<f64> = weights.iter().map(|&w| if w.is_finite() { w.max(0.0) } else { 0.0 }).collect();
    let total: f64 = w.iter().sum();
    let (w, total) = if total > 0.0 { (w, total) } else { (vec![1.0; bins], bins as f64) };
    let mut cdf = Vec::with_capacity(bins + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for &wk in &w {
        acc += wk / total;
        cdf.push(acc);
    }
    let step = (far - near) / bins as f64;
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let u = (j as f64 + jitter.offset()) / n as f64;
        // first bin whose upper CDF edge exceeds u, skipping empty bins
        let mut k = cdf[1..].partition_point(|&c| c <= u).min(bins - 1);
        while w[k] == 0.0 && k > 0 {
            k -= 1;
        }
        while w[k] == 0.0 && k + 1 < bins {
            k += 1;
        }
        let frac = ((u - cdf[k]) / (w[k] / total)).clamp(0.0, 1.0);
        out.push(near + (k as f64 + frac) * step);
    }
    Ok(out)
}

/// Coarse-only samples when `coarse_weights` is `None`; otherwise the
/// stratified coarse samples merged with `n_fine` importance samples.
/// The jitter stream is consumed coarse-first, so passing an identically
/// seeded generator to both passes reproduces the coarse positions.
pub fn sample_points(
    near: f64,
    far: f64,
    n_coarse: usize,
    n_fine: usize,
    coarse_weights: Option<&[f64]>,
    jitter: &mut Jitter,
) -> Result<RaySamples> {
    let mut t = stratified(near, far, n_coarse, jitter)?;
    if let Some(w) = coarse_weights {
        if w.len() != n_coarse {
            return Err(Error::Shape(format!(
                "{} coarse weights for {n_coarse} coarse samples",
                w.len()
            )));
        }
        t.extend(inverse_cdf(near, far, w, n_fine, jitter)?);
        t.sort_by(f64::total_cmp);
    }
    Ok(RaySamples::from_sorted(t, far))
}
