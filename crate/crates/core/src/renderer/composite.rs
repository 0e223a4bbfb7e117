//! Front-to-back accumulation of per-sample colors.
//!
//! Density is `sigmoid(d)`, per-sample opacity `a = 1 - exp(-density · δ)`
//! and each sample contributes with weight `a_i · Π_{j<i} (1 - a_j)`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub rgb: [f64; 3],
    pub opacity: f64,
    pub weights: Vec<f64>,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-sample compositing weights.
pub fn weights(sdf: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
    if sdf.len() != delta.len() {
        return Err(Error::Shape(format!(
            "{} pseudo-SDF values for {} spacings",
            sdf.len(),
            delta.len()
        )));
    }
    let mut transmittance = 1.0;
    let mut out = Vec::with_capacity(sdf.len());
    for (&d, &dt) in sdf.iter().zip(delta) {
        let sigma = sigmoid(d);
        let a = if dt.is_infinite() && sigma > 0.0 { 1.0 } else { 1.0 - (-sigma * dt).exp() };
        out.push(a * transmittance);
        transmittance *= 1.0 - a;
    }
    Ok(out)
}

pub fn composite(colors: &[[f64; 3]], sdf: &[f64], delta: &[f64]) -> Result<Composite> {
    if colors.len() != sdf.len() {
        return Err(Error::Shape(format!(
            "{} colors for {} pseudo-SDF values",
            colors.len(),
            sdf.len()
        )));
    }
    let w = weights(sdf, delta)?;
    let mut rgb = [0.0; 3];
    for (c, &wi) in colors.iter().zip(&w) {
        for k in 0..3 {
            rgb[k] += c[k] * wi;
        }
    }
    Ok(Composite {
        rgb,
        opacity: w.iter().sum(),
        weights: w,
    })
}

/// Expected ray parameter under the compositing weights, normalized by
/// opacity; rays with opacity <= 1e-4 report `far`.
pub fn expected_depth(t: &[f64], sdf: &[f64], delta: &[f64], far: f64) -> Result<f64> {
    let w = weights(sdf, delta)?;
    let opacity: f64 = w.iter().sum();
    if opacity <= 1e-4 {
        return Ok(far);
    }
    Ok(w.iter().zip(t).map(|(w, t)| w * t).sum::<f64>() / opacity)
}
