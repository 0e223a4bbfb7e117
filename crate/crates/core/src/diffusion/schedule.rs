use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Endpoint-normalized sigmoid schedule over continuous time t ∈ [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub start: f64,
    pub end: f64,
    pub tau: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            start: -3.0,
            end: 3.0,
            tau: 1.0,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.start < self.end) || !(self.tau > 0.0) {
            return Err(Error::Config("schedule needs start < end and tau > 0".into()));
        }
        Ok(())
    }

    /// Signal fraction ᾱ_t.
    pub fn alpha(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("timestep {t} outside [0, 1]")));
        }
        let (s, e, tau) = (self.start, self.end, self.tau);
        let v_start = sigmoid(-s / tau);
        let v_end = sigmoid(-e / tau);
        let v = sigmoid(-(s + t * (e - s)) / tau);
        Ok(((v - v_end) / (v_start - v_end)).clamp(0.0, 1.0))
    }

    /// Uniform grid 0 = t_0 < ... < t_K = 1.
    pub fn grid(n_steps: usize) -> Result<Vec<f64>> {
        if n_steps == 0 {
            return Err(Error::InvalidArgument("need at least one sampling step".into()));
        }
        Ok((0..=n_steps).map(|k| k as f64 / n_steps as f64).collect())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Forward process at signal fraction `ab`: √ᾱ·T0 + √(1−ᾱ)·ε.
pub fn add_noise(t0: &Tensor, eps: &Tensor, ab: f64) -> Result<Tensor> {
    same_shape(t0, eps, "add_noise")?;
    Ok(((t0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// Forward process with a per-sample signal fraction; `ab` has one entry per
/// leading index of `t0`.
pub fn add_noise_batch(t0: &Tensor, eps: &Tensor, ab: &[f64]) -> Result<Tensor> {
    same_shape(t0, eps, "add_noise")?;
    let b = t0.dim(0)?;
    if ab.len() != b {
        return Err(Error::Shape(format!("{} signal fractions for batch {b}", ab.len())));
    }
    let mut shape = vec![1usize; t0.rank()];
    shape[0] = b;
    let coef = |f: &dyn Fn(f64) -> f64| -> Result<Tensor> {
        let v: Vec<f64> = ab.iter().map(|&a| f(a)).collect();
        Ok(Tensor::from_vec(v, shape.as_slice(), t0.device())?.to_dtype(t0.dtype())?)
    };
    let a = coef(&|a: f64| a.sqrt())?;
    let s = coef(&|a: f64| (1.0 - a).sqrt())?;
    Ok((t0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
}

/// Noise implied by a clean prediction: (Tt − √ᾱ·T̂)/√(1−ᾱ).
pub fn predict_eps(tt: &Tensor, pred: &Tensor, ab: f64) -> Result<Tensor> {
    same_shape(tt, pred, "predict_eps")?;
    if ab >= 1.0 {
        return Err(Error::Domain("predict_eps is undefined at t = 0".into()));
    }
    Ok(((tt - (pred * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
}

/// Deterministic DDIM update from signal fraction `ab` to `ab_prev`.
pub fn ddim_step(tt: &Tensor, pred: &Tensor, ab: f64, ab_prev: f64) -> Result<Tensor> {
    if ab_prev <= ab {
        return Err(Error::Domain(format!(
            "DDIM must move toward less noise (alpha {ab} -> {ab_prev})"
        )));
    }
    let eps = predict_eps(tt, pred, ab)?;
    Ok(((pred * ab_prev.sqrt())? + (eps * (1.0 - ab_prev).sqrt())?)?)
}

impl NoiseSchedule {
    pub fn add_noise(&self, t0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
        add_noise(t0, eps, self.alpha(t)?)
    }

    pub fn predict_eps(&self, tt: &Tensor, pred: &Tensor, t: f64) -> Result<Tensor> {
        if t <= 0.0 {
            return Err(Error::Domain("predict_eps is undefined at t = 0".into()));
        }
        predict_eps(tt, pred, self.alpha(t)?)
    }

    pub fn ddim_step(&self, tt: &Tensor, pred: &Tensor, t: f64, t_prev: f64) -> Result<Tensor> {
        if !(0.0..t).contains(&t_prev) {
            return Err(Error::Domain(format!("need 0 <= t_prev < t, got t_prev {t_prev}, t {t}")));
        }
        ddim_step(tt, pred, self.alpha(t)?, self.alpha(t_prev)?)
    }
}

/// Classifier-free guidance: uncond + g·(cond − uncond).
pub fn cfg_predict(cond: &Tensor, uncond: &Tensor, g: f64) -> Result<Tensor> {
    same_shape(cond, uncond, "cfg_predict")?;
    if g == 1.0 {
        return Ok(cond.clone());
    }
    if g == 0.0 {
        return Ok(uncond.clone());
    }
    Ok((uncond + ((cond - uncond)? * g)?)?)
}
