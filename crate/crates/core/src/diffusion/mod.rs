//! Stage two: a text-conditioned denoiser over normalized triplanes, trained
//! with x0-prediction and sampled with deterministic DDIM plus
//! classifier-free guidance.

pub mod sample;
pub mod schedule;
pub mod train;
pub mod unet;

use serde::{Deserialize, Serialize};

pub use sample::{decode_samples, initial_noise, sample, sample_batch, SampleOptions};
pub use schedule::{add_noise, add_noise_batch, cfg_predict, ddim_step, predict_eps, NoiseSchedule};
pub use train::{
    denoise_loss, drop_caption, train_diffusion, CaptionedSet, DiffusionMeta, DiffusionModel, DiffusionTrainer, Predictor,
    TrainOptions,
};
pub use unet::{Conditioning, Denoiser, Tokenizer, UnetConfig};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub unet: UnetConfig,
    pub schedule: NoiseSchedule,
    /// Probability of training on the null caption.
    pub caption_dropout: f64,
    pub batch: usize,
    pub steps: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub checkpoint_every: u64,
    pub milepost_every: u64,
    pub log_every: u64,
    /// Triplanes held out from training for the validation curve.
    pub holdout: usize,
    pub sample_steps: usize,
    pub guidance: f64,
    /// Clamp each clean prediction to the normalized data range.
    pub clip_prediction: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            unet: UnetConfig::default(),
            schedule: NoiseSchedule::default(),
            caption_dropout: 0.2,
            batch: 16,
            steps: 50_000,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            checkpoint_every: 1000,
            milepost_every: 5000,
            log_every: 100,
            holdout: 0,
            sample_steps: 50,
            guidance: 7.5,
            clip_prediction: false,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(0.0..=1.0).contains(&self.caption_dropout) {
            return Err(Error::Config("caption_dropout must lie in [0, 1]".into()));
        }
        if self.batch == 0 || self.sample_steps == 0 {
            return Err(Error::Config("batch and sample_steps must be positive".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config("lr must be non-negative".into()));
        }
        Ok(())
    }
}
