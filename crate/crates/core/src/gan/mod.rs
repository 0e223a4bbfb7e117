//! Stage one: an unconditional latent-to-triplane generator trained
//! adversarially against single-view renders of the procedural corpus.

pub mod export;
pub mod networks;
pub mod train;

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

pub use export::{export_triplane_dataset, TriplaneRecord, TriplaneManifest};
pub use networks::{discriminator_loss, generator_loss, r1_penalty, Discriminator, Generator, Upsampler};
pub use train::{train_gan, CurvePoint, GanMeta, GanTrainer, StepScalars, TrainOptions};

use crate::error::{Error, Result};
use crate::nn::{self, ParamStore};
use crate::renderer::{Camera, Outputs, RenderConfig, Renderer};
use crate::scenegen::CameraConfig;
use crate::seed;
use crate::triplane::{DecoderConfig, FieldDecoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_layers: usize,
    pub mapping_lr_mul: f64,
    pub n_feat: usize,
    pub triplane_res: usize,
    pub gen_channels: usize,
    pub decoder: DecoderConfig,
    /// Direct render resolution; the upsampler doubles it.
    pub render_res: usize,
    pub render: RenderConfig,
    pub up_channels: usize,
    pub disc_channels: usize,
    pub mbstd_group: usize,
    /// Discriminator also sees the upsampled low-resolution render, which
    /// keeps direct renders faithful to the upsampled output.
    pub dual_discrimination: bool,
    pub batch: usize,
    pub steps: u64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub r1_gamma: f64,
    /// Lazy regularization: R1 is applied every this many steps.
    pub r1_interval: u64,
    pub checkpoint_every: u64,
    /// Generator snapshots for training-curve evaluation; 0 disables.
    pub milepost_every: u64,
    pub log_every: u64,
    pub export_batch: usize,
    pub camera: CameraConfig,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            z_dim: 64,
            w_dim: 128,
            mapping_layers: 2,
            mapping_lr_mul: 0.01,
            n_feat: 16,
            triplane_res: 64,
            gen_channels: 64,
            decoder: DecoderConfig::default(),
            render_res: 32,
            render: RenderConfig::default(),
            up_channels: 32,
            disc_channels: 32,
            mbstd_group: 4,
            dual_discrimination: true,
            batch: 16,
            steps: 50_000,
            lr_g: 2.5e-3,
            lr_d: 2e-3,
            beta1: 0.0,
            beta2: 0.99,
            r1_gamma: 1.0,
            r1_interval: 16,
            checkpoint_every: 1000,
            milepost_every: 5000,
            log_every: 100,
            export_batch: 16,
            camera: CameraConfig::default(),
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let pow2 = |v: usize| v >= 4 && v.is_power_of_two();
        if !pow2(self.triplane_res) || !pow2(self.render_res) {
            return Err(Error::Config("triplane_res and render_res must be powers of two >= 4".into()));
        }
        if self.n_feat == 0 || self.z_dim == 0 || self.w_dim == 0 || self.mapping_layers == 0 {
            return Err(Error::Config("network sizes must be positive".into()));
        }
        if self.batch == 0 || self.export_batch == 0 || self.r1_interval == 0 {
            return Err(Error::Config("batch, export_batch and r1_interval must be positive".into()));
        }
        if self.render.n_coarse == 0 {
            return Err(Error::Config("render.n_coarse must be positive".into()));
        }
        Ok(())
    }

    /// Resolution of upsampled images and of the training corpus.
    pub fn image_res(&self) -> usize {
        2 * self.render_res
    }
}

/// All four stage-one networks with their parameter stores.
pub struct GanModels {
    pub cfg: GanConfig,
    pub ps_gen: ParamStore,
    pub ps_dec: ParamStore,
    pub ps_up: ParamStore,
    pub ps_disc: ParamStore,
    pub gen: Generator,
    pub dec: FieldDecoder,
    pub up: Upsampler,
    pub disc: Discriminator,
}

/// Images produced from a batch of triplanes.
pub struct FakeImages {
    pub planes: Tensor,
    pub w: Tensor,
    /// (B, 3, r, r) direct render over the background.
    pub low: Tensor,
    /// (B, 3·n_feat, r, r)
    pub features: Tensor,
    /// (B, 3, 2r, 2r)
    pub high: Tensor,
}

pub const GEN_FILE: &str = "generator.safetensors";
pub const DEC_FILE: &str = "decoder.safetensors";
pub const UP_FILE: &str = "upsampler.safetensors";
pub const DISC_FILE: &str = "discriminator.safetensors";

impl GanModels {
    pub fn new(cfg: &GanConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(cfg, seed, DType::F32)
    }

    pub fn with_dtype(cfg: &GanConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let init = seed::split(seed, "gan-init", 0);
        let mut ps_gen = ParamStore::new(dtype, init, "generator");
        let mut ps_dec = ParamStore::new(dtype, init, "decoder");
        let mut ps_up = ParamStore::new(dtype, init, "upsampler");
        let mut ps_disc = ParamStore::new(dtype, init, "discriminator");
        let gen = Generator::new(&mut ps_gen, cfg)?;
        let dec = FieldDecoder::new(&mut ps_dec, cfg.n_feat, cfg.decoder)?;
        let up = Upsampler::new(&mut ps_up, cfg)?;
        let in_ch = if cfg.dual_discrimination { 6 } else { 3 };
        let disc = Discriminator::new(&mut ps_disc, in_ch, cfg.image_res(), cfg.disc_channels, cfg.mbstd_group)?;
        Ok(Self {
            cfg: cfg.clone(),
            ps_gen,
            ps_dec,
            ps_up,
            ps_disc,
            gen,
            dec,
            up,
            disc,
        })
    }

    pub fn renderer(&self, jitter: bool) -> Renderer<'_> {
        Renderer::new(&self.dec, RenderConfig { jitter, ..self.cfg.render })
    }

    pub fn latents(&self, rng: &mut seed::Rng, n: usize) -> Result<Tensor> {
        nn::randn(rng, &[n, self.cfg.z_dim], self.ps_gen.dtype())
    }

    /// Renders `planes` from `cams` and upsamples with style `w`.
    pub fn render(&self, planes: &Tensor, w: &Tensor, cams: &[Camera], render_seed: u64, jitter: bool) -> Result<(Tensor, Tensor, Tensor)> {
        let out = self
            .renderer(jitter)
            .render_batch(planes, cams, render_seed, Outputs { features: true, depth: false })?;
        let features = out.features.expect("requested");
        let high = self.up.forward(&out.rgb, &features, w)?;
        Ok((out.rgb, features, high))
    }

    pub fn fake(&self, z: &Tensor, cams: &[Camera], render_seed: u64, jitter: bool) -> Result<FakeImages> {
        let (planes, w) = self.gen.forward(z)?;
        let (low, features, high) = self.render(&planes, &w, cams, render_seed, jitter)?;
        Ok(FakeImages {
            planes,
            w,
            low,
            features,
            high,
        })
    }

    /// Discriminator input for generated images.
    pub fn disc_input_fake(&self, f: &FakeImages) -> Result<Tensor> {
        if self.cfg.dual_discrimination {
            Ok(Tensor::cat(&[&f.high, &nn::upsample2x(&f.low)?], 1)?)
        } else {
            Ok(f.high.clone())
        }
    }

    /// Discriminator input for real images at `image_res`.
    pub fn disc_input_real(&self, real: &Tensor) -> Result<Tensor> {
        if self.cfg.dual_discrimination {
            let low = nn::downsample2x(real)?;
            Ok(Tensor::cat(&[real, &nn::upsample2x(&low)?], 1)?)
        } else {
            Ok(real.clone())
        }
    }

    /// Cameras at the direct render resolution, azimuths from `rng`.
    pub fn sample_cameras(&self, rng: &mut seed::Rng, n: usize) -> Vec<Camera> {
        use rand::Rng as _;
        (0..n)
            .map(|_| {
                let az = rng.random_range(0.0..2.0 * std::f64::consts::PI);
                self.cfg.camera.at_azimuth(az, self.cfg.render_res)
            })
            .collect()
    }

    /// Saves generator, decoder and upsampler (everything inference needs).
    pub fn save_inference(&self, dir: &Path) -> Result<()> {
        crate::artifact::create_dir(dir)?;
        save_atomic(&self.ps_gen, &dir.join(GEN_FILE))?;
        save_atomic(&self.ps_dec, &dir.join(DEC_FILE))?;
        save_atomic(&self.ps_up, &dir.join(UP_FILE))
    }

    pub fn save_all(&self, dir: &Path) -> Result<()> {
        self.save_inference(dir)?;
        save_atomic(&self.ps_disc, &dir.join(DISC_FILE))
    }

    pub fn load_inference(&self, dir: &Path) -> Result<()> {
        self.ps_gen.load(&dir.join(GEN_FILE))?;
        self.ps_dec.load(&dir.join(DEC_FILE))?;
        self.ps_up.load(&dir.join(UP_FILE))
    }

    pub fn load_all(&self, dir: &Path) -> Result<()> {
        self.load_inference(dir)?;
        self.ps_disc.load(&dir.join(DISC_FILE))
    }
}

pub(crate) fn save_atomic(ps: &ParamStore, path: &Path) -> Result<()> {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    ps.save(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Checks a whole tensor for NaN or infinity.
pub(crate) fn check_finite(t: &Tensor, step: u64, which: &str) -> Result<f64> {
    let v = nn::scalar(t)?;
    if !v.is_finite() {
        return Err(Error::NonFinite {
            step: step as usize,
            which: which.to_string(),
        });
    }
    Ok(v)
}
