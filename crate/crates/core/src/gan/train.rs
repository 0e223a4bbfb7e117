use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::networks::{discriminator_loss, generator_loss, r1_penalty};
use super::{check_finite, GanConfig, GanModels};
use crate::artifact;
use crate::error::{Error, Result};
use crate::image::ImageBank;
use crate::nn::{self, Adam};
use crate::scenegen::Manifest;
use crate::seed;

pub const META_FILE: &str = "meta.json";
pub const META_KIND: &str = "gan-checkpoint";
pub const OPT_G_FILE: &str = "opt_g.safetensors";
pub const OPT_D_FILE: &str = "opt_d.safetensors";
pub const MILEPOST_DIR: &str = "mileposts";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScalars {
    pub loss_g: f64,
    pub loss_d: f64,
    /// Present on steps where the lazy R1 term ran.
    pub r1: Option<f64>,
    pub real_logit: f64,
    pub fake_logit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    #[serde(flatten)]
    pub scalars: StepScalars,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanMeta {
    pub kind: String,
    pub format_version: u32,
    pub config: GanConfig,
    pub seed: u64,
    /// Completed optimization steps.
    pub step: u64,
    pub run_hash: String,
    /// Corpus manifest, relative to the checkpoint directory.
    pub corpus: String,
    pub curve: Vec<CurvePoint>,
    pub mileposts: Vec<u64>,
}

impl GanMeta {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let meta: Self = artifact::read_json(&path)?;
        if meta.kind != META_KIND {
            return Err(Error::format(&path, format!("kind {:?} is not {META_KIND:?}", meta.kind)));
        }
        Ok(meta)
    }

    pub fn milepost_dir(dir: &Path, step: u64) -> PathBuf {
        dir.join(MILEPOST_DIR).join(format!("step_{step:08}"))
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Hash of the run configuration, recorded in the checkpoint.
    pub run_hash: String,
    /// Continue from an existing checkpoint in the output directory.
    pub resume: bool,
    /// Stop after this many total steps even if the config asks for more.
    pub stop_at: Option<u64>,
}

/// Networks, optimizer state and step counter of one training run.
pub struct GanTrainer {
    pub models: GanModels,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub step: u64,
    pub curve: Vec<CurvePoint>,
    pub mileposts: Vec<u64>,
}

impl GanTrainer {
    pub fn new(cfg: &GanConfig, seed: u64) -> Result<Self> {
        let models = GanModels::new(cfg, seed)?;
        let opt_g = Adam::new(&[&models.ps_gen, &models.ps_dec, &models.ps_up], cfg.lr_g, cfg.beta1, cfg.beta2)?;
        let opt_d = Adam::new(&[&models.ps_disc], cfg.lr_d, cfg.beta1, cfg.beta2)?;
        Ok(Self {
            models,
            opt_g,
            opt_d,
            step: 0,
            curve: Vec::new(),
            mileposts: Vec::new(),
        })
    }

    /// One discriminator update (plus the lazy R1 update when due) followed
    /// by one generator update. All randomness comes from `step_seed`.
    pub fn train_step(&mut self, real: &Tensor, step_seed: u64) -> Result<StepScalars> {
        let step = self.step;
        let cfg = &self.models.cfg;
        let m = &self.models;
        let b = real.dim(0)?;

        // one fake batch serves both updates: detached for D, then through
        // the freshly updated D for G
        let z = m.latents(&mut seed::rng(step_seed, "z", 0), b)?;
        let cams = m.sample_cameras(&mut seed::rng(step_seed, "camera", 0), b);
        let fake = m.fake(&z, &cams, seed::split(step_seed, "render", 0), true)?;
        let fake_in = m.disc_input_fake(&fake)?;
        let real_in = m.disc_input_real(real)?;
        let d_fake = m.disc.forward(&fake_in.detach())?;
        let d_real = m.disc.forward(&real_in)?;
        let loss_d = discriminator_loss(&d_real, &d_fake)?;
        let loss_d_v = check_finite(&loss_d, step, "loss_D")?;
        let real_logit = nn::scalar(&d_real.mean_all()?)?;
        let fake_logit = nn::scalar(&d_fake.mean_all()?)?;
        let grads = loss_d.backward()?;
        self.opt_d.step(&grads)?;

        let r1 = if cfg.r1_gamma > 0.0 && step % cfg.r1_interval == 0 {
            let weight = cfg.r1_gamma / 2.0 * cfg.r1_interval as f64;
            let disc = &m.disc;
            let (pen, grads) = nn::with_second_order(|| -> Result<_> {
                let pen = r1_penalty(disc, &real_in)?;
                let v = check_finite(&pen, step, "R1")?;
                Ok((v, (pen * weight)?.backward()?))
            })?;
            self.opt_d.step(&grads)?;
            Some(pen)
        } else {
            None
        };

        let logits = m.disc.forward(&fake_in)?;
        let loss_g = generator_loss(&logits)?;
        let loss_g_v = check_finite(&loss_g, step, "loss_G")?;
        let grads = loss_g.backward()?;
        self.opt_g.step(&grads)?;

        self.step += 1;
        Ok(StepScalars {
            loss_g: loss_g_v,
            loss_d: loss_d_v,
            r1,
            real_logit,
            fake_logit,
        })
    }

    pub fn save(&self, dir: &Path, seed: u64, opts: &TrainOptions, corpus: &str) -> Result<GanMeta> {
        artifact::create_dir(dir)?;
        self.models.save_all(dir)?;
        let tmp_g = dir.join(format!("{OPT_G_FILE}.tmp"));
        let tmp_d = dir.join(format!("{OPT_D_FILE}.tmp"));
        self.opt_g.save(&tmp_g)?;
        self.opt_d.save(&tmp_d)?;
        std::fs::rename(&tmp_g, dir.join(OPT_G_FILE)).map_err(|e| Error::io(dir, e))?;
        std::fs::rename(&tmp_d, dir.join(OPT_D_FILE)).map_err(|e| Error::io(dir, e))?;
        let meta = GanMeta {
            kind: META_KIND.into(),
            format_version: 1,
            config: self.models.cfg.clone(),
            seed,
            step: self.step,
            run_hash: opts.run_hash.clone(),
            corpus: corpus.to_string(),
            curve: self.curve.clone(),
            mileposts: self.mileposts.clone(),
        };
        // the metadata is written last and marks the checkpoint complete
        artifact::write_json(&dir.join(META_FILE), &meta)?;
        Ok(meta)
    }

    pub fn load(dir: &Path) -> Result<(Self, GanMeta)> {
        let meta = GanMeta::read(dir)?;
        let mut t = Self::new(&meta.config, meta.seed)?;
        t.models.load_all(dir)?;
        t.opt_g.load(&dir.join(OPT_G_FILE))?;
        t.opt_d.load(&dir.join(OPT_D_FILE))?;
        t.step = meta.step;
        t.curve = meta.curve.clone();
        t.mileposts = meta.mileposts.clone();
        Ok((t, meta))
    }

    fn save_milepost(&mut self, dir: &Path) -> Result<()> {
        let mp = GanMeta::milepost_dir(dir, self.step);
        self.models.save_inference(&mp)?;
        if !self.mileposts.contains(&self.step) {
            self.mileposts.push(self.step);
        }
        Ok(())
    }
}

/// Loads generator, decoder and upsampler from a checkpoint or milepost.
pub fn load_inference(ckpt: &Path, models_dir: &Path) -> Result<GanModels> {
    let meta = GanMeta::read(ckpt)?;
    let models = GanModels::new(&meta.config, meta.seed)?;
    models.load_inference(models_dir)?;
    Ok(models)
}

/// Real batch indices for a step, drawn with replacement.
pub fn batch_indices(step_seed: u64, n_images: usize, batch: usize) -> Vec<usize> {
    let mut rng = seed::rng(step_seed, "batch", 0);
    (0..batch).map(|_| rng.random_range(0..n_images)).collect()
}

/// Adversarial training against the images of `corpus`; writes a resumable
/// checkpoint to `out` and generator snapshots under `out/mileposts`.
pub fn train_gan(corpus: &Manifest, cfg: &GanConfig, seed: u64, out: &Path, opts: &TrainOptions) -> Result<GanMeta> {
    cfg.validate()?;
    if corpus.records.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    let paths: Vec<PathBuf> = (0..corpus.records.len()).map(|i| corpus.image_path(i)).collect();
    let bank = ImageBank::load(&paths, cfg.image_res())?;
    let corpus_name = artifact::link(out, &corpus.path)?;

    let mut trainer = if opts.resume && out.join(META_FILE).exists() {
        let (t, meta) = GanTrainer::load(out)?;
        if meta.config != *cfg || meta.seed != seed {
            return Err(Error::Config(format!(
                "checkpoint in {} was trained with a different config or seed",
                out.display()
            )));
        }
        log::info!("resuming GAN training at step {}", t.step);
        t
    } else {
        GanTrainer::new(cfg, seed)?
    };
    let last = opts.stop_at.map_or(cfg.steps, |s| s.min(cfg.steps));
    if trainer.step == 0 && cfg.milepost_every > 0 {
        trainer.save_milepost(out)?;
    }
    let mut meta = None;
    while trainer.step < last {
        let step_seed = seed::split(seed, "gan-step", trainer.step);
        let idx = batch_indices(step_seed, bank.len(), cfg.batch);
        let real = bank.batch(&idx, DType::F32)?;
        let s = trainer.train_step(&real, step_seed)?;
        let step = trainer.step;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == 1) {
            log::info!(
                "gan step {step}: loss_G {:.4} loss_D {:.4} D(real) {:.3} D(fake) {:.3}",
                s.loss_g,
                s.loss_d,
                s.real_logit,
                s.fake_logit
            );
            trainer.curve.push(CurvePoint { step, scalars: s });
        }
        if cfg.milepost_every > 0 && step % cfg.milepost_every == 0 {
            trainer.save_milepost(out)?;
        }
        if step == last || (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
            meta = Some(trainer.save(out, seed, opts, &corpus_name)?);
        }
    }
    match meta {
        Some(m) => Ok(m),
        None => trainer.save(out, seed, opts, &corpus_name),
    }
}
