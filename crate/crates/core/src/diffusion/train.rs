use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::unet::{Denoiser, UnetConfig};
use super::{add_noise_batch, DiffusionConfig, NoiseSchedule};
use crate::artifact;
use crate::error::{Error, Result};
use crate::nn::{self, Adam, ParamStore};
use crate::scenegen::AttributeVocab;
use crate::seed;
use crate::triplane::TriplaneField;

pub const META_FILE: &str = "meta.json";
pub const META_KIND: &str = "diffusion-checkpoint";
pub const MODEL_FILE: &str = "denoiser.safetensors";
pub const OPT_FILE: &str = "opt.safetensors";
pub const MILEPOST_DIR: &str = "mileposts";

/// Anything that maps noisy triplanes to clean predictions.
pub trait Predictor {
    /// `null[i]` selects the null caption for sample `i`.
    fn predict(&self, x: &Tensor, t: &[f64], captions: &[&str], null: &[bool]) -> Result<Tensor>;
}

impl Predictor for Denoiser {
    fn predict(&self, x: &Tensor, t: &[f64], captions: &[&str], null: &[bool]) -> Result<Tensor> {
        let cond = self.condition(captions, null)?;
        self.forward(x, t, &cond)
    }
}

/// Whether a training sample sees the null caption.
pub fn drop_caption(seed: u64, rate: f64) -> bool {
    seed::rng(seed, "caption-dropout", 0).random_bool(rate.clamp(0.0, 1.0))
}

/// Mean squared error between the clean prediction for noised `t0` and `t0`.
/// Caption `i` is replaced by the null caption when `drop[i]`.
pub fn denoise_loss<P: Predictor>(
    p: &P,
    sched: &NoiseSchedule,
    t0: &Tensor,
    captions: &[&str],
    t: &[f64],
    eps: &Tensor,
    drop: &[bool],
) -> Result<Tensor> {
    let ab = t.iter().map(|&ti| sched.alpha(ti)).collect::<Result<Vec<_>>>()?;
    let xt = add_noise_batch(t0, eps, &ab)?;
    let pred = p.predict(&xt, t, captions, drop)?;
    let loss = (pred - t0)?.sqr()?.mean_all()?;
    let v = nn::scalar(&loss)?;
    if !v.is_finite() {
        return Err(Error::Domain(format!("non-finite denoising loss at t={t:?} for captions {captions:?}")));
    }
    Ok(loss)
}

/// Normalized triplanes with one caption each.
#[derive(Debug, Clone)]
pub struct CaptionedSet {
    pub triplanes: Vec<TriplaneField>,
    pub captions: Vec<String>,
}

impl CaptionedSet {
    pub fn new(triplanes: Vec<TriplaneField>, captions: Vec<String>) -> Result<Self> {
        if triplanes.len() != captions.len() {
            return Err(Error::Shape(format!(
                "{} triplanes but {} captions",
                triplanes.len(),
                captions.len()
            )));
        }
        if let Some(first) = triplanes.first() {
            if let Some((i, t)) = triplanes.iter().enumerate().find(|(_, t)| t.shape() != first.shape()) {
                return Err(Error::Item {
                    index: i,
                    source: Box::new(Error::Shape(format!("{:?} differs from {:?}", t.shape(), first.shape()))),
                });
            }
        }
        Ok(Self { triplanes, captions })
    }

    pub fn len(&self) -> usize {
        self.triplanes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplanes.is_empty()
    }

    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.triplanes.first().map(|t| t.shape())
    }

    pub fn batch(&self, idx: &[usize], dtype: DType) -> Result<(Tensor, Vec<&str>)> {
        let ts = idx
            .iter()
            .map(|&i| self.triplanes[i].to_tensor(dtype))
            .collect::<Result<Vec<_>>>()?;
        let caps = idx.iter().map(|&i| self.captions[i].as_str()).collect();
        Ok((Tensor::stack(&ts, 0)?, caps))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    /// Training-batch loss; absent before the first step.
    pub loss: Option<f64>,
    /// Loss on the held-out triplanes, recorded at mileposts.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub holdout_loss: Option<f64>,
}

/// Checkpoint metadata; `stats` and `gan_checkpoint` link the upstream
/// artifacts needed to decode samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionMeta {
    pub kind: String,
    pub format_version: u32,
    pub config: DiffusionConfig,
    pub vocab: AttributeVocab,
    pub vocab_hash: String,
    pub channels: usize,
    pub res: usize,
    pub seed: u64,
    pub step: u64,
    pub run_hash: String,
    pub stats: String,
    pub stats_hash: String,
    pub gan_checkpoint: String,
    pub curve: Vec<CurvePoint>,
    pub mileposts: Vec<u64>,
}

impl DiffusionMeta {
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

/// Denoiser with its parameters and the data layout it was built for.
pub struct DiffusionModel {
    pub cfg: DiffusionConfig,
    pub ps: ParamStore,
    pub den: Denoiser,
    pub vocab: AttributeVocab,
}

impl DiffusionModel {
    pub fn new(cfg: &DiffusionConfig, vocab: &AttributeVocab, channels: usize, res: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(DType::F32, seed::split(seed, "diffusion-init", 0), "denoiser");
        let den = Denoiser::new(&mut ps, channels, res, vocab, &cfg.unet)?;
        Ok(Self {
            cfg: cfg.clone(),
            ps,
            den,
            vocab: vocab.clone(),
        })
    }

    /// Loads a checkpoint (or one of its mileposts when `params` is given).
    pub fn load(dir: &Path, params: Option<&Path>) -> Result<(Self, DiffusionMeta)> {
        let meta = DiffusionMeta::read(dir)?;
        let m = Self::new(&meta.config, &meta.vocab, meta.channels, meta.res, meta.seed)?;
        m.ps.load(&params.unwrap_or(dir).join(MODEL_FILE))?;
        Ok((m, meta))
    }

    pub fn unet(&self) -> &UnetConfig {
        &self.cfg.unet
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub run_hash: String,
    pub resume: bool,
    pub stop_at: Option<u64>,
    /// Path of the statistics sidecar used to normalize the set.
    pub stats: String,
    pub stats_hash: String,
    pub gan_checkpoint: String,
}

pub struct DiffusionTrainer {
    pub model: DiffusionModel,
    pub opt: Adam,
    pub step: u64,
    pub curve: Vec<CurvePoint>,
    pub mileposts: Vec<u64>,
    channels: usize,
    res: usize,
}

impl DiffusionTrainer {
    pub fn new(cfg: &DiffusionConfig, vocab: &AttributeVocab, channels: usize, res: usize, seed: u64) -> Result<Self> {
        let model = DiffusionModel::new(cfg, vocab, channels, res, seed)?;
        let opt = Adam::new(&[&model.ps], cfg.lr, cfg.beta1, cfg.beta2)?;
        Ok(Self {
            model,
            opt,
            step: 0,
            curve: Vec::new(),
            mileposts: Vec::new(),
            channels,
            res,
        })
    }

    /// Fresh (t, ε, dropout) for every sample, all drawn from `step_seed`.
    pub fn train_step(&mut self, set: &CaptionedSet, train_n: usize, step_seed: u64) -> Result<f64> {
        let cfg = &self.model.cfg;
        let mut rng = seed::rng(step_seed, "batch", 0);
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..train_n)).collect();
        let (t0, caps) = set.batch(&idx, self.model.ps.dtype())?;
        let mut rng = seed::rng(step_seed, "t", 0);
        let t: Vec<f64> = (0..cfg.batch).map(|_| rng.random::<f64>()).collect();
        let eps = nn::randn(&mut seed::rng(step_seed, "eps", 0), t0.dims(), t0.dtype())?;
        let drop: Vec<bool> = (0..cfg.batch)
            .map(|i| drop_caption(seed::split(step_seed, "dropout", i as u64), cfg.caption_dropout))
            .collect();
        let loss = denoise_loss(&self.model.den, &cfg.schedule, &t0, &caps, &t, &eps, &drop).map_err(|e| match e {
            Error::Domain(m) => Error::NonFinite {
                step: self.step as usize,
                which: m,
            },
            e => e,
        })?;
        let v = nn::scalar(&loss)?;
        let grads = loss.backward()?;
        self.opt.step(&grads)?;
        self.step += 1;
        Ok(v)
    }

    /// Loss on `indices` at a fixed grid of times and fixed noise.
    pub fn eval_loss(&self, set: &CaptionedSet, indices: &[usize], seed: u64) -> Result<f64> {
        if indices.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        let grid = [0.1, 0.3, 0.5, 0.7, 0.9];
        for (k, chunk) in indices.chunks(self.model.cfg.batch).enumerate() {
            let (t0, caps) = set.batch(chunk, self.model.ps.dtype())?;
            let t: Vec<f64> = (0..chunk.len()).map(|i| grid[(i + k) % grid.len()]).collect();
            let eps = nn::randn(&mut seed::rng(seed, "holdout-eps", k as u64), t0.dims(), t0.dtype())?;
            let drop = vec![false; chunk.len()];
            let l = denoise_loss(&self.model.den, &self.model.cfg.schedule, &t0, &caps, &t, &eps, &drop)?;
            total += nn::scalar(&l)? * chunk.len() as f64;
        }
        Ok(total / indices.len() as f64)
    }

    pub fn save(&self, dir: &Path, seed: u64, opts: &TrainOptions) -> Result<DiffusionMeta> {
        artifact::create_dir(dir)?;
        crate::gan::save_atomic(&self.model.ps, &dir.join(MODEL_FILE))?;
        let tmp = dir.join(format!("{OPT_FILE}.tmp"));
        self.opt.save(&tmp)?;
        std::fs::rename(&tmp, dir.join(OPT_FILE)).map_err(|e| Error::io(dir, e))?;
        let meta = DiffusionMeta {
            kind: META_KIND.into(),
            format_version: 1,
            config: self.model.cfg.clone(),
            vocab: self.model.vocab.clone(),
            vocab_hash: artifact::content_hash(&self.model.vocab)?,
            channels: self.channels,
            res: self.res,
            seed,
            step: self.step,
            run_hash: opts.run_hash.clone(),
            stats: opts.stats.clone(),
            stats_hash: opts.stats_hash.clone(),
            gan_checkpoint: opts.gan_checkpoint.clone(),
            curve: self.curve.clone(),
            mileposts: self.mileposts.clone(),
        };
        artifact::write_json(&dir.join(META_FILE), &meta)?;
        Ok(meta)
    }

    pub fn load(dir: &Path) -> Result<(Self, DiffusionMeta)> {
        let meta = DiffusionMeta::read(dir)?;
        let mut t = Self::new(&meta.config, &meta.vocab, meta.channels, meta.res, meta.seed)?;
        t.model.ps.load(&dir.join(MODEL_FILE))?;
        t.opt.load(&dir.join(OPT_FILE))?;
        t.step = meta.step;
        t.curve = meta.curve.clone();
        t.mileposts = meta.mileposts.clone();
        Ok((t, meta))
    }
}

/// Minimizes the denoising loss on `set`; the last `cfg.holdout` items are
/// held out and scored at every milepost.
pub fn train_diffusion(
    set: &CaptionedSet,
    vocab: &AttributeVocab,
    cfg: &DiffusionConfig,
    seed: u64,
    out: &Path,
    opts: &TrainOptions,
) -> Result<DiffusionMeta> {
    cfg.validate()?;
    let (channels, res, _) = set
        .shape()
        .ok_or_else(|| Error::InvalidArgument("captioned triplane set is empty".into()))?;
    if cfg.holdout >= set.len() {
        return Err(Error::Config(format!(
            "holdout {} leaves no training data out of {}",
            cfg.holdout,
            set.len()
        )));
    }
    let train_n = set.len() - cfg.holdout;
    let holdout: Vec<usize> = (train_n..set.len()).collect();
    let mut trainer = if opts.resume && out.join(META_FILE).exists() {
        let (t, meta) = DiffusionTrainer::load(out)?;
        if meta.config != *cfg || meta.seed != seed {
            return Err(Error::Config(format!(
                "checkpoint in {} was trained with a different config or seed",
                out.display()
            )));
        }
        log::info!("resuming diffusion training at step {}", t.step);
        t
    } else {
        DiffusionTrainer::new(cfg, vocab, channels, res, seed)?
    };
    let eval_seed = seed::split(seed, "diffusion-holdout", 0);
    let milepost = |t: &mut DiffusionTrainer, loss: Option<f64>| -> Result<()> {
        let mp = DiffusionMeta::milepost_dir(out, t.step);
        artifact::create_dir(&mp)?;
        crate::gan::save_atomic(&t.model.ps, &mp.join(MODEL_FILE))?;
        let h = if holdout.is_empty() {
            None
        } else {
            Some(t.eval_loss(set, &holdout, eval_seed)?)
        };
        if !t.mileposts.contains(&t.step) {
            t.mileposts.push(t.step);
            t.curve.push(CurvePoint {
                step: t.step,
                loss,
                holdout_loss: h,
            });
        }
        Ok(())
    };
    if trainer.step == 0 && cfg.milepost_every > 0 {
        milepost(&mut trainer, None)?;
    }
    let last = opts.stop_at.map_or(cfg.steps, |s| s.min(cfg.steps));
    let mut meta = None;
    while trainer.step < last {
        let loss = trainer.train_step(set, train_n, seed::split(seed, "diffusion-step", trainer.step))?;
        let step = trainer.step;
        let at_milepost = cfg.milepost_every > 0 && step % cfg.milepost_every == 0;
        if at_milepost {
            milepost(&mut trainer, Some(loss))?;
        } else if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == 1) {
            trainer.curve.push(CurvePoint {
                step,
                loss: Some(loss),
                holdout_loss: None,
            });
        }
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == 1) {
            log::info!("diffusion step {step}: loss {loss:.5}");
        }
        if step == last || (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
            meta = Some(trainer.save(out, seed, opts)?);
        }
    }
    match meta {
        Some(m) => Ok(m),
        None => trainer.save(out, seed, opts),
    }
}
