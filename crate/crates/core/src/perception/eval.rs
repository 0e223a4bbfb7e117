use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::caption::attribute_agreement;
use super::classifier::{down_up, to_attributes, AttributeClassifier};
use super::frechet::{frechet_distance, FeatureMoments, FrechetStats};
use crate::artifact;
use crate::diffusion::{decode_samples, sample_batch, NoiseSchedule, Predictor, SampleOptions};
use crate::error::{Error, Result};
use crate::gan::GanModels;
use crate::image::ImageBank;
use crate::renderer::Camera;
use crate::scenegen::{parse_caption, sample_scene, Attributes, AttributeVocab, SceneSpec};
use crate::seed;
use crate::triplane::TriplaneStats;

pub const REPORT_KIND: &str = "evaluation-report";
const CHUNK: usize = 32;

/// One evaluation prompt with the scene it was written from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub caption: String,
    pub spec: SceneSpec,
}

/// Full-template prompts for scenes drawn independently of every training set.
pub fn make_prompts(n: usize, seed: u64, vocab: &AttributeVocab) -> Vec<PromptRecord> {
    (0..n)
        .map(|i| {
            let spec = sample_scene(seed::split(seed, "eval-prompt", i as u64), vocab);
            PromptRecord {
                caption: Attributes::full(&spec).to_caption(),
                spec,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub kind: String,
    /// "gan" or "diffusion".
    pub model: String,
    pub n: usize,
    pub seed: u64,
    pub fid_low: f64,
    pub fid_high: f64,
    pub adherence_low: f64,
    pub adherence_high: f64,
    /// Agreement expected if answers were independent of prompts, from the
    /// answer frequencies on these very images.
    pub chance_low: f64,
    pub chance_high: f64,
    pub guidance: Option<f64>,
    pub steps: Option<usize>,
    /// Name to content hash of every checkpoint involved.
    pub checkpoints: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        artifact::write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let r: Self = artifact::read_json(path)?;
        if r.kind != REPORT_KIND {
            return Err(Error::format(path, format!("kind {:?} is not {REPORT_KIND:?}", r.kind)));
        }
        Ok(r)
    }
}

/// Feature statistics of the real corpus at full resolution and after the
/// down-up blur that matches upsampled direct renders.
#[derive(Debug, Clone)]
pub struct Reference {
    pub high: FrechetStats,
    pub low: FrechetStats,
}

pub fn reference_stats(clf: &AttributeClassifier, bank: &ImageBank, n: usize) -> Result<Reference> {
    let n = n.min(bank.len());
    let mut high = FeatureMoments::new(super::FEATURE_DIM);
    let mut low = FeatureMoments::new(super::FEATURE_DIM);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(CHUNK) {
        let x = bank.batch(chunk, clf.ps.dtype())?;
        high.push_tensor(&clf.read(&x)?.features)?;
        low.push_tensor(&clf.read(&down_up(&x)?)?.features)?;
    }
    Ok(Reference {
        high: high.stats()?,
        low: low.stats()?,
    })
}

/// Accumulates features and prompt agreement for one image stream.
struct Tally {
    moments: FeatureMoments,
    agreement: f64,
    answers: Vec<Attributes>,
    prompts: Vec<Attributes>,
}

impl Tally {
    fn new() -> Self {
        Self {
            moments: FeatureMoments::new(super::FEATURE_DIM),
            agreement: 0.0,
            answers: Vec::new(),
            prompts: Vec::new(),
        }
    }

    fn add(&mut self, clf: &AttributeClassifier, images: &Tensor, prompts: &[Attributes]) -> Result<()> {
        let r = clf.read(images)?;
        self.moments.push_tensor(&r.features)?;
        for (a, p) in clf.answer_indices(images)?.iter().zip(prompts) {
            let a = to_attributes(a, &clf.vocab);
            self.agreement += attribute_agreement(p, &a);
            self.answers.push(a);
            self.prompts.push(p.clone());
        }
        Ok(())
    }

    fn adherence(&self) -> f64 {
        self.agreement / self.answers.len().max(1) as f64
    }

    fn chance(&self) -> f64 {
        chance_agreement(&self.prompts, &self.answers)
    }
}

/// Mean agreement of each prompt with the answer distribution of all
/// images, i.e. the expected score of prompts paired with unrelated images.
pub fn chance_agreement(prompts: &[Attributes], answers: &[Attributes]) -> f64 {
    if prompts.is_empty() || answers.is_empty() {
        return 0.0;
    }
    let n = answers.len() as f64;
    let total: f64 = prompts
        .iter()
        .map(|p| answers.iter().map(|a| attribute_agreement(p, a)).sum::<f64>() / n)
        .sum();
    total / prompts.len() as f64
}

fn finish(
    model: &str,
    reference: &Reference,
    low: Tally,
    high: Tally,
    n: usize,
    seed: u64,
    guidance: Option<f64>,
    steps: Option<usize>,
) -> Result<EvalReport> {
    Ok(EvalReport {
        kind: REPORT_KIND.into(),
        model: model.into(),
        n,
        seed,
        fid_low: frechet_distance(&low.moments.stats()?, &reference.low)?,
        fid_high: frechet_distance(&high.moments.stats()?, &reference.high)?,
        adherence_low: low.adherence(),
        adherence_high: high.adherence(),
        chance_low: low.chance(),
        chance_high: high.chance(),
        guidance,
        steps,
        checkpoints: BTreeMap::new(),
    })
}

fn parse_prompts(prompts: &[PromptRecord], vocab: &AttributeVocab) -> Result<Vec<Attributes>> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("empty prompt set".into()));
    }
    prompts.iter().map(|p| parse_caption(&p.caption, vocab)).collect()
}

fn eval_cameras(gan: &GanModels, seeds: &[u64]) -> Vec<Camera> {
    seeds
        .iter()
        .map(|&s| gan.cfg.camera.sample(seed::split(s, "eval-view", 0), gan.cfg.render_res))
        .collect()
}

fn check_resolution(clf: &AttributeClassifier, gan: &GanModels) -> Result<()> {
    if clf.res != gan.cfg.image_res() {
        return Err(Error::Shape(format!(
            "classifier resolution {} differs from generator output {}",
            clf.res,
            gan.cfg.image_res()
        )));
    }
    Ok(())
}

/// `n` unconditional generator samples; sample `i` is paired with prompt
/// `i mod len` for the adherence score.
pub fn evaluate_gan(
    clf: &AttributeClassifier,
    gan: &GanModels,
    reference: &Reference,
    prompts: &[PromptRecord],
    n: usize,
    seed: u64,
) -> Result<EvalReport> {
    check_resolution(clf, gan)?;
    let parsed = parse_prompts(prompts, &clf.vocab)?;
    let (mut low, mut high) = (Tally::new(), Tally::new());
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(CHUNK) {
        let seeds: Vec<u64> = chunk.iter().map(|&i| seed::split(seed, "eval-sample", i as u64)).collect();
        let z = Tensor::cat(
            &seeds
                .iter()
                .map(|&s| gan.latents(&mut seed::rng(s, "z", 0), 1))
                .collect::<Result<Vec<_>>>()?,
            0,
        )?;
        let f = gan.fake(&z, &eval_cameras(gan, &seeds), 0, false)?;
        let p: Vec<Attributes> = chunk.iter().map(|&i| parsed[i % parsed.len()].clone()).collect();
        low.add(clf, &crate::nn::upsample2x(&f.low)?, &p)?;
        high.add(clf, &f.high, &p)?;
    }
    finish("gan", reference, low, high, n, seed, None, None)
}

/// `n` diffusion samples, sample `i` prompted with `prompts[i mod len]`,
/// decoded by the frozen stage-one decoder and upsampler.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_diffusion<P: Predictor>(
    clf: &AttributeClassifier,
    gan: &GanModels,
    reference: &Reference,
    model: &P,
    schedule: &NoiseSchedule,
    stats: &TriplaneStats,
    shape: (usize, usize, usize),
    prompts: &[PromptRecord],
    n: usize,
    seed: u64,
    opts: SampleOptions,
) -> Result<EvalReport> {
    check_resolution(clf, gan)?;
    if stats.channels() != shape.0 {
        return Err(Error::InvalidArgument(format!(
            "statistics cover {} channels but the model produces {}",
            stats.channels(),
            shape.0
        )));
    }
    let parsed = parse_prompts(prompts, &clf.vocab)?;
    let (mut low, mut high) = (Tally::new(), Tally::new());
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(CHUNK) {
        let seeds: Vec<u64> = chunk.iter().map(|&i| seed::split(seed, "eval-sample", i as u64)).collect();
        let caps: Vec<&str> = chunk.iter().map(|&i| prompts[i % prompts.len()].caption.as_str()).collect();
        let x = sample_batch(model, schedule, shape, &caps, &seeds, opts, gan.ps_gen.dtype())?;
        let (l, h) = decode_samples(gan, stats, &x, &eval_cameras(gan, &seeds), 0)?;
        let p: Vec<Attributes> = chunk.iter().map(|&i| parsed[i % parsed.len()].clone()).collect();
        low.add(clf, &crate::nn::upsample2x(&l)?, &p)?;
        high.add(clf, &h, &p)?;
        log::debug!("evaluated {} / {n} diffusion samples", high.answers.len());
    }
    finish("diffusion", reference, low, high, n, seed, Some(opts.guidance), Some(opts.steps))
}
