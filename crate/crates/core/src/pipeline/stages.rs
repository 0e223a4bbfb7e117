use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::artifact;
use crate::diffusion::{self, decode_samples, sample_batch, CaptionedSet, DiffusionMeta, DiffusionModel, SampleOptions};
use crate::error::{Error, Result};
use crate::gan::{self, export, GanMeta, GanModels};
use crate::image::{Image, ImageBank};
use crate::perception::{self, AttributeClassifier, EvalReport, PromptRecord};
use crate::renderer::Camera;
use crate::scenegen::{self, Manifest};
use crate::seed;
use crate::triplane::{TriplaneField, TriplaneStats};

pub const RUN_FILE: &str = "run.json";
pub const STAGE_FILE: &str = "stage.json";
pub const CAPTIONS_NAME: &str = "captions.jsonl";
pub const PROMPTS_NAME: &str = "prompts.jsonl";
pub const SAMPLES_NAME: &str = "samples.jsonl";
pub const SUMMARY_NAME: &str = "summary.json";

/// Stage directories under an artifact root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn classifier_data(&self) -> PathBuf {
        self.root.join("classifier_data")
    }
    pub fn classifier(&self) -> PathBuf {
        self.root.join("classifier")
    }
    pub fn gan(&self) -> PathBuf {
        self.root.join("gan")
    }
    pub fn triplanes(&self) -> PathBuf {
        self.root.join("triplanes")
    }
    pub fn captions(&self) -> PathBuf {
        self.root.join("captions")
    }
    pub fn diffusion(&self) -> PathBuf {
        self.root.join("diffusion")
    }
    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

/// Written last into each stage directory; marks the stage complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageStamp {
    pub stage: String,
    pub format_version: u32,
    pub config_hash: String,
    /// Directories (relative to the root) this stage read.
    pub inputs: Vec<String>,
}

impl StageStamp {
    pub fn read(dir: &Path) -> Result<Self> {
        artifact::read_json(&dir.join(STAGE_FILE))
    }
}

/// The resolved config and its hash, as recorded at the artifact root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub config_hash: String,
    pub config: RunConfig,
}

fn stamp(dir: &Path, stage: &str, cfg: &RunConfig, inputs: &[&str]) -> Result<()> {
    artifact::write_json(
        &dir.join(STAGE_FILE),
        &StageStamp {
            stage: stage.into(),
            format_version: 1,
            config_hash: cfg.hash()?,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        },
    )
}

/// True when `dir` holds a finished stage for this exact config.
pub fn stage_done(dir: &Path, cfg: &RunConfig) -> bool {
    match (StageStamp::read(dir), cfg.hash()) {
        (Ok(s), Ok(h)) => s.config_hash == h,
        _ => false,
    }
}

pub fn stage_seed(cfg: &RunConfig, stage: &str) -> u64 {
    seed::split(cfg.seed, stage, 0)
}

pub fn write_run(layout: &Layout, cfg: &RunConfig) -> Result<()> {
    artifact::create_dir(&layout.root)?;
    artifact::write_json(
        &layout.root.join(RUN_FILE),
        &RunRecord {
            config_hash: cfg.hash()?,
            config: cfg.clone(),
        },
    )
}

/// Stage-one corpus of analytic renders.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let m = scenegen::build_dataset(cfg.data.n_images, stage_seed(cfg, "data"), out, &cfg.data.scene)?;
    stamp(out, "gen-data", cfg, &[])?;
    Ok(m)
}

/// The classifier learns from its own corpus, disjoint in seed from the
/// stage-one corpus, so evaluation never scores images it was fitted to.
pub fn train_classifier(cfg: &RunConfig, corpus_dir: &Path, out: &Path) -> Result<AttributeClassifier> {
    let m = scenegen::build_dataset(cfg.classifier.n_images, stage_seed(cfg, "classifier-data"), corpus_dir, &cfg.data.scene)?;
    stamp(corpus_dir, "classifier-data", cfg, &[])?;
    let (clf, meta) =
        perception::train_classifier(&m, &cfg.data.scene.vocab, &cfg.classifier, stage_seed(cfg, "classifier"), false)?;
    let meta = perception::ClassifierMeta {
        corpus: artifact::link(out, &m.path)?,
        ..meta
    };
    clf.save(out, &meta)?;
    stamp(out, "train-classifier", cfg, &["classifier_data"])?;
    Ok(clf)
}

pub fn train_gan(cfg: &RunConfig, data: &Path, out: &Path, resume: bool) -> Result<GanMeta> {
    let corpus = Manifest::read(&data.join(scenegen::dataset::MANIFEST_NAME))?;
    let opts = gan::TrainOptions {
        run_hash: cfg.hash()?,
        resume,
        ..Default::default()
    };
    let meta = gan::train_gan(&corpus, &cfg.gan, stage_seed(cfg, "gan"), out, &opts)?;
    stamp(out, "train-gan", cfg, &["data"])?;
    Ok(meta)
}

pub fn export_triplanes(cfg: &RunConfig, gan_dir: &Path, out: &Path) -> Result<export::TriplaneManifest> {
    let m = gan::export_triplane_dataset(gan_dir, cfg.export.n_triplanes, stage_seed(cfg, "export"), out, &cfg.hash()?)?;
    stamp(out, "export-triplanes", cfg, &["gan"])?;
    Ok(m)
}

/// One caption per exported triplane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub index: usize,
    /// As listed in the triplane manifest.
    pub triplane_path: String,
    pub caption: String,
    pub seed: u64,
}

pub fn caption_seed(seed: u64, i: usize) -> u64 {
    seed::split(seed, "caption", i as u64)
}

/// Captions every triplane in `triplanes` by rendering it with the decoder
/// of `gan_dir` and reading the render with the classifier.
pub fn caption(gan_dir: &Path, classifier_dir: &Path, triplanes: &Path, out_file: &Path, seed: u64) -> Result<Vec<CaptionRecord>> {
    let gan = load_gan(gan_dir)?;
    let (clf, _) = AttributeClassifier::load(classifier_dir)?;
    let manifest = export::TriplaneManifest::read(&triplanes.join(export::MANIFEST_NAME))?;
    let mut out = Vec::with_capacity(manifest.records.len());
    let idx: Vec<usize> = (0..manifest.records.len()).collect();
    for chunk in idx.chunks(32) {
        let planes = chunk
            .iter()
            .map(|&i| manifest.triplane(i)?.to_tensor(DType::F32))
            .collect::<Result<Vec<_>>>()?;
        let seeds: Vec<u64> = chunk.iter().map(|&i| caption_seed(seed, i)).collect();
        let caps = perception::caption_triplanes(&clf, &gan, &Tensor::stack(&planes, 0)?, &seeds)?;
        for ((&i, c), s) in chunk.iter().zip(caps).zip(seeds) {
            out.push(CaptionRecord {
                index: i,
                triplane_path: manifest.records[i].triplane_path.clone(),
                caption: c,
                seed: s,
            });
        }
    }
    if let Some(dir) = out_file.parent() {
        artifact::create_dir(dir)?;
    }
    artifact::write_jsonl(out_file, &out)?;
    Ok(out)
}

pub fn load_gan(dir: &Path) -> Result<GanModels> {
    gan::train::load_inference(dir, dir)
}

/// Links between artifacts are stored relative to the directory holding them.
pub fn resolve(ckpt: &Path, link: &str) -> PathBuf {
    ckpt.join(link)
}

/// Loads triplanes, statistics sidecar and captions into a normalized set.
pub fn load_captioned(triplanes: &Path, captions: &Path) -> Result<(CaptionedSet, TriplaneStats)> {
    let manifest = export::TriplaneManifest::read(&triplanes.join(export::MANIFEST_NAME))?;
    let stats_path = triplanes.join(export::STATS_NAME);
    if !stats_path.exists() {
        return Err(Error::format(&stats_path, "statistics sidecar is missing; rerun export-triplanes"));
    }
    let stats = TriplaneStats::read(&stats_path)?;
    let records: Vec<CaptionRecord> = artifact::read_jsonl(captions)?;
    if records.len() != manifest.records.len() {
        return Err(Error::format(
            captions,
            format!("{} captions for {} triplanes", records.len(), manifest.records.len()),
        ));
    }
    let mut fields = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if r.index != i || r.triplane_path != manifest.records[i].triplane_path {
            return Err(Error::format(captions, format!("line {} does not match triplane {i}", i + 1)));
        }
        let t = manifest.triplane(i).map_err(|e| Error::Item { index: i, source: Box::new(e) })?;
        fields.push(stats.normalize(&t)?);
    }
    let set = CaptionedSet::new(fields, records.into_iter().map(|r| r.caption).collect())?;
    Ok((set, stats))
}

pub fn train_diffusion(
    cfg: &RunConfig,
    triplanes: &Path,
    captions: &Path,
    gan_dir: &Path,
    out: &Path,
    resume: bool,
) -> Result<DiffusionMeta> {
    let (set, stats) = load_captioned(triplanes, captions)?;
    artifact::create_dir(out)?;
    let opts = diffusion::TrainOptions {
        run_hash: cfg.hash()?,
        resume,
        stop_at: None,
        stats: artifact::link(out, &triplanes.join(export::STATS_NAME))?,
        stats_hash: artifact::content_hash(&stats)?,
        gan_checkpoint: artifact::link(out, gan_dir)?,
    };
    let meta = diffusion::train_diffusion(&set, &cfg.data.scene.vocab, &cfg.diffusion, stage_seed(cfg, "diffusion"), out, &opts)?;
    stamp(out, "train-diffusion", cfg, &["triplanes", "captions", "gan"])?;
    Ok(meta)
}

/// A trained stage-two model with the frozen pieces it decodes through.
pub struct DiffusionBundle {
    pub model: DiffusionModel,
    pub meta: DiffusionMeta,
    pub stats: TriplaneStats,
    pub gan: GanModels,
}

impl DiffusionBundle {
    /// Loads a checkpoint, refusing statistics whose hash differs from the
    /// ones the model was trained with.
    pub fn load(ckpt: &Path) -> Result<Self> {
        let (model, meta) = DiffusionModel::load(ckpt, None)?;
        let stats_path = resolve(ckpt, &meta.stats);
        let stats = TriplaneStats::read(&stats_path)?;
        if artifact::content_hash(&stats)? != meta.stats_hash {
            return Err(Error::format(&stats_path, "statistics differ from the ones the checkpoint was trained with"));
        }
        let gan = load_gan(&resolve(ckpt, &meta.gan_checkpoint))?;
        Ok(Self { model, meta, stats, gan })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.meta.channels, self.meta.res, self.meta.res)
    }

    pub fn options(&self, steps: usize, guidance: f64) -> SampleOptions {
        SampleOptions {
            steps,
            guidance,
            clip_prediction: self.model.cfg.clip_prediction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub prompt: String,
    pub seed: u64,
    pub triplane_path: String,
    pub render_path: String,
    pub camera: Camera,
}

pub fn sample_seed(seed: u64, i: usize) -> u64 {
    seed::split(seed, "sample", i as u64)
}

/// Samples one triplane per prompt, writes it (denormalized) and its render.
pub fn sample(ckpt: &Path, prompts: &[String], seed: u64, steps: usize, guidance: f64, out: &Path) -> Result<Vec<SampleRecord>> {
    let b = DiffusionBundle::load(ckpt)?;
    artifact::create_dir(&out.join("triplanes"))?;
    artifact::create_dir(&out.join("renders"))?;
    let mut records = Vec::with_capacity(prompts.len());
    let idx: Vec<usize> = (0..prompts.len()).collect();
    for chunk in idx.chunks(16) {
        let seeds: Vec<u64> = chunk.iter().map(|&i| sample_seed(seed, i)).collect();
        let caps: Vec<&str> = chunk.iter().map(|&i| prompts[i].as_str()).collect();
        let x = sample_batch(&b.model.den, &b.model.cfg.schedule, b.shape(), &caps, &seeds, b.options(steps, guidance), DType::F32)?;
        let cams: Vec<Camera> = seeds
            .iter()
            .map(|&s| b.gan.cfg.camera.sample(seed::split(s, "sample-view", 0), b.gan.cfg.render_res))
            .collect();
        let (_, high) = decode_samples(&b.gan, &b.stats, &x, &cams, 0)?;
        let planes = b.stats.denormalize_tensor(&x)?;
        for (k, &i) in chunk.iter().enumerate() {
            let rec = SampleRecord {
                prompt: prompts[i].clone(),
                seed: seeds[k],
                triplane_path: format!("triplanes/{i:06}.tri"),
                render_path: format!("renders/{i:06}.png"),
                camera: cams[k],
            };
            TriplaneField::from_tensor(&planes.get(k)?)?.write(&out.join(&rec.triplane_path))?;
            Image::from_tensor(&high.get(k)?)?.write_png(&out.join(&rec.render_path))?;
            records.push(rec);
        }
    }
    artifact::write_jsonl(&out.join(SAMPLES_NAME), &records)?;
    Ok(records)
}

/// Renders a stored triplane with a stage-one checkpoint's decoder and
/// upsampler (style input all ones) from the given azimuth.
pub fn render(gan_dir: &Path, triplane: &Path, azimuth_deg: f64, out: &Path) -> Result<()> {
    let gan = load_gan(gan_dir)?;
    let field = TriplaneField::read(triplane)?;
    let planes = field.to_tensor(DType::F32)?.unsqueeze(0)?;
    let cam = gan.cfg.camera.at_azimuth(azimuth_deg.to_radians(), gan.cfg.render_res);
    let w = Tensor::ones((1, gan.cfg.w_dim), DType::F32, planes.device())?;
    let (_, _, high) = gan.render(&planes, &w, &[cam], 0, false)?;
    Image::from_tensor(&high.get(0)?)?.write_png(out)
}

/// What a checkpoint directory holds.
pub enum Checkpoint {
    Gan(GanModels, GanMeta),
    Diffusion(Box<DiffusionBundle>),
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(gan::train::META_FILE);
    let v: serde_json::Value = artifact::read_json(&path)?;
    match v.get("kind").and_then(|k| k.as_str()) {
        Some(gan::train::META_KIND) => {
            let meta = GanMeta::read(dir)?;
            Ok(Checkpoint::Gan(load_gan(dir)?, meta))
        }
        Some(diffusion::train::META_KIND) => Ok(Checkpoint::Diffusion(Box::new(DiffusionBundle::load(dir)?))),
        other => Err(Error::format(&path, format!("not a checkpoint (kind {other:?})"))),
    }
}

/// Inputs shared by every evaluation of one run.
pub struct EvalInputs {
    pub classifier_dir: PathBuf,
    pub clf: AttributeClassifier,
    pub reference: perception::Reference,
    pub prompts: Vec<PromptRecord>,
}

impl EvalInputs {
    pub fn load(classifier: &Path, corpus: &Path, n_reference: usize, prompts: &Path) -> Result<Self> {
        let (clf, _) = AttributeClassifier::load(classifier)?;
        let m = Manifest::read(&corpus.join(scenegen::dataset::MANIFEST_NAME))?;
        let n = n_reference.min(m.records.len());
        let paths: Vec<PathBuf> = (0..n).map(|i| m.image_path(i)).collect();
        let bank = ImageBank::load(&paths, clf.res)?;
        let reference = perception::reference_stats(&clf, &bank, n)?;
        let prompts = artifact::read_jsonl(prompts)?;
        Ok(Self {
            classifier_dir: classifier.to_path_buf(),
            clf,
            reference,
            prompts,
        })
    }
}

fn file_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(artifact::hex(&Sha256::digest(&bytes)))
}

/// Evaluates a GAN or diffusion checkpoint; `models` optionally points at a
/// milepost holding the weights to use instead of the final ones.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    inputs: &EvalInputs,
    ckpt: &Path,
    models: Option<&Path>,
    n: usize,
    seed: u64,
    steps: usize,
    guidance: f64,
) -> Result<EvalReport> {
    let mut report = match load_checkpoint(ckpt)? {
        Checkpoint::Gan(gan, _) => {
            if let Some(m) = models {
                gan.load_inference(m)?;
            }
            let mut r = perception::evaluate_gan(&inputs.clf, &gan, &inputs.reference, &inputs.prompts, n, seed)?;
            let weights = models.unwrap_or(ckpt).join(gan::GEN_FILE);
            r.checkpoints.insert("generator".into(), file_hash(&weights)?);
            r
        }
        Checkpoint::Diffusion(b) => {
            let mut r = perception::evaluate_diffusion(
                &inputs.clf,
                &b.gan,
                &inputs.reference,
                &b.model.den,
                &b.model.cfg.schedule,
                &b.stats,
                b.shape(),
                &inputs.prompts,
                n,
                seed,
                b.options(steps, guidance),
            )?;
            r.checkpoints.insert("denoiser".into(), file_hash(&ckpt.join(diffusion::train::MODEL_FILE))?);
            r.checkpoints.insert("stats".into(), b.meta.stats_hash.clone());
            r
        }
    };
    report.checkpoints.insert("classifier".into(), file_hash(&inputs.classifier_dir.join(perception::classifier::MODEL_FILE))?);
    Ok(report)
}

/// Headline numbers of a full run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub config_hash: String,
    pub classifier_accuracy: [f64; 4],
    pub gan_untrained: EvalReport,
    pub gan: EvalReport,
    pub diffusion: EvalReport,
    pub diffusion_unguided: EvalReport,
    pub view_consistency: f64,
}

/// Re-captions exported triplanes from a second azimuth.
pub fn consistency(gan_dir: &Path, classifier: &AttributeClassifier, triplanes: &Path, n: usize, seed: u64) -> Result<f64> {
    let gan = load_gan(gan_dir)?;
    let manifest = export::TriplaneManifest::read(&triplanes.join(export::MANIFEST_NAME))?;
    let n = n.min(manifest.records.len());
    let (mut agree, mut total) = (0.0, 0usize);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(32) {
        let planes = chunk
            .iter()
            .map(|&i| manifest.triplane(i)?.to_tensor(DType::F32))
            .collect::<Result<Vec<_>>>()?;
        let seeds: Vec<u64> = chunk.iter().map(|&i| caption_seed(seed, i)).collect();
        agree += perception::view_consistency(classifier, &gan, &Tensor::stack(&planes, 0)?, &seeds)? * chunk.len() as f64;
        total += chunk.len();
    }
    Ok(agree / total.max(1) as f64)
}

/// Runs every stage in order; stages already completed for this config are
/// skipped, and interrupted training resumes from its last checkpoint.
pub fn run_all(cfg: &RunConfig, layout: &Layout) -> Result<Summary> {
    cfg.validate()?;
    write_run(layout, cfg)?;
    let l = layout;
    if !stage_done(&l.data(), cfg) {
        log::info!("generating {} corpus images", cfg.data.n_images);
        gen_data(cfg, &l.data())?;
    }
    if !stage_done(&l.classifier(), cfg) {
        log::info!("training the attribute classifier");
        train_classifier(cfg, &l.classifier_data(), &l.classifier())?;
    }
    if !stage_done(&l.gan(), cfg) {
        log::info!("training the triplane GAN");
        train_gan(cfg, &l.data(), &l.gan(), true)?;
    }
    if !stage_done(&l.triplanes(), cfg) {
        log::info!("exporting {} triplanes", cfg.export.n_triplanes);
        export_triplanes(cfg, &l.gan(), &l.triplanes())?;
    }
    let captions_file = l.captions().join(CAPTIONS_NAME);
    if !stage_done(&l.captions(), cfg) {
        log::info!("captioning triplanes");
        caption(&l.gan(), &l.classifier(), &l.triplanes(), &captions_file, stage_seed(cfg, "caption"))?;
        stamp(&l.captions(), "caption", cfg, &["gan", "classifier", "triplanes"])?;
    }
    if !stage_done(&l.diffusion(), cfg) {
        log::info!("training the triplane diffusion model");
        train_diffusion(cfg, &l.triplanes(), &captions_file, &l.gan(), &l.diffusion(), true)?;
    }
    let e = &cfg.eval;
    let prompts = perception::make_prompts(e.n_prompts, stage_seed(cfg, "prompts"), &cfg.data.scene.vocab);
    if !stage_done(&l.samples(), cfg) {
        log::info!("sampling {} showcase triplanes", e.n_showcase);
        let texts: Vec<String> = prompts.iter().take(e.n_showcase).map(|p| p.caption.clone()).collect();
        sample(&l.diffusion(), &texts, stage_seed(cfg, "samples"), e.steps, e.guidance, &l.samples())?;
        stamp(&l.samples(), "sample", cfg, &["diffusion"])?;
    }
    let summary_path = l.eval().join(SUMMARY_NAME);
    if stage_done(&l.eval(), cfg) {
        return artifact::read_json(&summary_path);
    }
    log::info!("evaluating");
    artifact::create_dir(&l.eval())?;
    let prompts_path = l.eval().join(PROMPTS_NAME);
    artifact::write_jsonl(&prompts_path, &prompts)?;
    let inputs = EvalInputs::load(&l.classifier(), &l.data(), e.n_reference, &prompts_path)?;
    let eval_seed = stage_seed(cfg, "eval");
    let first = GanMeta::milepost_dir(&l.gan(), 0);
    if !first.exists() {
        return Err(Error::Config(format!(
            "{} is missing; the untrained baseline needs gan.milepost_every > 0",
            first.display()
        )));
    }
    let gan_untrained = evaluate(&inputs, &l.gan(), Some(&first), e.n_gan_samples, eval_seed, e.steps, e.guidance)?;
    let gan = evaluate(&inputs, &l.gan(), None, e.n_gan_samples, eval_seed, e.steps, e.guidance)?;
    let diffusion = evaluate(&inputs, &l.diffusion(), None, e.n_diffusion_samples, eval_seed, e.steps, e.guidance)?;
    let diffusion_unguided = evaluate(&inputs, &l.diffusion(), None, e.n_diffusion_samples, eval_seed, e.steps, 0.0)?;
    let view_consistency = consistency(&l.gan(), &inputs.clf, &l.triplanes(), e.n_consistency, stage_seed(cfg, "caption"))?;
    let clf_meta: perception::ClassifierMeta = artifact::read_json(&l.classifier().join(perception::classifier::META_FILE))?;
    let summary = Summary {
        config_hash: cfg.hash()?,
        classifier_accuracy: clf_meta.accuracy,
        gan_untrained,
        gan,
        diffusion,
        diffusion_unguided,
        view_consistency,
    };
    for (name, r) in [
        ("gan_untrained", &summary.gan_untrained),
        ("gan", &summary.gan),
        ("diffusion", &summary.diffusion),
        ("diffusion_unguided", &summary.diffusion_unguided),
    ] {
        r.write(&l.eval().join(format!("{name}.json")))?;
    }
    artifact::write_json(&summary_path, &summary)?;
    stamp(&l.eval(), "eval", cfg, &["data", "classifier", "gan", "diffusion", "triplanes"])?;
    Ok(summary)
}
