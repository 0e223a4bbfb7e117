use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, D};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::error::{Error, Result};
use crate::image::ImageBank;
use crate::nn::{self, Adam, Conv2d, Init, Linear, ParamStore};
use crate::scenegen::{Attributes, AttributeVocab, Manifest, SceneSpec};
use crate::seed;

pub const MODEL_FILE: &str = "classifier.safetensors";
pub const META_FILE: &str = "meta.json";
pub const META_KIND: &str = "attribute-classifier";
pub const FEATURE_DIM: usize = 64;
pub const MIN_CORPUS: usize = 1000;

/// The four questions, in head order.
pub const QUESTIONS: [&str; 4] = [
    "what shape is the object?",
    "what color is the object?",
    "how big is the object?",
    "what color is the top of the object?",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// Images in the classifier's own labeled corpus.
    pub n_images: usize,
    pub channels: Vec<usize>,
    pub batch: usize,
    pub steps: u64,
    pub lr: f64,
    /// Fraction of the corpus held out for accuracy.
    pub holdout: f64,
    /// Probability of training on a blurred (down then up) copy, so
    /// upsampled direct renders are read as reliably as full renders.
    pub blur_prob: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            n_images: 4000,
            channels: vec![32, 64, 64],
            batch: 64,
            steps: 2000,
            lr: 2e-3,
            holdout: 0.1,
            blur_prob: 0.5,
        }
    }
}

/// Integer labels per head for one scene.
pub fn labels(spec: &SceneSpec, vocab: &AttributeVocab) -> Result<[usize; 4]> {
    let missing = |what: &str| Error::InvalidArgument(format!("{what} of {spec:?} is not in the vocabulary"));
    Ok([
        vocab.shape_index(spec.shape).ok_or_else(|| missing("shape"))?,
        vocab.color_index(&spec.color).ok_or_else(|| missing("color"))?,
        vocab.size_index(spec.size).ok_or_else(|| missing("size"))?,
        vocab.color_index(&spec.accent).ok_or_else(|| missing("accent"))?,
    ])
}

/// Index of the first maximum, so ties go to the lowest vocabulary index.
pub fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierMeta {
    pub kind: String,
    pub format_version: u32,
    pub config: ClassifierConfig,
    pub vocab: AttributeVocab,
    pub res: usize,
    pub seed: u64,
    /// Held-out accuracy per head.
    pub accuracy: [f64; 4],
    /// Corpus manifest; relative to the classifier directory when saved by a run.
    pub corpus: String,
}

/// Convolutional attribute classifier with a softmax head per question.
pub struct AttributeClassifier {
    pub ps: ParamStore,
    pub res: usize,
    pub vocab: AttributeVocab,
    convs: Vec<(Conv2d, Conv2d)>,
    feature: Linear,
    heads: Vec<Linear>,
}

/// Per-image answers plus the feature vectors used for the FID proxy.
#[derive(Debug, Clone)]
pub struct Readout {
    /// (B, 64) feature activations.
    pub features: Tensor,
    /// Per head, (B, n_answers) probabilities.
    pub probs: Vec<Tensor>,
}

impl AttributeClassifier {
    pub fn new(vocab: &AttributeVocab, res: usize, cfg: &ClassifierConfig, seed: u64) -> Result<Self> {
        let levels = cfg.channels.len();
        if levels == 0 || res % (1 << levels) != 0 || res >> levels == 0 {
            return Err(Error::Config(format!("classifier resolution {res} does not suit {levels} levels")));
        }
        let mut ps = ParamStore::new(DType::F32, seed::split(seed, "classifier-init", 0), "classifier");
        let std = Init::Standard { gain: 2f64.sqrt() };
        let mut convs = Vec::new();
        let mut prev = 3;
        for (l, &c) in cfg.channels.iter().enumerate() {
            convs.push((
                Conv2d::new(&mut ps, &format!("conv{l}a"), prev, c, 3, 1, std, true)?,
                Conv2d::new(&mut ps, &format!("conv{l}b"), c, c, 3, 1, std, true)?,
            ));
            prev = c;
        }
        let side = res >> levels;
        let feature = Linear::new(&mut ps, "feature", prev * side * side, FEATURE_DIM, std, Some(0.0))?;
        let heads = vocab
            .head_sizes()
            .iter()
            .enumerate()
            .map(|(k, &n)| Linear::new(&mut ps, &format!("head{k}"), FEATURE_DIM, n, Init::Standard { gain: 1.0 }, Some(0.0)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ps,
            res,
            vocab: vocab.clone(),
            convs,
            feature,
            heads,
        })
    }

    fn logits(&self, images: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (b, c, h, w) = images.dims4()?;
        if c != 3 || h != self.res || w != self.res {
            return Err(Error::Shape(format!(
                "classifier reads (B, 3, {r}, {r}) images, got {:?}",
                images.dims(),
                r = self.res
            )));
        }
        let mut x = ((images * 2.0)? - 1.0)?;
        for (a, bconv) in &self.convs {
            x = nn::leaky_relu(&a.forward(&x)?)?;
            x = nn::leaky_relu(&bconv.forward(&x)?)?;
            x = nn::downsample2x(&x)?;
        }
        let f = self.feature.forward(&x.reshape((b, ()))?)?.relu()?;
        let logits = self.heads.iter().map(|h| h.forward(&f)).collect::<Result<Vec<_>>>()?;
        Ok((f, logits))
    }

    pub fn read(&self, images: &Tensor) -> Result<Readout> {
        let (features, logits) = self.logits(&images.to_dtype(self.ps.dtype())?)?;
        let probs = logits
            .iter()
            .map(|l| Ok(candle_nn::ops::softmax(l, D::Minus1)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Readout { features, probs })
    }

    /// Answer indices per image and head.
    pub fn answer_indices(&self, images: &Tensor) -> Result<Vec<[usize; 4]>> {
        let r = self.read(images)?;
        let b = images.dim(0)?;
        let probs: Vec<Vec<Vec<f64>>> = r
            .probs
            .iter()
            .map(|p| Ok(p.to_dtype(DType::F64)?.to_vec2::<f64>()?))
            .collect::<Result<_>>()?;
        Ok((0..b)
            .map(|i| [0, 1, 2, 3].map(|k| argmax_first(&probs[k][i])))
            .collect())
    }

    pub fn save(&self, dir: &Path, meta: &ClassifierMeta) -> Result<()> {
        artifact::create_dir(dir)?;
        crate::gan::save_atomic(&self.ps, &dir.join(MODEL_FILE))?;
        artifact::write_json(&dir.join(META_FILE), meta)
    }

    pub fn load(dir: &Path) -> Result<(Self, ClassifierMeta)> {
        let path = dir.join(META_FILE);
        let meta: ClassifierMeta = artifact::read_json(&path)?;
        if meta.kind != META_KIND {
            return Err(Error::format(&path, format!("kind {:?} is not {META_KIND:?}", meta.kind)));
        }
        let clf = Self::new(&meta.vocab, meta.res, &meta.config, meta.seed)?;
        clf.ps.load(&dir.join(MODEL_FILE))?;
        Ok((clf, meta))
    }
}

/// Converts answer indices back to attribute values.
pub fn to_attributes(ans: &[usize; 4], vocab: &AttributeVocab) -> Attributes {
    Attributes {
        shape: Some(vocab.shapes[ans[0]]),
        color: Some(vocab.colors[ans[1]].clone()),
        size: Some(vocab.sizes[ans[2]]),
        accent: Some(vocab.colors[ans[3]].clone()),
    }
}

/// Blurs a batch the way direct renders are brought to full resolution.
pub fn down_up(images: &Tensor) -> Result<Tensor> {
    nn::upsample2x(&nn::downsample2x(images)?)
}

fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let idx = Tensor::from_slice(labels, (labels.len(), 1), logits.device())?;
    Ok((logp.gather(&idx, 1)?.mean_all()? * -1.0)?)
}

/// Accuracy of each head on `indices` of the bank.
pub fn accuracy(clf: &AttributeClassifier, bank: &ImageBank, labels: &[[usize; 4]], indices: &[usize], blurred: bool) -> Result<[f64; 4]> {
    let mut correct = [0usize; 4];
    for chunk in indices.chunks(128) {
        let mut x = bank.batch(chunk, clf.ps.dtype())?;
        if blurred {
            x = down_up(&x)?;
        }
        for (ans, &i) in clf.answer_indices(&x)?.iter().zip(chunk) {
            for k in 0..4 {
                correct[k] += (ans[k] == labels[i][k]) as usize;
            }
        }
    }
    let n = indices.len().max(1) as f64;
    Ok(correct.map(|c| c as f64 / n))
}

/// Trains on a labeled scenegen corpus and reports held-out accuracy.
/// `shuffle_labels` permutes labels across images (a null control).
pub fn train_classifier(
    corpus: &Manifest,
    vocab: &AttributeVocab,
    cfg: &ClassifierConfig,
    seed: u64,
    shuffle_labels: bool,
) -> Result<(AttributeClassifier, ClassifierMeta)> {
    let n = corpus.records.len();
    if n < MIN_CORPUS {
        return Err(Error::InvalidArgument(format!(
            "classifier corpus has {n} images, at least {MIN_CORPUS} required"
        )));
    }
    let res = corpus.records[0].camera.width;
    let paths: Vec<PathBuf> = (0..n).map(|i| corpus.image_path(i)).collect();
    let bank = ImageBank::load(&paths, res)?;
    let mut labels = corpus
        .records
        .iter()
        .map(|r| labels(&r.spec, vocab))
        .collect::<Result<Vec<_>>>()?;
    if shuffle_labels {
        let mut rng = seed::rng(seed, "classifier-shuffle", 0);
        for k in 0..4 {
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                let (a, b) = (labels[i][k], labels[j][k]);
                labels[i][k] = b;
                labels[j][k] = a;
            }
        }
    }
    let n_hold = ((n as f64 * cfg.holdout).round() as usize).clamp(1, n - 1);
    let train_n = n - n_hold;
    let mut clf = AttributeClassifier::new(vocab, res, cfg, seed)?;
    let mut opt = Adam::new(&[&clf.ps], cfg.lr, 0.9, 0.999)?;
    for step in 0..cfg.steps {
        let ss = seed::split(seed, "classifier-step", step);
        let mut rng = seed::rng(ss, "batch", 0);
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..train_n)).collect();
        let blur: Vec<bool> = (0..cfg.batch).map(|_| rng.random_bool(cfg.blur_prob.clamp(0.0, 1.0))).collect();
        let x = bank.batch(&idx, clf.ps.dtype())?;
        let xb = down_up(&x)?;
        let mask: Vec<f32> = blur.iter().map(|&b| b as u8 as f32).collect();
        let mask = Tensor::from_vec(mask, (cfg.batch, 1, 1, 1), x.device())?;
        let x = (x.broadcast_mul(&(1.0 - &mask)?)? + xb.broadcast_mul(&mask)?)?;
        let (_, logits) = clf.logits(&x)?;
        let mut loss = Tensor::zeros((), clf.ps.dtype(), x.device())?;
        for (k, l) in logits.iter().enumerate() {
            let y: Vec<u32> = idx.iter().map(|&i| labels[i][k] as u32).collect();
            loss = (loss + cross_entropy(l, &y)?)?;
        }
        let v = nn::scalar(&loss)?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                step: step as usize,
                which: "classifier loss".into(),
            });
        }
        if step % 200 == 0 {
            log::info!("classifier step {step}: loss {v:.4}");
        }
        opt.step(&loss.backward()?)?;
    }
    let held: Vec<usize> = (train_n..n).collect();
    let acc = accuracy(&clf, &bank, &labels, &held, false)?;
    log::info!("classifier held-out accuracy {acc:?}");
    let meta = ClassifierMeta {
        kind: META_KIND.into(),
        format_version: 1,
        config: cfg.clone(),
        vocab: vocab.clone(),
        res,
        seed,
        accuracy: acc,
        corpus: corpus.path.display().to_string(),
    };
    clf.res = res;
    Ok((clf, meta))
}
