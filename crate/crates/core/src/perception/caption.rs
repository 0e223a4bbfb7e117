use candle_core::Tensor;

use super::classifier::{to_attributes, AttributeClassifier};
use crate::error::{Error, Result};
use crate::gan::GanModels;
use crate::nn;
use crate::renderer::{Camera, Outputs};
use crate::scenegen::{parse_caption, Attributes};
use crate::seed;

/// One answer per question for each image, from the closed vocabularies.
pub fn answer_attributes(clf: &AttributeClassifier, images: &Tensor) -> Result<Vec<Attributes>> {
    Ok(clf
        .answer_indices(images)?
        .iter()
        .map(|a| to_attributes(a, &clf.vocab))
        .collect())
}

/// Direct (decoder-only) renders brought to classifier resolution.
pub fn render_for_classifier(clf: &AttributeClassifier, gan: &GanModels, planes: &Tensor, cams: &[Camera], render_seed: u64) -> Result<Tensor> {
    if clf.res != 2 * gan.cfg.render_res {
        return Err(Error::Shape(format!(
            "classifier reads {r}x{r} images but direct renders upsample to {u}x{u}",
            r = clf.res,
            u = 2 * gan.cfg.render_res
        )));
    }
    let planes = planes.to_dtype(gan.ps_dec.dtype())?;
    let out = gan.renderer(false).render_batch(&planes, cams, render_seed, Outputs::default())?;
    nn::upsample2x(&out.rgb)
}

pub fn caption_camera(gan: &GanModels, seed: u64) -> Camera {
    gan.cfg.camera.sample(seed::split(seed, "caption-view", 0), gan.cfg.render_res)
}

/// A second viewpoint, drawn independently of the captioning one.
pub fn second_camera(gan: &GanModels, seed: u64) -> Camera {
    gan.cfg.camera.sample(seed::split(seed, "caption-view", 1), gan.cfg.render_res)
}

/// Captions a batch of (raw, unnormalized) triplanes, each rendered from a
/// viewpoint drawn from the corpus distribution with its own seed.
pub fn caption_triplanes(clf: &AttributeClassifier, gan: &GanModels, planes: &Tensor, seeds: &[u64]) -> Result<Vec<String>> {
    let cams: Vec<Camera> = seeds.iter().map(|&s| caption_camera(gan, s)).collect();
    let images = render_for_classifier(clf, gan, planes, &cams, 0)?;
    Ok(answer_attributes(clf, &images)?.iter().map(Attributes::to_caption).collect())
}

pub fn caption_triplane(clf: &AttributeClassifier, gan: &GanModels, planes: &Tensor, seed: u64) -> Result<String> {
    let planes = if planes.rank() == 3 { planes.unsqueeze(0)? } else { planes.clone() };
    Ok(caption_triplanes(clf, gan, &planes, &[seed])?.remove(0))
}

/// Fraction of attributes answered identically from the captioning view
/// and a second view, over the batch.
pub fn view_consistency(clf: &AttributeClassifier, gan: &GanModels, planes: &Tensor, seeds: &[u64]) -> Result<f64> {
    let first: Vec<Camera> = seeds.iter().map(|&s| caption_camera(gan, s)).collect();
    let second: Vec<Camera> = seeds.iter().map(|&s| second_camera(gan, s)).collect();
    let a = clf.answer_indices(&render_for_classifier(clf, gan, planes, &first, 0)?)?;
    let b = clf.answer_indices(&render_for_classifier(clf, gan, planes, &second, 0)?)?;
    let agree: usize = a.iter().zip(&b).map(|(x, y)| (0..4).filter(|&k| x[k] == y[k]).count()).sum();
    Ok(agree as f64 / (4 * a.len().max(1)) as f64)
}

/// Matched / mentioned attributes; 1.0 when nothing is mentioned.
pub fn attribute_agreement(prompt: &Attributes, answer: &Attributes) -> f64 {
    let mut mentioned = 0;
    let mut matched = 0;
    let mut check = |m: bool, ok: bool| {
        if m {
            mentioned += 1;
            matched += ok as usize;
        }
    };
    check(prompt.shape.is_some(), prompt.shape == answer.shape);
    check(prompt.color.is_some(), prompt.color == answer.color);
    check(prompt.size.is_some(), prompt.size == answer.size);
    check(prompt.accent.is_some(), prompt.accent == answer.accent);
    if mentioned == 0 {
        1.0
    } else {
        matched as f64 / mentioned as f64
    }
}

/// Agreement of every image with one prompt, averaged over images.
pub fn prompt_adherence(clf: &AttributeClassifier, prompt: &str, images: &Tensor) -> Result<f64> {
    let p = parse_caption(prompt, &clf.vocab)?;
    let answers = answer_attributes(clf, images)?;
    if answers.is_empty() {
        return Err(Error::InvalidArgument("no images to score".into()));
    }
    Ok(answers.iter().map(|a| attribute_agreement(&p, a)).sum::<f64>() / answers.len() as f64)
}

/// Per-image agreement for paired prompts and images.
pub fn paired_adherence(clf: &AttributeClassifier, prompts: &[String], images: &Tensor) -> Result<Vec<f64>> {
    let answers = answer_attributes(clf, images)?;
    if answers.len() != prompts.len() {
        return Err(Error::InvalidArgument(format!("{} prompts for {} images", prompts.len(), answers.len())));
    }
    prompts
        .iter()
        .zip(&answers)
        .map(|(p, a)| Ok(attribute_agreement(&parse_caption(p, &clf.vocab)?, a)))
        .collect()
}
