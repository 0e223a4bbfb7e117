use candle_core::{DType, Tensor};

use super::train::Predictor;
use super::{cfg_predict, ddim_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::gan::GanModels;
use crate::nn;
use crate::renderer::Camera;
use crate::seed;
use crate::triplane::TriplaneStats;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub steps: usize,
    pub guidance: f64,
    pub clip_prediction: bool,
}

/// Initial noise T¹ for one sample.
pub fn initial_noise(seed: u64, shape: (usize, usize, usize), dtype: DType) -> Result<Tensor> {
    nn::randn(&mut seed::rng(seed, "sample-noise", 0), &[shape.0, shape.1, shape.2], dtype)
}

/// DDIM with classifier-free guidance for one caption.
pub fn sample<P: Predictor>(
    p: &P,
    sched: &NoiseSchedule,
    shape: (usize, usize, usize),
    caption: &str,
    opts: SampleOptions,
    seed: u64,
    dtype: DType,
) -> Result<Tensor> {
    Ok(sample_batch(p, sched, shape, &[caption], &[seed], opts, dtype)?.get(0)?)
}

/// Samples several captions at once; item `i` depends only on
/// (`captions[i]`, `seeds[i]`) up to floating-point batching effects.
pub fn sample_batch<P: Predictor>(
    p: &P,
    sched: &NoiseSchedule,
    shape: (usize, usize, usize),
    captions: &[&str],
    seeds: &[u64],
    opts: SampleOptions,
    dtype: DType,
) -> Result<Tensor> {
    if captions.len() != seeds.len() || captions.is_empty() {
        return Err(Error::InvalidArgument("need one seed per caption and at least one caption".into()));
    }
    let b = captions.len();
    let grid = NoiseSchedule::grid(opts.steps)?;
    let noise = seeds
        .iter()
        .map(|&s| initial_noise(s, shape, dtype))
        .collect::<Result<Vec<_>>>()?;
    let mut x = Tensor::stack(&noise, 0)?;
    // guidance 1 and 0 need only one of the two predictions
    let need_cond = opts.guidance != 0.0;
    let need_uncond = opts.guidance != 1.0;
    let mut caps: Vec<&str> = Vec::with_capacity(2 * b);
    let mut null = Vec::with_capacity(2 * b);
    if need_cond {
        caps.extend_from_slice(captions);
        null.extend(std::iter::repeat_n(false, b));
    }
    if need_uncond {
        caps.extend(std::iter::repeat_n("", b));
        null.extend(std::iter::repeat_n(true, b));
    }
    let copies = caps.len() / b;
    for k in (1..=opts.steps).rev() {
        let (t, t_prev) = (grid[k], grid[k - 1]);
        let xin = if copies == 2 { Tensor::cat(&[&x, &x], 0)? } else { x.clone() };
        let times = vec![t; caps.len()];
        // no gradients flow through sampling; detaching keeps each step's graph from piling up
        let out = p.predict(&xin, &times, &caps, &null)?.detach();
        let pred = match (need_cond, need_uncond) {
            (true, true) => cfg_predict(&out.narrow(0, 0, b)?, &out.narrow(0, b, b)?, opts.guidance)?,
            _ => out,
        };
        let pred = if opts.clip_prediction { pred.clamp(-1.0, 1.0)? } else { pred };
        if t_prev == 0.0 {
            return Ok(pred);
        }
        x = ddim_step(&x, &pred, sched.alpha(t)?, sched.alpha(t_prev)?)?;
    }
    unreachable!("the grid ends at t = 0")
}

/// Renders normalized samples with the frozen stage-one decoder and
/// upsampler; the style input is all ones. Returns (low, high) images.
pub fn decode_samples(
    gan: &GanModels,
    stats: &TriplaneStats,
    normalized: &Tensor,
    cams: &[Camera],
    render_seed: u64,
) -> Result<(Tensor, Tensor)> {
    let planes = stats.denormalize_tensor(normalized)?.to_dtype(gan.ps_gen.dtype())?;
    let b = planes.dim(0)?;
    let w = Tensor::ones((b, gan.cfg.w_dim), planes.dtype(), planes.device())?;
    let (low, _, high) = gan.render(&planes, &w, cams, render_seed, false)?;
    Ok((low, high))
}
