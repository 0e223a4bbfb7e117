//! Differentiable volume rendering of triplane fields.
//!
//! Sample placement runs on the host (stratified coarse pass, decoder
//! evaluation without gradients, inverse-CDF fine pass); the final
//! compositing runs as tensor ops so gradients reach the planes and the
//! decoder. Positions are treated as constants by the backward pass.

pub mod camera;
pub mod composite;
pub mod sampling;

use candle_core::{DType, Tensor, D};
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use camera::{Camera, Ray, Vec3};
pub use composite::{composite, expected_depth, Composite};
pub use sampling::{inverse_cdf, sample_points, stratified, Jitter, RaySamples};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn;
use crate::seed::{self, Rng};
use crate::triplane::{FieldDecoder, PointTaps, TriplaneField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Multiplier on sample spacings before `a = 1 - exp(-sigmoid(d)·δ)`.
    /// With 1.0 a field can never exceed density 1 per world unit.
    pub density_scale: f64,
    /// Gray level composited behind the object.
    pub background: f64,
    /// Random offsets inside strata (training) instead of stratum centres.
    pub jitter: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_coarse: 32,
            n_fine: 32,
            density_scale: 10.0,
            background: 1.0,
            jitter: true,
        }
    }
}

/// Sample positions for every ray of a batch of cameras.
#[derive(Debug, Clone)]
pub struct RayPlan {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    /// Samples per ray.
    pub n: usize,
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub points: Vec<[f64; 3]>,
    /// 1 inside the field cube, 0 outside.
    pub inside: Vec<f32>,
    /// Far bound per ray.
    pub far: Vec<f64>,
}

impl RayPlan {
    pub fn rays(&self) -> usize {
        self.batch * self.height * self.width
    }

    fn batch_index(&self) -> Vec<usize> {
        let per = self.height * self.width * self.n;
        (0..self.points.len()).map(|i| i / per).collect()
    }
}

/// Tensors produced by one batched render.
pub struct RenderOutput {
    /// (B, 3, H, W) accumulated color composited over the background.
    pub rgb: Tensor,
    /// (B, 3, H, W) accumulated color without background (premultiplied).
    pub color: Tensor,
    /// (B, 1, H, W)
    pub opacity: Tensor,
    /// (B, 3·n_feat, H, W) when requested.
    pub features: Option<Tensor>,
    /// (B, 1, H, W) expected depth when requested; `far` where opacity <= 1e-4.
    pub depth: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Outputs {
    pub features: bool,
    pub depth: bool,
}

fn inside_cube(p: &[f64; 3]) -> bool {
    p.iter().all(|v| (-1.0..=1.0).contains(v))
}

fn ray_rng(seed: u64, stream: &str, b: usize, ray: usize) -> Rng {
    Rng::seed_from_u64(seed::split(seed, stream, b as u64).wrapping_add(ray as u64))
}

/// Compositing weights (R, N) from pseudo-SDF (R, N), scaled spacings (R, N)
/// and an inside mask (R, N).
pub fn weights_tensor(sdf: &Tensor, delta: &Tensor, inside: &Tensor) -> Result<Tensor> {
    let (_, n) = sdf.dims2()?;
    let sigma = nn::sigmoid(sdf)?.mul(inside)?;
    let sd = sigma.mul(delta)?;
    // cum[r, i] = sum_{j<i} sd[r, j]
    let upper: Vec<f32> = (0..n * n)
        .map(|k| if k / n < k % n { 1.0 } else { 0.0 })
        .collect();
    let upper = Tensor::from_vec(upper, (n, n), sdf.device())?.to_dtype(sdf.dtype())?;
    let cum = sd.matmul(&upper)?;
    let trans = cum.neg()?.exp()?;
    let alpha = (1.0 - sd.neg()?.exp()?)?;
    Ok(trans.mul(&alpha)?)
}

pub struct Renderer<'a> {
    pub decoder: &'a FieldDecoder,
    pub cfg: RenderConfig,
}

impl<'a> Renderer<'a> {
    pub fn new(decoder: &'a FieldDecoder, cfg: RenderConfig) -> Self {
        Self { decoder, cfg }
    }

    fn jitter<'r>(&self, rng: &'r mut Rng) -> Jitter<'r> {
        if self.cfg.jitter {
            Jitter::Random(rng)
        } else {
            Jitter::Midpoint
        }
    }

    /// Places coarse and fine samples for every ray.
    pub fn plan(&self, planes: &Tensor, cams: &[Camera], seed: u64) -> Result<RayPlan> {
        let (b, _, res, _) = planes.dims4()?;
        if cams.len() != b {
            return Err(Error::Shape(format!("{} cameras for {b} triplanes", cams.len())));
        }
        let (h, w) = (cams[0].height, cams[0].width);
        if cams.iter().any(|c| c.height != h || c.width != w) {
            return Err(Error::Shape("cameras in a batch must share a resolution".into()));
        }
        let n_c = self.cfg.n_coarse;
        let mut rays = Vec::with_capacity(b * h * w);
        for cam in cams {
            rays.extend(cam.generate_rays()?.into_iter().map(|r| (r, cam.near, cam.far)));
        }
        let hw = h * w;
        let coarse: Vec<Vec<f64>> = rays
            .par_iter()
            .enumerate()
            .map(|(i, (_, near, far))| {
                let mut rng = ray_rng(seed, "coarse", i / hw, i % hw);
                stratified(*near, *far, n_c, &mut self.jitter(&mut rng))
            })
            .collect::<Result<_>>()?;

        let samples: Vec<RaySamples> = if self.cfg.n_fine == 0 {
            coarse
                .into_iter()
                .zip(&rays)
                .map(|(t, (_, _, far))| RaySamples::from_sorted(t, *far))
                .collect()
        } else {
            // coarse pass: density only, no gradient
            let coarse_plan = self.plan_from_samples(
                b,
                h,
                w,
                &rays,
                coarse
                    .iter()
                    .zip(&rays)
                    .map(|(t, (_, _, far))| RaySamples::from_sorted(t.clone(), *far))
                    .collect(),
            );
            let detached = planes.detach();
            let taps = PointTaps::new(&coarse_plan.points, &coarse_plan.batch_index(), res);
            let feats = taps.gather(&detached)?;
            let sdf = self.decoder.forward(&feats)?.sdf.detach().reshape((b * hw, n_c))?;
            let wts = self.plan_weights(&coarse_plan, &sdf)?;
            let wts = wts.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            rays.par_iter()
                .enumerate()
                .map(|(i, (_, near, far))| {
                    let mut rng = ray_rng(seed, "fine", i / hw, i % hw);
                    let mut t = coarse[i].clone();
                    t.extend(inverse_cdf(*near, *far, &wts[i], self.cfg.n_fine, &mut self.jitter(&mut rng))?);
                    t.sort_by(f64::total_cmp);
                    Ok(RaySamples::from_sorted(t, *far))
                })
                .collect::<Result<_>>()?
        };
        Ok(self.plan_from_samples(b, h, w, &rays, samples))
    }

    fn plan_from_samples(
        &self,
        b: usize,
        h: usize,
        w: usize,
        rays: &[(Ray, f64, f64)],
        samples: Vec<RaySamples>,
    ) -> RayPlan {
        let n = samples.first().map_or(0, |s| s.len());
        let mut plan = RayPlan {
            batch: b,
            height: h,
            width: w,
            n,
            t: Vec::with_capacity(rays.len() * n),
            delta: Vec::with_capacity(rays.len() * n),
            points: Vec::with_capacity(rays.len() * n),
            inside: Vec::with_capacity(rays.len() * n),
            far: rays.iter().map(|r| r.2).collect(),
        };
        for ((ray, _, _), s) in rays.iter().zip(samples) {
            for (&t, &dt) in s.t.iter().zip(&s.delta) {
                let p = ray.at(t);
                plan.t.push(t);
                plan.delta.push(dt);
                plan.inside.push(if inside_cube(&p) { 1.0 } else { 0.0 });
                plan.points.push(p);
            }
        }
        plan
    }

    fn plan_weights(&self, plan: &RayPlan, sdf: &Tensor) -> Result<Tensor> {
        let (r, n) = (plan.rays(), plan.n);
        let dev = sdf.device();
        let scaled: Vec<f64> = plan.delta.iter().map(|d| d * self.cfg.density_scale).collect();
        let delta = Tensor::from_vec(scaled, (r, n), dev)?.to_dtype(sdf.dtype())?;
        let inside = Tensor::from_slice(&plan.inside, (r, n), dev)?.to_dtype(sdf.dtype())?;
        weights_tensor(sdf, &delta, &inside)
    }

    /// Composites a fixed sample plan. Differentiable with respect to
    /// `planes` and the decoder parameters.
    pub fn render_planned(&self, planes: &Tensor, plan: &RayPlan, outputs: Outputs) -> Result<RenderOutput> {
        let (b, c, res, _) = planes.dims4()?;
        let (h, w, n) = (plan.height, plan.width, plan.n);
        let r = plan.rays();
        let taps = PointTaps::new(&plan.points, &plan.batch_index(), res);
        let feats = taps.gather(planes)?;
        let dec = self.decoder.forward(&feats)?;
        let sdf = dec.sdf.reshape((r, n))?;
        let wts = self.plan_weights(plan, &sdf)?;
        let wts3 = wts.unsqueeze(2)?;
        let to_image = |x: Tensor, ch: usize| -> Result<Tensor> {
            Ok(x.reshape((b, h, w, ch))?.permute((0, 3, 1, 2))?.contiguous()?)
        };
        let color = wts3.broadcast_mul(&dec.rgb.reshape((r, n, 3))?)?.sum(1)?;
        let opacity = wts.sum_keepdim(D::Minus1)?;
        let rgb = (color.broadcast_add(&((1.0 - &opacity)? * self.cfg.background)?))?;
        let features = if outputs.features {
            Some(to_image(wts3.broadcast_mul(&feats.reshape((r, n, c))?)?.sum(1)?, c)?)
        } else {
            None
        };
        let depth = if outputs.depth {
            let t = Tensor::from_slice(&plan.t, (r, n), planes.device())?.to_dtype(planes.dtype())?;
            let num = wts.mul(&t)?.sum_keepdim(D::Minus1)?;
            let op = opacity.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            let num = num.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            let d: Vec<f64> = (0..r)
                .map(|i| if op[i] > 1e-4 { num[i] / op[i] } else { plan.far[i] })
                .collect();
            Some(to_image(Tensor::from_vec(d, (r, 1), planes.device())?.to_dtype(planes.dtype())?, 1)?)
        } else {
            None
        };
        Ok(RenderOutput {
            rgb: to_image(rgb, 3)?,
            color: to_image(color, 3)?,
            opacity: to_image(opacity, 1)?,
            features,
            depth,
        })
    }

    pub fn render_batch(&self, planes: &Tensor, cams: &[Camera], seed: u64, outputs: Outputs) -> Result<RenderOutput> {
        let plan = self.plan(planes, cams, seed)?;
        self.render_planned(planes, &plan, outputs)
    }

    fn single(&self, field: &TriplaneField, cam: &Camera, seed: u64, outputs: Outputs) -> Result<RenderOutput> {
        let planes = field.to_tensor(self.decoder_dtype())?.unsqueeze(0)?;
        self.render_batch(&planes, std::slice::from_ref(cam), seed, outputs)
    }

    fn decoder_dtype(&self) -> DType {
        self.decoder.dtype()
    }

    /// RGBA image: premultiplied accumulated color plus opacity.
    pub fn render(&self, field: &TriplaneField, cam: &Camera, seed: u64) -> Result<Image> {
        let out = self.single(field, cam, seed, Outputs::default())?;
        let rgba = Tensor::cat(&[out.color.squeeze(0)?, out.opacity.squeeze(0)?], 0)?;
        Image::from_tensor(&rgba)
    }

    /// Accumulated triplane features (3·n_feat channels).
    pub fn render_features(&self, field: &TriplaneField, cam: &Camera, seed: u64) -> Result<Image> {
        let out = self.single(field, cam, seed, Outputs { features: true, depth: false })?;
        Image::from_tensor(&out.features.expect("requested").squeeze(0)?)
    }

    pub fn render_depth(&self, field: &TriplaneField, cam: &Camera, seed: u64) -> Result<Image> {
        let out = self.single(field, cam, seed, Outputs { features: false, depth: true })?;
        Image::from_tensor(&out.depth.expect("requested").squeeze(0)?)
    }
}

/// Renders `planes` on a dense uniform grid of `n` samples, without
/// importance sampling. Used as a reference for the two-pass sampler.
pub fn render_uniform_reference(
    decoder: &FieldDecoder,
    planes: &Tensor,
    cams: &[Camera],
    n: usize,
    density_scale: f64,
) -> Result<RenderOutput> {
    let cfg = RenderConfig {
        n_coarse: n,
        n_fine: 0,
        density_scale,
        background: 1.0,
        jitter: false,
    };
    Renderer::new(decoder, cfg).render_batch(planes, cams, 0, Outputs::default())
}
