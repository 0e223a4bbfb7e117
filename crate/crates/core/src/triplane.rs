//! Triplane fields: storage, bilinear queries, the field decoder and the
//! per-channel normalization used by the diffusion stage.
//!
//! Coordinate convention: the world cube [-1, 1]³ maps linearly onto each
//! plane, with texel `i` centred at `-1 + (2i + 1) / res`. Continuous pixel
//! coordinates are clamped to `[0, res - 1]` (clamp-to-edge). The three planes
//! are stored in the order xy, xz, yz; plane xy is indexed by (col = x,
//! row = y), xz by (col = x, row = z), yz by (col = y, row = z).

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Init, Linear, ParamStore};

pub const MAGIC: &[u8; 4] = b"TRIP";
pub const FORMAT_VERSION: u32 = 1;

/// Standardized values are multiplied by this before clamping.
pub const NORM_SCALE: f64 = 1.0 / 16.0;
pub const NORM_CLAMP: f64 = 1.0;
pub const STD_FLOOR: f64 = 1e-6;

/// Projection of a world point onto plane `p` as (col, row) world coordinates.
#[inline]
pub fn project(p: usize, x: [f64; 3]) -> (f64, f64) {
    match p {
        0 => (x[0], x[1]),
        1 => (x[0], x[2]),
        _ => (x[1], x[2]),
    }
}

/// World coordinate in [-1, 1] to continuous pixel coordinate.
#[inline]
pub fn world_to_pixel(u: f64, res: usize) -> f64 {
    (u + 1.0) * 0.5 * res as f64 - 0.5
}

/// The four bilinear taps of one plane lookup, with the derivative of each
/// weight with respect to the (col, row) world coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Taps {
    pub index: [usize; 4],
    pub weight: [f64; 4],
    pub dweight: [[f64; 2]; 4],
}

pub fn bilinear_taps(col: f64, row: f64, res: usize) -> Taps {
    let max = (res - 1) as f64;
    let scale = 0.5 * res as f64;
    let axis = |u: f64| {
        let p = world_to_pixel(u, res);
        let clamped = p.clamp(0.0, max);
        let slope = if p > 0.0 && p < max { scale } else { 0.0 };
        let i0 = (clamped.floor() as usize).min(res.saturating_sub(2));
        let i1 = (i0 + 1).min(res - 1);
        let f = clamped - i0 as f64;
        (i0, i1, f, slope)
    };
    let (c0, c1, fc, sc) = axis(col);
    let (r0, r1, fr, sr) = axis(row);
    let index = [r0 * res + c0, r0 * res + c1, r1 * res + c0, r1 * res + c1];
    let weight = [
        (1.0 - fc) * (1.0 - fr),
        fc * (1.0 - fr),
        (1.0 - fc) * fr,
        fc * fr,
    ];
    let dweight = [
        [-(1.0 - fr) * sc, -(1.0 - fc) * sr],
        [(1.0 - fr) * sc, -fc * sr],
        [-fr * sc, (1.0 - fc) * sr],
        [fr * sc, fc * sr],
    ];
    Taps {
        index,
        weight,
        dweight,
    }
}

fn check_in_cube(x: [f64; 3]) -> Result<()> {
    if x.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::Domain(format!("point {x:?} outside [-1,1]^3")))
    }
}

/// Three axis-aligned feature planes, stored as one (3·n_feat, res, res)
/// array in (channel, row, col) order.
#[derive(Debug, Clone, PartialEq)]
pub struct TriplaneField {
    n_feat: usize,
    res: usize,
    data: Vec<f32>,
}

impl TriplaneField {
    pub fn zeros(n_feat: usize, res: usize) -> Self {
        Self::filled(n_feat, res, 0.0)
    }

    pub fn filled(n_feat: usize, res: usize, value: f32) -> Self {
        assert!(n_feat >= 1 && res >= 1);
        Self {
            n_feat,
            res,
            data: vec![value; 3 * n_feat * res * res],
        }
    }

    pub fn from_vec(n_feat: usize, res: usize, data: Vec<f32>) -> Result<Self> {
        if n_feat == 0 || res == 0 {
            return Err(Error::Shape("triplane needs n_feat >= 1 and res >= 1".into()));
        }
        if data.len() != 3 * n_feat * res * res {
            return Err(Error::Shape(format!(
                "expected {} values for n_feat={n_feat} res={res}, got {}",
                3 * n_feat * res * res,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("triplane contains non-finite values".into()));
        }
        Ok(Self { n_feat, res, data })
    }

    /// From a (3·n_feat, res, res) tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c % 3 != 0 || h != w {
            return Err(Error::Shape(format!("tensor shape ({c},{h},{w}) is not a triplane")));
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::from_vec(c / 3, h, data)
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), self.shape(), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn n_feat(&self) -> usize {
        self.n_feat
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn channels(&self) -> usize {
        3 * self.n_feat
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels(), self.res, self.res)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[(channel * self.res + row) * self.res + col]
    }

    pub fn set(&mut self, channel: usize, row: usize, col: usize, v: f32) {
        let r = self.res;
        self.data[(channel * r + row) * r + col] = v;
    }

    /// Concatenated (xy, xz, yz) bilinear lookups at `x`.
    pub fn sample_feature(&self, x: [f64; 3]) -> Result<Vec<f64>> {
        Ok(self.sample_feature_with_jacobian(x)?.0)
    }

    /// Feature at `x` together with its Jacobian with respect to `x`
    /// (one `[d/dx, d/dy, d/dz]` row per feature channel).
    pub fn sample_feature_with_jacobian(&self, x: [f64; 3]) -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
        check_in_cube(x)?;
        let nf = self.n_feat;
        let plane_size = self.res * self.res;
        let mut feat = vec![0.0; 3 * nf];
        let mut jac = vec![[0.0; 3]; 3 * nf];
        // axes feeding (col, row) of each plane
        const AXES: [[usize; 2]; 3] = [[0, 1], [0, 2], [1, 2]];
        for p in 0..3 {
            let (u, v) = project(p, x);
            let taps = bilinear_taps(u, v, self.res);
            for ch in 0..nf {
                let c = p * nf + ch;
                let base = c * plane_size;
                for k in 0..4 {
                    let val = self.data[base + taps.index[k]] as f64;
                    feat[c] += taps.weight[k] * val;
                    jac[c][AXES[p][0]] += taps.dweight[k][0] * val;
                    jac[c][AXES[p][1]] += taps.dweight[k][1] * val;
                }
            }
        }
        Ok((feat, jac))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + 4 * self.data.len());
        buf.extend_from_slice(MAGIC);
        for v in [FORMAT_VERSION, self.n_feat as u32, self.res as u32, self.res as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::decode_bytes(&buf).map_err(|reason| Error::format(path, reason))
    }

    pub fn decode_bytes(buf: &[u8]) -> std::result::Result<Self, String> {
        if buf.len() < 20 {
            return Err(format!("header truncated ({} bytes)", buf.len()));
        }
        if &buf[..4] != MAGIC {
            return Err("bad magic".into());
        }
        let word = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let (version, n_feat, h, w) = (word(0), word(1) as usize, word(2) as usize, word(3) as usize);
        if version != FORMAT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        if h != w || n_feat == 0 || h == 0 {
            return Err(format!("invalid dims n_feat={n_feat} h={h} w={w}"));
        }
        let n = 3 * n_feat * h * w;
        if buf.len() != 20 + 4 * n {
            return Err(format!("payload has {} bytes, expected {}", buf.len() - 20, 4 * n));
        }
        let data: Vec<f32> = buf[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_vec(n_feat, h, data).map_err(|e| e.to_string())
    }
}

/// Flattened bilinear taps for a batch of query points, laid out for a
/// single gather per plane.
#[derive(Debug, Clone)]
pub struct PointTaps {
    pub n_points: usize,
    /// Per plane, 4·n_points row indices into the (B·res·res, n_feat) plane
    /// matrix, corner-major.
    pub index: [Vec<u32>; 3],
    /// Per plane, 4·n_points weights, corner-major.
    pub weight: [Vec<f32>; 3],
}

impl PointTaps {
    /// `points[i]` is queried on triplane `batch[i]`. Points outside the cube
    /// are clamped; callers mask their density.
    pub fn new(points: &[[f64; 3]], batch: &[usize], res: usize) -> Self {
        let n = points.len();
        let plane_size = res * res;
        let mut index: [Vec<u32>; 3] = [vec![0; 4 * n], vec![0; 4 * n], vec![0; 4 * n]];
        let mut weight: [Vec<f32>; 3] = [vec![0.0; 4 * n], vec![0.0; 4 * n], vec![0.0; 4 * n]];
        for (i, (x, &b)) in points.iter().zip(batch).enumerate() {
            let xc = [x[0].clamp(-1.0, 1.0), x[1].clamp(-1.0, 1.0), x[2].clamp(-1.0, 1.0)];
            for p in 0..3 {
                let (u, v) = project(p, xc);
                let taps = bilinear_taps(u, v, res);
                for k in 0..4 {
                    index[p][k * n + i] = (b * plane_size + taps.index[k]) as u32;
                    weight[p][k * n + i] = taps.weight[k] as f32;
                }
            }
        }
        Self {
            n_points: n,
            index,
            weight,
        }
    }

    /// Gathers (n_points, 3·n_feat) features from `planes` (B, 3·n_feat, res, res).
    /// Differentiable with respect to `planes`.
    pub fn gather(&self, planes: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = planes.dims4()?;
        let nf = c / 3;
        let n = self.n_points;
        let dev = planes.device();
        let mut parts = Vec::with_capacity(3);
        for p in 0..3 {
            let plane = planes
                .narrow(1, p * nf, nf)?
                .permute((0, 2, 3, 1))?
                .reshape((b * h * w, nf))?;
            let idx = Tensor::from_slice(&self.index[p], 4 * n, dev)?;
            let wts = Tensor::from_slice(&self.weight[p], (4, n, 1), dev)?.to_dtype(planes.dtype())?;
            let g = plane.index_select(&idx, 0)?.reshape((4, n, nf))?;
            parts.push(g.broadcast_mul(&wts)?.sum(0)?);
        }
        Ok(Tensor::cat(&parts, 1)?)
    }
}

/// Hidden-layer layout of the field decoder.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub hidden_layers: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            hidden_layers: 1,
        }
    }
}

/// MLP from a 3·n_feat feature to (pseudo-SDF, albedo). The first output is
/// the raw pseudo-SDF; the last three pass through a sigmoid.
pub struct FieldDecoder {
    hidden: Vec<Linear>,
    out: Linear,
    in_dim: usize,
}

/// Batched decoder output.
pub struct Decoded {
    /// (M,)
    pub sdf: Tensor,
    /// (M, 3)
    pub rgb: Tensor,
}

impl FieldDecoder {
    pub fn new(ps: &mut ParamStore, n_feat: usize, cfg: DecoderConfig) -> Result<Self> {
        Self::build(ps, n_feat, cfg, false)
    }

    /// Decoder whose final layer starts at zero weights and zero bias.
    pub fn new_zero_final(ps: &mut ParamStore, n_feat: usize, cfg: DecoderConfig) -> Result<Self> {
        Self::build(ps, n_feat, cfg, true)
    }

    fn build(ps: &mut ParamStore, n_feat: usize, cfg: DecoderConfig, zero_final: bool) -> Result<Self> {
        let in_dim = 3 * n_feat;
        let mut hidden = Vec::new();
        let mut width = in_dim;
        for i in 0..cfg.hidden_layers {
            hidden.push(Linear::new(
                ps,
                &format!("decoder.fc{i}"),
                width,
                cfg.hidden,
                Init::Equalized { lr_mul: 1.0 },
                Some(0.0),
            )?);
            width = cfg.hidden;
        }
        let init = if zero_final {
            Init::Zero
        } else {
            Init::Equalized { lr_mul: 1.0 }
        };
        let out = Linear::new(ps, "decoder.out", width, 4, init, Some(0.0))?;
        Ok(Self { hidden, out, in_dim })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    /// Raw (M, 4) outputs before the color activation.
    pub fn forward_raw(&self, features: &Tensor) -> Result<Tensor> {
        let (_, d) = features.dims2()?;
        if d != self.in_dim {
            return Err(Error::Shape(format!(
                "decoder expects {}-dim features, got {d}",
                self.in_dim
            )));
        }
        let mut h = features.clone();
        for l in &self.hidden {
            h = nn::softplus(&l.forward(&h)?)?;
        }
        self.out.forward(&h)
    }

    pub fn forward(&self, features: &Tensor) -> Result<Decoded> {
        let raw = self.forward_raw(features)?;
        Ok(Decoded {
            sdf: raw.narrow(1, 0, 1)?.squeeze(1)?,
            rgb: nn::sigmoid(&raw.narrow(1, 1, 3)?)?,
        })
    }

    /// Single-feature convenience wrapper.
    pub fn decode(&self, feature: &[f64]) -> Result<(f64, [f64; 3])> {
        if feature.len() != self.in_dim {
            return Err(Error::Shape(format!(
                "decoder expects {}-dim features, got {}",
                self.in_dim,
                feature.len()
            )));
        }
        let dtype = self.dtype();
        let f = Tensor::from_slice(feature, (1, self.in_dim), &Device::Cpu)?.to_dtype(dtype)?;
        let out = self.forward(&f)?;
        let d = out.sdf.to_dtype(DType::F64)?.to_vec1::<f64>()?[0];
        let c = out.rgb.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok((d, [c[0], c[1], c[2]]))
    }

    pub fn dtype(&self) -> DType {
        self.out.dtype()
    }
}

/// Per-channel dataset statistics used to normalize triplanes for diffusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriplaneStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub scale: f64,
    pub clamp: f64,
}

impl TriplaneStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Per-channel population mean and standard deviation over every spatial
    /// position of every triplane (Welford accumulation in f64).
    pub fn compute<'a, I>(dataset: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a TriplaneField>,
    {
        let mut count = 0u64;
        let mut mean: Vec<f64> = Vec::new();
        let mut m2: Vec<f64> = Vec::new();
        let mut shape = None;
        for t in dataset {
            match shape {
                None => {
                    shape = Some(t.shape());
                    mean = vec![0.0; t.channels()];
                    m2 = vec![0.0; t.channels()];
                }
                Some(s) if s != t.shape() => {
                    return Err(Error::Shape(format!(
                        "dataset mixes triplane shapes {s:?} and {:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
            // merge this triplane's per-channel moments (Chan et al. update)
            let hw = (t.res * t.res) as u64;
            for c in 0..t.channels() {
                let vals = &t.data[c * hw as usize..(c + 1) * hw as usize];
                let m_b = vals.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
                let m2_b: f64 = vals.iter().map(|&v| (v as f64 - m_b).powi(2)).sum();
                let n_a = count as f64;
                let n_b = hw as f64;
                let delta = m_b - mean[c];
                let n = n_a + n_b;
                mean[c] += delta * n_b / n;
                m2[c] += m2_b + delta * delta * n_a * n_b / n;
            }
            count += hw;
        }
        if shape.is_none() {
            return Err(Error::InvalidArgument("cannot compute stats of an empty dataset".into()));
        }
        let std = m2
            .iter()
            .map(|&m| (m / count as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self {
            mean,
            std,
            scale: NORM_SCALE,
            clamp: NORM_CLAMP,
        })
    }

    fn check(&self, channels: usize) -> Result<()> {
        if channels != self.channels() {
            return Err(Error::Shape(format!(
                "triplane has {channels} channels, stats have {}",
                self.channels()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, t: &TriplaneField) -> Result<TriplaneField> {
        self.check(t.channels())?;
        let hw = t.res * t.res;
        let mut out = t.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            let c = i / hw;
            let z = (*v as f64 - self.mean[c]) / self.std[c] * self.scale;
            *v = z.clamp(-self.clamp, self.clamp) as f32;
        }
        Ok(out)
    }

    pub fn denormalize(&self, t: &TriplaneField) -> Result<TriplaneField> {
        self.check(t.channels())?;
        let hw = t.res * t.res;
        let mut out = t.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            let c = i / hw;
            *v = (*v as f64 / self.scale * self.std[c] + self.mean[c]) as f32;
        }
        Ok(out)
    }

    /// Tensor form of [`Self::denormalize`] for (B, C, H, W) batches.
    pub fn denormalize_tensor(&self, t: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = t.dims4()?;
        self.check(c)?;
        let dev = t.device();
        let std: Vec<f64> = self.std.iter().map(|s| s / self.scale).collect();
        let std = Tensor::from_vec(std, (1, c, 1, 1), dev)?.to_dtype(t.dtype())?;
        let mean = Tensor::from_slice(&self.mean, (1, c, 1, 1), dev)?.to_dtype(t.dtype())?;
        Ok(t.broadcast_mul(&std)?.broadcast_add(&mean)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stats: Self = serde_json::from_str(&s)?;
        if stats.std.len() != stats.mean.len() || stats.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::format(path, "std must be positive and match mean length"));
        }
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_field(n_feat: usize, res: usize, seed: u64) -> TriplaneField {
        use rand::Rng as _;
        let mut rng = crate::seed::rng(seed, "test-field", 0);
        let data = (0..3 * n_feat * res * res).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        TriplaneField::from_vec(n_feat, res, data).unwrap()
    }

    #[test]
    fn zero_field_gives_zero_feature() {
        let t = TriplaneField::zeros(4, 8);
        assert_eq!(t.sample_feature([0.3, -0.2, 0.9]).unwrap(), vec![0.0; 12]);
    }

    #[test]
    fn constant_field_interpolates_constant() {
        let t = TriplaneField::filled(2, 5, 0.75);
        for v in t.sample_feature([-1.0, 0.123, 1.0]).unwrap() {
            assert!((v - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn outside_cube_rejected() {
        let t = TriplaneField::zeros(1, 4);
        assert!(matches!(t.sample_feature([1.01, 0.0, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(t.sample_feature([0.0, f64::NAN, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn exact_at_texel_centres() {
        let t = random_field(3, 6, 1);
        let res = 6;
        let centre = |i: usize| -1.0 + (2 * i + 1) as f64 / res as f64;
        // point whose projections hit texel centres on all three planes
        let (i, j, k) = (1, 4, 2);
        let f = t.sample_feature([centre(i), centre(j), centre(k)]).unwrap();
        let nf = 3;
        for ch in 0..nf {
            assert!((f[ch] - t.at(ch, j, i) as f64).abs() < 1e-6);
            assert!((f[nf + ch] - t.at(nf + ch, k, i) as f64).abs() < 1e-6);
            assert!((f[2 * nf + ch] - t.at(2 * nf + ch, k, j) as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let t = random_field(2, 8, 2);
        let x = [0.137, -0.421, 0.305];
        let (_, jac) = t.sample_feature_with_jacobian(x).unwrap();
        let h = 1e-6;
        for axis in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[axis] += h;
            xm[axis] -= h;
            let fp = t.sample_feature(xp).unwrap();
            let fm = t.sample_feature(xm).unwrap();
            for c in 0..fp.len() {
                let fd = (fp[c] - fm[c]) / (2.0 * h);
                assert!((fd - jac[c][axis]).abs() < 1e-5, "c={c} axis={axis} {fd} {}", jac[c][axis]);
            }
        }
    }

    #[test]
    fn gather_matches_scalar_query() {
        let t = random_field(3, 7, 3);
        let t2 = random_field(3, 7, 4);
        let planes = Tensor::stack(
            &[t.to_tensor(DType::F64).unwrap(), t2.to_tensor(DType::F64).unwrap()],
            0,
        )
        .unwrap();
        let pts = [[0.1, 0.2, -0.3], [-0.95, 0.99, 0.0], [0.5, -0.5, 0.77]];
        let batch = [0, 1, 1];
        let taps = PointTaps::new(&pts, &batch, 7);
        let g = taps.gather(&planes).unwrap().to_vec2::<f64>().unwrap();
        for (i, p) in pts.iter().enumerate() {
            let want = if batch[i] == 0 { &t } else { &t2 }.sample_feature(*p).unwrap();
            for c in 0..9 {
                assert!((g[i][c] - want[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn file_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.trip");
        let t = random_field(2, 4, 5);
        t.write(&path).unwrap();
        assert_eq!(TriplaneField::read(&path).unwrap(), t);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(TriplaneField::read(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn header_layout_is_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.trip");
        TriplaneField::filled(1, 2, 1.0).write(&path).unwrap();
        let b = std::fs::read(&path).unwrap();
        assert_eq!(&b[..4], b"TRIP");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..20], &[2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 20 + 4 * 12);
    }

    #[test]
    fn decoder_zero_final_layer() {
        let mut ps = ParamStore::new(DType::F64, 0, "dec");
        let dec = FieldDecoder::new_zero_final(&mut ps, 2, DecoderConfig::default()).unwrap();
        let (d, c) = dec.decode(&[0.3, -1.0, 2.0, 0.1, 0.0, 5.0]).unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(c, [0.5, 0.5, 0.5]);
        assert!(matches!(dec.decode(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn decoder_is_deterministic_and_bounded() {
        let mut ps = ParamStore::new(DType::F32, 9, "dec");
        let dec = FieldDecoder::new(&mut ps, 4, DecoderConfig::default()).unwrap();
        let f: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin() * 10.0).collect();
        let a = dec.decode(&f).unwrap();
        let b = dec.decode(&f).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1.map(f64::to_bits), b.1.map(f64::to_bits));
        assert!(a.1.iter().all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn decoder_jacobian_matches_finite_differences() {
        let mut ps = ParamStore::new(DType::F64, 11, "dec");
        let dec = FieldDecoder::new(&mut ps, 2, DecoderConfig { hidden: 16, hidden_layers: 2 }).unwrap();
        let f0: Vec<f64> = (0..6).map(|i| ((i * 7 + 3) as f64).sin()).collect();
        for out in 0..4 {
            let fv = candle_core::Var::from_slice(&f0, (1, 6), &Device::Cpu).unwrap();
            let raw = dec.forward(fv.as_tensor()).unwrap();
            let y = if out == 0 {
                raw.sdf.sum_all().unwrap()
            } else {
                raw.rgb.narrow(1, out - 1, 1).unwrap().sum_all().unwrap()
            };
            let g = y.backward().unwrap();
            let grad = g.get(fv.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let eval = |f: &[f64]| {
                let (d, c) = dec.decode(f).unwrap();
                if out == 0 { d } else { c[out - 1] }
            };
            for i in 0..6 {
                let h = 1e-6;
                let mut fp = f0.clone();
                let mut fm = f0.clone();
                fp[i] += h;
                fm[i] -= h;
                let fd = (eval(&fp) - eval(&fm)) / (2.0 * h);
                let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
                assert!(rel < 1e-3 || (fd - grad[i]).abs() < 1e-9, "out={out} i={i} fd={fd} an={}", grad[i]);
            }
        }
    }

    #[test]
    fn stats_of_zero_field_floor() {
        let s = TriplaneStats::compute([&TriplaneField::zeros(1, 3)]).unwrap();
        assert_eq!(s.mean, vec![0.0; 3]);
        assert_eq!(s.std, vec![STD_FLOOR; 3]);
        assert!(TriplaneStats::compute(std::iter::empty()).is_err());
    }

    #[test]
    fn stats_symmetric_channel() {
        let mut t = TriplaneField::zeros(1, 2);
        for (i, v) in [-1.0f32, 1.0, 1.0, -1.0].into_iter().enumerate() {
            t.set(0, i / 2, i % 2, v);
        }
        let s = TriplaneStats::compute([&t]).unwrap();
        assert!(s.mean[0].abs() < 1e-15);
        assert!((s.std[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn normalize_examples() {
        let stats = TriplaneStats {
            mean: vec![0.0, 0.5, 0.0],
            std: vec![1.0, 2.0, 1.0],
            scale: NORM_SCALE,
            clamp: NORM_CLAMP,
        };
        let mut t = TriplaneField::zeros(1, 1);
        t.set(0, 0, 0, 32.0);
        t.set(1, 0, 0, 0.5);
        t.set(2, 0, 0, -8.0);
        let n = stats.normalize(&t).unwrap();
        assert_eq!(n.data(), &[1.0, 0.0, -0.5]);
        let bad = TriplaneField::zeros(2, 1);
        assert!(matches!(stats.normalize(&bad), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn normalize_is_bounded_and_inverts_on_linear_region(
            vals in proptest::collection::vec(-40.0f32..40.0, 12),
            mean in -2.0f64..2.0,
            std in 0.1f64..3.0,
        ) {
            let t = TriplaneField::from_vec(1, 2, vals).unwrap();
            let stats = TriplaneStats { mean: vec![mean; 3], std: vec![std; 3], scale: NORM_SCALE, clamp: NORM_CLAMP };
            let n = stats.normalize(&t).unwrap();
            prop_assert!(n.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            let back = stats.denormalize(&n).unwrap();
            for (i, (&a, &b)) in t.data().iter().zip(back.data()).enumerate() {
                let z = (a as f64 - mean) / std;
                if z.abs() <= 16.0 {
                    prop_assert!((a - b).abs() <= 1e-4 * (1.0 + a.abs()), "i={} {} {}", i, a, b);
                }
            }
        }

        #[test]
        fn stats_permutation_invariant(seed in 0u64..1000) {
            let a = random_field(1, 3, seed);
            let b = random_field(1, 3, seed + 1);
            let c = random_field(1, 3, seed + 2);
            let s1 = TriplaneStats::compute([&a, &b, &c]).unwrap();
            let s2 = TriplaneStats::compute([&c, &a, &b]).unwrap();
            for i in 0..3 {
                prop_assert!((s1.mean[i] - s2.mean[i]).abs() < 1e-12);
                prop_assert!((s1.std[i] - s2.std[i]).abs() < 1e-12);
            }
        }
    }
}
