//! Parameter storage, layers and the optimizer shared by every network.
//!
//! Parameters are initialized from keyed seed streams rather than candle's
//! global generator, so a network built twice from the same seed is
//! bit-identical.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{CpuStorage, CustomOp2, DType, Device, Layout, Shape, Storage, Tensor, Var, D};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed::{self, Rng};

/// Named trainable variables of one network.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64, name: &str) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: seed::rng(seed, name, 0),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let v = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        let out = v.as_tensor().clone();
        self.vars.insert(name.to_string(), v);
        Ok(out)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.insert(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let t = (Tensor::ones(shape, DType::F64, &self.device)? * value)?;
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Overwrites every parameter with the blob stored at `path`.
    pub fn load(&self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "missing parameter blob"),
            ));
        }
        let loaded = candle_core::safetensors::load(path, &self.device)?;
        for (name, var) in &self.vars {
            let t = loaded
                .get(name)
                .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::format(
                    path,
                    format!("tensor {name} has shape {:?}, expected {:?}", t.dims(), var.dims()),
                ));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Flat copy of every parameter in name order, for equality checks.
    pub fn snapshot(&self) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for v in self.vars.values() {
            out.extend(v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        }
        Ok(out)
    }
}

/// Weight parameterization of a layer.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Weights stored as N(0, 1/lr_mul²) and scaled at runtime by
    /// `lr_mul / sqrt(fan_in)`.
    Equalized { lr_mul: f64 },
    /// Weights stored as N(0, gain²/fan_in), used directly.
    Standard { gain: f64 },
    /// All-zero weights.
    Zero,
}

#[derive(Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
    weight_gain: f64,
    bias_gain: f64,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        bias_init: Option<f64>,
    ) -> Result<Self> {
        let (std, weight_gain, bias_gain) = match init {
            Init::Equalized { lr_mul } => (1.0 / lr_mul, lr_mul / (fan_in as f64).sqrt(), lr_mul),
            Init::Standard { gain } => (gain / (fan_in as f64).sqrt(), 1.0, 1.0),
            Init::Zero => (0.0, 1.0, 1.0),
        };
        let weight = ps.normal(&format!("{name}.weight"), &[fan_out, fan_in], std)?;
        let bias = match bias_init {
            Some(b) => Some(ps.constant(&format!("{name}.bias"), &[fan_out], b / bias_gain)?),
            None => None,
        };
        Ok(Self {
            weight,
            bias,
            weight_gain,
            bias_gain,
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn dtype(&self) -> DType {
        self.weight.dtype()
    }

    /// Applies the layer over the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = (self.weight.t()? * self.weight_gain)?;
        let y = match x.rank() {
            2 => x.matmul(&w)?,
            _ => x.broadcast_matmul(&w)?,
        };
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&(b * self.bias_gain)?)?),
            None => Ok(y),
        }
    }
}

#[derive(Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    weight_gain: f64,
    padding: usize,
    stride: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let (std, weight_gain) = match init {
            Init::Equalized { lr_mul } => (1.0 / lr_mul, lr_mul / (fan_in as f64).sqrt()),
            Init::Standard { gain } => (gain / (fan_in as f64).sqrt(), 1.0),
            Init::Zero => (0.0, 1.0),
        };
        let weight = ps.normal(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], std)?;
        let bias = if bias {
            Some(ps.constant(&format!("{name}.bias"), &[c_out], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            weight_gain,
            padding: kernel / 2,
            stride,
        })
    }

    pub fn weight(&self) -> Result<Tensor> {
        Ok((&self.weight * self.weight_gain)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv(x, &self.weight()?)?;
        self.add_bias(y)
    }

    /// StyleGAN2 modulated convolution: inputs scaled per sample by `styles`
    /// (B, C_in), outputs demodulated to unit expected variance.
    pub fn forward_modulated(&self, x: &Tensor, styles: &Tensor, demodulate: bool) -> Result<Tensor> {
        let w = self.weight()?;
        let xs = x.broadcast_mul(&styles.unsqueeze(2)?.unsqueeze(3)?)?;
        let mut y = self.conv(&xs, &w)?;
        if demodulate {
            // d[b, o] = 1/sqrt(sum_{i,k} (w[o,i,k] * s[b,i])^2)
            let w2 = w.sqr()?.sum(D::Minus1)?.sum(D::Minus1)?; // (out, in)
            let s2 = styles.sqr()?; // (b, in)
            let d = (s2.matmul(&w2.t()?)? + 1e-8)?.sqrt()?.recip()?;
            y = y.broadcast_mul(&d.unsqueeze(2)?.unsqueeze(3)?)?;
        }
        self.add_bias(y)
    }

    fn conv(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        if self.stride == 1 {
            conv2d(x, w, self.padding)
        } else {
            Ok(x.conv2d(w, self.padding, self.stride, 1, 1)?)
        }
    }

    fn add_bias(&self, y: Tensor) -> Result<Tensor> {
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Stride-1 convolution whose input gradient is itself a convolution with
/// the flipped kernel. Candle's own backward goes through a direct-loop
/// transposed convolution that is several times slower on CPU. The backward
/// stays differentiable, so second-order penalties work through it.
pub fn conv2d(x: &Tensor, w: &Tensor, padding: usize) -> Result<Tensor> {
    let (_, _, kh, kw) = w.dims4()?;
    if kh != kw || kh % 2 == 0 || padding >= kh {
        return Ok(x.conv2d(w, padding, 1, 1, 1)?);
    }
    Ok(x.contiguous()?.apply_op2(&w.contiguous()?, FastConv { padding })?)
}

struct FastConv {
    padding: usize,
}

fn cpu_tensor(s: &CpuStorage, l: &Layout) -> candle_core::Result<Tensor> {
    fn slice<T: candle_core::WithDType>(v: &[T], l: &Layout) -> candle_core::Result<Tensor> {
        match l.contiguous_offsets() {
            Some((a, b)) => Tensor::from_slice(&v[a..b], l.shape(), &Device::Cpu),
            None => candle_core::bail!("conv operands must be contiguous"),
        }
    }
    match s {
        CpuStorage::F32(v) => slice(v, l),
        CpuStorage::F64(v) => slice(v, l),
        _ => candle_core::bail!("conv supports f32 and f64 only"),
    }
}

impl CustomOp2 for FastConv {
    fn name(&self) -> &'static str {
        "fast-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let y = cpu_tensor(s1, l1)?.conv2d(&cpu_tensor(s2, l2)?, self.padding, 1, 1, 1)?;
        let shape = y.shape().clone();
        let (st, _) = y.storage_and_layout();
        match &*st {
            Storage::Cpu(c) => Ok((c.clone(), shape)),
            _ => candle_core::bail!("unexpected device"),
        }
    }

    fn bwd(&self, arg: &Tensor, kernel: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let k = kernel.dim(2)?;
        let flipped = kernel.flip(&[2, 3])?.transpose(0, 1)?.contiguous()?;
        let grad_arg = grad
            .contiguous()?
            .apply_op2(&flipped, FastConv { padding: k - 1 - self.padding })?;
        let grad_kernel = arg
            .transpose(0, 1)?
            .conv2d(&grad.transpose(0, 1)?, self.padding, 1, 1, 1)?
            .transpose(0, 1)?;
        Ok((Some(grad_arg), Some(grad_kernel)))
    }
}

/// Group normalization with learned affine parameters.
#[derive(Clone)]
pub struct GroupNorm {
    groups: usize,
    weight: Tensor,
    bias: Tensor,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if channels % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "{channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            groups,
            weight: ps.constant(&format!("{name}.weight"), &[channels], 1.0)?,
            bias: ps.constant(&format!("{name}.bias"), &[channels], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        let normed = normed.reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * 0.2)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((pos + tail)?)
}

/// 2x nearest upsampling followed by a [1,2,1]² blur, i.e. a separable
/// approximation of bilinear upsampling that stays differentiable.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    blur3(&upsample_nearest2x(x)?)
}

/// Pixel replication written with broadcasts, whose backward accumulates
/// correctly when the input has several consumers.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Separable [1,2,1]/4 blur with edge replication.
pub fn blur3(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let p = x.pad_with_same(2, 1, 1)?;
    let v = ((p.narrow(2, 0, h)? + (p.narrow(2, 1, h)? * 2.0)?)? + p.narrow(2, 2, h)?)?;
    let p = v.pad_with_same(3, 1, 1)?;
    let out = ((p.narrow(3, 0, w)? + (p.narrow(3, 1, w)? * 2.0)?)? + p.narrow(3, 2, w)?)?;
    Ok((out * (1.0 / 16.0))?)
}

/// 2x2 average pooling, built from reshapes so it is twice differentiable.
pub fn downsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("cannot halve a {h}x{w} image")));
    }
    Ok((x.reshape((b, c, h / 2, 2, w / 2, 2))?.sum(5)?.sum(3)? * 0.25)?)
}

/// Adam with optional bias correction; moments are serializable.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(stores: &[&ParamStore], lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        let mut params = Vec::new();
        for (si, ps) in stores.iter().enumerate() {
            for (name, var) in ps.vars() {
                params.push((format!("{si}.{name}"), var.clone()));
            }
        }
        let m = params
            .iter()
            .map(|(_, v)| v.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            params,
            m,
            v,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from `grads`. A zero learning rate is a no-op.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        if self.lr == 0.0 {
            return Ok(());
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (_, var)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // second-order gradients (R1) carry their graph; the moments must not
            let g = g.detach();
            let g = &g;
            let m = ((&self.m[i] * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?;
            let next = (var.as_tensor() - (update * self.lr)?)?;
            var.set(&next)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut map = HashMap::new();
        for (i, (name, _)) in self.params.iter().enumerate() {
            map.insert(format!("m.{name}"), self.m[i].clone());
            map.insert(format!("v.{name}"), self.v[i].clone());
        }
        map.insert(
            "step".to_string(),
            Tensor::new(&[self.step as i64], &Device::Cpu)?,
        );
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let loaded = candle_core::safetensors::load(path, &Device::Cpu)?;
        for (i, (name, var)) in self.params.iter().enumerate() {
            for (prefix, slot) in [("m", &mut self.m), ("v", &mut self.v)] {
                let key = format!("{prefix}.{name}");
                let t = loaded
                    .get(&key)
                    .ok_or_else(|| Error::format(path, format!("missing {key}")))?;
                slot[i] = t.to_dtype(var.dtype())?;
            }
        }
        let step = loaded
            .get("step")
            .ok_or_else(|| Error::format(path, "missing step"))?
            .to_vec1::<i64>()?;
        self.step = step[0] as u64;
        Ok(())
    }
}

/// Standard-normal tensor drawn from `rng`.
pub fn randn(rng: &mut Rng, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        })
        .collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Sinusoidal embedding of scalar positions `t` (B,) into `dim` channels.
pub fn sinusoidal_embedding(t: &[f64], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            data.push((ti * 1000.0 * freq).sin());
        }
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            data.push((ti * 1000.0 * freq).cos());
        }
        for _ in 2 * half..dim {
            data.push(0.0);
        }
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Runs `f` on a fresh thread whose backward passes keep the gradient graph,
/// so gradients of gradients can be taken inside `f`.
pub fn with_second_order<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    static ENABLE: std::sync::Once = std::sync::Once::new();
    // candle reads this flag once per thread, on the first backward pass
    ENABLE.call_once(|| std::env::set_var("CANDLE_GRAD_DO_NOT_DETACH", "1"));
    std::thread::scope(|s| s.spawn(f).join().expect("second-order worker panicked"))
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
