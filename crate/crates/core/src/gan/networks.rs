use candle_core::{Tensor, D};

use super::GanConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Init, Linear, ParamStore};

const LRELU_GAIN: f64 = std::f64::consts::SQRT_2;

fn lrelu(x: &Tensor) -> Result<Tensor> {
    Ok((nn::leaky_relu(x)? * LRELU_GAIN)?)
}

fn eq() -> Init {
    Init::Equalized { lr_mul: 1.0 }
}

/// Convolution whose input channels are scaled by an affine map of w.
struct StyledConv {
    affine: Linear,
    conv: Conv2d,
    demodulate: bool,
}

impl StyledConv {
    fn new(ps: &mut ParamStore, name: &str, w_dim: usize, c_in: usize, c_out: usize, kernel: usize, demodulate: bool) -> Result<Self> {
        Ok(Self {
            affine: Linear::new(ps, &format!("{name}.affine"), w_dim, c_in, eq(), Some(1.0))?,
            conv: Conv2d::new(ps, &format!("{name}.conv"), c_in, c_out, kernel, 1, eq(), true)?,
            demodulate,
        })
    }

    fn forward(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let styles = self.affine.forward(w)?;
        self.conv.forward_modulated(x, &styles, self.demodulate)
    }
}

/// z → w mapping followed by a style-modulated convolutional synthesis
/// network that outputs a (3·n_feat, res, res) triplane.
pub struct Generator {
    mapping: Vec<Linear>,
    constant: Tensor,
    convs: Vec<StyledConv>,
    to_planes: StyledConv,
    z_dim: usize,
    levels: usize,
}

impl Generator {
    pub fn new(ps: &mut ParamStore, cfg: &GanConfig) -> Result<Self> {
        let mut mapping = Vec::new();
        let mut width = cfg.z_dim;
        for i in 0..cfg.mapping_layers {
            mapping.push(Linear::new(
                ps,
                &format!("mapping.fc{i}"),
                width,
                cfg.w_dim,
                Init::Equalized { lr_mul: cfg.mapping_lr_mul },
                Some(0.0),
            )?);
            width = cfg.w_dim;
        }
        if width != cfg.w_dim {
            return Err(Error::Config("mapping_layers must be at least 1 when z_dim != w_dim".into()));
        }
        let c = cfg.gen_channels;
        let constant = ps.normal("synthesis.const", &[1, c, 4, 4], 1.0)?;
        let levels = (cfg.triplane_res / 4).trailing_zeros() as usize;
        let mut convs = vec![StyledConv::new(ps, "synthesis.b4.conv", cfg.w_dim, c, c, 3, true)?];
        for l in 0..levels {
            let r = 8 << l;
            convs.push(StyledConv::new(ps, &format!("synthesis.b{r}.conv0"), cfg.w_dim, c, c, 3, true)?);
            convs.push(StyledConv::new(ps, &format!("synthesis.b{r}.conv1"), cfg.w_dim, c, c, 3, true)?);
        }
        let to_planes = StyledConv::new(ps, "synthesis.to_planes", cfg.w_dim, c, 3 * cfg.n_feat, 1, false)?;
        Ok(Self {
            mapping,
            constant,
            convs,
            to_planes,
            z_dim: cfg.z_dim,
            levels,
        })
    }

    pub fn map(&self, z: &Tensor) -> Result<Tensor> {
        let (_, d) = z.dims2()?;
        if d != self.z_dim {
            return Err(Error::Shape(format!("latent has {d} dims, expected {}", self.z_dim)));
        }
        // normalize to unit second moment
        let norm = (z.sqr()?.mean_keepdim(D::Minus1)? + 1e-8)?.sqrt()?;
        let mut x = z.broadcast_div(&norm)?;
        for l in &self.mapping {
            x = lrelu(&l.forward(&x)?)?;
        }
        Ok(x)
    }

    pub fn synthesize(&self, w: &Tensor) -> Result<Tensor> {
        let b = w.dim(0)?;
        let (_, c, h, wd) = self.constant.dims4()?;
        let mut x = self.constant.broadcast_as((b, c, h, wd))?.contiguous()?;
        x = lrelu(&self.convs[0].forward(&x, w)?)?;
        for l in 0..self.levels {
            x = nn::upsample2x(&x)?;
            x = lrelu(&self.convs[1 + 2 * l].forward(&x, w)?)?;
            x = lrelu(&self.convs[2 + 2 * l].forward(&x, w)?)?;
        }
        self.to_planes.forward(&x, w)
    }

    /// (planes (B, 3·n_feat, res, res), w (B, w_dim)).
    pub fn forward(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let w = self.map(z)?;
        let planes = self.synthesize(&w)?;
        Ok((planes, w))
    }
}

/// Maps a low-resolution render, its feature image and a style vector to an
/// image at twice the resolution. The network predicts a residual in logit
/// space on top of the upsampled render, so it starts as plain upsampling.
pub struct Upsampler {
    conv0: StyledConv,
    conv1: StyledConv,
    to_rgb: Conv2d,
    feat_channels: usize,
}

impl Upsampler {
    pub fn new(ps: &mut ParamStore, cfg: &GanConfig) -> Result<Self> {
        let c_in = 3 + 3 * cfg.n_feat;
        let c = cfg.up_channels;
        Ok(Self {
            conv0: StyledConv::new(ps, "up.conv0", cfg.w_dim, c_in, c, 3, true)?,
            conv1: StyledConv::new(ps, "up.conv1", cfg.w_dim, c, c, 3, true)?,
            to_rgb: Conv2d::new(ps, "up.to_rgb", c, 3, 1, 1, Init::Zero, true)?,
            feat_channels: 3 * cfg.n_feat,
        })
    }

    pub fn forward(&self, rgb_low: &Tensor, feat_low: &Tensor, w: &Tensor) -> Result<Tensor> {
        let (b, c, h, wd) = rgb_low.dims4()?;
        let (fb, fc, fh, fw) = feat_low.dims4()?;
        if c != 3 || fc != self.feat_channels || (b, h, wd) != (fb, fh, fw) {
            return Err(Error::Shape(format!(
                "upsampler inputs {:?} and {:?} do not match",
                rgb_low.dims(),
                feat_low.dims()
            )));
        }
        let x = nn::upsample2x(&Tensor::cat(&[rgb_low, feat_low], 1)?)?;
        let x = lrelu(&self.conv0.forward(&x, w)?)?;
        let x = lrelu(&self.conv1.forward(&x, w)?)?;
        let residual = self.to_rgb.forward(&x)?;
        let base = nn::upsample2x(rgb_low)?.clamp(1e-3, 1.0 - 1e-3)?;
        let logit = (base.log()? - (1.0 - &base)?.log()?)?;
        nn::sigmoid(&(logit + residual)?)
    }
}

/// Image classifier producing one real-vs-fake logit per sample.
pub struct Discriminator {
    from_rgb: Conv2d,
    blocks: Vec<(Conv2d, Conv2d)>,
    epilogue_conv: Conv2d,
    fc: Linear,
    out: Linear,
    in_channels: usize,
    res: usize,
    mbstd_group: usize,
}

impl Discriminator {
    pub fn new(ps: &mut ParamStore, in_channels: usize, res: usize, channels: usize, mbstd_group: usize) -> Result<Self> {
        if res < 4 || !res.is_power_of_two() {
            return Err(Error::Config(format!("discriminator resolution {res} must be a power of two >= 4")));
        }
        let c = channels;
        let from_rgb = Conv2d::new(ps, "disc.from_rgb", in_channels, c, 1, 1, eq(), true)?;
        let mut blocks = Vec::new();
        let mut r = res;
        while r > 4 {
            blocks.push((
                Conv2d::new(ps, &format!("disc.b{r}.conv0"), c, c, 3, 1, eq(), true)?,
                Conv2d::new(ps, &format!("disc.b{r}.conv1"), c, c, 3, 1, eq(), true)?,
            ));
            r /= 2;
        }
        Ok(Self {
            from_rgb,
            blocks,
            epilogue_conv: Conv2d::new(ps, "disc.b4.conv", c + 1, c, 3, 1, eq(), true)?,
            fc: Linear::new(ps, "disc.b4.fc", c * 16, c, eq(), Some(0.0))?,
            out: Linear::new(ps, "disc.out", c, 1, eq(), Some(0.0))?,
            in_channels,
            res,
            mbstd_group,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Appends the across-batch standard deviation as one extra channel.
    fn minibatch_std(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let mut g = self.mbstd_group.min(b).max(1);
        while b % g != 0 {
            g -= 1;
        }
        let y = x.reshape((g, b / g, c, h, w))?;
        let centered = y.broadcast_sub(&y.mean_keepdim(0)?)?;
        let std = (centered.sqr()?.mean(0)? + 1e-8)?.sqrt()?; // (b/g, c, h, w)
        let s = std.flatten_from(1)?.mean_keepdim(1)?; // (b/g, 1)
        let s = s
            .unsqueeze(0)?
            .broadcast_as((g, b / g, 1))?
            .reshape((b, 1, 1, 1))?
            .broadcast_as((b, 1, h, w))?;
        Ok(Tensor::cat(&[x, &s.contiguous()?], 1)?)
    }

    /// Logits (B,).
    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = img.dims4()?;
        if c != self.in_channels || h != self.res || w != self.res {
            return Err(Error::Shape(format!(
                "discriminator expects ({}, {r}, {r}) images, got {:?}",
                self.in_channels,
                img.dims(),
                r = self.res
            )));
        }
        // images in [0, 1] are centred to [-1, 1]
        let mut x = lrelu(&self.from_rgb.forward(&((img * 2.0)? - 1.0)?)?)?;
        for (c0, c1) in &self.blocks {
            x = lrelu(&c0.forward(&x)?)?;
            x = lrelu(&c1.forward(&x)?)?;
            x = nn::downsample2x(&x)?;
        }
        x = self.minibatch_std(&x)?;
        x = lrelu(&self.epilogue_conv.forward(&x)?)?;
        let x = lrelu(&self.fc.forward(&x.reshape((b, ()))?)?)?;
        Ok(self.out.forward(&x)?.squeeze(1)?)
    }
}

/// Non-saturating logistic loss for the discriminator:
/// mean softplus(D(fake)) + mean softplus(-D(real)).
pub fn discriminator_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let a = nn::softplus(fake_logits)?.mean_all()?;
    let b = nn::softplus(&real_logits.neg()?)?.mean_all()?;
    Ok((a + b)?)
}

/// Non-saturating generator loss: mean softplus(-D(fake)).
pub fn generator_loss(fake_logits: &Tensor) -> Result<Tensor> {
    Ok(nn::softplus(&fake_logits.neg()?)?.mean_all()?)
}

/// Mean squared norm of dD/dx over the batch, with its graph kept so it can
/// be differentiated again. Must run inside [`nn::with_second_order`].
pub fn r1_penalty(disc: &Discriminator, real: &Tensor) -> Result<Tensor> {
    let x = candle_core::Var::from_tensor(&real.detach())?;
    let logits = disc.forward(x.as_tensor())?;
    let grads = logits.sum_all()?.backward()?;
    let g = match grads.get(x.as_tensor()) {
        Some(g) => g.clone(),
        None => return Ok(Tensor::zeros((), real.dtype(), real.device())?),
    };
    Ok(g.sqr()?.flatten_from(1)?.sum(1)?.mean_all()?)
}
