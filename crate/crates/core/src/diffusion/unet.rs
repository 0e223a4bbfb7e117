use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, GroupNorm, Init, Linear, ParamStore};
use crate::scenegen::AttributeVocab;

/// Closed-vocabulary tokenizer. Id 0 is padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    words: Vec<String>,
    pub max_len: usize,
}

impl Tokenizer {
    pub fn new(vocab: &AttributeVocab, max_len: usize) -> Self {
        Self {
            words: vocab.tokens(),
            max_len,
        }
    }

    /// Vocabulary size including padding.
    pub fn size(&self) -> usize {
        self.words.len() + 1
    }

    pub fn encode(&self, caption: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::with_capacity(self.max_len);
        for w in caption.split_whitespace() {
            let id = self
                .words
                .iter()
                .position(|v| v == w)
                .ok_or_else(|| Error::InvalidArgument(format!("word {w:?} of {caption:?} is not in the caption vocabulary")))?;
            ids.push(id as u32 + 1);
        }
        if ids.len() > self.max_len {
            return Err(Error::InvalidArgument(format!(
                "caption {caption:?} has {} tokens, limit {}",
                ids.len(),
                self.max_len
            )));
        }
        ids.resize(self.max_len, 0);
        Ok(ids)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnetConfig {
    pub base_channels: usize,
    /// Channel multiplier per resolution level.
    pub channel_mult: Vec<usize>,
    /// Levels (0 = full resolution) that get cross-attention.
    pub attn_levels: Vec<usize>,
    pub heads: usize,
    pub groups: usize,
    pub ctx_dim: usize,
    pub max_tokens: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            channel_mult: vec![1, 2, 2],
            attn_levels: vec![1, 2],
            heads: 4,
            groups: 8,
            ctx_dim: 64,
            max_tokens: 12,
        }
    }
}

impl UnetConfig {
    pub fn validate(&self, res: usize) -> Result<()> {
        let levels = self.channel_mult.len();
        if levels == 0 || self.base_channels == 0 || self.heads == 0 || self.groups == 0 {
            return Err(Error::Config("unet sizes must be positive".into()));
        }
        if res % (1 << (levels - 1)) != 0 {
            return Err(Error::Config(format!("triplane resolution {res} not divisible by 2^{}", levels - 1)));
        }
        for &m in &self.channel_mult {
            let c = m * self.base_channels;
            if c % self.groups != 0 || c % self.heads != 0 {
                return Err(Error::Config(format!("{c} channels incompatible with groups/heads")));
            }
        }
        if self.attn_levels.iter().any(|&l| l >= levels) {
            return Err(Error::Config("attention level out of range".into()));
        }
        if self.ctx_dim % self.heads != 0 {
            return Err(Error::Config("ctx_dim must be divisible by heads".into()));
        }
        Ok(())
    }
}

fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let c = x.broadcast_sub(&mean)?;
    let var = c.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(c.broadcast_div(&(var + 1e-5)?.sqrt()?)?)
}

/// Multi-head attention of `q_in` (B, N, Cq) over `kv_in` (B, L, Ckv).
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    fn new(ps: &mut ParamStore, name: &str, c_q: usize, c_kv: usize, c: usize, heads: usize) -> Result<Self> {
        let std = Init::Standard { gain: 1.0 };
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), c_q, c, std, None)?,
            k: Linear::new(ps, &format!("{name}.k"), c_kv, c, std, None)?,
            v: Linear::new(ps, &format!("{name}.v"), c_kv, c, std, None)?,
            out: Linear::new(ps, &format!("{name}.out"), c, c_q, Init::Zero, Some(0.0))?,
            heads,
        })
    }

    fn forward(&self, q_in: &Tensor, kv_in: &Tensor) -> Result<Tensor> {
        let (b, n, _) = q_in.dims3()?;
        let l = kv_in.dim(1)?;
        let split = |x: Tensor, len: usize| -> Result<Tensor> {
            let c = x.dim(2)?;
            Ok(x.reshape((b, len, self.heads, c / self.heads))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(q_in)?, n)?;
        let k = split(self.k.forward(kv_in)?, l)?;
        let v = split(self.v.forward(kv_in)?, l)?;
        let dh = q.dim(3)?;
        let att = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let o = att.matmul(&v)?.transpose(1, 2)?.reshape((b, n, ()))?;
        self.out.forward(&o)
    }
}

/// Token embeddings contextualized by one self-attention block.
struct TextEncoder {
    table: Tensor,
    pos: Tensor,
    null: Tensor,
    attn: Attention,
    mlp0: Linear,
    mlp1: Linear,
}

impl TextEncoder {
    fn new(ps: &mut ParamStore, vocab_size: usize, cfg: &UnetConfig) -> Result<Self> {
        let d = cfg.ctx_dim;
        Ok(Self {
            table: ps.normal("text.table", &[vocab_size, d], 1.0)?,
            pos: ps.normal("text.pos", &[cfg.max_tokens, d], 0.1)?,
            null: ps.normal("text.null", &[cfg.max_tokens, d], 1.0)?,
            attn: Attention::new(ps, "text.attn", d, d, d, cfg.heads)?,
            mlp0: Linear::new(ps, "text.mlp0", d, 2 * d, Init::Standard { gain: 1.0 }, Some(0.0))?,
            mlp1: Linear::new(ps, "text.mlp1", 2 * d, d, Init::Zero, Some(0.0))?,
        })
    }

    /// (B, L) token ids plus a per-sample null flag -> (B, L, d) context.
    fn forward(&self, ids: &[Vec<u32>], null: &[bool]) -> Result<Tensor> {
        let b = ids.len();
        let l = self.pos.dim(0)?;
        let flat: Vec<u32> = ids.iter().flatten().copied().collect();
        let idx = Tensor::from_vec(flat, b * l, self.table.device())?;
        let x = self.table.index_select(&idx, 0)?.reshape((b, l, ()))?.broadcast_add(&self.pos)?;
        let h = layer_norm(&x)?;
        let x = (&x + self.attn.forward(&h, &h)?)?;
        let x = (&x + self.mlp1.forward(&silu(&self.mlp0.forward(&layer_norm(&x)?)?)?)?)?;
        if !null.iter().any(|&n| n) {
            return Ok(x);
        }
        // per-sample switch to the learned null context
        let mask: Vec<f32> = null.iter().map(|&n| if n { 1.0 } else { 0.0 }).collect();
        let mask = Tensor::from_vec(mask, (b, 1, 1), x.device())?.to_dtype(x.dtype())?;
        let keep = (1.0 - &mask)?;
        Ok((x.broadcast_mul(&keep)? + self.null.unsqueeze(0)?.broadcast_mul(&mask)?)?)
    }
}

struct ResBlock {
    norm0: GroupNorm,
    conv0: Conv2d,
    temb: Linear,
    norm1: GroupNorm,
    conv1: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, t_dim: usize, groups: usize) -> Result<Self> {
        let std = Init::Standard { gain: 1.0 };
        let in_groups = if c_in % groups == 0 { groups } else { 1 };
        Ok(Self {
            norm0: GroupNorm::new(ps, &format!("{name}.norm0"), c_in, in_groups)?,
            conv0: Conv2d::new(ps, &format!("{name}.conv0"), c_in, c_out, 3, 1, std, true)?,
            temb: Linear::new(ps, &format!("{name}.temb"), t_dim, c_out, std, Some(0.0))?,
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), c_out, groups)?,
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), c_out, c_out, 3, 1, Init::Zero, true)?,
            skip: if c_in != c_out {
                Some(Conv2d::new(ps, &format!("{name}.skip"), c_in, c_out, 1, 1, std, true)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv0.forward(&silu(&self.norm0.forward(x)?)?)?;
        let t = self.temb.forward(temb)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv1.forward(&silu(&self.norm1.forward(&h)?)?)?;
        let s = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((h + s)?)
    }
}

struct CrossAttnBlock {
    norm: GroupNorm,
    attn: Attention,
}

impl CrossAttnBlock {
    fn new(ps: &mut ParamStore, name: &str, c: usize, cfg: &UnetConfig) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(ps, &format!("{name}.norm"), c, cfg.groups)?,
            attn: Attention::new(ps, &format!("{name}.attn"), c, cfg.ctx_dim, c, cfg.heads)?,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let q = self.norm.forward(x)?.reshape((b, c, h * w))?.transpose(1, 2)?;
        let o = self.attn.forward(&q, ctx)?;
        Ok((x + o.transpose(1, 2)?.reshape((b, c, h, w))?)?)
    }
}

struct Level {
    res: ResBlock,
    attn: Option<CrossAttnBlock>,
}

impl Level {
    fn forward(&self, x: &Tensor, temb: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let h = self.res.forward(x, temb)?;
        match &self.attn {
            Some(a) => a.forward(&h, ctx),
            None => Ok(h),
        }
    }
}

/// Text-conditioned UNet predicting the clean triplane from a noisy one.
pub struct Denoiser {
    pub cfg: UnetConfig,
    pub channels: usize,
    pub tokenizer: Tokenizer,
    text: TextEncoder,
    t0: Linear,
    t1: Linear,
    conv_in: Conv2d,
    down: Vec<Level>,
    mid0: ResBlock,
    mid_attn: CrossAttnBlock,
    mid1: ResBlock,
    up: Vec<Level>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

/// Conditioning for one batch: token ids per sample and whether the sample
/// uses the null context instead.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub ids: Vec<Vec<u32>>,
    pub null: Vec<bool>,
}

impl Denoiser {
    pub fn new(ps: &mut ParamStore, channels: usize, res: usize, vocab: &AttributeVocab, cfg: &UnetConfig) -> Result<Self> {
        cfg.validate(res)?;
        let tokenizer = Tokenizer::new(vocab, cfg.max_tokens);
        let base = cfg.base_channels;
        let t_dim = 4 * base;
        let std = Init::Standard { gain: 1.0 };
        let ch: Vec<usize> = cfg.channel_mult.iter().map(|m| m * base).collect();
        let attn_at = |l: usize| cfg.attn_levels.contains(&l);
        let mut down = Vec::new();
        let mut prev = base;
        for (l, &c) in ch.iter().enumerate() {
            let res = ResBlock::new(ps, &format!("down{l}.res"), prev, c, t_dim, cfg.groups)?;
            let attn = if attn_at(l) {
                Some(CrossAttnBlock::new(ps, &format!("down{l}.attn"), c, cfg)?)
            } else {
                None
            };
            down.push(Level { res, attn });
            prev = c;
        }
        let top = *ch.last().expect("validated non-empty");
        let mid0 = ResBlock::new(ps, "mid0", top, top, t_dim, cfg.groups)?;
        let mid_attn = CrossAttnBlock::new(ps, "mid.attn", top, cfg)?;
        let mid1 = ResBlock::new(ps, "mid1", top, top, t_dim, cfg.groups)?;
        let mut up = Vec::new();
        for (l, &c) in ch.iter().enumerate().rev() {
            let res = ResBlock::new(ps, &format!("up{l}.res"), prev + c, c, t_dim, cfg.groups)?;
            let attn = if attn_at(l) {
                Some(CrossAttnBlock::new(ps, &format!("up{l}.attn"), c, cfg)?)
            } else {
                None
            };
            up.push(Level { res, attn });
            prev = c;
        }
        Ok(Self {
            text: TextEncoder::new(ps, tokenizer.size(), cfg)?,
            t0: Linear::new(ps, "time0", base, t_dim, std, Some(0.0))?,
            t1: Linear::new(ps, "time1", t_dim, t_dim, std, Some(0.0))?,
            conv_in: Conv2d::new(ps, "conv_in", channels, base, 3, 1, std, true)?,
            down,
            mid0,
            mid_attn,
            mid1,
            up,
            norm_out: GroupNorm::new(ps, "norm_out", prev, cfg.groups)?,
            conv_out: Conv2d::new(ps, "conv_out", prev, channels, 3, 1, Init::Zero, true)?,
            cfg: cfg.clone(),
            channels,
            tokenizer,
        })
    }

    /// Conditioning for captions; the empty caption selects the null context.
    pub fn condition(&self, captions: &[&str], drop: &[bool]) -> Result<Conditioning> {
        let mut ids = Vec::with_capacity(captions.len());
        let mut null = Vec::with_capacity(captions.len());
        for (i, c) in captions.iter().enumerate() {
            let empty = c.trim().is_empty();
            ids.push(self.tokenizer.encode(c)?);
            null.push(empty || drop.get(i).copied().unwrap_or(false));
        }
        Ok(Conditioning { ids, null })
    }

    pub fn dtype(&self) -> DType {
        self.t0.dtype()
    }

    /// Predicted clean triplanes for noisy `x` (B, C, R, R) at times `t`.
    pub fn forward(&self, x: &Tensor, t: &[f64], cond: &Conditioning) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        if c != self.channels || t.len() != b || cond.ids.len() != b {
            return Err(Error::Shape(format!(
                "denoiser expects {} channels and {b} times/captions, got {c}, {}, {}",
                self.channels,
                t.len(),
                cond.ids.len()
            )));
        }
        let ctx = self.text.forward(&cond.ids, &cond.null)?;
        let temb = nn::sinusoidal_embedding(t, self.cfg.base_channels, x.dtype())?;
        let temb = self.t1.forward(&silu(&self.t0.forward(&temb)?)?)?;
        let temb = silu(&temb)?;
        let mut h = self.conv_in.forward(x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        let last = self.down.len() - 1;
        for (l, level) in self.down.iter().enumerate() {
            h = level.forward(&h, &temb, &ctx)?;
            skips.push(h.clone());
            if l < last {
                h = nn::downsample2x(&h)?;
            }
        }
        h = self.mid0.forward(&h, &temb)?;
        h = self.mid_attn.forward(&h, &ctx)?;
        h = self.mid1.forward(&h, &temb)?;
        for (k, level) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = level.forward(&Tensor::cat(&[&h, &skip], 1)?, &temb, &ctx)?;
            if k < last {
                h = nn::upsample_nearest2x(&h)?;
            }
        }
        self.conv_out.forward(&silu(&self.norm_out.forward(&h)?)?)
    }
}
