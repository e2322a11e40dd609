//! Shared neural-network building blocks on top of candle.
//!
//! Residual convolution blocks with feature-wise affine conditioning,
//! low-resolution self-attention, squeeze-and-excitation, sinusoidal
//! time embeddings, and exponential-moving-average weight tracking.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{
    conv2d, embedding, group_norm, linear, Conv2d, Conv2dConfig, Embedding, GroupNorm, Linear,
    Module, VarBuilder, VarMap,
};

use crate::error::Result;
use crate::field::ComplexField;

pub fn device() -> Device {
    Device::Cpu
}

/// Number of normalization groups for a channel count: 4 when it
/// divides evenly, otherwise 1.
pub fn norm_groups(channels: usize) -> usize {
    if channels % 4 == 0 {
        4
    } else {
        1
    }
}

/// Packs complex fields into a (B, 2, H, W) f32 tensor with real and
/// imaginary channels.
pub fn fields_to_tensor(fields: &[&ComplexField], dev: &Device) -> Result<Tensor> {
    let (h, w) = fields[0].dim();
    let mut buf = Vec::with_capacity(fields.len() * 2 * h * w);
    for f in fields {
        buf.extend(f.to_channels_f32());
    }
    Ok(Tensor::from_vec(buf, (fields.len(), 2, h, w), dev)?)
}

/// Unpacks a (B, 2, H, W) tensor back into complex fields.
pub fn tensor_to_fields(t: &Tensor) -> Result<Vec<ComplexField>> {
    let (b, c, h, w) = t.dims4().map_err(candle_core::Error::from)?;
    assert_eq!(c, 2, "expected a two-channel tensor");
    let flat: Vec<f32> = t.flatten_all()?.to_vec1()?;
    let rec = 2 * h * w;
    (0..b)
        .map(|i| ComplexField::from_channels_f32(&flat[i * rec..(i + 1) * rec], h, w))
        .collect()
}

/// Fixed sinusoidal embedding of scalar times, shape (B, dim).
pub fn sinusoidal_embedding(t: &Tensor, dim: usize) -> Result<Tensor> {
    let dev = t.device();
    let half = dim / 2;
    let ts: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let mut buf = Vec::with_capacity(ts.len() * dim);
    for &x in &ts {
        for k in 0..half {
            let freq = (10_000f32).powf(-(k as f32) / half.max(1) as f32);
            buf.push((x * freq).sin());
        }
        for k in 0..half {
            let freq = (10_000f32).powf(-(k as f32) / half.max(1) as f32);
            buf.push((x * freq).cos());
        }
    }
    Ok(Tensor::from_vec(buf, (ts.len(), dim), dev)?)
}

/// Two-layer MLP mapping a sinusoidal time embedding to the
/// conditioning width.
#[derive(Debug)]
pub struct TimeEmbed {
    lin1: Linear,
    lin2: Linear,
    fourier_dim: usize,
}

impl TimeEmbed {
    pub fn new(fourier_dim: usize, out_dim: usize, vb: VarBuilder) -> Result<Self> {
        let lin1 = linear(fourier_dim, out_dim, vb.pp("lin1"))?;
        let lin2 = linear(out_dim, out_dim, vb.pp("lin2"))?;
        Ok(TimeEmbed { lin1, lin2, fourier_dim })
    }

    pub fn forward(&self, t: &Tensor) -> Result<Tensor> {
        let emb = sinusoidal_embedding(t, self.fourier_dim)?;
        Ok(self.lin2.forward(&self.lin1.forward(&emb)?.silu()?)?)
    }
}

/// Feature-wise affine conditioning: per-channel scale and shift
/// predicted from a conditioning vector.
#[derive(Debug)]
pub struct Film {
    proj: Linear,
    channels: usize,
}

impl Film {
    pub fn new(cond_dim: usize, channels: usize, vb: VarBuilder) -> Result<Self> {
        let proj = linear(cond_dim, 2 * channels, vb.pp("proj"))?;
        Ok(Film { proj, channels })
    }

    /// Applies `x * (1 + scale) + shift` over the channel axis of a
    /// (B, C, H, W) input.
    pub fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let sb = self.proj.forward(cond)?;
        let scale = sb.narrow(D::Minus1, 0, self.channels)?;
        let shift = sb.narrow(D::Minus1, self.channels, self.channels)?;
        let (b, c) = scale.dims2().map_err(candle_core::Error::from)?;
        let scale = scale.reshape((b, c, 1, 1))?;
        let shift = shift.reshape((b, c, 1, 1))?;
        Ok(x.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift)?)
    }
}

/// Residual block: two 3x3 convolutions with group norm and SiLU,
/// optionally modulated by a conditioning vector after the first norm.
#[derive(Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    film: Option<Film>,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        cond_dim: Option<usize>,
        vb: VarBuilder,
    ) -> Result<Self> {
        let cfg = Conv2dConfig { padding: 1, ..Default::default() };
        let norm1 = group_norm(norm_groups(in_channels), in_channels, 1e-5, vb.pp("norm1"))?;
        let conv1 = conv2d(in_channels, out_channels, 3, cfg, vb.pp("conv1"))?;
        let norm2 = group_norm(norm_groups(out_channels), out_channels, 1e-5, vb.pp("norm2"))?;
        let conv2 = conv2d(out_channels, out_channels, 3, cfg, vb.pp("conv2"))?;
        let film = match cond_dim {
            Some(d) => Some(Film::new(d, out_channels, vb.pp("film"))?),
            None => None,
        };
        let skip = if in_channels != out_channels {
            Some(conv2d(in_channels, out_channels, 1, Default::default(), vb.pp("skip"))?)
        } else {
            None
        };
        Ok(ResBlock { norm1, conv1, norm2, conv2, film, skip })
    }

    pub fn forward(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        if let (Some(film), Some(c)) = (&self.film, cond) {
            h = film.forward(&h, c)?;
        }
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let res = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + res)?)
    }
}

/// Single-head self-attention over the spatial positions of a
/// (B, C, H, W) map; used only at low resolution.
#[derive(Debug)]
pub struct SelfAttention2d {
    norm: GroupNorm,
    qkv: Conv2d,
    proj: Conv2d,
    channels: usize,
}

impl SelfAttention2d {
    pub fn new(channels: usize, vb: VarBuilder) -> Result<Self> {
        let norm = group_norm(norm_groups(channels), channels, 1e-5, vb.pp("norm"))?;
        let qkv = conv2d(channels, 3 * channels, 1, Default::default(), vb.pp("qkv"))?;
        let proj = conv2d(channels, channels, 1, Default::default(), vb.pp("proj"))?;
        Ok(SelfAttention2d { norm, qkv, proj, channels })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4().map_err(candle_core::Error::from)?;
        let qkv = self.qkv.forward(&self.norm.forward(x)?)?;
        let qkv = qkv.reshape((b, 3, c, h * w))?;
        let q = qkv.narrow(1, 0, 1)?.reshape((b, c, h * w))?;
        let k = qkv.narrow(1, 1, 1)?.reshape((b, c, h * w))?;
        let v = qkv.narrow(1, 2, 1)?.reshape((b, c, h * w))?;
        let scale = 1.0 / (self.channels as f64).sqrt();
        // attn[b, i, j] over spatial positions i (query) and j (key).
        let attn = (q.transpose(1, 2)?.matmul(&k)? * scale)?;
        let attn = candle_nn::ops::softmax(&attn, D::Minus1)?;
        let out = v.matmul(&attn.transpose(1, 2)?)?.reshape((b, c, h, w))?;
        Ok((self.proj.forward(&out)? + x)?)
    }
}

/// Squeeze-and-excitation channel gating.
#[derive(Debug)]
pub struct SeGate {
    fc1: Linear,
    fc2: Linear,
}

impl SeGate {
    pub fn new(channels: usize, reduction: usize, vb: VarBuilder) -> Result<Self> {
        let hidden = (channels / reduction).max(1);
        let fc1 = linear(channels, hidden, vb.pp("fc1"))?;
        let fc2 = linear(hidden, channels, vb.pp("fc2"))?;
        Ok(SeGate { fc1, fc2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4().map_err(candle_core::Error::from)?;
        let pooled = x.mean(D::Minus1)?.mean(D::Minus1)?; // (B, C)
        let gate = self.fc2.forward(&self.fc1.forward(&pooled)?.silu()?)?;
        let gate = candle_nn::ops::sigmoid(&gate)?.reshape((b, c, 1, 1))?;
        Ok(x.broadcast_mul(&gate)?)
    }
}

/// Learned token embedding table.
pub fn token_embedding(vocab: usize, dim: usize, vb: VarBuilder) -> Result<Embedding> {
    Ok(embedding(vocab, dim, vb)?)
}

/// Exponential moving average of a variable map's weights.
#[derive(Debug)]
pub struct Ema {
    pub decay: f64,
    shadow: HashMap<String, Tensor>,
}

impl Ema {
    /// Initializes the shadow weights as a copy of the current weights.
    pub fn new(varmap: &VarMap, decay: f64) -> Result<Self> {
        let mut shadow = HashMap::new();
        for (name, var) in varmap.data().lock().unwrap().iter() {
            shadow.insert(name.clone(), var.as_tensor().copy()?);
        }
        Ok(Ema { decay, shadow })
    }

    /// shadow <- decay * shadow + (1 - decay) * online, per parameter.
    pub fn update(&mut self, varmap: &VarMap) -> Result<()> {
        for (name, var) in varmap.data().lock().unwrap().iter() {
            let s = self.shadow.get_mut(name).expect("shadow missing parameter");
            *s = ((&*s * self.decay)? + (var.as_tensor() * (1.0 - self.decay))?)?;
        }
        Ok(())
    }

    pub fn weights(&self) -> &HashMap<String, Tensor> {
        &self.shadow
    }

    /// Copies the shadow weights into the variable map.
    pub fn apply_to(&self, varmap: &VarMap) -> Result<()> {
        for (name, var) in varmap.data().lock().unwrap().iter() {
            let s = self.shadow.get(name).expect("shadow missing parameter");
            var.set(s)?;
        }
        Ok(())
    }

    pub fn from_weights(weights: HashMap<String, Tensor>, decay: f64) -> Self {
        Ema { decay, shadow: weights }
    }
}

/// Builds an f32 variable builder over a fresh variable map.
pub fn var_builder(varmap: &VarMap, dev: &Device) -> VarBuilder<'static> {
    VarBuilder::from_varmap(varmap, DType::F32, dev)
}

/// Draws a standard-normal f32 tensor from a caller-owned RNG, keeping
/// all stochastic tensors on named substreams.
pub fn randn_tensor<S: Into<candle_core::Shape>>(
    shape: S,
    rng: &mut impl rand::Rng,
    dev: &Device,
) -> Result<Tensor> {
    let shape: candle_core::Shape = shape.into();
    let n = shape.elem_count();
    let buf: Vec<f32> =
        (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) as f32).collect();
    Ok(Tensor::from_vec(buf, shape, dev)?)
}

/// Re-initializes every variable from the given RNG so that weight
/// initialization is reproducible across runs (the default builder
/// draws from a thread-local RNG). Rank >= 2 weights get a fan-in
/// scaled normal; rank-1 `weight` tensors (norm gains) get ones;
/// biases get zeros.
pub fn deterministic_init(varmap: &VarMap, rng: &mut impl rand::Rng) -> Result<()> {
    let data = varmap.data().lock().unwrap();
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    for name in names {
        let var = &data[name];
        let t = var.as_tensor();
        let dims = t.dims();
        let new = if dims.len() >= 2 {
            let fan_in: usize = dims[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            let buf: Vec<f32> = (0..t.elem_count())
                .map(|_| (rng.sample::<f64, _>(rand_distr::StandardNormal) * std) as f32)
                .collect();
            Tensor::from_vec(buf, dims, t.device())?
        } else if name.ends_with("weight") {
            t.ones_like()?
        } else {
            t.zeros_like()?
        };
        var.set(&new)?;
    }
    Ok(())
}
