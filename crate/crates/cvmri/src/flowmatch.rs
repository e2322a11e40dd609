//! Two-stage conditional flow matching over 2 x 48 x 48 latents.
//!
//! Stage 1 trains a sequence-conditioned velocity U-Net with condition
//! dropout for classifier-free guidance; Stage 2 finetunes it to
//! additionally condition on the abnormality label, first optimizing
//! only the new conditioning parameters and then unfreezing everything
//! at a reduced learning rate for the pretrained weights. Sampling
//! integrates the guided velocity field from noise with Heun's method
//! using the averaged (EMA) weights.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Tensor, Var};
use candle_nn::{
    conv2d, group_norm, AdamW, Conv2d, Conv2dConfig, Embedding, GroupNorm, Module, Optimizer,
    ParamsAdamW, VarMap,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Provenance;
use crate::checkpoint::{self, CheckpointMeta, LatentStats, LogRow};
use crate::cvae::{LatentSample, LATENT_CHANNELS, LATENT_SIZE};
use crate::error::{Error, Result};
use crate::label::{Abnormality, ConditionLabel, PathToken, SeqToken};
use crate::nn::{
    deterministic_init, device, norm_groups, randn_tensor, var_builder, Ema, ResBlock,
    SelfAttention2d, TimeEmbed,
};
use crate::rng::substream;

pub const STAGE1_KIND: &str = "flow-stage1";
pub const STAGE2_KIND: &str = "flow-stage2";

/// x_t = (1 - t) * eps + t * x0, the linear interpolation path.
pub fn interpolate(x0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t = {t} outside [0, 1]")));
    }
    if x0.dims() != eps.dims() {
        return Err(Error::shape(format!("x0 {:?} vs eps {:?}", x0.dims(), eps.dims())));
    }
    Ok(((eps * (1.0 - t))? + (x0 * t)?)?)
}

/// Per-sample interpolation with one t per batch element.
pub fn interpolate_batch(x0: &Tensor, eps: &Tensor, t: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x0.dims4().map_err(candle_core::Error::from)?;
    let t = t.reshape((b, 1, 1, 1))?.broadcast_as((b, c, h, w))?;
    let one_minus = (t.ones_like()? - &t)?;
    Ok(((eps * one_minus)? + (x0 * t)?)?)
}

/// Mean squared error between the predicted velocity and the true
/// velocity x0 - eps.
pub fn fm_loss(v_pred: &Tensor, x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if v_pred.dims() != x0.dims() || x0.dims() != eps.dims() {
        return Err(Error::shape(format!(
            "v {:?}, x0 {:?}, eps {:?}",
            v_pred.dims(),
            x0.dims(),
            eps.dims()
        )));
    }
    let target = (x0 - eps)?;
    Ok((v_pred - target)?.sqr()?.mean_all()?)
}

/// Classifier-free guidance: v = v_uncond + w (v_cond - v_uncond).
pub fn cfg_combine(v_uncond: &Tensor, v_cond: &Tensor, w: f64) -> Result<Tensor> {
    if w < 1.0 {
        return Err(Error::invalid(format!("guidance scale w = {w} < 1")));
    }
    if v_uncond.dims() != v_cond.dims() {
        return Err(Error::shape(format!(
            "v_uncond {:?} vs v_cond {:?}",
            v_uncond.dims(),
            v_cond.dims()
        )));
    }
    Ok((v_uncond + ((v_cond - v_uncond)? * w)?)?)
}

/// ema <- decay * ema + (1 - decay) * online, elementwise per named
/// parameter; name or shape mismatches are errors.
pub fn ema_update(
    ema: &mut HashMap<String, Tensor>,
    online: &HashMap<String, Tensor>,
    decay: f64,
) -> Result<()> {
    if ema.len() != online.len() {
        return Err(Error::invalid("EMA and online weight sets differ in size"));
    }
    for (name, o) in online {
        let e = ema
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("EMA missing parameter {name}")))?;
        if e.dims() != o.dims() {
            return Err(Error::shape(format!("{name}: {:?} vs {:?}", e.dims(), o.dims())));
        }
        *e = ((&*e * decay)? + (o * (1.0 - decay))?)?;
    }
    Ok(())
}

/// A time-dependent velocity field over latent tensors.
pub trait Velocity {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

/// Integrates dx/dt = v(x, t) from t = 0 to 1 on a uniform grid with
/// Heun's predictor-corrector, starting from `eps`.
pub fn heun_sample(field: &dyn Velocity, eps: &Tensor, n_steps: usize) -> Result<Tensor> {
    if n_steps == 0 {
        return Err(Error::invalid("n_steps must be >= 1"));
    }
    let dt = 1.0 / n_steps as f64;
    let mut x = eps.clone();
    for i in 0..n_steps {
        let t = i as f64 * dt;
        let k1 = field.velocity(&x, t)?;
        let x_pred = (&x + (&k1 * dt)?)?;
        let k2 = field.velocity(&x_pred, t + dt)?;
        x = (&x + ((k1 + k2)? * (dt / 2.0))?)?;
    }
    Ok(x)
}

/// Hyperparameters shared by both training stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub base_channels: usize,
    pub cond_dim: usize,
    pub fourier_dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub ema_decay: f64,
    /// Condition-dropout probability (sequence in Stage 1, abnormality
    /// in Stage 2).
    pub dropout: f64,
    pub n_steps: usize,
    /// Stage-2 phase A (conditioning-only) epochs.
    pub phase_a_epochs: usize,
    /// Learning-rate multiplier for pretrained parameters in phase B.
    pub pretrained_lr_scale: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            base_channels: 16,
            cond_dim: 32,
            fourier_dim: 16,
            lr: 2e-4,
            batch_size: 32,
            epochs: 20,
            ema_decay: 0.999,
            dropout: 0.1,
            n_steps: 50,
            phase_a_epochs: 2,
            pretrained_lr_scale: 0.1,
        }
    }
}

/// Prefix of the parameters introduced for abnormality conditioning;
/// everything else counts as pretrained after Stage 1.
pub const NEW_PARAM_PREFIX: &str = "path_embed";

/// Velocity U-Net: one down/up level with self-attention at the lower
/// resolution; the combined time/sequence/abnormality conditioning
/// vector is injected into every residual block.
pub struct FlowUnet {
    time: TimeEmbed,
    seq_embed: Embedding,
    path_embed: Embedding,
    conv_in: Conv2d,
    rb_d1: ResBlock,
    down: Conv2d,
    rb_m1: ResBlock,
    attn: SelfAttention2d,
    rb_m2: ResBlock,
    up_conv: Conv2d,
    rb_u1: ResBlock,
    out_norm: GroupNorm,
    conv_out: Conv2d,
    pub config: FlowConfig,
    pub varmap: VarMap,
}

impl FlowUnet {
    pub fn new(config: FlowConfig) -> Result<Self> {
        let dev = device();
        let varmap = VarMap::new();
        let vb = var_builder(&varmap, &dev);
        let c = config.base_channels;
        let c2 = 2 * c;
        let cd = config.cond_dim;
        let pad = Conv2dConfig { padding: 1, ..Default::default() };
        let stride2 = Conv2dConfig { padding: 1, stride: 2, ..Default::default() };

        let time = TimeEmbed::new(config.fourier_dim, cd, vb.pp("time"))?;
        let seq_embed = candle_nn::embedding(SeqToken::VOCAB, cd, vb.pp("seq_embed"))?;
        let path_embed = candle_nn::embedding(PathToken::VOCAB, cd, vb.pp(NEW_PARAM_PREFIX))?;
        let conv_in = conv2d(LATENT_CHANNELS, c, 3, pad, vb.pp("conv_in"))?;
        let rb_d1 = ResBlock::new(c, c, Some(cd), vb.pp("rb_d1"))?;
        let down = conv2d(c, c2, 3, stride2, vb.pp("down"))?;
        let rb_m1 = ResBlock::new(c2, c2, Some(cd), vb.pp("rb_m1"))?;
        let attn = SelfAttention2d::new(c2, vb.pp("attn"))?;
        let rb_m2 = ResBlock::new(c2, c2, Some(cd), vb.pp("rb_m2"))?;
        let up_conv = conv2d(c2, c, 3, pad, vb.pp("up_conv"))?;
        let rb_u1 = ResBlock::new(c2, c, Some(cd), vb.pp("rb_u1"))?;
        let out_norm = group_norm(norm_groups(c), c, 1e-5, vb.pp("out_norm"))?;
        let conv_out = conv2d(c, LATENT_CHANNELS, 3, pad, vb.pp("conv_out"))?;

        Ok(FlowUnet {
            time,
            seq_embed,
            path_embed,
            conv_in,
            rb_d1,
            down,
            rb_m1,
            attn,
            rb_m2,
            up_conv,
            rb_u1,
            out_norm,
            conv_out,
            config,
            varmap,
        })
    }

    fn cond_vector(&self, t: &Tensor, conds: &[ConditionLabel]) -> Result<Tensor> {
        let dev = device();
        let seq_ids: Vec<u32> =
            conds.iter().map(|c| c.sequence.embed_index() as u32).collect();
        let path_ids: Vec<u32> =
            conds.iter().map(|c| c.abnormality.embed_index() as u32).collect();
        let seq = self.seq_embed.forward(&Tensor::from_vec(seq_ids, (conds.len(),), &dev)?)?;
        let path = self.path_embed.forward(&Tensor::from_vec(path_ids, (conds.len(),), &dev)?)?;
        let time = self.time.forward(t)?;
        Ok(((time + seq)? + path)?)
    }

    /// Predicted velocity for a (B, 2, 48, 48) batch at per-sample
    /// times t (shape (B,)).
    pub fn forward(&self, x: &Tensor, t: &Tensor, conds: &[ConditionLabel]) -> Result<Tensor> {
        let (b, _, _, _) = x.dims4().map_err(candle_core::Error::from)?;
        if conds.len() != b {
            return Err(Error::shape(format!("{} conditions for batch of {b}", conds.len())));
        }
        let cond = self.cond_vector(t, conds)?;
        let h0 = self.conv_in.forward(x)?;
        let h1 = self.rb_d1.forward(&h0, Some(&cond))?;
        let h = self.down.forward(&h1)?;
        let h = self.rb_m1.forward(&h, Some(&cond))?;
        let h = self.attn.forward(&h)?;
        let h = self.rb_m2.forward(&h, Some(&cond))?;
        let (_, _, hh, ww) = h.dims4().map_err(candle_core::Error::from)?;
        let h = h.upsample_nearest2d(2 * hh, 2 * ww)?;
        let h = self.up_conv.forward(&h)?;
        let h = Tensor::cat(&[&h, &h1], 1)?;
        let h = self.rb_u1.forward(&h, Some(&cond))?;
        let h = self.out_norm.forward(&h)?.silu()?;
        Ok(self.conv_out.forward(&h)?)
    }
}

/// The guided field used at sampling time: both branches evaluated at
/// the same state and combined with the guidance scale.
pub struct GuidedVelocity<'a> {
    pub model: &'a FlowUnet,
    pub cond: ConditionLabel,
    pub uncond: ConditionLabel,
    pub w: f64,
}

impl Velocity for GuidedVelocity<'_> {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let (b, _, _, _) = x.dims4().map_err(candle_core::Error::from)?;
        let ts = Tensor::from_vec(vec![t as f32; b], (b,), x.device())?;
        let v_cond = self.model.forward(x, &ts, &vec![self.cond; b])?;
        if self.w == 1.0 {
            return Ok(v_cond);
        }
        let v_uncond = self.model.forward(x, &ts, &vec![self.uncond; b])?;
        cfg_combine(&v_uncond, &v_cond, self.w)
    }
}

/// The unconditional counterpart of a label: Stage-1 models drop the
/// sequence token, Stage-2 models drop only the abnormality token.
pub fn uncond_label(cond: ConditionLabel, stage2: bool) -> ConditionLabel {
    if stage2 {
        ConditionLabel { sequence: cond.sequence, abnormality: PathToken::Null }
    } else {
        ConditionLabel { sequence: SeqToken::Null, abnormality: cond.abnormality }
    }
}

fn latents_to_tensor(latents: &[&LatentSample]) -> Result<Tensor> {
    let rec = LatentSample::len_expected();
    let mut buf = Vec::with_capacity(latents.len() * rec);
    for l in latents {
        if l.z.len() != rec {
            return Err(Error::shape(format!("latent length {}", l.z.len())));
        }
        buf.extend_from_slice(&l.z);
    }
    Ok(Tensor::from_vec(
        buf,
        (latents.len(), LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE),
        &device(),
    )?)
}

/// Standardizes a latent batch tensor per channel.
pub fn standardize(x: &Tensor, stats: &LatentStats) -> Result<Tensor> {
    let dev = x.device();
    let mean = Tensor::from_vec(
        vec![stats.mean[0] as f32, stats.mean[1] as f32],
        (1, 2, 1, 1),
        dev,
    )?;
    let std =
        Tensor::from_vec(vec![stats.std[0] as f32, stats.std[1] as f32], (1, 2, 1, 1), dev)?;
    Ok(x.broadcast_sub(&mean)?.broadcast_div(&std)?)
}

/// Inverse of [`standardize`].
pub fn destandardize(x: &Tensor, stats: &LatentStats) -> Result<Tensor> {
    let dev = x.device();
    let mean = Tensor::from_vec(
        vec![stats.mean[0] as f32, stats.mean[1] as f32],
        (1, 2, 1, 1),
        dev,
    )?;
    let std =
        Tensor::from_vec(vec![stats.std[0] as f32, stats.std[1] as f32], (1, 2, 1, 1), dev)?;
    Ok(x.broadcast_mul(&std)?.broadcast_add(&mean)?)
}

/// Draws synthetic latents: integrates the guided field from noise and
/// de-standardizes with the stored statistics. The model should carry
/// the averaged weights.
pub fn sample_latents(
    model: &FlowUnet,
    stats: &LatentStats,
    conds: &[ConditionLabel],
    stage2: bool,
    w: f64,
    n_steps: usize,
    rng: &mut impl Rng,
) -> Result<Vec<LatentSample>> {
    let dev = device();
    let mut out = Vec::with_capacity(conds.len());
    for &cond in conds {
        let eps = randn_tensor((1, LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE), rng, &dev)?;
        let field = GuidedVelocity { model, cond, uncond: uncond_label(cond, stage2), w };
        let x = heun_sample(&field, &eps, n_steps)?;
        let z = destandardize(&x, stats)?;
        out.push(LatentSample {
            z: z.flatten_all()?.to_vec1()?,
            condition: cond,
            provenance: Provenance::Synthetic,
            volume_id: String::new(),
        });
    }
    Ok(out)
}

/// Stage-1 condition dropout: with probability p the sequence token is
/// replaced by the null token.
pub fn dropout_stage1(cond: ConditionLabel, p: f64, rng: &mut impl Rng) -> ConditionLabel {
    if rng.gen::<f64>() < p {
        ConditionLabel { sequence: SeqToken::Null, abnormality: cond.abnormality }
    } else {
        cond
    }
}

/// Stage-2 dropout applies exclusively to the abnormality token; the
/// sequence token is never dropped.
pub fn dropout_stage2(cond: ConditionLabel, p: f64, rng: &mut impl Rng) -> ConditionLabel {
    if rng.gen::<f64>() < p {
        ConditionLabel { sequence: cond.sequence, abnormality: PathToken::Null }
    } else {
        cond
    }
}

fn stage1_label(cond: ConditionLabel) -> ConditionLabel {
    ConditionLabel { sequence: cond.sequence, abnormality: PathToken::Null }
}

/// Validation loss over a latent set with a deterministic noise/time
/// stream.
pub fn flow_validation_loss(
    model: &FlowUnet,
    latents: &[LatentSample],
    stats: &LatentStats,
    stage2: bool,
    seed: u64,
) -> Result<f64> {
    let mut rng = substream(seed, "flow/val");
    let mut total = 0.0;
    let mut count = 0usize;
    let idx: Vec<usize> = (0..latents.len()).collect();
    for chunk in idx.chunks(model.config.batch_size.max(1)) {
        let batch: Vec<&LatentSample> = chunk.iter().map(|&i| &latents[i]).collect();
        let x0 = standardize(&latents_to_tensor(&batch)?, stats)?;
        let eps = randn_tensor(x0.shape().clone(), &mut rng, x0.device())?;
        let ts: Vec<f32> = (0..chunk.len()).map(|_| rng.gen::<f64>() as f32).collect();
        let t = Tensor::from_vec(ts.clone(), (chunk.len(),), x0.device())?;
        let x_t = interpolate_batch(&x0, &eps, &t)?;
        let conds: Vec<ConditionLabel> = batch
            .iter()
            .map(|l| if stage2 { l.condition } else { stage1_label(l.condition) })
            .collect();
        let v = model.forward(&x_t, &t, &conds)?;
        let loss = fm_loss(&v, &x0, &eps)?;
        total += loss.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count.max(1) as f64)
}

fn shuffled_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

fn train_epoch(
    model: &FlowUnet,
    opt_main: &mut AdamW,
    opt_new: Option<&mut AdamW>,
    latents: &[LatentSample],
    order: &[usize],
    stats: &LatentStats,
    stage2: bool,
    dropout: f64,
    ema: &mut Ema,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut total = 0.0;
    let mut seen = 0usize;
    let mut opt_new = opt_new;
    for chunk in order.chunks(model.config.batch_size.max(1)) {
        let batch: Vec<&LatentSample> = chunk.iter().map(|&i| &latents[i]).collect();
        let x0 = standardize(&latents_to_tensor(&batch)?, stats)?;
        let eps = randn_tensor(x0.shape().clone(), rng, x0.device())?;
        let ts: Vec<f32> = (0..chunk.len()).map(|_| rng.gen::<f64>() as f32).collect();
        let t = Tensor::from_vec(ts, (chunk.len(),), x0.device())?;
        let x_t = interpolate_batch(&x0, &eps, &t)?;
        let conds: Vec<ConditionLabel> = batch
            .iter()
            .map(|l| {
                if stage2 {
                    dropout_stage2(l.condition, dropout, rng)
                } else {
                    dropout_stage1(stage1_label(l.condition), dropout, rng)
                }
            })
            .collect();
        let v = model.forward(&x_t, &t, &conds)?;
        let loss = fm_loss(&v, &x0, &eps)?;
        let grads = loss.backward()?;
        opt_main.step(&grads)?;
        if let Some(opt) = opt_new.as_deref_mut() {
            opt.step(&grads)?;
        }
        ema.update(&model.varmap)?;
        total += loss.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
        seen += chunk.len();
    }
    Ok(total / seen.max(1) as f64)
}

fn split_vars(varmap: &VarMap) -> (Vec<Var>, Vec<Var>) {
    let data = varmap.data().lock().unwrap();
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    let mut pretrained = Vec::new();
    let mut new = Vec::new();
    for name in names {
        if name.starts_with(NEW_PARAM_PREFIX) {
            new.push(data[name].clone());
        } else {
            pretrained.push(data[name].clone());
        }
    }
    (pretrained, new)
}

fn flow_meta(
    kind: &str,
    config: &FlowConfig,
    stats: &LatentStats,
    seed: u64,
    log: Vec<LogRow>,
) -> Result<CheckpointMeta> {
    Ok(CheckpointMeta {
        kind: kind.into(),
        seed,
        config: serde_json::to_value(config).map_err(|e| Error::Format(e.to_string()))?,
        latent_stats: Some(stats.clone()),
        training_log: log,
    })
}

/// Stage-1 training: sequence conditioning with 10% dropout, EMA
/// tracking, per-epoch train/validation losses in the log.
pub fn train_stage1(
    train: &[LatentSample],
    val: &[LatentSample],
    stats: &LatentStats,
    config: &FlowConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<(FlowUnet, CheckpointMeta)> {
    if train.is_empty() {
        return Err(Error::invalid("empty latent training set"));
    }
    let covered: std::collections::BTreeSet<usize> =
        train.iter().map(|l| l.condition.sequence.embed_index()).collect();
    if covered.len() < crate::label::Sequence::ALL.len() {
        log::warn!("stage 1: only {} of 5 sequences present in the latents", covered.len());
    }
    let model = FlowUnet::new(config.clone())?;
    deterministic_init(&model.varmap, &mut substream(seed, "fm1/init"))?;
    let mut opt = AdamW::new(
        model.varmap.all_vars(),
        ParamsAdamW { lr: config.lr, ..Default::default() },
    )?;
    let mut ema = Ema::new(&model.varmap, config.ema_decay)?;

    let mut log = Vec::new();
    for epoch in 0..config.epochs {
        let mut rng = substream(seed, &format!("fm1/epoch/{epoch}"));
        let order = shuffled_indices(train.len(), &mut rng);
        let train_loss = train_epoch(
            &model,
            &mut opt,
            None,
            train,
            &order,
            stats,
            false,
            config.dropout,
            &mut ema,
            &mut rng,
        )?;
        let val_set = if val.is_empty() { train } else { val };
        let online_val = flow_validation_loss(&model, val_set, stats, false, seed)?;
        // EMA diagnostic: evaluate with the averaged weights, restore.
        let online = crate::nn::Ema::new(&model.varmap, 0.0)?;
        ema.apply_to(&model.varmap)?;
        let ema_val = flow_validation_loss(&model, val_set, stats, false, seed)?;
        online.apply_to(&model.varmap)?;
        log::info!("stage1 epoch {epoch}: train {train_loss:.5} val {online_val:.5} ema {ema_val:.5}");
        let mut extra = std::collections::BTreeMap::new();
        extra.insert("ema_val_loss".to_string(), ema_val);
        log.push(LogRow { epoch, train_loss, val_loss: Some(online_val), extra });
    }
    let meta = flow_meta(STAGE1_KIND, config, stats, seed, log)?;
    checkpoint::save(out_dir, &meta, &model.varmap, Some(&ema))?;
    Ok((model, meta))
}

/// Weighted sampler giving normal and abnormal labeled latents equal
/// frequency while passing unlabeled latents through at their share.
pub struct BalancedSampler {
    normal: Vec<usize>,
    abnormal: Vec<usize>,
    unlabeled: Vec<usize>,
    p_unlabeled: f64,
}

impl BalancedSampler {
    pub fn new(latents: &[LatentSample]) -> Result<Self> {
        let mut normal = Vec::new();
        let mut abnormal = Vec::new();
        let mut unlabeled = Vec::new();
        for (i, l) in latents.iter().enumerate() {
            match l.condition.abnormality {
                PathToken::Abn(Abnormality::Normal) => normal.push(i),
                PathToken::Abn(Abnormality::Abnormal) => abnormal.push(i),
                PathToken::Abn(Abnormality::Unknown) => unlabeled.push(i),
                PathToken::Null => {
                    return Err(Error::invalid("stage-2 latent without an abnormality token"))
                }
            }
        }
        if normal.is_empty() || abnormal.is_empty() {
            return Err(Error::DegenerateLabels);
        }
        let p_unlabeled = unlabeled.len() as f64 / latents.len() as f64;
        Ok(BalancedSampler { normal, abnormal, unlabeled, p_unlabeled })
    }

    /// Draws one latent index; labeled draws are a fair coin between
    /// the classes.
    pub fn draw(&self, rng: &mut impl Rng) -> usize {
        if !self.unlabeled.is_empty() && rng.gen::<f64>() < self.p_unlabeled {
            self.unlabeled[rng.gen_range(0..self.unlabeled.len())]
        } else if rng.gen::<f64>() < 0.5 {
            self.normal[rng.gen_range(0..self.normal.len())]
        } else {
            self.abnormal[rng.gen_range(0..self.abnormal.len())]
        }
    }
}

/// Stage-2 finetuning: phase A freezes all pretrained parameters and
/// trains only the abnormality conditioning; phase B unfreezes the
/// whole network with a reduced learning rate on pretrained weights.
/// Batches are balanced between normal and abnormal labeled latents;
/// unlabeled sequences carry the unknown token.
pub fn train_stage2(
    latents: &[LatentSample],
    val: &[LatentSample],
    stage1_dir: &Path,
    config: &FlowConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<(FlowUnet, CheckpointMeta)> {
    let stage1_meta = checkpoint::require_kind(stage1_dir, STAGE1_KIND)?;
    let stage1_config: FlowConfig = serde_json::from_value(stage1_meta.config.clone())
        .map_err(|e| Error::Format(e.to_string()))?;
    let stats = stage1_meta
        .latent_stats
        .clone()
        .ok_or_else(|| Error::invalid("stage-1 checkpoint lacks latent statistics"))?;
    let arch = FlowConfig {
        base_channels: stage1_config.base_channels,
        cond_dim: stage1_config.cond_dim,
        fourier_dim: stage1_config.fourier_dim,
        ..config.clone()
    };
    let mut model = FlowUnet::new(arch.clone())?;
    checkpoint::load_into(stage1_dir, &mut model.varmap, true)?;

    let sampler = BalancedSampler::new(latents)?;
    let (pretrained, new_params) = split_vars(&model.varmap);
    let mut ema = Ema::new(&model.varmap, arch.ema_decay)?;
    let mut log = Vec::new();
    let steps_per_epoch = latents.len().div_ceil(arch.batch_size.max(1));

    // Phase A: only the new conditioning parameters receive updates.
    let mut opt_a = AdamW::new(
        new_params.clone(),
        ParamsAdamW { lr: arch.lr, ..Default::default() },
    )?;
    for epoch in 0..arch.phase_a_epochs {
        let mut rng = substream(seed, &format!("fm2/a/{epoch}"));
        let order: Vec<usize> =
            (0..steps_per_epoch * arch.batch_size).map(|_| sampler.draw(&mut rng)).collect();
        let train_loss = train_epoch(
            &model, &mut opt_a, None, latents, &order, &stats, true, arch.dropout, &mut ema,
            &mut rng,
        )?;
        log::info!("stage2 phase A epoch {epoch}: train {train_loss:.5}");
        log.push(LogRow { epoch, train_loss, val_loss: None, extra: Default::default() });
    }

    // Phase B: full unfreeze, pretrained parameters at a reduced rate.
    let mut opt_pre = AdamW::new(
        pretrained,
        ParamsAdamW { lr: arch.lr * arch.pretrained_lr_scale, ..Default::default() },
    )?;
    let mut opt_new = AdamW::new(new_params, ParamsAdamW { lr: arch.lr, ..Default::default() })?;
    for epoch in 0..arch.epochs {
        let mut rng = substream(seed, &format!("fm2/b/{epoch}"));
        let order: Vec<usize> =
            (0..steps_per_epoch * arch.batch_size).map(|_| sampler.draw(&mut rng)).collect();
        let train_loss = train_epoch(
            &model,
            &mut opt_pre,
            Some(&mut opt_new),
            latents,
            &order,
            &stats,
            true,
            arch.dropout,
            &mut ema,
            &mut rng,
        )?;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(flow_validation_loss(&model, val, &stats, true, seed)?)
        };
        log::info!("stage2 phase B epoch {epoch}: train {train_loss:.5}");
        log.push(LogRow {
            epoch: arch.phase_a_epochs + epoch,
            train_loss,
            val_loss,
            extra: Default::default(),
        });
    }
    let meta = flow_meta(STAGE2_KIND, &arch, &stats, seed, log)?;
    checkpoint::save(out_dir, &meta, &model.varmap, Some(&ema))?;
    Ok((model, meta))
}

/// Loads a flow checkpoint of either stage; with `use_ema` the averaged
/// weights are loaded (the inference default).
pub fn load_flow(dir: &Path, kind: &str, use_ema: bool) -> Result<(FlowUnet, CheckpointMeta)> {
    let meta = checkpoint::require_kind(dir, kind)?;
    let config: FlowConfig = serde_json::from_value(meta.config.clone())
        .map_err(|e| Error::Format(e.to_string()))?;
    let mut model = FlowUnet::new(config)?;
    checkpoint::load_into(dir, &mut model.varmap, use_ema)?;
    Ok((model, meta))
}
