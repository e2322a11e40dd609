//! Sequence-conditioned variational autoencoder.
//!
//! Compresses 2 x 96 x 96 complex patches into 2 x 48 x 48 latents and
//! decodes them back. The encoder and decoder are small residual
//! convolutional networks modulated per block by a learned sequence
//! embedding; the training loss combines an L1 reconstruction term, an
//! L1 spatial-gradient term, and a KL regularizer toward a standard
//! normal latent.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::{
    conv2d, group_norm, AdamW, Conv2d, Conv2dConfig, Embedding, GroupNorm, Module, Optimizer,
    ParamsAdamW, VarMap,
};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Provenance;
use crate::checkpoint::{self, CheckpointMeta, LatentStats, LogRow};
use crate::error::{Error, Result};
use crate::field::ComplexField;
use crate::label::{ConditionLabel, SeqToken, Sequence};
use crate::nn::{
    self, deterministic_init, device, fields_to_tensor, norm_groups, randn_tensor, var_builder,
    ResBlock,
};
use crate::patching::PatchRecord;
use crate::rng::substream;

pub const LATENT_CHANNELS: usize = 2;
pub const LATENT_SIZE: usize = 48;

/// A 2 x 48 x 48 latent with its conditioning and provenance.
#[derive(Debug, Clone)]
pub struct LatentSample {
    pub z: Vec<f32>,
    pub condition: ConditionLabel,
    pub provenance: Provenance,
    /// Source volume id; empty for synthetic samples.
    pub volume_id: String,
}

impl LatentSample {
    pub fn len_expected() -> usize {
        LATENT_CHANNELS * LATENT_SIZE * LATENT_SIZE
    }
}

/// Loss weighting factors; both finite and non-negative.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CvaeLossWeights {
    pub lambda_grad: f64,
    pub lambda_kl: f64,
}

impl Default for CvaeLossWeights {
    fn default() -> Self {
        CvaeLossWeights { lambda_grad: 1.0, lambda_kl: 1e-4 }
    }
}

/// Autoencoder hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvaeConfig {
    pub base_channels: usize,
    pub cond_dim: usize,
    pub weights: CvaeLossWeights,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional wall-clock training budget in seconds. When set,
    /// training stops at the first batch boundary past the budget, even
    /// mid-epoch. Budgeted runs trade epoch-count reproducibility across
    /// machines for a bounded runtime.
    pub max_seconds: Option<f64>,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        CvaeConfig {
            base_channels: 8,
            cond_dim: 16,
            weights: CvaeLossWeights::default(),
            lr: 2e-4,
            batch_size: 32,
            epochs: 20,
            max_seconds: None,
        }
    }
}

/// The four loss terms; `total` carries the autograd graph.
pub struct CvaeLoss {
    pub total: Tensor,
    pub recon: Tensor,
    pub grad: Tensor,
    pub kl: Tensor,
}

impl CvaeLoss {
    pub fn values(&self) -> Result<(f64, f64, f64, f64)> {
        let v = |t: &Tensor| -> Result<f64> {
            Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
        };
        Ok((v(&self.total)?, v(&self.recon)?, v(&self.grad)?, v(&self.kl)?))
    }
}

fn l1_mean(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

fn forward_diff(x: &Tensor, axis: usize) -> Result<Tensor> {
    let n = x.dims()[axis];
    Ok((x.narrow(axis, 1, n - 1)? - x.narrow(axis, 0, n - 1)?)?)
}

/// Three-term training objective:
/// `total = recon + lambda_grad * grad + lambda_kl * kl` where `recon`
/// is the mean L1 over both channels, `grad` the mean L1 between
/// forward-difference spatial gradients along both axes, and `kl` the
/// mean of `0.5 (mu^2 + e^logvar - 1 - logvar)`.
pub fn cvae_loss(
    recon: &Tensor,
    target: &Tensor,
    mu: &Tensor,
    logvar: &Tensor,
    w: CvaeLossWeights,
) -> Result<CvaeLoss> {
    if recon.dims() != target.dims() || mu.dims() != logvar.dims() {
        return Err(Error::shape(format!(
            "recon {:?} vs target {:?}, mu {:?} vs logvar {:?}",
            recon.dims(),
            target.dims(),
            mu.dims(),
            logvar.dims()
        )));
    }
    let recon_term = l1_mean(recon, target)?;

    let rank = recon.dims().len();
    let (row_axis, col_axis) = (rank - 2, rank - 1);
    let dr = (forward_diff(recon, row_axis)? - forward_diff(target, row_axis)?)?.abs()?;
    let dc = (forward_diff(recon, col_axis)? - forward_diff(target, col_axis)?)?.abs()?;
    let count = (dr.elem_count() + dc.elem_count()) as f64;
    let grad_term = ((dr.sum_all()? + dc.sum_all()?)? / count)?;

    let kl_term = (((mu.sqr()? + logvar.exp()?)? - 1.0)? - logvar)?
        .affine(0.5, 0.0)?
        .mean_all()?;

    let total = ((&recon_term + (&grad_term * w.lambda_grad)?)? + (&kl_term * w.lambda_kl)?)?;
    Ok(CvaeLoss { total, recon: recon_term, grad: grad_term, kl: kl_term })
}

/// z = mu + exp(0.5 logvar) * eps with eps drawn from the caller's RNG.
pub fn reparameterize(mu: &Tensor, logvar: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    if mu.dims() != logvar.dims() {
        return Err(Error::shape(format!("mu {:?} vs logvar {:?}", mu.dims(), logvar.dims())));
    }
    let eps = randn_tensor(mu.shape().clone(), rng, mu.device())?;
    let eps = eps.to_dtype(mu.dtype())?;
    Ok((mu + logvar.affine(0.5, 0.0)?.exp()?.mul(&eps)?)?)
}

/// The encoder/decoder pair with a shared sequence embedding.
pub struct Cvae {
    embed: Embedding,
    enc_in: Conv2d,
    enc_rb1: ResBlock,
    enc_down: Conv2d,
    enc_rb2: ResBlock,
    enc_norm: GroupNorm,
    mu_head: Conv2d,
    logvar_head: Conv2d,
    dec_in: Conv2d,
    dec_rb1: ResBlock,
    dec_up: Conv2d,
    dec_rb2: ResBlock,
    dec_norm: GroupNorm,
    dec_out: Conv2d,
    pub config: CvaeConfig,
    pub varmap: VarMap,
}

impl Cvae {
    pub fn new(config: CvaeConfig) -> Result<Self> {
        let dev = device();
        let varmap = VarMap::new();
        let vb = var_builder(&varmap, &dev);
        let c = config.base_channels;
        let c2 = 2 * c;
        let cd = config.cond_dim;
        let pad = Conv2dConfig { padding: 1, ..Default::default() };
        let down = Conv2dConfig { padding: 1, stride: 2, ..Default::default() };

        let embed = nn::token_embedding(Sequence::ALL.len(), cd, vb.pp("embed"))?;
        let enc_in = conv2d(2, c, 3, pad, vb.pp("enc_in"))?;
        let enc_rb1 = ResBlock::new(c, c, Some(cd), vb.pp("enc_rb1"))?;
        let enc_down = conv2d(c, c2, 3, down, vb.pp("enc_down"))?;
        let enc_rb2 = ResBlock::new(c2, c2, Some(cd), vb.pp("enc_rb2"))?;
        let enc_norm = group_norm(norm_groups(c2), c2, 1e-5, vb.pp("enc_norm"))?;
        let mu_head = conv2d(c2, 2, 3, pad, vb.pp("mu_head"))?;
        let logvar_head = conv2d(c2, 2, 3, pad, vb.pp("logvar_head"))?;

        let dec_in = conv2d(2, c2, 3, pad, vb.pp("dec_in"))?;
        let dec_rb1 = ResBlock::new(c2, c2, Some(cd), vb.pp("dec_rb1"))?;
        let dec_up = conv2d(c2, c, 3, pad, vb.pp("dec_up"))?;
        let dec_rb2 = ResBlock::new(c, c, Some(cd), vb.pp("dec_rb2"))?;
        let dec_norm = group_norm(norm_groups(c), c, 1e-5, vb.pp("dec_norm"))?;
        let dec_out = conv2d(c, 2, 3, pad, vb.pp("dec_out"))?;

        Ok(Cvae {
            embed,
            enc_in,
            enc_rb1,
            enc_down,
            enc_rb2,
            enc_norm,
            mu_head,
            logvar_head,
            dec_in,
            dec_rb1,
            dec_up,
            dec_rb2,
            dec_norm,
            dec_out,
            config,
            varmap,
        })
    }

    fn cond(&self, seq_ids: &[usize]) -> Result<Tensor> {
        let n_seq = Sequence::ALL.len();
        for &id in seq_ids {
            if id >= n_seq {
                return Err(Error::invalid(format!("unknown sequence id {id}")));
            }
        }
        let ids: Vec<u32> = seq_ids.iter().map(|&i| i as u32).collect();
        let t = Tensor::from_vec(ids, (seq_ids.len(),), &device())?;
        Ok(self.embed.forward(&t)?)
    }

    /// Maps a (B, 2, H, W) batch to latent means and log-variances of
    /// shape (B, 2, H/2, W/2).
    pub fn encode_batch(&self, x: &Tensor, seq_ids: &[usize]) -> Result<(Tensor, Tensor)> {
        let cond = self.cond(seq_ids)?;
        let h = self.enc_in.forward(x)?;
        let h = self.enc_rb1.forward(&h, Some(&cond))?;
        let h = self.enc_down.forward(&h)?;
        let h = self.enc_rb2.forward(&h, Some(&cond))?;
        let h = self.enc_norm.forward(&h)?.silu()?;
        Ok((self.mu_head.forward(&h)?, self.logvar_head.forward(&h)?))
    }

    /// Maps a (B, 2, h, w) latent batch back to (B, 2, 2h, 2w) patches.
    pub fn decode_batch(&self, z: &Tensor, seq_ids: &[usize]) -> Result<Tensor> {
        let cond = self.cond(seq_ids)?;
        let h = self.dec_in.forward(z)?;
        let h = self.dec_rb1.forward(&h, Some(&cond))?;
        let (_, _, hh, ww) = h.dims4().map_err(candle_core::Error::from)?;
        let h = h.upsample_nearest2d(2 * hh, 2 * ww)?;
        let h = self.dec_up.forward(&h)?;
        let h = self.dec_rb2.forward(&h, Some(&cond))?;
        let h = self.dec_norm.forward(&h)?.silu()?;
        Ok(self.dec_out.forward(&h)?)
    }

    /// Encodes a single patch to its latent mean and log-variance.
    pub fn encode(&self, patch: &ComplexField, seq: Sequence) -> Result<(Vec<f32>, Vec<f32>)> {
        let x = fields_to_tensor(&[patch], &device())?;
        let (mu, logvar) = self.encode_batch(&x, &[seq.index()])?;
        Ok((mu.flatten_all()?.to_vec1()?, logvar.flatten_all()?.to_vec1()?))
    }

    /// Decodes one latent back to a complex patch.
    pub fn decode(&self, z: &[f32], seq: Sequence) -> Result<ComplexField> {
        if z.len() != LatentSample::len_expected() {
            return Err(Error::shape(format!("latent length {}", z.len())));
        }
        let t = Tensor::from_vec(
            z.to_vec(),
            (1, LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE),
            &device(),
        )?;
        let out = self.decode_batch(&t, &[seq.index()])?;
        Ok(crate::nn::tensor_to_fields(&out)?.remove(0))
    }

    /// Encodes a patch set to latent means, batched.
    pub fn encode_patches(
        &self,
        records: &[PatchRecord],
        batch_size: usize,
    ) -> Result<Vec<LatentSample>> {
        let dev = device();
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(batch_size.max(1)) {
            let fields: Vec<&ComplexField> = chunk.iter().map(|r| &r.field).collect();
            let seq_ids: Vec<usize> = chunk.iter().map(|r| seq_index(&r.condition)).collect();
            let x = fields_to_tensor(&fields, &dev)?;
            let (mu, _) = self.encode_batch(&x, &seq_ids)?;
            let flat: Vec<f32> = mu.flatten_all()?.to_vec1()?;
            let rec = LatentSample::len_expected();
            for (i, r) in chunk.iter().enumerate() {
                out.push(LatentSample {
                    z: flat[i * rec..(i + 1) * rec].to_vec(),
                    condition: r.condition,
                    provenance: Provenance::Real,
                    volume_id: r.volume_id.clone(),
                });
            }
        }
        Ok(out)
    }
}

fn seq_index(cond: &ConditionLabel) -> usize {
    match cond.sequence {
        SeqToken::Seq(s) => s.index(),
        SeqToken::Null => 0,
    }
}

/// Per-channel mean and standard deviation over a latent set.
pub fn latent_stats(latents: &[LatentSample]) -> Result<LatentStats> {
    if latents.is_empty() {
        return Err(Error::invalid("no latents for statistics"));
    }
    let plane = LATENT_SIZE * LATENT_SIZE;
    let mut mean = [0.0f64; 2];
    let mut var = [0.0f64; 2];
    let n = (latents.len() * plane) as f64;
    for l in latents {
        for ch in 0..2 {
            for &v in &l.z[ch * plane..(ch + 1) * plane] {
                mean[ch] += v as f64;
            }
        }
    }
    mean[0] /= n;
    mean[1] /= n;
    for l in latents {
        for ch in 0..2 {
            for &v in &l.z[ch * plane..(ch + 1) * plane] {
                let d = v as f64 - mean[ch];
                var[ch] += d * d;
            }
        }
    }
    let std = [(var[0] / n).sqrt().max(1e-12), (var[1] / n).sqrt().max(1e-12)];
    Ok(LatentStats { mean, std })
}

fn batch_tensors(records: &[PatchRecord], idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let fields: Vec<&ComplexField> = idx.iter().map(|&i| &records[i].field).collect();
    let seq_ids: Vec<usize> = idx.iter().map(|&i| seq_index(&records[i].condition)).collect();
    Ok((fields_to_tensor(&fields, &device())?, seq_ids))
}

fn snapshot(varmap: &VarMap) -> Result<HashMap<String, Tensor>> {
    let mut out = HashMap::new();
    for (name, var) in varmap.data().lock().unwrap().iter() {
        out.insert(name.clone(), var.as_tensor().copy()?);
    }
    Ok(out)
}

fn restore(varmap: &VarMap, weights: &HashMap<String, Tensor>) -> Result<()> {
    for (name, var) in varmap.data().lock().unwrap().iter() {
        var.set(&weights[name])?;
    }
    Ok(())
}

/// Full-dataset validation loss with deterministic latents (z = mu).
pub fn validation_loss(model: &Cvae, records: &[PatchRecord], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    let idx: Vec<usize> = (0..records.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, seq_ids) = batch_tensors(records, chunk)?;
        let (mu, logvar) = model.encode_batch(&x, &seq_ids)?;
        let recon = model.decode_batch(&mu, &seq_ids)?;
        let loss = cvae_loss(&recon, &x, &mu, &logvar, model.config.weights)?;
        total += loss.values()?.0 * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Trains the autoencoder, retaining the best-validation weights, and
/// writes a checkpoint with the config snapshot, latent statistics, and
/// training log.
pub fn train_cvae(
    train: &[PatchRecord],
    val: &[PatchRecord],
    config: &CvaeConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<(Cvae, CheckpointMeta)> {
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let model = Cvae::new(config.clone())?;
    deterministic_init(&model.varmap, &mut substream(seed, "cvae/init"))?;
    let mut opt = AdamW::new(
        model.varmap.all_vars(),
        ParamsAdamW { lr: config.lr, ..Default::default() },
    )?;

    let mut log = Vec::new();
    let mut best: Option<(f64, HashMap<String, Tensor>)> = None;
    let t_start = std::time::Instant::now();
    let mut budget_spent = false;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut substream(seed, &format!("cvae/shuffle/{epoch}")));
        let mut noise = substream(seed, &format!("cvae/noise/{epoch}"));
        let mut train_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size.max(1)) {
            if config.max_seconds.is_some_and(|s| t_start.elapsed().as_secs_f64() > s) {
                budget_spent = true;
                break;
            }
            let (x, seq_ids) = batch_tensors(train, chunk)?;
            let (mu, logvar) = model.encode_batch(&x, &seq_ids)?;
            let z = reparameterize(&mu, &logvar, &mut noise)?;
            let recon = model.decode_batch(&z, &seq_ids)?;
            let loss = cvae_loss(&recon, &x, &mu, &logvar, config.weights)?;
            opt.backward_step(&loss.total)?;
            train_loss += loss.values()?.0 * chunk.len() as f64;
            seen += chunk.len();
        }
        if seen == 0 {
            break;
        }
        train_loss /= seen.max(1) as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            validation_loss(&model, val, config.batch_size)?
        };
        log::info!("cvae epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        log.push(LogRow {
            epoch,
            train_loss,
            val_loss: Some(val_loss),
            extra: Default::default(),
        });
        if best.as_ref().map_or(true, |(b, _)| val_loss < *b) {
            best = Some((val_loss, snapshot(&model.varmap)?));
        }
        if budget_spent {
            log::info!("cvae: wall-clock budget reached after epoch {epoch}");
            break;
        }
    }
    if let Some((_, weights)) = &best {
        restore(&model.varmap, weights)?;
    }

    let latents = model.encode_patches(train, config.batch_size)?;
    let stats = latent_stats(&latents)?;
    let meta = CheckpointMeta {
        kind: "cvae".into(),
        seed,
        config: serde_json::to_value(config).map_err(|e| Error::Format(e.to_string()))?,
        latent_stats: Some(stats),
        training_log: log,
    };
    checkpoint::save(out_dir, &meta, &model.varmap, None)?;
    Ok((model, meta))
}

/// Rebuilds a model from a saved checkpoint.
pub fn load_cvae(dir: &Path) -> Result<(Cvae, CheckpointMeta)> {
    let meta = checkpoint::require_kind(dir, "cvae")?;
    let config: CvaeConfig = serde_json::from_value(meta.config.clone())
        .map_err(|e| Error::Format(e.to_string()))?;
    let mut model = Cvae::new(config)?;
    checkpoint::load_into(dir, &mut model.varmap, false)?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand::Rng;

    fn dev() -> candle_core::Device {
        device()
    }

    fn small_model() -> Cvae {
        let cfg = CvaeConfig { base_channels: 4, cond_dim: 8, ..Default::default() };
        let model = Cvae::new(cfg).unwrap();
        deterministic_init(&model.varmap, &mut substream(1, "t/init")).unwrap();
        model
    }

    #[test]
    fn loss_is_zero_for_perfect_reconstruction() {
        let x = Tensor::randn(0f32, 1f32, (2, 2, 8, 8), &dev()).unwrap();
        let zeros = Tensor::zeros((2, 2, 4, 4), DType::F32, &dev()).unwrap();
        let l = cvae_loss(&x, &x, &zeros, &zeros, CvaeLossWeights::default()).unwrap();
        let (t, r, g, k) = l.values().unwrap();
        assert_eq!((t, r, g, k), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn kl_closed_form_for_unit_mean() {
        let ones = Tensor::ones((1, 2, 4, 4), DType::F32, &dev()).unwrap();
        let zeros = ones.zeros_like().unwrap();
        let l = cvae_loss(&zeros, &zeros, &ones, &zeros, CvaeLossWeights::default()).unwrap();
        let (_, _, _, k) = l.values().unwrap();
        assert!((k - 0.5).abs() < 1e-7, "kl = {k}");
    }

    #[test]
    fn constant_offset_has_recon_but_no_gradient_term() {
        let x = Tensor::randn(0f32, 1f32, (1, 2, 8, 8), &dev()).unwrap();
        let recon = (&x + 0.1).unwrap();
        let zeros = Tensor::zeros((1, 2, 4, 4), DType::F32, &dev()).unwrap();
        let l = cvae_loss(&recon, &x, &zeros, &zeros, CvaeLossWeights::default()).unwrap();
        let (_, r, g, _) = l.values().unwrap();
        assert!((r - 0.1).abs() < 1e-6, "recon = {r}");
        assert!(g.abs() < 1e-6, "grad = {g}");
    }

    #[test]
    fn reparameterize_collapses_at_tiny_variance() {
        let mut rng = substream(3, "t/reparam");
        let mu = Tensor::randn(0f32, 1f32, (1, 2, 4, 4), &dev()).unwrap();
        let logvar = (mu.zeros_like().unwrap() - 20.0).unwrap();
        let z = reparameterize(&mu, &logvar, &mut rng).unwrap();
        let d = (z - &mu).unwrap().abs().unwrap().mean_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d < 1e-4, "mean deviation {d}");
    }

    #[test]
    fn reparameterize_standard_normal_statistics() {
        let mut rng = substream(4, "t/reparam2");
        let mu = Tensor::zeros((1, 100_000), DType::F32, &dev()).unwrap();
        let logvar = mu.zeros_like().unwrap();
        let z = reparameterize(&mu, &logvar, &mut rng).unwrap();
        let mean = z.mean_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(mean.abs() < 0.02, "mean = {mean}");
    }

    #[test]
    fn reparameterize_is_seed_reproducible() {
        let mu = Tensor::randn(0f32, 1f32, (1, 8), &dev()).unwrap();
        let logvar = mu.zeros_like().unwrap();
        let a = reparameterize(&mu, &logvar, &mut substream(5, "t/r")).unwrap();
        let b = reparameterize(&mu, &logvar, &mut substream(5, "t/r")).unwrap();
        let a: Vec<f32> = a.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = b.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encode_decode_shapes_and_determinism() {
        let model = small_model();
        let patch = ComplexField::from_fn(96, 96, |r, c| {
            Complex64::new((r as f64 / 96.0).sin(), (c as f64 / 96.0).cos())
        });
        let (mu, logvar) = model.encode(&patch, Sequence::Flair).unwrap();
        assert_eq!(mu.len(), 2 * 48 * 48);
        assert_eq!(logvar.len(), 2 * 48 * 48);
        let (mu2, _) = model.encode(&patch, Sequence::Flair).unwrap();
        assert_eq!(mu, mu2);
        let out = model.decode(&mu, Sequence::Flair).unwrap();
        assert_eq!(out.dim(), (96, 96));
        let out2 = model.decode(&mu, Sequence::Flair).unwrap();
        assert_eq!(out.max_abs_diff(&out2), 0.0);
    }

    #[test]
    fn conditioning_changes_encoder_output() {
        let model = small_model();
        let patch = ComplexField::from_fn(96, 96, |r, c| {
            Complex64::new(r as f64 / 96.0, c as f64 / 96.0)
        });
        let (a, _) = model.encode(&patch, Sequence::Flair).unwrap();
        let (b, _) = model.encode(&patch, Sequence::T2).unwrap();
        let max_d =
            a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(max_d > 0.0);
    }

    #[test]
    fn unknown_sequence_id_is_rejected() {
        let model = small_model();
        let x = Tensor::zeros((1, 2, 96, 96), DType::F32, &dev()).unwrap();
        assert!(model.encode_batch(&x, &[7]).is_err());
        let z = Tensor::zeros((1, 2, 48, 48), DType::F32, &dev()).unwrap();
        assert!(model.decode_batch(&z, &[99]).is_err());
    }

    #[test]
    fn wall_clock_budget_stops_training() {
        let mut rng = substream(4, "t/budget");
        let records: Vec<PatchRecord> = (0..6)
            .map(|i| {
                let data = ndarray::Array2::from_shape_fn((96, 96), |_| {
                    Complex64::new(rng.gen::<f64>(), rng.gen::<f64>())
                });
                PatchRecord {
                    field: ComplexField::new(data),
                    condition: ConditionLabel::new(
                        Sequence::Flair,
                        crate::label::Abnormality::Normal,
                    ),
                    class: crate::VolumeClass::Normal,
                    volume_id: format!("v{i}"),
                    slice_index: 0,
                    origin: (0, 0),
                    overlap_fraction: 0.0,
                }
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        // An exhausted budget stops before the first optimizer step.
        let cfg = CvaeConfig {
            base_channels: 4,
            cond_dim: 8,
            epochs: 3,
            batch_size: 4,
            max_seconds: Some(0.0),
            ..Default::default()
        };
        let (_, meta) = train_cvae(&records, &[], &cfg, 0, dir.path()).unwrap();
        assert!(meta.training_log.is_empty());
        // A generous budget leaves the epoch count untouched.
        let cfg = CvaeConfig { max_seconds: Some(1e9), epochs: 1, ..cfg };
        let (_, meta) = train_cvae(&records, &[], &cfg, 0, dir.path()).unwrap();
        assert_eq!(meta.training_log.len(), 1);
    }

    #[test]
    fn gradient_check_against_finite_differences() {
        // f64 leaf tensors; central differences at h = 1e-4.
        let dev = dev();
        let shape = (1usize, 2usize, 5usize, 5usize);
        let mut rng = substream(9, "t/gradcheck");
        let randn = |rng: &mut rand_chacha::ChaCha12Rng| -> Vec<f64> {
            (0..50).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
        };
        let recon_v = randn(&mut rng);
        let target_v = randn(&mut rng);
        let mu_v = randn(&mut rng);
        let logvar_v: Vec<f64> = randn(&mut rng).iter().map(|v| v * 0.3).collect();

        let target = Tensor::from_vec(target_v, shape, &dev).unwrap();
        let recon = Var::from_tensor(&Tensor::from_vec(recon_v.clone(), shape, &dev).unwrap())
            .unwrap();
        let mu = Var::from_tensor(&Tensor::from_vec(mu_v.clone(), shape, &dev).unwrap()).unwrap();
        let logvar =
            Var::from_tensor(&Tensor::from_vec(logvar_v.clone(), shape, &dev).unwrap()).unwrap();
        let w = CvaeLossWeights { lambda_grad: 0.7, lambda_kl: 0.3 };

        let loss = cvae_loss(recon.as_tensor(), &target, mu.as_tensor(), logvar.as_tensor(), w)
            .unwrap();
        let grads = loss.total.backward().unwrap();

        let eval = |rv: &[f64], mv: &[f64], lv: &[f64]| -> f64 {
            let r = Tensor::from_vec(rv.to_vec(), shape, &dev).unwrap();
            let m = Tensor::from_vec(mv.to_vec(), shape, &dev).unwrap();
            let l = Tensor::from_vec(lv.to_vec(), shape, &dev).unwrap();
            cvae_loss(&r, &target, &m, &l, w).unwrap().values().unwrap().0
        };
        let h = 1e-4;
        let check = |analytic: &Tensor, base: &[f64], which: usize| {
            let a: Vec<f64> = analytic.flatten_all().unwrap().to_vec1().unwrap();
            for i in (0..50).step_by(7) {
                let mut plus = base.to_vec();
                let mut minus = base.to_vec();
                plus[i] += h;
                minus[i] -= h;
                let (fp, fm) = match which {
                    0 => (eval(&plus, &mu_v, &logvar_v), eval(&minus, &mu_v, &logvar_v)),
                    1 => (eval(&recon_v, &plus, &logvar_v), eval(&recon_v, &minus, &logvar_v)),
                    _ => (eval(&recon_v, &mu_v, &plus), eval(&recon_v, &mu_v, &minus)),
                };
                let numeric = (fp - fm) / (2.0 * h);
                let denom = numeric.abs().max(a[i].abs()).max(1e-8);
                assert!(
                    (numeric - a[i]).abs() / denom < 1e-4,
                    "param {which} index {i}: analytic {} vs numeric {numeric}",
                    a[i]
                );
            }
        };
        check(grads.get(recon.as_tensor()).unwrap(), &recon_v, 0);
        check(grads.get(mu.as_tensor()).unwrap(), &mu_v, 1);
        check(grads.get(logvar.as_tensor()).unwrap(), &logvar_v, 2);
    }

    proptest! {
        #[test]
        fn kl_term_is_non_negative(mu in -5.0f64..5.0, logvar in -6.0f64..4.0) {
            let v = 0.5 * (mu * mu + logvar.exp() - 1.0 - logvar);
            prop_assert!(v >= -1e-12);
        }
    }
}
