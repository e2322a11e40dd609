//! Classifier-based evaluation.
//!
//! Two experiment families share one small squeeze-and-excitation
//! residual classifier: real-versus-synthetic discrimination on
//! latents, and downstream normal-versus-abnormal classification on
//! decoded patches under substitution and additive data compositions.
//! Also houses the augmentation pipeline, mixup, volume-level score
//! aggregation, and checkpoint-selection criteria.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use candle_nn::{
    conv2d, group_norm, linear, AdamW, Conv2d, Conv2dConfig, GroupNorm, Linear, Module, Optimizer,
    ParamsAdamW, VarMap,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cvae::LatentSample;
use crate::error::{Error, Result};
use crate::field::ComplexField;
use crate::label::{Abnormality, PathToken, Sequence, VolumeClass};
use crate::metrics::{auroc, mean_std};
use crate::nn::{
    deterministic_init, device, fields_to_tensor, norm_groups, var_builder, Ema, ResBlock, SeGate,
};
use crate::patching::PatchRecord;
use crate::rng::substream;

/// Classifier input geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputKind {
    /// 2 x 48 x 48 latent representations.
    Latent,
    /// 2 x 96 x 96 decoded or real patches.
    Patch,
}

impl InputKind {
    pub fn side(self) -> usize {
        match self {
            InputKind::Latent => 48,
            InputKind::Patch => 96,
        }
    }

    fn n_downs(self) -> usize {
        match self {
            InputKind::Latent => 2,
            InputKind::Patch => 3,
        }
    }
}

/// Classifier training settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub base_channels: usize,
    pub seeds: Vec<u64>,
    pub augment: bool,
    pub mixup_alpha: f64,
    pub ema_decay: f64,
    pub balanced: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            base_channels: 8,
            seeds: vec![0, 1, 2, 3, 4],
            augment: true,
            mixup_alpha: 0.2,
            ema_decay: 0.99,
            balanced: true,
            lr: 1e-3,
            batch_size: 32,
            epochs: 8,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for &s in &self.seeds {
            if !seen.insert(s) {
                return Err(Error::invalid(format!("duplicate classifier seed {s}")));
            }
        }
        Ok(())
    }
}

/// One labeled classifier example; `volume_id` groups patches for
/// volume-level aggregation.
#[derive(Debug, Clone)]
pub struct ClassifierSample {
    pub field: ComplexField,
    pub label: f64,
    pub volume_id: String,
}

impl ClassifierSample {
    pub fn from_latent(l: &LatentSample, label: f64) -> Result<Self> {
        let side = InputKind::Latent.side();
        Ok(ClassifierSample {
            field: ComplexField::from_channels_f32(&l.z, side, side)?,
            label,
            volume_id: l.volume_id.clone(),
        })
    }

    pub fn from_patch(p: &PatchRecord) -> Result<Self> {
        let label = match p.condition.abnormality {
            PathToken::Abn(Abnormality::Abnormal) => 1.0,
            PathToken::Abn(Abnormality::Normal) => 0.0,
            _ => return Err(Error::invalid("patch without a normal/abnormal label")),
        };
        Ok(ClassifierSample { field: p.field.clone(), label, volume_id: p.volume_id.clone() })
    }
}

/// Small residual classifier with squeeze-and-excitation gating after
/// each residual block.
pub struct SeClassifier {
    conv_in: Conv2d,
    blocks: Vec<(ResBlock, SeGate, Conv2d)>,
    out_norm: GroupNorm,
    head: Linear,
    pub kind: InputKind,
    pub varmap: VarMap,
}

impl SeClassifier {
    pub fn new(kind: InputKind, base_channels: usize) -> Result<Self> {
        let dev = device();
        let varmap = VarMap::new();
        let vb = var_builder(&varmap, &dev);
        let pad = Conv2dConfig { padding: 1, ..Default::default() };
        let stride2 = Conv2dConfig { padding: 1, stride: 2, ..Default::default() };
        let c = base_channels;
        let conv_in = conv2d(2, c, 3, pad, vb.pp("conv_in"))?;
        let mut blocks = Vec::new();
        let mut ch = c;
        for i in 0..kind.n_downs() {
            let next = (2 * ch).min(4 * c);
            let rb = ResBlock::new(ch, ch, None, vb.pp(format!("rb{i}")))?;
            let se = SeGate::new(ch, 4, vb.pp(format!("se{i}")))?;
            let down = conv2d(ch, next, 3, stride2, vb.pp(format!("down{i}")))?;
            blocks.push((rb, se, down));
            ch = next;
        }
        let out_norm = group_norm(norm_groups(ch), ch, 1e-5, vb.pp("out_norm"))?;
        let head = linear(ch, 1, vb.pp("head"))?;
        Ok(SeClassifier { conv_in, blocks, out_norm, head, kind, varmap })
    }

    /// Logits of shape (B,).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(x)?;
        for (rb, se, down) in &self.blocks {
            h = rb.forward(&h, None)?;
            h = se.forward(&h)?;
            h = down.forward(&h)?;
        }
        let h = self.out_norm.forward(&h)?.silu()?;
        let pooled = h.mean(candle_core::D::Minus1)?.mean(candle_core::D::Minus1)?;
        Ok(self.head.forward(&pooled)?.squeeze(1)?)
    }

    pub fn param_count(&self) -> usize {
        self.varmap.all_vars().iter().map(|v| v.as_tensor().elem_count()).sum()
    }
}

/// Augmentation draw; sampled once per patch so the identity draw can
/// be tested explicitly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip_h: bool,
    pub flip_v: bool,
    pub rot_quarters: usize,
    pub zoom: f64,
    pub intensity: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams =
        AugmentParams { flip_h: false, flip_v: false, rot_quarters: 0, zoom: 1.0, intensity: 1.0 };

    pub fn sample(rng: &mut impl Rng) -> Self {
        AugmentParams {
            flip_h: rng.gen::<bool>(),
            flip_v: rng.gen::<bool>(),
            rot_quarters: rng.gen_range(0..4),
            zoom: rng.gen_range(1.0..=1.2),
            intensity: rng.gen_range(0.9..=1.1),
        }
    }
}

fn flip_rows(f: &ComplexField) -> ComplexField {
    let (h, w) = f.dim();
    ComplexField::from_fn(h, w, |r, c| f.data()[(h - 1 - r, c)])
}

fn flip_cols(f: &ComplexField) -> ComplexField {
    let (h, w) = f.dim();
    ComplexField::from_fn(h, w, |r, c| f.data()[(r, w - 1 - c)])
}

/// 90-degree counterclockwise rotation of a square field.
pub fn rotate90(f: &ComplexField) -> ComplexField {
    let (h, w) = f.dim();
    assert_eq!(h, w, "rotation expects square patches");
    ComplexField::from_fn(h, w, |r, c| f.data()[(c, w - 1 - r)])
}

/// Center zoom by bilinear resampling; both channels are interpolated
/// with the same weights so the complex pairing is preserved.
fn zoom_center(f: &ComplexField, zoom: f64) -> ComplexField {
    if zoom == 1.0 {
        return f.clone();
    }
    let (h, w) = f.dim();
    let cr = (h as f64 - 1.0) / 2.0;
    let cc = (w as f64 - 1.0) / 2.0;
    ComplexField::from_fn(h, w, |r, c| {
        let sr = (cr + (r as f64 - cr) / zoom).clamp(0.0, h as f64 - 1.0);
        let sc = (cc + (c as f64 - cc) / zoom).clamp(0.0, w as f64 - 1.0);
        let r0 = sr.floor() as usize;
        let c0 = sc.floor() as usize;
        let r1 = (r0 + 1).min(h - 1);
        let c1 = (c0 + 1).min(w - 1);
        let fr = sr - r0 as f64;
        let fc = sc - c0 as f64;
        let d = f.data();
        d[(r0, c0)] * ((1.0 - fr) * (1.0 - fc))
            + d[(r0, c1)] * ((1.0 - fr) * fc)
            + d[(r1, c0)] * (fr * (1.0 - fc))
            + d[(r1, c1)] * (fr * fc)
    })
}

/// Applies a fixed augmentation draw: flips, quarter-turn rotation,
/// center zoom with bilinear resampling, and uniform intensity scaling
/// of both channels.
pub fn apply_augment(patch: &ComplexField, p: &AugmentParams) -> ComplexField {
    let mut out = patch.clone();
    if p.flip_h {
        out = flip_cols(&out);
    }
    if p.flip_v {
        out = flip_rows(&out);
    }
    for _ in 0..p.rot_quarters % 4 {
        out = rotate90(&out);
    }
    out = zoom_center(&out, p.zoom);
    out.scale(p.intensity)
}

/// Random augmentation with parameters drawn from `rng`.
pub fn augment(patch: &ComplexField, rng: &mut impl Rng) -> ComplexField {
    apply_augment(patch, &AugmentParams::sample(rng))
}

/// Pairwise mixup with an explicit mixing coefficient.
pub fn mixup_pair(
    x1: &Tensor,
    y1: f64,
    x2: &Tensor,
    y2: f64,
    lambda: f64,
) -> Result<(Tensor, f64)> {
    let x = ((x1 * lambda)? + (x2 * (1.0 - lambda))?)?;
    Ok((x, lambda * y1 + (1.0 - lambda) * y2))
}

/// Draws the mixup coefficient from Beta(alpha, alpha).
pub fn mixup_lambda(alpha: f64, rng: &mut impl Rng) -> Result<f64> {
    let beta = rand_distr::Beta::new(alpha, alpha)
        .map_err(|e| Error::invalid(format!("mixup alpha: {e}")))?;
    Ok(rng.sample(beta))
}

/// Mean of the top 5% of patch probabilities with k = max(1, ceil(n/20)).
pub fn aggregate_volume(patch_probs: &[f64]) -> Result<f64> {
    if patch_probs.is_empty() {
        return Err(Error::invalid("no patch probabilities to aggregate"));
    }
    let n = patch_probs.len();
    let k = ((0.05 * n as f64).ceil() as usize).max(1);
    let mut sorted = patch_probs.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(sorted[..k].iter().sum::<f64>() / k as f64)
}

/// Checkpoint-selection criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectCriterion {
    /// Lowest metric wins (real-versus-synthetic AUROC).
    Lowest,
    /// Highest metric wins (downstream AUROC).
    Highest,
}

/// Picks the best candidate index; ties go to the earliest candidate.
pub fn select_model(metrics: &[f64], criterion: SelectCriterion) -> Result<usize> {
    if metrics.is_empty() {
        return Err(Error::invalid("no candidates to select from"));
    }
    let mut best = 0usize;
    for (i, &m) in metrics.iter().enumerate().skip(1) {
        let better = match criterion {
            SelectCriterion::Lowest => m < metrics[best],
            SelectCriterion::Highest => m > metrics[best],
        };
        if better {
            best = i;
        }
    }
    Ok(best)
}

fn balanced_indices(samples: &[ClassifierSample]) -> Result<(Vec<usize>, Vec<usize>)> {
    let pos: Vec<usize> =
        samples.iter().enumerate().filter(|(_, s)| s.label > 0.5).map(|(i, _)| i).collect();
    let neg: Vec<usize> =
        samples.iter().enumerate().filter(|(_, s)| s.label <= 0.5).map(|(i, _)| i).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::DegenerateLabels);
    }
    Ok((pos, neg))
}

/// Trains the classifier with class-balanced sampling, optional
/// augmentation (patch inputs only), mixup, cosine learning-rate decay,
/// and EMA weights which are loaded into the returned model.
pub fn train_classifier(
    train: &[ClassifierSample],
    kind: InputKind,
    config: &ClassifierConfig,
    seed: u64,
) -> Result<SeClassifier> {
    if train.is_empty() {
        return Err(Error::invalid("empty classifier training set"));
    }
    config.validate()?;
    let model = SeClassifier::new(kind, config.base_channels)?;
    deterministic_init(&model.varmap, &mut substream(seed, "clf/init"))?;
    let mut opt = AdamW::new(
        model.varmap.all_vars(),
        ParamsAdamW { lr: config.lr, ..Default::default() },
    )?;
    let mut ema = Ema::new(&model.varmap, config.ema_decay)?;
    let dev = device();

    let (pos, neg) = if config.balanced {
        balanced_indices(train)?
    } else {
        ((0..train.len()).collect(), Vec::new())
    };
    let steps_per_epoch = train.len().div_ceil(config.batch_size.max(1));
    let total_steps = (config.epochs * steps_per_epoch).max(1);
    let mut rng = substream(seed, "clf/train");
    let mut aug_rng = substream(seed, "clf/aug");

    for step in 0..total_steps {
        let lr = config.lr
            * 0.5
            * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos());
        opt.set_learning_rate(lr);

        let mut fields = Vec::with_capacity(config.batch_size);
        let mut labels = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let i = if config.balanced {
                if rng.gen::<f64>() < 0.5 {
                    pos[rng.gen_range(0..pos.len())]
                } else {
                    neg[rng.gen_range(0..neg.len())]
                }
            } else {
                rng.gen_range(0..train.len())
            };
            let field = if config.augment && kind == InputKind::Patch {
                augment(&train[i].field, &mut aug_rng)
            } else {
                train[i].field.clone()
            };
            fields.push(field);
            labels.push(train[i].label as f32);
        }
        let refs: Vec<&ComplexField> = fields.iter().collect();
        let mut x = fields_to_tensor(&refs, &dev)?;
        let mut y = Tensor::from_vec(labels.clone(), (labels.len(),), &dev)?;
        if config.mixup_alpha > 0.0 {
            let lambda = mixup_lambda(config.mixup_alpha, &mut rng)? as f32;
            let x_rev = x.flip(&[0])?;
            let y_rev = y.flip(&[0])?;
            x = ((&x * lambda as f64)? + (x_rev * (1.0 - lambda) as f64)?)?;
            y = ((&y * lambda as f64)? + (y_rev * (1.0 - lambda) as f64)?)?;
        }
        let logits = model.forward(&x)?;
        let loss = candle_nn::loss::binary_cross_entropy_with_logit(
            &candle_nn::ops::sigmoid(&logits)?.clamp(1e-6, 1.0 - 1e-6)?,
            &y,
        )?;
        opt.backward_step(&loss)?;
        ema.update(&model.varmap)?;
    }
    ema.apply_to(&model.varmap)?;
    Ok(model)
}

/// Class probabilities for a sample set.
pub fn predict_probs(
    model: &SeClassifier,
    samples: &[ClassifierSample],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let dev = device();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&ComplexField> = chunk.iter().map(|s| &s.field).collect();
        let x = fields_to_tensor(&refs, &dev)?;
        let p = candle_nn::ops::sigmoid(&model.forward(&x)?)?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        out.extend(p);
    }
    Ok(out)
}

/// Patch-level AUROC of a trained classifier on a test set.
pub fn evaluate_auroc(model: &SeClassifier, test: &[ClassifierSample]) -> Result<f64> {
    let probs = predict_probs(model, test, 64)?;
    let labels: Vec<bool> = test.iter().map(|s| s.label > 0.5).collect();
    auroc(&probs, &labels)
}

/// Volume-level AUROC: per-volume top-5% aggregation of patch
/// probabilities, volumes labeled by their class.
pub fn evaluate_volume_auroc(model: &SeClassifier, test: &[ClassifierSample]) -> Result<f64> {
    let probs = predict_probs(model, test, 64)?;
    let mut by_volume: BTreeMap<&str, (Vec<f64>, bool)> = BTreeMap::new();
    for (s, p) in test.iter().zip(&probs) {
        let entry = by_volume.entry(&s.volume_id).or_insert_with(|| (Vec::new(), false));
        entry.0.push(*p);
        entry.1 |= s.label > 0.5;
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (_, (ps, label)) in by_volume {
        scores.push(aggregate_volume(&ps)?);
        labels.push(label);
    }
    auroc(&scores, &labels)
}

/// Result table of the real-versus-synthetic discrimination: one AUROC
/// per (seed, synthetic test set).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscriminatorReport {
    pub aurocs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Trains the latent discriminator per seed and evaluates on each
/// synthetic test set combined with the fixed real test set
/// (synthetic = positive class).
pub fn train_discriminator(
    real_train: &[LatentSample],
    real_test: &[LatentSample],
    synth_train: &[LatentSample],
    synth_test_sets: &[Vec<LatentSample>],
    config: &ClassifierConfig,
) -> Result<DiscriminatorReport> {
    if real_train.is_empty() || synth_train.is_empty() {
        return Err(Error::invalid("discriminator needs both real and synthetic latents"));
    }
    let mut train: Vec<ClassifierSample> = Vec::new();
    for l in real_train {
        train.push(ClassifierSample::from_latent(l, 0.0)?);
    }
    for l in synth_train {
        train.push(ClassifierSample::from_latent(l, 1.0)?);
    }
    let real_test: Vec<ClassifierSample> =
        real_test.iter().map(|l| ClassifierSample::from_latent(l, 0.0)).collect::<Result<_>>()?;

    let mut aurocs = Vec::new();
    for &seed in &config.seeds {
        let model = train_classifier(&train, InputKind::Latent, config, seed)?;
        for set in synth_test_sets {
            let mut test = real_test.clone();
            for l in set {
                test.push(ClassifierSample::from_latent(l, 1.0)?);
            }
            aurocs.push(evaluate_auroc(&model, &test)?);
        }
    }
    let (mean, std) = mean_std(&aurocs);
    Ok(DiscriminatorReport { aurocs, mean, std })
}

/// Experiment family for the composition experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompositionMode {
    Substitution,
    Additive,
}

/// Volume-level data-composition plan with hierarchical nesting: the
/// real-volume set kept at fraction f is a superset of the set kept at
/// every smaller fraction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompositionPlan {
    pub mode: CompositionMode,
    /// Multiples of 0.10 from 0.0 to 1.0.
    pub fractions: Vec<f64>,
    pub nesting_seed: u64,
    /// Per-(sequence, class) volume order; the first ceil(f n) volumes
    /// of each stratum are kept (substitution) or matched (additive).
    pub order: BTreeMap<String, Vec<String>>,
}

fn stratum_key(seq: Sequence, class: VolumeClass) -> String {
    format!("{}/{}", seq.name(), class.name())
}

impl CompositionPlan {
    /// Builds a plan over the given (volume id, sequence, class)
    /// triples with a fixed shuffled order per stratum.
    pub fn new(
        mode: CompositionMode,
        volumes: &[(String, Sequence, VolumeClass)],
        nesting_seed: u64,
    ) -> Self {
        use rand::seq::SliceRandom;
        let mut strata: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (id, seq, class) in volumes {
            strata.entry(stratum_key(*seq, *class)).or_default().push(id.clone());
        }
        for (key, ids) in strata.iter_mut() {
            ids.sort();
            ids.shuffle(&mut substream(nesting_seed, &format!("plan/{key}")));
        }
        let fractions = (0..=10).map(|i| i as f64 / 10.0).collect();
        CompositionPlan { mode, fractions, nesting_seed, order: strata }
    }

    /// Volume ids kept as real data at the given fraction.
    pub fn kept_at(&self, fraction: f64) -> Vec<String> {
        let mut out = Vec::new();
        for ids in self.order.values() {
            let n = (fraction * ids.len() as f64).round() as usize;
            out.extend(ids[..n.min(ids.len())].iter().cloned());
        }
        out.sort();
        out
    }

    /// Volume ids removed (complement of `kept_at`) at the fraction.
    pub fn removed_at(&self, fraction: f64) -> Vec<String> {
        let kept: std::collections::BTreeSet<String> = self.kept_at(fraction).into_iter().collect();
        let mut out = Vec::new();
        for ids in self.order.values() {
            out.extend(ids.iter().filter(|i| !kept.contains(*i)).cloned());
        }
        out.sort();
        out
    }
}

/// One point of a composition curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    /// "real" or "real+synthetic".
    pub condition: String,
    pub aurocs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// A full substitution or additive experiment result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompositionCurve {
    pub mode: CompositionMode,
    pub points: Vec<CurvePoint>,
    pub baseline_mean: f64,
    pub baseline_std: f64,
}

/// Synthetic pool indexed by (sequence, abnormality-positive) so
/// replacements are class- and sequence-matched.
pub struct SyntheticPool<'a> {
    by_key: BTreeMap<(usize, bool), Vec<&'a ClassifierSample>>,
}

impl<'a> SyntheticPool<'a> {
    pub fn new(samples: &'a [ClassifierSample], sequences: &[Sequence]) -> Self {
        // Sequence is recovered from the volume-id prefix written by the
        // sampler; callers tag synthetic volume ids as "synth/SEQ/...".
        let mut by_key: BTreeMap<(usize, bool), Vec<&ClassifierSample>> = BTreeMap::new();
        for s in samples {
            for seq in sequences {
                if s.volume_id.contains(&format!("/{}/", seq.name())) {
                    by_key.entry((seq.index(), s.label > 0.5)).or_default().push(s);
                }
            }
        }
        SyntheticPool { by_key }
    }

    pub fn take(
        &self,
        seq: Sequence,
        abnormal: bool,
        n: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<ClassifierSample>> {
        let pool = self
            .by_key
            .get(&(seq.index(), abnormal))
            .ok_or_else(|| Error::invalid(format!(
                "synthetic pool has no {} {} samples",
                seq.name(),
                if abnormal { "abnormal" } else { "normal" }
            )))?;
        if pool.is_empty() {
            return Err(Error::invalid("empty synthetic pool stratum"));
        }
        Ok((0..n).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect())
    }
}

/// Options shared by both composition experiments.
pub struct CompositionOptions<'a> {
    pub classifier: &'a ClassifierConfig,
    /// Training patches grouped by volume id.
    pub real_train: &'a BTreeMap<String, Vec<ClassifierSample>>,
    /// Volume metadata: (sequence, class) per id.
    pub volume_info: &'a BTreeMap<String, (Sequence, VolumeClass)>,
    pub real_test: &'a [ClassifierSample],
    pub synth_pool: &'a SyntheticPool<'a>,
}

fn run_condition(
    samples: &[ClassifierSample],
    test: &[ClassifierSample],
    config: &ClassifierConfig,
    seed: u64,
) -> Result<f64> {
    let model = train_classifier(samples, InputKind::Patch, config, seed)?;
    evaluate_volume_auroc(&model, test)
}

fn synth_for_volumes(
    opts: &CompositionOptions,
    volumes: &[String],
    rng: &mut impl Rng,
) -> Result<Vec<ClassifierSample>> {
    let mut out = Vec::new();
    for vid in volumes {
        let (seq, _class) = opts.volume_info[vid];
        // Match the removed volume's per-class patch histogram.
        let mut n_abn = 0usize;
        let mut n_norm = 0usize;
        for s in &opts.real_train[vid] {
            if s.label > 0.5 {
                n_abn += 1;
            } else {
                n_norm += 1;
            }
        }
        if n_abn > 0 {
            out.extend(opts.synth_pool.take(seq, true, n_abn, rng)?);
        }
        if n_norm > 0 {
            out.extend(opts.synth_pool.take(seq, false, n_norm, rng)?);
        }
    }
    Ok(out)
}

/// Runs the substitution experiment: at each fraction the removed real
/// volumes are replaced by class- and sequence-matched synthetic
/// patches so the training size stays constant; both the real-only and
/// real+synthetic conditions are trained per seed and evaluated on the
/// real test split.
pub fn run_composition(
    plan: &CompositionPlan,
    opts: &CompositionOptions,
    seed: u64,
) -> Result<CompositionCurve> {
    let config = opts.classifier;
    let full_real: Vec<ClassifierSample> =
        opts.real_train.values().flatten().cloned().collect();

    // Baseline: all real volumes, no synthetic data.
    let mut baseline = Vec::new();
    for &s in &config.seeds {
        baseline.push(run_condition(&full_real, opts.real_test, config, seed ^ s)?);
    }
    let (baseline_mean, baseline_std) = mean_std(&baseline);

    let mut points = Vec::new();
    for &fraction in &plan.fractions {
        let kept = plan.kept_at(fraction);
        let kept_samples: Vec<ClassifierSample> =
            kept.iter().flat_map(|v| opts.real_train[v].iter().cloned()).collect();
        let mut synth_rng = substream(plan.nesting_seed, &format!("synthsel/{fraction:.1}"));
        let (real_set, mixed_set) = match plan.mode {
            CompositionMode::Substitution => {
                let removed = plan.removed_at(fraction);
                let synth = synth_for_volumes(opts, &removed, &mut synth_rng)?;
                let mut mixed = kept_samples.clone();
                mixed.extend(synth);
                (kept_samples, mixed)
            }
            CompositionMode::Additive => {
                // Additive keeps the full real set and adds synthetic
                // data matched to `fraction` of the volumes.
                let added = plan.kept_at(fraction);
                let synth = synth_for_volumes(opts, &added, &mut synth_rng)?;
                let mut mixed = full_real.clone();
                mixed.extend(synth);
                (full_real.clone(), mixed)
            }
        };
        for (condition, set) in [("real", &real_set), ("real+synthetic", &mixed_set)] {
            if set.is_empty() {
                continue;
            }
            let mut aurocs = Vec::new();
            for &s in &config.seeds {
                aurocs.push(run_condition(set, opts.real_test, config, seed ^ s)?);
            }
            let (mean, std) = mean_std(&aurocs);
            log::info!(
                "{:?} f={fraction:.1} {condition}: AUROC {mean:.3} +/- {std:.3}",
                plan.mode
            );
            points.push(CurvePoint {
                fraction,
                condition: condition.to_string(),
                aurocs,
                mean,
                std,
            });
        }
    }
    Ok(CompositionCurve { mode: plan.mode, points, baseline_mean, baseline_std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::phase_coherence;
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand::Rng;

    fn test_patch() -> ComplexField {
        let mut rng = substream(1, "eval/patch");
        ComplexField::from_fn(16, 16, |_, _| {
            Complex64::new(rng.gen::<f64>(), rng.gen::<f64>() - 0.5)
        })
    }

    #[test]
    fn identity_augmentation_is_exact() {
        let p = test_patch();
        let out = apply_augment(&p, &AugmentParams::IDENTITY);
        assert!(out.max_abs_diff(&p) < 1e-6);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let p = test_patch();
        let mut out = p.clone();
        for _ in 0..4 {
            out = rotate90(&out);
        }
        assert_eq!(out.max_abs_diff(&p), 0.0);
    }

    #[test]
    fn intensity_scaling_preserves_phase_coherence() {
        let p = test_patch();
        let scaled = apply_augment(
            &p,
            &AugmentParams { intensity: 1.07, ..AugmentParams::IDENTITY },
        );
        let g = phase_coherence(&scaled, &p).unwrap();
        assert!((g - 1.0).abs() < 1e-12, "gamma = {g}");
    }

    #[test]
    fn flips_and_rotations_preserve_pairwise_coherence() {
        let x = test_patch();
        let mut rng = substream(2, "eval/patch2");
        let y = ComplexField::from_fn(16, 16, |_, _| {
            Complex64::new(rng.gen::<f64>(), rng.gen::<f64>())
        });
        let before = phase_coherence(&x, &y).unwrap();
        for params in [
            AugmentParams { flip_h: true, ..AugmentParams::IDENTITY },
            AugmentParams { flip_v: true, ..AugmentParams::IDENTITY },
            AugmentParams { rot_quarters: 3, ..AugmentParams::IDENTITY },
        ] {
            let after =
                phase_coherence(&apply_augment(&x, &params), &apply_augment(&y, &params)).unwrap();
            assert!((after - before).abs() < 1e-9);
        }
    }

    #[test]
    fn mixup_closed_forms() {
        let dev = device();
        let x1 = Tensor::zeros((2, 2), DType::F64, &dev).unwrap();
        let x2 = x1.ones_like().unwrap();
        let (x, y) = mixup_pair(&x1, 0.0, &x2, 1.0, 1.0).unwrap();
        assert_eq!(y, 0.0);
        assert_eq!(
            x.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap(),
            0.0
        );
        let (_, y) = mixup_pair(&x1, 0.0, &x2, 1.0, 0.5).unwrap();
        assert_eq!(y, 0.5);
    }

    #[test]
    fn mixup_lambda_is_symmetric() {
        let mut rng = substream(3, "eval/mixup");
        let n = 10_000;
        let mean: f64 =
            (0..n).map(|_| mixup_lambda(0.3, &mut rng).unwrap()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean lambda {mean}");
    }

    #[test]
    fn aggregate_volume_closed_forms() {
        // n = 40 -> k = 2, mean of the two largest.
        let mut probs = vec![0.1; 38];
        probs.push(0.9);
        probs.push(0.7);
        assert!((aggregate_volume(&probs).unwrap() - 0.8).abs() < 1e-12);
        // n = 10 -> k = 1 -> max.
        let probs = vec![0.2, 0.5, 0.3, 0.1, 0.15, 0.25, 0.35, 0.45, 0.05, 0.4];
        assert_eq!(aggregate_volume(&probs).unwrap(), 0.5);
        // Constant list -> that constant.
        assert_eq!(aggregate_volume(&vec![0.42; 17]).unwrap(), 0.42);
        assert!(aggregate_volume(&[]).is_err());
    }

    proptest! {
        #[test]
        fn aggregate_volume_is_monotone(
            probs in proptest::collection::vec(0.0f64..1.0, 1..30),
            idx in 0usize..30,
            bump in 0.0f64..0.5,
        ) {
            let idx = idx % probs.len();
            let before = aggregate_volume(&probs).unwrap();
            let mut raised = probs.clone();
            raised[idx] = (raised[idx] + bump).min(1.0);
            let after = aggregate_volume(&raised).unwrap();
            prop_assert!(after >= before - 1e-12);
        }
    }

    #[test]
    fn select_model_criteria_and_ties() {
        assert_eq!(select_model(&[0.61, 0.55, 0.70], SelectCriterion::Lowest).unwrap(), 1);
        assert_eq!(select_model(&[0.80, 0.84], SelectCriterion::Highest).unwrap(), 1);
        assert_eq!(select_model(&[0.6, 0.6], SelectCriterion::Lowest).unwrap(), 0);
        assert_eq!(select_model(&[0.6, 0.6], SelectCriterion::Highest).unwrap(), 0);
        assert!(select_model(&[], SelectCriterion::Lowest).is_err());
    }

    #[test]
    fn classifier_shapes_and_capacity() {
        let latent = SeClassifier::new(InputKind::Latent, 8).unwrap();
        let patch = SeClassifier::new(InputKind::Patch, 8).unwrap();
        let dev = device();
        let x48 = Tensor::zeros((3, 2, 48, 48), DType::F32, &dev).unwrap();
        let x96 = Tensor::zeros((3, 2, 96, 96), DType::F32, &dev).unwrap();
        assert_eq!(latent.forward(&x48).unwrap().dims(), &[3]);
        assert_eq!(patch.forward(&x96).unwrap().dims(), &[3]);
        assert!(patch.param_count() < 250_000, "{} params", patch.param_count());
    }

    #[test]
    fn composition_plan_is_nested() {
        let volumes: Vec<(String, Sequence, VolumeClass)> = (0..20)
            .map(|i| {
                let class = if i % 2 == 0 { VolumeClass::Normal } else { VolumeClass::Abnormal };
                (format!("v{i:02}"), Sequence::Flair, class)
            })
            .collect();
        let plan = CompositionPlan::new(CompositionMode::Substitution, &volumes, 11);
        for f in [0.1, 0.2, 0.5, 0.9] {
            let smaller: std::collections::BTreeSet<String> =
                plan.kept_at(f).into_iter().collect();
            let larger: std::collections::BTreeSet<String> =
                plan.kept_at(f + 0.1).into_iter().collect();
            assert!(smaller.is_subset(&larger), "nesting violated at {f}");
        }
        // Substitution totals: kept + removed = all volumes.
        for f in [0.0, 0.3, 1.0] {
            assert_eq!(plan.kept_at(f).len() + plan.removed_at(f).len(), 20);
        }
        assert!(plan.kept_at(1.0).len() == 20 && plan.removed_at(1.0).is_empty());
        assert!(plan.kept_at(0.0).is_empty());
    }

    #[test]
    fn balanced_training_rejects_single_class() {
        let samples: Vec<ClassifierSample> = (0..4)
            .map(|i| ClassifierSample {
                field: ComplexField::zeros(48, 48),
                label: 1.0,
                volume_id: format!("v{i}"),
            })
            .collect();
        let cfg = ClassifierConfig { epochs: 1, ..Default::default() };
        assert!(train_classifier(&samples, InputKind::Latent, &cfg, 0).is_err());
    }
}
