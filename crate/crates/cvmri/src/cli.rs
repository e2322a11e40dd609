//! Command-line entry points tying the modules into reproducible runs.
//!
//! Each subcommand reads the experiment configuration, claims its own
//! subdirectory under `--out`, freezes the resolved config next to its
//! outputs, and derives all randomness from the global seed via named
//! substreams. Commands never mutate upstream artifacts; stage ordering
//! is enforced by checking for the required inputs and failing with the
//! missing path.
//!
//! Exit codes: 0 on success, 1 on validation or configuration errors,
//! 2 on a missing upstream artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::archive::{
    sha256_file, write_json, write_table, CountRow, DatasetManifest, LatentArchive, LatentMeta,
    PatchArchive, Provenance, VolumeArchive,
};
use crate::checkpoint;
use crate::config::{freeze_config, load_config, ExperimentConfig};
use crate::cvae::{load_cvae, train_cvae, LatentSample};
use crate::error::{Error, Result};
use crate::evalharness::{
    run_composition, train_discriminator, ClassifierSample, CompositionCurve, CompositionMode,
    CompositionOptions, CompositionPlan, DiscriminatorReport, SyntheticPool,
};
use crate::flowmatch::{
    load_flow, sample_latents, train_stage1, train_stage2, STAGE1_KIND, STAGE2_KIND,
};
use crate::ingest::reconstruct_slice;
use crate::label::{Abnormality, ConditionLabel, PathToken, SeqToken, Sequence, VolumeClass};
use crate::metrics::{mean_std, phase_coherence, psnr, ssim};
use crate::patching::{
    extract_labeled_patches, extract_random_patches, split_volumes, PatchRecord, PreparedVolume,
    Split,
};
use crate::phantom::generate_volume;
use crate::plot::{render_curves, Series, COLORS};
use crate::rng::substream;

#[derive(Debug, Parser)]
#[command(name = "cvmri", version, about = "Generative pipeline for complex-valued MRI patches")]
pub struct Cli {
    /// Experiment configuration file (TOML); defaults apply if omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory holding all artifacts.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Rebuilds the command's output directory if it is not empty.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads for data preparation.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generates the phantom dataset: volumes, splits, and patches.
    Prepare,
    /// Trains the latent autoencoder on the prepared patches.
    TrainAe,
    /// Encodes all patch splits into latent archives.
    Encode,
    /// Trains the Stage-1 (sequence-conditioned) flow model.
    TrainFm,
    /// Finetunes the flow model with abnormality conditioning (Stage 2).
    FinetuneFm,
    /// Draws synthetic latents from a trained flow model.
    Sample(SampleArgs),
    /// Decodes sampled latents back to complex patches.
    Decode,
    /// Latent-fidelity evaluation: real-versus-synthetic discrimination.
    EvalLatent,
    /// Downstream evaluation: substitution and additive experiments.
    EvalDownstream,
    /// Renders result tables and plots from the evaluation artifacts.
    Report,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Number of latents to draw.
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Sequence name (FLAIR, T1, T1POST, T1PRE, T2).
    #[arg(long)]
    pub sequence: String,
    /// Abnormality class ("normal" or "abnormal"); requires a Stage-2
    /// checkpoint. Omitted: Stage-1 sequence-only sampling.
    #[arg(long)]
    pub class: Option<String>,
    /// Guidance scale; defaults from the sampler configuration.
    #[arg(long)]
    pub guidance: Option<f64>,
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::MissingArtifact(_) => 2,
        _ => 1,
    }
}

/// Parses arguments, runs the selected command, and returns the exit
/// code.
pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .try_init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Dispatches one parsed invocation.
pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::Prepare => cmd_prepare(&cfg, &cli.out, cli.force, cli.workers),
        Command::TrainAe => cmd_train_ae(&cfg, &cli.out, cli.force),
        Command::Encode => cmd_encode(&cfg, &cli.out, cli.force),
        Command::TrainFm => cmd_train_fm(&cfg, &cli.out, cli.force),
        Command::FinetuneFm => cmd_finetune_fm(&cfg, &cli.out, cli.force),
        Command::Sample(args) => cmd_sample(&cfg, &cli.out, cli.force, args),
        Command::Decode => cmd_decode(&cfg, &cli.out, cli.force),
        Command::EvalLatent => cmd_eval_latent(&cfg, &cli.out, cli.force),
        Command::EvalDownstream => cmd_eval_downstream(&cfg, &cli.out, cli.force),
        Command::Report => cmd_report(&cfg, &cli.out, cli.force),
    }
}

// ---------------------------------------------------------------------------
// Run layout
// ---------------------------------------------------------------------------

pub fn dataset_dir(out: &Path) -> PathBuf {
    out.join("dataset")
}
pub fn volumes_dir(out: &Path) -> PathBuf {
    dataset_dir(out).join("volumes")
}
pub fn patches_dir(out: &Path) -> PathBuf {
    dataset_dir(out).join("patches")
}
pub fn manifest_path(out: &Path) -> PathBuf {
    dataset_dir(out).join("manifest.json")
}
pub fn cvae_dir(out: &Path) -> PathBuf {
    out.join("cvae")
}
pub fn latents_dir(out: &Path) -> PathBuf {
    out.join("latents")
}
pub fn flow1_dir(out: &Path) -> PathBuf {
    out.join("flow1")
}
pub fn flow2_dir(out: &Path) -> PathBuf {
    out.join("flow2")
}
pub fn samples_dir(out: &Path) -> PathBuf {
    out.join("samples")
}
pub fn decoded_dir(out: &Path) -> PathBuf {
    out.join("decoded")
}
pub fn eval_dir(out: &Path) -> PathBuf {
    out.join("eval")
}
pub fn report_dir(out: &Path) -> PathBuf {
    out.join("report")
}

/// Claims a command's output directory: creates it, or rebuilds it with
/// `--force`; a non-empty directory without `--force` is an error.
fn claim_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = dir
            .read_dir()
            .map_err(|e| Error::io(dir.display().to_string(), e))?
            .next()
            .is_some();
        if non_empty {
            if !force {
                return Err(Error::invalid(format!(
                    "output directory {} is not empty (use --force to rebuild)",
                    dir.display()
                )));
            }
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn require_file(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.display().to_string()))
    }
}

// ---------------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------------

fn prepare_one(
    cfg: &ExperimentConfig,
    vol_dir: &Path,
    seq: Sequence,
    class: VolumeClass,
    index: usize,
) -> Result<PreparedVolume> {
    let vol = generate_volume(&cfg.phantom, seq, class, index);
    VolumeArchive::write(vol_dir, &vol.stack, vol.class, &vol.boxes)?;
    let mut slices = Vec::with_capacity(vol.stack.slices());
    for s in 0..vol.stack.slices() {
        let (field, _) = reconstruct_slice(&vol.stack, s)?;
        slices.push(field);
    }
    Ok(PreparedVolume {
        slices,
        sequence: seq,
        class: vol.class,
        volume_id: vol.stack.volume_id.clone(),
        boxes: vol.boxes,
    })
}

/// Generates the phantom volumes, reconstructs and splits them, and
/// extracts the patch archives with a manifest of checksums and counts.
pub fn cmd_prepare(cfg: &ExperimentConfig, out: &Path, force: bool, workers: usize) -> Result<()> {
    cfg.validate()?;
    let dir = dataset_dir(out);
    claim_dir(&dir, force)?;
    let vol_dir = volumes_dir(out);
    std::fs::create_dir_all(&vol_dir).map_err(|e| Error::io(vol_dir.display().to_string(), e))?;
    freeze_config(cfg, &dir, "prepare")?;

    let cells = cfg.phantom.cells();
    log::info!("preparing {} volumes with {} worker(s)", cells.len(), workers.max(1));
    let mut prepared: Vec<PreparedVolume> = if workers > 1 {
        let chunk = cells.len().div_ceil(workers);
        let mut indexed: Vec<(usize, PreparedVolume)> = std::thread::scope(|scope| {
            let handles: Vec<_> = cells
                .chunks(chunk)
                .enumerate()
                .map(|(ci, part)| {
                    let vol_dir = &vol_dir;
                    scope.spawn(move || -> Result<Vec<(usize, PreparedVolume)>> {
                        part.iter()
                            .enumerate()
                            .map(|(i, &(seq, class, idx))| {
                                Ok((ci * chunk + i, prepare_one(cfg, vol_dir, seq, class, idx)?))
                            })
                            .collect()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("prepare worker panicked"))
                .collect::<Result<Vec<_>>>()
                .map(|parts| parts.into_iter().flatten().collect())
        })?;
        indexed.sort_by_key(|(i, _)| *i);
        indexed.into_iter().map(|(_, v)| v).collect()
    } else {
        cells
            .iter()
            .map(|&(seq, class, idx)| prepare_one(cfg, &vol_dir, seq, class, idx))
            .collect::<Result<Vec<_>>>()?
    };

    let labels: Vec<(String, Sequence, VolumeClass)> =
        prepared.iter().map(|v| (v.volume_id.clone(), v.sequence, v.class)).collect();
    let split = split_volumes(&labels, cfg.seed)?;

    let mut per_split: BTreeMap<&'static str, Vec<PatchRecord>> = BTreeMap::new();
    for vol in prepared.drain(..) {
        let mut rng = substream(cfg.seed, &format!("patching/{}", vol.volume_id));
        let records = if vol.class == VolumeClass::Abnormal {
            extract_labeled_patches(&vol, &mut rng)?
        } else {
            extract_random_patches(&vol, &mut rng, cfg.patches_per_unannotated_volume)?
        };
        let assigned = split
            .split_of(&vol.volume_id)
            .ok_or_else(|| Error::invalid(format!("{} missing from split", vol.volume_id)))?;
        per_split.entry(assigned.name()).or_default().extend(records);
    }

    let p_dir = patches_dir(out);
    let mut checksums = BTreeMap::new();
    let mut counts = Vec::new();
    for split_kind in Split::ALL {
        let name = split_kind.name();
        let records = per_split.remove(name).unwrap_or_default();
        PatchArchive::write(&p_dir, name, &records)?;
        checksums.insert(name.to_string(), sha256_file(&PatchArchive::data_path(&p_dir, name))?);
        for seq in Sequence::ALL {
            for class in VolumeClass::ALL {
                let n = records
                    .iter()
                    .filter(|r| r.class == class && r.condition.sequence == SeqToken::Seq(seq))
                    .count();
                if n > 0 {
                    counts.push(CountRow {
                        class,
                        sequence: seq,
                        split: name.to_string(),
                        patches: n,
                    });
                }
            }
        }
    }

    let rows: Vec<Vec<String>> = counts
        .iter()
        .map(|c| {
            vec![
                c.sequence.name().to_string(),
                c.class.name().to_string(),
                c.split.clone(),
                c.patches.to_string(),
            ]
        })
        .collect();
    write_table(&dir.join("counts.tsv"), &["sequence", "class", "split", "patches"], &rows)?;
    write_json(&manifest_path(out), &DatasetManifest { split, checksums, counts })?;
    log::info!("dataset written to {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train-ae / encode
// ---------------------------------------------------------------------------

fn read_patches(out: &Path, split: &str) -> Result<Vec<PatchRecord>> {
    let dir = patches_dir(out);
    require_file(&PatchArchive::data_path(&dir, split))?;
    let (fields, metas) = PatchArchive::read(&dir, split)?;
    Ok(fields
        .into_iter()
        .zip(metas)
        .map(|(field, m)| PatchRecord {
            field,
            condition: m.condition,
            class: m.class,
            volume_id: m.volume_id,
            slice_index: m.slice,
            origin: m.origin,
            overlap_fraction: m.overlap,
        })
        .collect())
}

/// Trains the latent autoencoder on the prepared train/validation
/// splits.
pub fn cmd_train_ae(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    cfg.validate()?;
    let train = read_patches(out, "train")?;
    let val = read_patches(out, "val")?;
    let dir = cvae_dir(out);
    claim_dir(&dir, force)?;
    freeze_config(cfg, &dir, "train-ae")?;
    train_cvae(&train, &val, &cfg.cvae, cfg.seed, &dir)?;
    Ok(())
}

/// Encodes every patch split into a latent archive.
pub fn cmd_encode(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    cfg.validate()?;
    let (model, _) = load_cvae(&cvae_dir(out))?;
    let dir = latents_dir(out);
    claim_dir(&dir, force)?;
    freeze_config(cfg, &dir, "encode")?;
    for split_kind in Split::ALL {
        let name = split_kind.name();
        let records = read_patches(out, name)?;
        let latents = model.encode_patches(&records, cfg.cvae.batch_size)?;
        let metas: Vec<LatentMeta> = latents
            .iter()
            .zip(&records)
            .map(|(l, r)| LatentMeta {
                condition: l.condition,
                class: r.class,
                provenance: l.provenance,
                volume_id: l.volume_id.clone(),
            })
            .collect();
        let z: Vec<Vec<f32>> = latents.into_iter().map(|l| l.z).collect();
        LatentArchive::write(&dir, name, &z, &metas)?;
        log::info!("encoded {} {name} patches", z.len());
    }
    Ok(())
}

fn read_latents(out: &Path, name: &str) -> Result<(Vec<LatentSample>, Vec<LatentMeta>)> {
    let dir = latents_dir(out);
    require_file(&LatentArchive::data_path(&dir, name))?;
    let (zs, metas) = LatentArchive::read(&dir, name)?;
    let samples = zs
        .into_iter()
        .zip(&metas)
        .map(|(z, m)| LatentSample {
            z,
            condition: m.condition,
            provenance: m.provenance,
            volume_id: m.volume_id.clone(),
        })
        .collect();
    Ok((samples, metas))
}

// ---------------------------------------------------------------------------
// train-fm / finetune-fm
// ---------------------------------------------------------------------------

/// Trains the Stage-1 flow model on the encoded latents.
pub fn cmd_train_fm(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    cfg.validate()?;
    let (train, _) = read_latents(out, "train")?;
    let (val, _) = read_latents(out, "val")?;
    let stats = checkpoint::require_kind(&cvae_dir(out), "cvae")?
        .latent_stats
        .ok_or_else(|| Error::invalid("autoencoder checkpoint lacks latent statistics"))?;
    let dir = flow1_dir(out);
    claim_dir(&dir, force)?;
    freeze_config(cfg, &dir, "train-fm")?;
    train_stage1(&train, &val, &stats, &cfg.flow, cfg.seed, &dir)?;
    Ok(())
}

/// Stage-2 finetuning with abnormality conditioning on top of the
/// Stage-1 checkpoint.
pub fn cmd_finetune_fm(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    cfg.validate()?;
    let (train, _) = read_latents(out, "train")?;
    let (val, _) = read_latents(out, "val")?;
    checkpoint::require_kind(&flow1_dir(out), STAGE1_KIND)?;
    let dir = flow2_dir(out);
    claim_dir(&dir, force)?;
    freeze_config(cfg, &dir, "finetune-fm")?;
    train_stage2(&train, &val, &flow1_dir(out), &cfg.finetune, cfg.seed, &dir)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// sample / decode
// ---------------------------------------------------------------------------

fn class_of(cond: &ConditionLabel) -> VolumeClass {
    match cond.abnormality {
        PathToken::Abn(Abnormality::Abnormal) => VolumeClass::Abnormal,
        PathToken::Abn(Abnormality::Normal) => VolumeClass::Normal,
        _ => VolumeClass::Unlabeled,
    }
}

/// Tags a synthetic volume id so downstream code can recover the
/// sequence.
pub fn synth_volume_id(seq: Sequence, index: usize) -> String {
    format!("synth/{}/{index:04}", seq.name())
}

/// Draws synthetic latents and writes them with provenance metadata.
pub fn cmd_sample(cfg: &ExperimentConfig, out: &Path, force: bool, args: &SampleArgs) -> Result<()> {
    cfg.validate()?;
    let seq = Sequence::from_name(&args.sequence)
        .ok_or_else(|| Error::invalid(format!("unknown sequence `{}`", args.sequence)))?;
    let (cond, stage2, w) = match args.class.as_deref() {
        None => (ConditionLabel::stage1(seq), false, args.guidance.unwrap_or(cfg.sampler.w_eval)),
        Some("normal") => (
            ConditionLabel::new(seq, Abnormality::Normal),
            true,
            args.guidance.unwrap_or(cfg.sampler.w_downstream),
        ),
        Some("abnormal") => (
            ConditionLabel::new(seq, Abnormality::Abnormal),
            true,
            args.guidance.unwrap_or(cfg.sampler.w_downstream),
        ),
        Some(other) => {
            return Err(Error::invalid(format!("unknown class `{other}` (normal|abnormal)")))
        }
    };
    if w < 1.0 {
        return Err(Error::invalid("guidance scale must be >= 1"));
    }
    let (model_dir, kind) =
        if stage2 { (flow2_dir(out), STAGE2_KIND) } else { (flow1_dir(out), STAGE1_KIND) };
    let (model, meta) = load_flow(&model_dir, kind, true)?;
    let stats = meta
        .latent_stats
        .ok_or_else(|| Error::invalid("flow checkpoint lacks latent statistics"))?;

    let dir = samples_dir(out);
    claim_dir(&dir, force)?;
    freeze_config(cfg, &dir, "sample")?;
    let mut rng = substream(cfg.seed, "sample");
    let conds = vec![cond; args.count];
    let mut latents =
        sample_latents(&model, &stats, &conds, stage2, w, cfg.sampler.n_steps, &mut rng)?;
    for (i, l) in latents.iter_mut().enumerate() {
        l.volume_id = synth_volume_id(seq, i);
    }
    let metas: Vec<LatentMeta> = latents
        .iter()
        .map(|l| LatentMeta {
            condition: l.condition,
            class: class_of(&l.condition),
            provenance: Provenance::Synthetic,
            volume_id: l.volume_id.clone(),
        })
        .collect();
    let z: Vec<Vec<f32>> = latents.into_iter().map(|l| l.z).collect();
    LatentArchive::write(&dir, "samples", &z, &metas)?;
    log::info!("wrote {} latents to {}", metas.len(), dir.display());
    Ok(())
}

/// Decodes the sampled latents into a patch archive.
pub fn cmd_decode(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    cfg.validate()?;
    let s_dir = samples_dir(out);
    require_file(&LatentArchive::data_path(&s_dir, "samples"))?;
    let (zs, metas) = LatentArchive::read(&s_dir, "samples")?;
    let (model, _) = load_cvae(&cvae_dir(out))?;
    let dir = decoded_dir(out);
    claim_dir(&dir, force)?;
    freeze_config(cfg, &dir, "decode")?;
    let mut records = Vec::with_capacity(zs.len());
    for (z, m) in zs.iter().zip(&metas) {
        let seq = match m.condition.sequence {
            SeqToken::Seq(s) => s,
            SeqToken::Null => return Err(Error::invalid("sampled latent with null sequence")),
        };
        records.push(PatchRecord {
            field: model.decode(z, seq)?,
            condition: m.condition,
            class: m.class,
            volume_id: m.volume_id.clone(),
            slice_index: 0,
            origin: (0, 0),
            overlap_fraction: 0.0,
        });
    }
    PatchArchive::write(&dir, "samples", &records)?;
    log::info!("decoded {} patches to {}", records.len(), dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval-latent
// ---------------------------------------------------------------------------

/// Full latent-fidelity result: discrimination controls plus the
/// per-sequence real-versus-synthetic table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentFidelityReport {
    /// Real versus disjoint real; should sit near chance.
    pub control_real: DiscriminatorReport,
    /// Real versus pure noise; should be near perfect.
    pub control_noise: DiscriminatorReport,
    pub per_sequence: BTreeMap<String, DiscriminatorReport>,
}

pub fn latent_fidelity_path(out: &Path) -> PathBuf {
    eval_dir(out).join("latent_fidelity.json")
}

fn halves(samples: &[LatentSample]) -> (Vec<LatentSample>, Vec<LatentSample>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if i % 2 == 0 {
            a.push(s.clone());
        } else {
            b.push(s.clone());
        }
    }
    (a, b)
}

fn noise_latents(
    stats: &checkpoint::LatentStats,
    n: usize,
    rng: &mut impl Rng,
) -> Vec<LatentSample> {
    let plane = crate::cvae::LATENT_SIZE * crate::cvae::LATENT_SIZE;
    (0..n)
        .map(|_| {
            let mut z = Vec::with_capacity(2 * plane);
            for ch in 0..2 {
                for _ in 0..plane {
                    let e: f64 = rng.sample(StandardNormal);
                    z.push((stats.mean[ch] + stats.std[ch] * e) as f32);
                }
            }
            LatentSample {
                z,
                condition: ConditionLabel::stage1(Sequence::Flair),
                provenance: Provenance::Synthetic,
                volume_id: String::new(),
            }
        })
        .collect()
}

/// Per-stratum cap on sampled latents, keeping the discriminator runs
/// tractable on a single core.
const SYNTH_TRAIN_CAP: usize = 64;
const SYNTH_TEST_CAP: usize = 32;

/// Trains real-versus-synthetic discriminators per sequence, plus the
/// real-versus-real and real-versus-noise controls, and writes the
/// report.
pub fn cmd_eval_latent(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    cfg.validate()?;
    let (real_train, _) = read_latents(out, "train")?;
    let (real_test, _) = read_latents(out, "test")?;
    let stats = checkpoint::require_kind(&cvae_dir(out), "cvae")?
        .latent_stats
        .ok_or_else(|| Error::invalid("autoencoder checkpoint lacks latent statistics"))?;
    let (model, _) = load_flow(&flow1_dir(out), STAGE1_KIND, true)?;

    let dir = eval_dir(out);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let report_path = latent_fidelity_path(out);
    if report_path.exists() && !force {
        return Err(Error::invalid(format!(
            "{} already exists (use --force to rebuild)",
            report_path.display()
        )));
    }
    freeze_config(cfg, &dir, "eval-latent")?;
    let mut rng = substream(cfg.seed, "eval/latent");

    // Control 1: real versus disjoint real.
    let (a_train, b_train) = halves(&real_train);
    let (a_test, b_test) = halves(&real_test);
    let control_real =
        train_discriminator(&a_train, &a_test, &b_train, &[b_test.clone()], &cfg.classifier)?;
    log::info!("control real-vs-real AUROC {:.3} +/- {:.3}", control_real.mean, control_real.std);

    // Control 2: real versus pure noise at the latent statistics.
    let control_noise = train_discriminator(
        &a_train,
        &a_test,
        &noise_latents(&stats, b_train.len().max(8), &mut rng),
        &[noise_latents(&stats, b_test.len().max(8), &mut rng)],
        &cfg.classifier,
    )?;
    log::info!(
        "control real-vs-noise AUROC {:.3} +/- {:.3}",
        control_noise.mean,
        control_noise.std
    );

    let mut per_sequence = BTreeMap::new();
    for seq in Sequence::ALL {
        let token = SeqToken::Seq(seq);
        let seq_train: Vec<LatentSample> =
            real_train.iter().filter(|l| l.condition.sequence == token).cloned().collect();
        let seq_test: Vec<LatentSample> =
            real_test.iter().filter(|l| l.condition.sequence == token).cloned().collect();
        if seq_train.len() < 4 || seq_test.len() < 2 {
            continue;
        }
        let n_train = seq_train.len().min(SYNTH_TRAIN_CAP);
        let n_test = seq_test.len().min(SYNTH_TEST_CAP);
        let conds = vec![ConditionLabel::stage1(seq); n_train];
        let synth_train = sample_latents(
            &model,
            &stats,
            &conds,
            false,
            cfg.sampler.w_eval,
            cfg.sampler.n_steps,
            &mut rng,
        )?;
        let mut synth_tests = Vec::new();
        for _ in 0..cfg.eval.synthetic_test_sets {
            synth_tests.push(sample_latents(
                &model,
                &stats,
                &vec![ConditionLabel::stage1(seq); n_test],
                false,
                cfg.sampler.w_eval,
                cfg.sampler.n_steps,
                &mut rng,
            )?);
        }
        let report =
            train_discriminator(&seq_train, &seq_test, &synth_train, &synth_tests, &cfg.classifier)?;
        log::info!("{}: real-vs-synthetic AUROC {:.3} +/- {:.3}", seq.name(), report.mean, report.std);
        per_sequence.insert(seq.name().to_string(), report);
    }

    write_json(&report_path, &LatentFidelityReport { control_real, control_noise, per_sequence })
}

// ---------------------------------------------------------------------------
// eval-downstream
// ---------------------------------------------------------------------------

pub fn substitution_path(out: &Path) -> PathBuf {
    eval_dir(out).join("substitution.json")
}
pub fn additive_path(out: &Path) -> PathBuf {
    eval_dir(out).join("additive.json")
}

fn labeled_classifier_samples(records: &[PatchRecord]) -> Result<Vec<ClassifierSample>> {
    records
        .iter()
        .filter(|r| r.class.is_labeled())
        .map(ClassifierSample::from_patch)
        .collect()
}

/// Builds the synthetic patch pool: Stage-2 latents per (labeled
/// sequence, abnormality) stratum, decoded through the autoencoder.
fn build_synth_pool(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ClassifierSample>> {
    let (flow, meta) = load_flow(&flow2_dir(out), STAGE2_KIND, true)?;
    let stats = meta
        .latent_stats
        .ok_or_else(|| Error::invalid("flow checkpoint lacks latent statistics"))?;
    let (cvae, _) = load_cvae(&cvae_dir(out))?;
    let mut rng = substream(cfg.seed, "eval/downstream/pool");
    let mut pool = Vec::new();
    for seq in Sequence::LABELED {
        for abn in [Abnormality::Normal, Abnormality::Abnormal] {
            let conds = vec![ConditionLabel::new(seq, abn); cfg.eval.synth_pool_per_stratum];
            let latents = sample_latents(
                &flow,
                &stats,
                &conds,
                true,
                cfg.sampler.w_downstream,
                cfg.sampler.n_steps,
                &mut rng,
            )?;
            for (i, l) in latents.iter().enumerate() {
                pool.push(ClassifierSample {
                    field: cvae.decode(&l.z, seq)?,
                    label: if abn == Abnormality::Abnormal { 1.0 } else { 0.0 },
                    volume_id: synth_volume_id(seq, i),
                });
            }
        }
    }
    Ok(pool)
}

/// Runs the substitution and additive data-composition experiments and
/// writes one curve artifact each.
pub fn cmd_eval_downstream(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    cfg.validate()?;
    let train_records = read_patches(out, "train")?;
    let test_records = read_patches(out, "test")?;
    checkpoint::require_kind(&flow2_dir(out), STAGE2_KIND)?;

    let dir = eval_dir(out);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for p in [substitution_path(out), additive_path(out)] {
        if p.exists() && !force {
            return Err(Error::invalid(format!(
                "{} already exists (use --force to rebuild)",
                p.display()
            )));
        }
    }
    freeze_config(cfg, &dir, "eval-downstream")?;

    let mut real_train: BTreeMap<String, Vec<ClassifierSample>> = BTreeMap::new();
    let mut volume_info: BTreeMap<String, (Sequence, VolumeClass)> = BTreeMap::new();
    for r in train_records.iter().filter(|r| r.class.is_labeled()) {
        real_train.entry(r.volume_id.clone()).or_default().push(ClassifierSample::from_patch(r)?);
        if let SeqToken::Seq(seq) = r.condition.sequence {
            volume_info.insert(r.volume_id.clone(), (seq, r.class));
        }
    }
    let real_test = labeled_classifier_samples(&test_records)?;
    if real_train.is_empty() || real_test.is_empty() {
        return Err(Error::invalid("no labeled volumes available for the downstream experiments"));
    }

    let pool_samples = build_synth_pool(cfg, out)?;
    let synth_pool = SyntheticPool::new(&pool_samples, &Sequence::LABELED);
    let opts = CompositionOptions {
        classifier: &cfg.classifier,
        real_train: &real_train,
        volume_info: &volume_info,
        real_test: &real_test,
        synth_pool: &synth_pool,
    };
    let volumes: Vec<(String, Sequence, VolumeClass)> =
        volume_info.iter().map(|(id, (s, c))| (id.clone(), *s, *c)).collect();

    for (mode, path) in [
        (CompositionMode::Substitution, substitution_path(out)),
        (CompositionMode::Additive, additive_path(out)),
    ] {
        let plan = CompositionPlan::new(mode, &volumes, cfg.seed);
        let curve = run_composition(&plan, &opts, cfg.seed)?;
        write_json(&path, &curve)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// Per-patch reconstruction fidelity, reported per sequence.
const RECON_CAP_PER_SEQUENCE: usize = 64;

fn fmt(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

fn recon_table(out: &Path) -> Result<Vec<Vec<String>>> {
    let (model, _) = load_cvae(&cvae_dir(out))?;
    let test = read_patches(out, "test")?;
    let mut rows = Vec::new();
    for seq in Sequence::ALL {
        let token = SeqToken::Seq(seq);
        let mut gammas = Vec::new();
        let mut ssims = Vec::new();
        let mut psnrs = Vec::new();
        for r in test
            .iter()
            .filter(|r| r.condition.sequence == token)
            .take(RECON_CAP_PER_SEQUENCE)
        {
            let recon = {
                let (mu, _) = model.encode(&r.field, seq)?;
                model.decode(&mu, seq)?
            };
            gammas.push(phase_coherence(&recon, &r.field)?);
            let (pm, tm) = (recon.magnitude(), r.field.magnitude());
            ssims.push(ssim(&pm, &tm)?);
            psnrs.push(psnr(&pm, &tm)?);
        }
        if gammas.is_empty() {
            continue;
        }
        let (gm, gs) = mean_std(&gammas);
        let (sm, ss) = mean_std(&ssims);
        let (pm, ps) = mean_std(&psnrs);
        rows.push(vec![
            seq.name().to_string(),
            gammas.len().to_string(),
            format!("{} +/- {}", fmt(gm), fmt(gs)),
            format!("{} +/- {}", fmt(sm), fmt(ss)),
            format!("{} +/- {}", fmt(pm), fmt(ps)),
        ]);
    }
    Ok(rows)
}

fn curve_series(curve: &CompositionCurve) -> Vec<Series> {
    let mut series = Vec::new();
    for (k, condition) in ["real", "real+synthetic"].iter().enumerate() {
        let pts: Vec<_> = curve.points.iter().filter(|p| p.condition == *condition).collect();
        if pts.is_empty() {
            continue;
        }
        series.push(Series {
            label: condition.to_string(),
            x: pts.iter().map(|p| p.fraction).collect(),
            mean: pts.iter().map(|p| p.mean).collect(),
            std: pts.iter().map(|p| p.std).collect(),
            color: COLORS[k],
        });
    }
    series
}

fn curve_rows(curve: &CompositionCurve) -> Vec<Vec<String>> {
    curve
        .points
        .iter()
        .map(|p| {
            vec![format!("{:.1}", p.fraction), p.condition.clone(), fmt(p.mean), fmt(p.std)]
        })
        .collect()
}

/// Renders the result tables and plots: reconstruction fidelity, the
/// latent-fidelity discrimination table, and one curve per composition
/// experiment.
pub fn cmd_report(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    cfg.validate()?;
    // Check every upstream artifact before claiming the output
    // directory, so a failed invocation leaves no half-claimed state.
    checkpoint::require_kind(&cvae_dir(out), "cvae")?;
    require_file(&PatchArchive::data_path(&patches_dir(out), "test"))?;
    require_file(&latent_fidelity_path(out))?;
    require_file(&substitution_path(out))?;
    require_file(&additive_path(out))?;
    let dir = report_dir(out);
    claim_dir(&dir, force)?;
    freeze_config(cfg, &dir, "report")?;

    let recon = recon_table(out)?;
    write_table(
        &dir.join("recon_metrics.tsv"),
        &["sequence", "patches", "gamma", "ssim", "psnr_db"],
        &recon,
    )?;

    require_file(&latent_fidelity_path(out))?;
    let fidelity: LatentFidelityReport = crate::archive::read_json(&latent_fidelity_path(out))?;
    let mut rows = vec![
        vec![
            "control/real-vs-real".to_string(),
            fmt(fidelity.control_real.mean),
            fmt(fidelity.control_real.std),
        ],
        vec![
            "control/real-vs-noise".to_string(),
            fmt(fidelity.control_noise.mean),
            fmt(fidelity.control_noise.std),
        ],
    ];
    for (seq, rep) in &fidelity.per_sequence {
        rows.push(vec![format!("real-vs-synthetic/{seq}"), fmt(rep.mean), fmt(rep.std)]);
    }
    write_table(&dir.join("latent_fidelity.tsv"), &["experiment", "auroc_mean", "auroc_std"], &rows)?;

    for (name, path) in
        [("substitution", substitution_path(out)), ("additive", additive_path(out))]
    {
        require_file(&path)?;
        let curve: CompositionCurve = crate::archive::read_json(&path)?;
        write_table(
            &dir.join(format!("{name}.tsv")),
            &["fraction", "condition", "auroc_mean", "auroc_std"],
            &curve_rows(&curve),
        )?;
        render_curves(
            &dir.join(format!("{name}.png")),
            &curve_series(&curve),
            Some((curve.baseline_mean, curve.baseline_std)),
        )?;
    }
    log::info!("report written to {}", dir.display());
    Ok(())
}
