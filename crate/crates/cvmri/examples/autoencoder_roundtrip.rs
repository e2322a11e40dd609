//! Trains the latent autoencoder on a handful of phantom patches and
//! measures how well one patch survives the 2x96x96 -> 2x48x48 -> back
//! round trip.
//!
//! ```bash
//! cargo run --example autoencoder_roundtrip
//! ```

use cvmri::cvae::{train_cvae, CvaeConfig, LATENT_CHANNELS, LATENT_SIZE};
use cvmri::ingest::reconstruct_slice;
use cvmri::metrics::{phase_coherence, ssim};
use cvmri::patching::{extract_random_patches, PreparedVolume};
use cvmri::phantom::{generate_volume, PhantomSpec};
use cvmri::rng::substream;
use cvmri::{Result, Sequence, VolumeClass};

fn main() -> Result<()> {
    let spec = PhantomSpec { slices_per_volume: 2, ..PhantomSpec::default() };
    let mut patches = Vec::new();
    for (seq, idx) in [(Sequence::Flair, 0), (Sequence::T2, 0)] {
        let vol = generate_volume(&spec, seq, VolumeClass::Normal, idx);
        let mut slices = Vec::new();
        for s in 0..vol.stack.slices() {
            slices.push(reconstruct_slice(&vol.stack, s)?.0);
        }
        let prepared = PreparedVolume {
            slices,
            sequence: seq,
            class: vol.class,
            volume_id: vol.stack.volume_id.clone(),
            boxes: vec![],
        };
        let mut rng = substream(3, &format!("patching/{}", prepared.volume_id));
        patches.extend(extract_random_patches(&prepared, &mut rng, 16)?);
    }
    println!("training on {} patches", patches.len());

    let config = CvaeConfig { epochs: 8, batch_size: 8, ..CvaeConfig::default() };
    let dir = tempfile::tempdir().expect("temp dir");
    let (model, meta) = train_cvae(&patches, &patches[..4], &config, 0, dir.path())?;
    for row in &meta.training_log {
        println!("epoch {}: train {:.4} val {:.4}", row.epoch, row.train_loss, row.val_loss.unwrap_or(f64::NAN));
    }

    let patch = &patches[0].field;
    let (mu, _) = model.encode(patch, Sequence::Flair)?;
    println!("latent: {} values ({LATENT_CHANNELS}x{LATENT_SIZE}x{LATENT_SIZE})", mu.len());
    let recon = model.decode(&mu, Sequence::Flair)?;
    println!(
        "round trip: gamma = {:.4}, magnitude SSIM = {:.4}",
        phase_coherence(&recon, patch)?,
        ssim(&recon.magnitude(), &patch.magnitude())?
    );
    let stats = meta.latent_stats.expect("stats stored in checkpoint");
    println!("latent statistics: mean {:?}, std {:?}", stats.mean, stats.std);
    Ok(())
}
