//! Reconstructs a labeled abnormal volume and extracts its training
//! patches: annotation-guided abnormal patches around each bounding box
//! plus matched normal patches from clear regions of the same volume.
//!
//! ```bash
//! cargo run --example patch_extraction
//! ```

use cvmri::label::{Abnormality, PathToken};
use cvmri::ingest::reconstruct_slice;
use cvmri::patching::{extract_labeled_patches, PreparedVolume, PATCHES_PER_VOLUME};
use cvmri::phantom::{generate_volume, PhantomSpec};
use cvmri::rng::substream;
use cvmri::{Result, Sequence, VolumeClass};

fn main() -> Result<()> {
    let spec = PhantomSpec { slices_per_volume: 4, ..PhantomSpec::default() };
    let vol = generate_volume(&spec, Sequence::T1, VolumeClass::Abnormal, 0);
    let mut slices = Vec::new();
    for s in 0..vol.stack.slices() {
        slices.push(reconstruct_slice(&vol.stack, s)?.0);
    }
    let prepared = PreparedVolume {
        slices,
        sequence: Sequence::T1,
        class: vol.class,
        volume_id: vol.stack.volume_id.clone(),
        boxes: vol.boxes.clone(),
    };

    let mut rng = substream(7, &format!("patching/{}", prepared.volume_id));
    let patches = extract_labeled_patches(&prepared, &mut rng)?;

    let abnormal =
        patches.iter().filter(|p| p.condition.abnormality == PathToken::Abn(Abnormality::Abnormal));
    let normal =
        patches.iter().filter(|p| p.condition.abnormality == PathToken::Abn(Abnormality::Normal));
    println!(
        "{}: {} boxes -> {} patches ({} abnormal, {} normal), allowed range {:?}",
        prepared.volume_id,
        prepared.boxes.len(),
        patches.len(),
        abnormal.clone().count(),
        normal.count(),
        PATCHES_PER_VOLUME,
    );
    for p in abnormal.take(5) {
        println!(
            "  slice {} origin {:?} overlap {:.2} of its box",
            p.slice_index, p.origin, p.overlap_fraction
        );
    }
    Ok(())
}
