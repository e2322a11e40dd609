//! Brain masking, patch extraction, and volume-level dataset splits.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ComplexField;
use crate::label::{patch_abnormality, ConditionLabel, Sequence, VolumeClass};
use crate::phantom::BoundingBox;
use crate::rng::substream;

pub const PATCH_SIZE: usize = 96;

/// Minimum fraction of patch pixels that must lie in the brain mask.
pub const MASK_COVERAGE_MIN: f64 = 0.80;

/// Minimum intersection-over-box-area for an abnormal patch.
pub const BOX_OVERLAP_MIN: f64 = 0.25;

/// Patches-per-box proportionality: a box of one patch area yields this
/// many patches (clamped to [4, 20] per box).
pub const K_AREA: f64 = 10.0;

/// Per-volume total patch count bounds.
pub const PATCHES_PER_VOLUME: (usize, usize) = (10, 40);

/// Rejection-sampling attempt cap per patch.
pub const MAX_ATTEMPTS: usize = 200;

/// One extracted 96x96 complex patch with its provenance.
#[derive(Debug, Clone)]
pub struct PatchRecord {
    pub field: ComplexField,
    pub condition: ConditionLabel,
    pub class: VolumeClass,
    pub volume_id: String,
    pub slice_index: usize,
    pub origin: (usize, usize),
    /// Intersection area / box area with the originating box; 0 if none.
    pub overlap_fraction: f64,
}

/// A reconstructed, normalized volume ready for patch extraction.
#[derive(Debug, Clone)]
pub struct PreparedVolume {
    pub slices: Vec<ComplexField>,
    pub sequence: Sequence,
    pub class: VolumeClass,
    pub volume_id: String,
    pub boxes: Vec<BoundingBox>,
}

/// Otsu threshold on magnitude, largest connected component, hole fill.
/// An all-zero slice yields an empty mask.
pub fn brain_mask(slice_mag: &Array2<f64>) -> Array2<bool> {
    let (h, w) = slice_mag.dim();
    let empty = Array2::from_elem((h, w), false);
    let max = slice_mag.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return empty;
    }

    // Otsu on a 256-bin histogram over [0, max].
    const BINS: usize = 256;
    let mut hist = [0usize; BINS];
    for &v in slice_mag.iter() {
        let b = ((v / max * (BINS as f64 - 1.0)).round() as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = (h * w) as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &n)| i as f64 * n as f64).sum();
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    let mut best = (0usize, -1.0f64);
    for t in 0..BINS - 1 {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.1 {
            best = (t, between);
        }
    }
    if best.1 < 0.0 {
        return empty;
    }
    let thresh = best.0 as f64 / (BINS as f64 - 1.0) * max;
    let fg = slice_mag.mapv(|v| v > thresh);
    if !fg.iter().any(|&b| b) {
        return empty;
    }

    // Largest 4-connected component.
    let mut labels = Array2::from_elem((h, w), usize::MAX);
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if fg[(r, c)] && labels[(r, c)] == usize::MAX {
                let id = sizes.len();
                let mut size = 0usize;
                stack.push((r, c));
                labels[(r, c)] = id;
                while let Some((pr, pc)) = stack.pop() {
                    size += 1;
                    let mut visit = |nr: usize, nc: usize, labels: &mut Array2<usize>| {
                        if fg[(nr, nc)] && labels[(nr, nc)] == usize::MAX {
                            labels[(nr, nc)] = id;
                            stack.push((nr, nc));
                        }
                    };
                    if pr > 0 {
                        visit(pr - 1, pc, &mut labels);
                    }
                    if pr + 1 < h {
                        visit(pr + 1, pc, &mut labels);
                    }
                    if pc > 0 {
                        visit(pr, pc - 1, &mut labels);
                    }
                    if pc + 1 < w {
                        visit(pr, pc + 1, &mut labels);
                    }
                }
                sizes.push(size);
            }
        }
    }
    let largest = sizes
        .iter()
        .enumerate()
        .max_by_key(|&(_, &s)| s)
        .map(|(i, _)| i)
        .unwrap();
    let component = Array2::from_shape_fn((h, w), |idx| labels[idx] == largest);

    // Hole fill: background not reachable from the border becomes mask.
    let mut outside = Array2::from_elem((h, w), false);
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for r in 0..h {
        for c in [0, w - 1] {
            if !component[(r, c)] && !outside[(r, c)] {
                outside[(r, c)] = true;
                stack.push((r, c));
            }
        }
    }
    for c in 0..w {
        for r in [0, h - 1] {
            if !component[(r, c)] && !outside[(r, c)] {
                outside[(r, c)] = true;
                stack.push((r, c));
            }
        }
    }
    while let Some((pr, pc)) = stack.pop() {
        let mut visit = |nr: usize, nc: usize, outside: &mut Array2<bool>| {
            if !component[(nr, nc)] && !outside[(nr, nc)] {
                outside[(nr, nc)] = true;
                stack.push((nr, nc));
            }
        };
        if pr > 0 {
            visit(pr - 1, pc, &mut outside);
        }
        if pr + 1 < h {
            visit(pr + 1, pc, &mut outside);
        }
        if pc > 0 {
            visit(pr, pc - 1, &mut outside);
        }
        if pc + 1 < w {
            visit(pr, pc + 1, &mut outside);
        }
    }
    Array2::from_shape_fn((h, w), |idx| !outside[idx])
}

/// Fraction of the `size x size` window at (`row`,`col`) covered by the
/// mask.
pub fn mask_coverage(mask: &Array2<bool>, row: usize, col: usize, size: usize) -> f64 {
    let mut n = 0usize;
    for r in row..row + size {
        for c in col..col + size {
            if mask[(r, c)] {
                n += 1;
            }
        }
    }
    n as f64 / (size * size) as f64
}

fn overlap_with_boxes(boxes: &[&BoundingBox], row: usize, col: usize) -> f64 {
    boxes
        .iter()
        .map(|b| b.intersection(row, col, PATCH_SIZE) as f64 / b.area() as f64)
        .fold(0.0, f64::max)
}

fn make_record(
    vol: &PreparedVolume,
    slice: usize,
    row: usize,
    col: usize,
    overlap: f64,
) -> Result<PatchRecord> {
    let field = vol.slices[slice].crop(row, col, PATCH_SIZE)?;
    let abn = patch_abnormality(vol.class, overlap >= BOX_OVERLAP_MIN);
    Ok(PatchRecord {
        field,
        condition: ConditionLabel::new(vol.sequence, abn),
        class: vol.class,
        volume_id: vol.volume_id.clone(),
        slice_index: slice,
        origin: (row, col),
        overlap_fraction: overlap,
    })
}

/// Per-box patch budget: proportional to box area, clamped to [4, 20].
pub fn patches_per_box(area: usize) -> usize {
    let n = (K_AREA * area as f64 / (PATCH_SIZE * PATCH_SIZE) as f64).round() as usize;
    n.clamp(4, 20)
}

/// Annotation-guided extraction for labeled abnormal volumes: per box,
/// randomly shifted patches overlapping the box by at least 25% of its
/// area, plus an equal number of zero-overlap normal patches from the
/// same volume; per-volume totals clipped to [10, 40].
pub fn extract_labeled_patches(
    vol: &PreparedVolume,
    rng: &mut impl Rng,
) -> Result<Vec<PatchRecord>> {
    let (h, w) = vol.slices[0].dim();
    if h < PATCH_SIZE || w < PATCH_SIZE {
        return Err(Error::invalid("slice smaller than patch"));
    }
    for b in &vol.boxes {
        if b.height > h || b.width > w {
            return Err(Error::invalid(format!(
                "box {}x{} larger than slice {}x{}",
                b.height, b.width, h, w
            )));
        }
    }
    let masks: Vec<Array2<bool>> =
        vol.slices.iter().map(|s| brain_mask(&s.magnitude())).collect();

    let mut abnormal = Vec::new();
    for b in &vol.boxes {
        let slice_boxes: Vec<&BoundingBox> =
            vol.boxes.iter().filter(|x| x.slice == b.slice).collect();
        let n = patches_per_box(b.area());
        // Feasible origin window: any placement that can still touch the box.
        let r_lo = b.row.saturating_sub(PATCH_SIZE - 1);
        let r_hi = (b.row + b.height - 1).min(h - PATCH_SIZE);
        let c_lo = b.col.saturating_sub(PATCH_SIZE - 1);
        let c_hi = (b.col + b.width - 1).min(w - PATCH_SIZE);
        for i in 0..n {
            let mut placed = false;
            for _ in 0..MAX_ATTEMPTS {
                let row = rng.gen_range(r_lo..=r_hi);
                let col = rng.gen_range(c_lo..=c_hi);
                let ov = b.intersection(row, col, PATCH_SIZE) as f64 / b.area() as f64;
                if ov >= BOX_OVERLAP_MIN
                    && mask_coverage(&masks[b.slice], row, col, PATCH_SIZE)
                        >= MASK_COVERAGE_MIN
                {
                    let full_ov = overlap_with_boxes(&slice_boxes, row, col);
                    abnormal.push(make_record(vol, b.slice, row, col, full_ov)?);
                    placed = true;
                    break;
                }
            }
            if !placed {
                log::warn!(
                    "{}: no valid placement for box patch {}/{} after {} attempts",
                    vol.volume_id,
                    i + 1,
                    n,
                    MAX_ATTEMPTS
                );
            }
        }
    }

    // Matching normal patches: zero overlap with every box on their slice.
    let mut normal = sample_clear_patches(vol, &masks, abnormal.len(), rng);

    let (lo, hi) = PATCHES_PER_VOLUME;
    let mut total = abnormal.len() + normal.len();
    if total < lo {
        let extra = sample_clear_patches(vol, &masks, lo - total, rng);
        normal.extend(extra);
        total = abnormal.len() + normal.len();
        if total < lo {
            log::warn!("{}: only {} patches extracted (< {})", vol.volume_id, total, lo);
        }
    }
    let mut out = abnormal;
    out.extend(normal);
    out.truncate(hi);
    Ok(out)
}

fn sample_clear_patches(
    vol: &PreparedVolume,
    masks: &[Array2<bool>],
    n: usize,
    rng: &mut impl Rng,
) -> Vec<PatchRecord> {
    let (h, w) = vol.slices[0].dim();
    let usable: Vec<usize> =
        (0..vol.slices.len()).filter(|&z| masks[z].iter().any(|&b| b)).collect();
    let mut out = Vec::new();
    if usable.is_empty() {
        if n > 0 {
            log::warn!("{}: no brain-containing slices", vol.volume_id);
        }
        return out;
    }
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let z = usable[rng.gen_range(0..usable.len())];
            let row = rng.gen_range(0..=h - PATCH_SIZE);
            let col = rng.gen_range(0..=w - PATCH_SIZE);
            let slice_boxes: Vec<&BoundingBox> =
                vol.boxes.iter().filter(|b| b.slice == z).collect();
            if mask_coverage(&masks[z], row, col, PATCH_SIZE) >= MASK_COVERAGE_MIN
                && slice_boxes.iter().all(|b| b.intersection(row, col, PATCH_SIZE) == 0)
            {
                // Unwrap is fine: the window was bounds-checked above.
                out.push(make_record(vol, z, row, col, 0.0).unwrap());
                placed = true;
                break;
            }
        }
        if !placed {
            log::warn!("{}: clear-patch placement failed", vol.volume_id);
            break;
        }
    }
    out
}

/// Random extraction for normal and unlabeled volumes: `n` patches at
/// random positions across brain-containing slices, all satisfying the
/// mask-coverage rule.
pub fn extract_random_patches(
    vol: &PreparedVolume,
    rng: &mut impl Rng,
    n: usize,
) -> Result<Vec<PatchRecord>> {
    let (lo, hi) = PATCHES_PER_VOLUME;
    if !(lo..=hi).contains(&n) {
        return Err(Error::invalid(format!("n = {n} outside [{lo}, {hi}]")));
    }
    let masks: Vec<Array2<bool>> =
        vol.slices.iter().map(|s| brain_mask(&s.magnitude())).collect();
    Ok(sample_clear_patches(vol, &masks, n, rng))
}

/// Grid origins along one 320-pixel axis: stride 75, last origin clamped
/// to 224 so the 96-pixel window stays in bounds.
pub const GRID_ORIGINS: [usize; 4] = [0, 75, 150, 224];

/// Of the 4x4 grid cells, the retained center cells (1,1),(1,2),(2,1),(2,2).
pub const RETAINED_ORIGINS: [(usize, usize); 4] = [(75, 75), (75, 150), (150, 75), (150, 150)];

/// Grid patching for external-style 320x320 slices: the four center
/// cells of the 4x4 stride-75 grid, each inheriting the volume-level
/// label.
pub fn extract_grid_patches(
    slice: &ComplexField,
    sequence: Sequence,
    class: VolumeClass,
    volume_id: &str,
    slice_index: usize,
) -> Result<Vec<PatchRecord>> {
    if slice.dim() != (320, 320) {
        return Err(Error::shape(format!("grid patching expects 320x320, got {:?}", slice.dim())));
    }
    let abn = patch_abnormality(class, class == VolumeClass::Abnormal);
    RETAINED_ORIGINS
        .iter()
        .map(|&(row, col)| {
            Ok(PatchRecord {
                field: slice.crop(row, col, PATCH_SIZE)?,
                condition: ConditionLabel::new(sequence, abn),
                class,
                volume_id: volume_id.to_string(),
                slice_index,
                origin: (row, col),
                overlap_fraction: 0.0,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }
}

/// Volume-level split assignment; every patch inherits its volume's
/// split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub assignment: BTreeMap<String, Split>,
    pub labeled_ratios: (f64, f64, f64),
    pub unlabeled_ratios: (f64, f64, f64),
    pub seed: u64,
}

impl SplitManifest {
    pub fn split_of(&self, volume_id: &str) -> Option<Split> {
        self.assignment.get(volume_id).copied()
    }
}

/// Stratified volume-level split: labeled classes 70/15/15, unlabeled
/// 95/2.5/2.5, deterministic given the seed. Validation and test get at
/// least one volume per stratum.
pub fn split_volumes(
    volume_labels: &[(String, Sequence, VolumeClass)],
    seed: u64,
) -> Result<SplitManifest> {
    for class in [VolumeClass::Normal, VolumeClass::Abnormal] {
        let n = volume_labels.iter().filter(|(_, _, c)| *c == class).count();
        if n < 3 {
            return Err(Error::invalid(format!(
                "need at least 3 {} volumes, have {n}",
                class.name()
            )));
        }
    }
    let mut strata: BTreeMap<(Sequence, VolumeClass), Vec<&String>> = BTreeMap::new();
    for (id, seq, class) in volume_labels {
        strata.entry((*seq, *class)).or_default().push(id);
    }
    let mut assignment = BTreeMap::new();
    for ((seq, class), mut ids) in strata {
        ids.sort();
        let mut rng = substream(seed, &format!("split/{}/{}", seq.name(), class.name()));
        ids.shuffle(&mut rng);
        let n = ids.len();
        let frac = if class.is_labeled() { 0.15 } else { 0.025 };
        let n_val = ((frac * n as f64).round() as usize).max(1).min(n.saturating_sub(2));
        let n_test = n_val.min(n.saturating_sub(n_val + 1));
        for (i, id) in ids.into_iter().enumerate() {
            let split = if i < n_val {
                Split::Validation
            } else if i < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
            assignment.insert(id.clone(), split);
        }
    }
    Ok(SplitManifest {
        assignment,
        labeled_ratios: (0.70, 0.15, 0.15),
        unlabeled_ratios: (0.95, 0.025, 0.025),
        seed,
    })
}
