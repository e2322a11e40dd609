//! Deterministic multi-coil brain phantom volumes.
//!
//! Stands in for scanner data: nested-ellipse anatomy with
//! sequence-dependent contrasts, a smooth polynomial phase map, optional
//! lesions perturbing both magnitude and phase, smooth complex coil
//! sensitivities, and complex Gaussian k-space noise. Every volume is a
//! pure function of `(seed, sequence, class, volume_index)`.

use ndarray::{Array2, Array4};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::field::ComplexField;
use crate::ingest::{fft2c, KSpaceStack};
use crate::label::{Sequence, VolumeClass};
use crate::rng::substream;

/// Lesion shape and contrast parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LesionParams {
    /// Radius range in pixels; kept within [4, 40] so a lesion fits a
    /// 96x96 patch.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Additive magnitude contrast at the lesion core.
    pub mag_delta: f64,
    /// Phase dip amplitude at the lesion core, in radians.
    pub phase_dip: f64,
}

impl Default for LesionParams {
    fn default() -> Self {
        LesionParams { radius_min: 9.0, radius_max: 18.0, mag_delta: 0.3, phase_dip: 0.6 }
    }
}

/// Full phantom dataset description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub seed: u64,
    /// Volumes per (labeled sequence, normal/abnormal) cell.
    pub labeled_volumes_per_cell: usize,
    /// Volumes per unlabeled sequence.
    pub unlabeled_volumes_per_cell: usize,
    pub slice_shape: (usize, usize),
    pub slices_per_volume: usize,
    pub coils: usize,
    pub snr_db: f64,
    pub lesion: LesionParams,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            labeled_volumes_per_cell: 24,
            unlabeled_volumes_per_cell: 28,
            slice_shape: (320, 320),
            slices_per_volume: 6,
            coils: 4,
            snr_db: 30.0,
            lesion: LesionParams::default(),
        }
    }
}

impl PhantomSpec {
    /// Enumerates every (sequence, class, volume_index) cell of the
    /// dataset. Labeled classes exist only for labeled sequences;
    /// unlabeled sequences are generated exclusively as unlabeled.
    pub fn cells(&self) -> Vec<(Sequence, VolumeClass, usize)> {
        let mut out = Vec::new();
        for seq in Sequence::LABELED {
            for class in [VolumeClass::Normal, VolumeClass::Abnormal] {
                for i in 0..self.labeled_volumes_per_cell {
                    out.push((seq, class, i));
                }
            }
        }
        for seq in Sequence::UNLABELED {
            for i in 0..self.unlabeled_volumes_per_cell {
                out.push((seq, VolumeClass::Unlabeled, i));
            }
        }
        out
    }
}

/// Axis-aligned bounding box on one slice; `row`/`col` is the top-left
/// corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub slice: usize,
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl BoundingBox {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    /// Intersection area with the patch window at (`prow`,`pcol`) of
    /// side `size`.
    pub fn intersection(&self, prow: usize, pcol: usize, size: usize) -> usize {
        let r0 = self.row.max(prow);
        let c0 = self.col.max(pcol);
        let r1 = (self.row + self.height).min(prow + size);
        let c1 = (self.col + self.width).min(pcol + size);
        r1.saturating_sub(r0) * c1.saturating_sub(c0)
    }
}

/// Axis-aligned ellipse, row/col center and semi-axes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Ellipse {
    pub cr: f64,
    pub cc: f64,
    pub ar: f64,
    pub ac: f64,
}

impl Ellipse {
    /// Normalized elliptic radius; <= 1 inside.
    pub fn rho(&self, r: f64, c: f64) -> f64 {
        let dr = (r - self.cr) / self.ar;
        let dc = (c - self.cc) / self.ac;
        (dr * dr + dc * dc).sqrt()
    }

    pub fn contains(&self, r: f64, c: f64) -> bool {
        self.rho(r, c) <= 1.0
    }
}

/// One generated phantom volume with its ground truth and annotations.
#[derive(Debug, Clone)]
pub struct PhantomVolume {
    pub stack: KSpaceStack,
    pub class: VolumeClass,
    pub boxes: Vec<BoundingBox>,
    /// Clean combined object per slice, before coil weighting and noise.
    pub ground_truth: Vec<ComplexField>,
    /// Brain ellipse per slice.
    pub brain: Vec<Ellipse>,
}

struct SequenceProfile {
    csf: f64,
    gm: f64,
    wm: f64,
    skull: f64,
}

fn profile(seq: Sequence) -> SequenceProfile {
    match seq {
        Sequence::Flair => SequenceProfile { csf: 0.12, gm: 0.58, wm: 0.45, skull: 0.25 },
        Sequence::T1 => SequenceProfile { csf: 0.18, gm: 0.50, wm: 0.68, skull: 0.32 },
        Sequence::T1Post => SequenceProfile { csf: 0.20, gm: 0.55, wm: 0.70, skull: 0.35 },
        Sequence::T1Pre => SequenceProfile { csf: 0.18, gm: 0.48, wm: 0.64, skull: 0.30 },
        Sequence::T2 => SequenceProfile { csf: 0.88, gm: 0.60, wm: 0.40, skull: 0.22 },
    }
}

struct Lesion {
    slice: usize,
    cr: f64,
    cc: f64,
    radius: f64,
}

impl Lesion {
    /// Plateau-with-cosine-falloff bump, exactly zero outside `radius`.
    fn bump(&self, r: f64, c: f64) -> f64 {
        let d = ((r - self.cr).powi(2) + (c - self.cc).powi(2)).sqrt();
        let plateau = 0.8 * self.radius;
        if d <= plateau {
            1.0
        } else if d < self.radius {
            0.5 * (1.0 + (std::f64::consts::PI * (d - plateau) / (self.radius - plateau)).cos())
        } else {
            0.0
        }
    }
}

pub fn volume_id(seq: Sequence, class: VolumeClass, index: usize) -> String {
    format!("{}-{}-{:03}", seq.name(), class.name(), index)
}

/// Generates one volume. Identical arguments produce bit-identical
/// output.
pub fn generate_volume(
    spec: &PhantomSpec,
    seq: Sequence,
    class: VolumeClass,
    index: usize,
) -> PhantomVolume {
    let vid = volume_id(seq, class, index);
    let mut rng = substream(spec.seed, &format!("phantom/{vid}"));
    let (h, w) = spec.slice_shape;
    let (hc, wc) = (h as f64 / 2.0, w as f64 / 2.0);
    let prof = profile(seq);
    let n_slices = spec.slices_per_volume;

    // Per-volume anatomy jitter.
    let jr: f64 = rng.gen_range(-6.0..6.0);
    let jc: f64 = rng.gen_range(-6.0..6.0);
    let axis_scale: f64 = rng.gen_range(0.92..1.04);
    let intensity_jitter: f64 = rng.gen_range(0.96..1.04);

    // Smooth polynomial phase in normalized coordinates. Coefficients
    // are kept small so the within-brain phase spread stays well under
    // the coil-combination coherence budget.
    let a0: f64 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let coef: [f64; 5] = std::array::from_fn(|_| rng.gen_range(-0.09..0.09));

    // Internal structures shared across slices.
    let n_structs = rng.gen_range(2..=3);
    let structures: Vec<(Ellipse, f64)> = (0..n_structs)
        .map(|_| {
            let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let rad: f64 = rng.gen_range(0.0..0.55);
            let e = Ellipse {
                cr: hc + jr + rad * 100.0 * ang.sin(),
                cc: wc + jc + rad * 85.0 * ang.cos(),
                ar: rng.gen_range(9.0..24.0),
                ac: rng.gen_range(9.0..24.0),
            };
            let level = if rng.gen_bool(0.5) { prof.gm } else { prof.csf };
            (e, level * rng.gen_range(0.9..1.1))
        })
        .collect();

    // Lesions (abnormal volumes only).
    let lesions: Vec<Lesion> = if class == VolumeClass::Abnormal {
        let n = rng.gen_range(1..=3usize);
        (0..n)
            .map(|_| {
                let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let rad: f64 = rng.gen_range(0.0..0.5);
                Lesion {
                    slice: rng.gen_range(0..n_slices),
                    cr: hc + jr + rad * 95.0 * ang.sin(),
                    cc: wc + jc + rad * 80.0 * ang.cos(),
                    radius: rng.gen_range(spec.lesion.radius_min..=spec.lesion.radius_max),
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    let boxes: Vec<BoundingBox> = lesions
        .iter()
        .map(|l| {
            let r0 = (l.cr - l.radius).floor().max(0.0) as usize;
            let c0 = (l.cc - l.radius).floor().max(0.0) as usize;
            let r1 = ((l.cr + l.radius).ceil() as usize).min(h - 1);
            let c1 = ((l.cc + l.radius).ceil() as usize).min(w - 1);
            BoundingBox { slice: l.slice, row: r0, col: c0, height: r1 - r0 + 1, width: c1 - c0 + 1 }
        })
        .collect();

    // Coil sensitivities: lobes around the head whose squared
    // magnitudes are normalized to sum to one, plus a smooth per-coil
    // phase ramp.
    let coil_fields: Vec<Array2<Complex64>> = {
        let lobes: Vec<(f64, f64, f64, f64, f64)> = (0..spec.coils)
            .map(|c| {
                let ang = std::f64::consts::TAU * c as f64 / spec.coils as f64
                    + rng.gen_range(-0.2..0.2);
                let lr = hc + 0.95 * hc * ang.sin();
                let lc = wc + 0.95 * wc * ang.cos();
                let sigma: f64 = rng.gen_range(150.0..190.0);
                let pr: f64 = rng.gen_range(-0.3..0.3); // phase ramp coefficients
                let pc: f64 = rng.gen_range(-0.3..0.3);
                (lr, lc, sigma, pr, pc)
            })
            .collect();
        // One Gaussian profile per lobe; the normalizer is the sum of
        // their squares, so nothing needs re-evaluating per coil pair.
        let gauss: Vec<Array2<f64>> = lobes
            .iter()
            .map(|&(lr, lc, sigma, _, _)| {
                Array2::from_shape_fn((h, w), |(r, cc_)| {
                    (-((r as f64 - lr).powi(2) + (cc_ as f64 - lc).powi(2))
                        / (2.0 * sigma * sigma))
                        .exp()
                })
            })
            .collect();
        let mut total = Array2::zeros((h, w));
        for g in &gauss {
            total += &g.mapv(|v| v * v);
        }
        (0..spec.coils)
            .map(|c| {
                let (_, _, _, pr, pc) = lobes[c];
                Array2::from_shape_fn((h, w), |(r, cc_)| {
                    let mag = gauss[c][(r, cc_)] / total[(r, cc_)].sqrt();
                    let u = (r as f64 - hc) / hc;
                    let v = (cc_ as f64 - wc) / wc;
                    Complex64::from_polar(mag, pr * u + pc * v + 0.4 * c as f64)
                })
            })
            .collect()
    };

    let mut ground_truth = Vec::with_capacity(n_slices);
    let mut brain = Vec::with_capacity(n_slices);
    let mut kdata = Array4::zeros((spec.coils, n_slices, h, w));

    for z in 0..n_slices {
        // Head shrinks toward the top and bottom of the stack.
        let zn = (z as f64 - (n_slices as f64 - 1.0) / 2.0) / (n_slices as f64 / 2.0 + 1.0);
        let shape = (1.0 - zn * zn).sqrt().max(0.8);
        let skull_outer = Ellipse {
            cr: hc + jr,
            cc: wc + jc,
            ar: 132.0 * axis_scale * shape,
            ac: 108.0 * axis_scale * shape,
        };
        let brain_e = Ellipse {
            cr: skull_outer.cr,
            cc: skull_outer.cc,
            ar: skull_outer.ar - 12.0,
            ac: skull_outer.ac - 12.0,
        };
        let vent_l = Ellipse {
            cr: brain_e.cr,
            cc: brain_e.cc - 22.0,
            ar: 28.0 * shape,
            ac: 12.0 * shape,
        };
        let vent_r = Ellipse { cc: brain_e.cc + 22.0, ..vent_l };

        let object = ComplexField::from_fn(h, w, |r, c| {
            let (rf, cf) = (r as f64, c as f64);
            let mut mag = 0.0;
            if skull_outer.contains(rf, cf) {
                mag = prof.skull;
            }
            if brain_e.contains(rf, cf) {
                let rho = brain_e.rho(rf, cf);
                mag = if rho > 0.82 { prof.gm } else { prof.wm };
                for (e, level) in &structures {
                    if e.contains(rf, cf) {
                        mag = *level;
                    }
                }
                if vent_l.contains(rf, cf) || vent_r.contains(rf, cf) {
                    mag = prof.csf;
                }
            }
            mag *= intensity_jitter;
            let u = (rf - hc) / hc;
            let v = (cf - wc) / wc;
            let mut phase =
                a0 + coef[0] * u + coef[1] * v + coef[2] * u * u + coef[3] * u * v + coef[4] * v * v;
            for l in &lesions {
                if l.slice == z {
                    let b = l.bump(rf, cf);
                    mag += spec.lesion.mag_delta * b;
                    phase -= spec.lesion.phase_dip * b;
                }
            }
            if mag == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::from_polar(mag.min(1.0), phase)
            }
        });

        // Weight by coil sensitivities, transform, and add noise.
        let mut noise_rng = substream(spec.seed, &format!("phantom/{vid}/noise/{z}"));
        for c in 0..spec.coils {
            let weighted = ComplexField::new(object.data() * &coil_fields[c]);
            let mut k = fft2c(&weighted);
            let rms =
                (k.iter().map(|x| x.norm_sqr()).sum::<f64>() / (h * w) as f64).sqrt();
            let sigma = rms * 10f64.powf(-spec.snr_db / 20.0) / 2f64.sqrt();
            for x in k.iter_mut() {
                let nr: f64 = rand_distr::Distribution::sample(
                    &rand_distr::StandardNormal,
                    &mut noise_rng,
                );
                let ni: f64 = rand_distr::Distribution::sample(
                    &rand_distr::StandardNormal,
                    &mut noise_rng,
                );
                *x += Complex64::new(nr * sigma, ni * sigma);
            }
            kdata.slice_mut(ndarray::s![c, z, .., ..]).assign(&k);
        }

        ground_truth.push(object);
        brain.push(brain_e);
    }

    PhantomVolume {
        stack: KSpaceStack { data: kdata, sequence: seq, volume_id: vid },
        class,
        boxes,
        ground_truth,
        brain,
    }
}
