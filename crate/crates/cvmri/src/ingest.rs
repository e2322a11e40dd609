//! From raw multi-coil k-space to normalized complex slices.
//!
//! Covers the centered orthonormal Fourier transforms, k-space spatial
//! standardization, a simplified low-pass coil-sensitivity estimator
//! (stand-in for full ESPIRiT eigen-analysis), matched-filter coil
//! combination, and slice-wise magnitude normalization.

use std::cell::RefCell;

use ndarray::{s, Array2, Array4};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::field::ComplexField;
use crate::label::Sequence;

/// Size of the central k-space calibration window used by the
/// sensitivity estimator.
pub const CALIB_SIZE: usize = 24;

/// Support threshold on the combined low-pass magnitude; pixels below it
/// get zero sensitivity.
pub const SUPPORT_EPS: f64 = 1e-8;

/// Multi-coil k-space volume with acquisition metadata, laid out as
/// (coils, slices, H, W).
#[derive(Debug, Clone)]
pub struct KSpaceStack {
    pub data: Array4<Complex64>,
    pub sequence: Sequence,
    pub volume_id: String,
}

impl KSpaceStack {
    pub fn coils(&self) -> usize {
        self.data.dim().0
    }

    pub fn slices(&self) -> usize {
        self.data.dim().1
    }

    pub fn slice_shape(&self) -> (usize, usize) {
        let (_, _, h, w) = self.data.dim();
        (h, w)
    }

    pub fn coil_slice(&self, coil: usize, slice: usize) -> Array2<Complex64> {
        self.data.slice(s![coil, slice, .., ..]).to_owned()
    }
}

/// Unit-norm coil combination weights, (coils, H, W).
#[derive(Debug, Clone)]
pub struct SensitivityMaps {
    pub maps: Vec<Array2<Complex64>>,
}

/// Cyclic roll of both axes by (`sr`, `sc`) as four block copies.
fn roll2(a: &Array2<Complex64>, sr: usize, sc: usize) -> Array2<Complex64> {
    let (h, w) = a.dim();
    if h == 0 || w == 0 {
        return a.clone();
    }
    let (sr, sc) = (sr % h, sc % w);
    let mut out = Array2::zeros((h, w));
    for (src_r, dst_r, len_r) in [(0, sr, h - sr), (h - sr, 0, sr)] {
        for (src_c, dst_c, len_c) in [(0, sc, w - sc), (w - sc, 0, sc)] {
            if len_r == 0 || len_c == 0 {
                continue;
            }
            out.slice_mut(s![dst_r..dst_r + len_r, dst_c..dst_c + len_c])
                .assign(&a.slice(s![src_r..src_r + len_r, src_c..src_c + len_c]));
        }
    }
    out
}

/// fftshift: moves the zero-frequency sample from index 0 to
/// `floor(n/2)` on both axes.
pub fn fftshift(a: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = a.dim();
    roll2(a, h / 2, w / 2)
}

/// Inverse of [`fftshift`] (differs from it only for odd axis lengths).
pub fn ifftshift(a: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = a.dim();
    roll2(a, h - h / 2, w - w / 2)
}

thread_local! {
    // Plans cache their twiddle factors; rebuilding them per transform
    // dominates the runtime of repeated same-size FFTs.
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft2_inplace(a: &mut Array2<Complex64>, inverse: bool) {
    let (h, w) = a.dim();
    PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        let fft_w =
            if inverse { planner.plan_fft_inverse(w) } else { planner.plan_fft_forward(w) };
        let fft_h =
            if inverse { planner.plan_fft_inverse(h) } else { planner.plan_fft_forward(h) };
        let mut scratch = vec![
            Complex64::default();
            fft_w.get_inplace_scratch_len().max(fft_h.get_inplace_scratch_len())
        ];
        // All-zero lines keep their transform at zero; skipping them
        // makes sparse inputs (e.g. the masked calibration region)
        // cheap while costing dense inputs one comparison per line.
        let zero = Complex64::new(0.0, 0.0);
        for mut row in a.rows_mut() {
            let s = row.as_slice_mut().expect("contiguous row");
            if s.iter().any(|z| *z != zero) {
                fft_w.process_with_scratch(s, &mut scratch);
            }
        }
        // Columns via transpose so each 1-D transform runs on
        // contiguous memory.
        let mut t = a.t().as_standard_layout().into_owned();
        for mut row in t.rows_mut() {
            let s = row.as_slice_mut().expect("contiguous row");
            if s.iter().any(|z| *z != zero) {
                fft_h.process_with_scratch(s, &mut scratch);
            }
        }
        *a = t.t().as_standard_layout().into_owned();
    });
    // Orthonormal scaling so both directions preserve the L2 norm.
    let scale = 1.0 / ((h * w) as f64).sqrt();
    a.mapv_inplace(|z| z * scale);
}

/// Centered orthonormal 2-D inverse DFT: shift, inverse transform,
/// shift back. Preserves the L2 norm.
pub fn ift2c(k: &Array2<Complex64>) -> ComplexField {
    let mut a = ifftshift(k);
    fft2_inplace(&mut a, true);
    ComplexField::new(fftshift(&a))
}

/// Centered orthonormal 2-D forward DFT, the inverse of [`ift2c`].
pub fn fft2c(img: &ComplexField) -> Array2<Complex64> {
    let mut a = ifftshift(img.data());
    fft2_inplace(&mut a, false);
    fftshift(&a)
}

/// Resizes k-space to `target x target`: shorter axes are zero-filled
/// symmetrically around the center, longer axes keep the centered
/// window. The center sample always maps to the center.
pub fn resize_kspace(k: &Array2<Complex64>, target: usize) -> Array2<Complex64> {
    let (h, w) = k.dim();
    let mut out = Array2::zeros((target, target));
    let copy_h = h.min(target);
    let copy_w = w.min(target);
    let src_r = if h > target { h / 2 - target / 2 } else { 0 };
    let src_c = if w > target { w / 2 - target / 2 } else { 0 };
    let dst_r = if h < target { target / 2 - h / 2 } else { 0 };
    let dst_c = if w < target { target / 2 - w / 2 } else { 0 };
    out.slice_mut(s![dst_r..dst_r + copy_h, dst_c..dst_c + copy_w])
        .assign(&k.slice(s![src_r..src_r + copy_h, src_c..src_c + copy_w]));
    out
}

/// Estimates coil sensitivities from coil images by retaining the
/// central `CALIB_SIZE` k-space calibration region of each coil and
/// normalizing to unit combined magnitude on the support.
pub fn estimate_sensitivities(coil_imgs: &[ComplexField]) -> Result<SensitivityMaps> {
    let coil_ks: Vec<Array2<Complex64>> = coil_imgs.iter().map(fft2c).collect();
    estimate_sensitivities_from_kspace(&coil_ks)
}

/// [`estimate_sensitivities`] starting from per-coil k-space, skipping
/// the forward transform when the raw data is already at hand.
pub fn estimate_sensitivities_from_kspace(
    coil_ks: &[Array2<Complex64>],
) -> Result<SensitivityMaps> {
    if coil_ks.is_empty() {
        return Err(Error::invalid("need at least one coil image"));
    }
    let dim = coil_ks[0].dim();
    let lowpass: Vec<Array2<Complex64>> = coil_ks
        .iter()
        .map(|k| {
            let (h, w) = k.dim();
            let ch = CALIB_SIZE.min(h);
            let cw = CALIB_SIZE.min(w);
            let mut masked = Array2::zeros((h, w));
            let r0 = h / 2 - ch / 2;
            let c0 = w / 2 - cw / 2;
            masked
                .slice_mut(s![r0..r0 + ch, c0..c0 + cw])
                .assign(&k.slice(s![r0..r0 + ch, c0..c0 + cw]));
            ift2c(&masked).into_data()
        })
        .collect();
    let mut combined = Array2::<f64>::zeros(dim);
    for lp in &lowpass {
        ndarray::Zip::from(&mut combined).and(lp).for_each(|c, z| *c += z.norm_sqr());
    }
    combined.mapv_inplace(f64::sqrt);
    if combined.iter().all(|&m| m < SUPPORT_EPS) {
        return Err(Error::NoSignalSupport);
    }
    let maps = lowpass
        .iter()
        .map(|lp| {
            let mut map = lp.clone();
            ndarray::Zip::from(&mut map).and(&combined).for_each(|z, &m| {
                *z = if m < SUPPORT_EPS { Complex64::new(0.0, 0.0) } else { *z / m };
            });
            map
        })
        .collect();
    Ok(SensitivityMaps { maps })
}

/// Matched-filter combination `sum_c map_c^* coil_c`.
pub fn coil_combine(coil_imgs: &[ComplexField], maps: &SensitivityMaps) -> Result<ComplexField> {
    if coil_imgs.len() != maps.maps.len() {
        return Err(Error::shape(format!(
            "{} coil images vs {} maps",
            coil_imgs.len(),
            maps.maps.len()
        )));
    }
    let dim = coil_imgs[0].dim();
    let mut out = Array2::zeros(dim);
    for (img, map) in coil_imgs.iter().zip(&maps.maps) {
        if img.dim() != dim || map.dim() != dim {
            return Err(Error::shape("coil image / map shape mismatch"));
        }
        for (o, (z, m)) in out.iter_mut().zip(img.data().iter().zip(map.iter())) {
            *o += m.conj() * z;
        }
    }
    Ok(ComplexField::new(out))
}

/// Divides both channels by the slice's maximum magnitude and returns
/// that maximum. Phase is unchanged; an all-zero slice passes through
/// with scale 0.
pub fn normalize_slice(f: &ComplexField) -> (ComplexField, f64) {
    let max = f.max_magnitude();
    if max == 0.0 {
        (f.clone(), 0.0)
    } else {
        (f.scale(1.0 / max), max)
    }
}

/// Full per-slice reconstruction: inverse-transform every coil,
/// estimate sensitivities, combine, normalize.
pub fn reconstruct_slice(stack: &KSpaceStack, slice: usize) -> Result<(ComplexField, f64)> {
    let coil_ks: Vec<Array2<Complex64>> =
        (0..stack.coils()).map(|c| stack.coil_slice(c, slice)).collect();
    let coil_imgs: Vec<ComplexField> = coil_ks.iter().map(ift2c).collect();
    let maps = estimate_sensitivities_from_kspace(&coil_ks)?;
    let combined = coil_combine(&coil_imgs, &maps)?;
    Ok(normalize_slice(&combined))
}
