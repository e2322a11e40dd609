//! Reconstruction and classification metrics.
//!
//! Phase coherence, SSIM, and PSNR assess autoencoder reconstructions;
//! AUROC scores every classifier experiment in the pipeline.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::field::ComplexField;

/// Converts to the (magnitude, phase) representation. Zero-magnitude
/// pixels yield phase 0 by the atan2 convention.
pub fn to_mag_phase(f: &ComplexField) -> (Array2<f64>, Array2<f64>) {
    (f.magnitude(), f.phase())
}

/// Inverse of [`to_mag_phase`].
pub fn to_reim(mag: &Array2<f64>, phase: &Array2<f64>) -> Result<ComplexField> {
    if mag.dim() != phase.dim() {
        return Err(Error::shape(format!("mag {:?} vs phase {:?}", mag.dim(), phase.dim())));
    }
    Ok(ComplexField::new(Array2::from_shape_fn(mag.dim(), |idx| {
        Complex64::from_polar(mag[idx], phase[idx])
    })))
}

/// Phase coherence between prediction and target,
/// `|sum_i pred_i^* target_i| / (||pred|| ||target||)`.
///
/// The conjugate product at each location contributes a vector whose
/// angle is the local phase difference; near-zero magnitudes are
/// naturally down-weighted and a global phase offset on either argument
/// leaves the value unchanged.
pub fn phase_coherence(pred: &ComplexField, target: &ComplexField) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(format!("pred {:?} vs target {:?}", pred.dim(), target.dim())));
    }
    let inner: Complex64 = pred
        .data()
        .iter()
        .zip(target.data().iter())
        .map(|(p, t)| p.conj() * t)
        .sum();
    let denom = pred.l2_norm() * target.l2_norm();
    if denom == 0.0 {
        return Err(Error::UndefinedCoherence);
    }
    Ok(inner.norm() / denom)
}

/// PSNR in dB against a fixed peak of 1.0 (slice magnitudes are
/// normalized to [0, 1]). Identical inputs return `f64::INFINITY`.
pub fn psnr(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(format!("pred {:?} vs target {:?}", pred.dim(), target.dim())));
    }
    let n = pred.len() as f64;
    let mse: f64 = pred
        .iter()
        .zip(target.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Windowed SSIM on data range 1.0: uniform 7x7 windows at every valid
/// position, stabilizers C1 = 0.01^2 and C2 = 0.03^2, mean over windows.
pub fn ssim(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(format!("pred {:?} vs target {:?}", pred.dim(), target.dim())));
    }
    let (h, w) = pred.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "image {}x{} smaller than SSIM window {}",
            h, w, SSIM_WINDOW
        )));
    }
    let win = SSIM_WINDOW;
    let wn = (win * win) as f64;
    let mut acc = 0.0;
    let mut count = 0usize;
    for r in 0..=(h - win) {
        for c in 0..=(w - win) {
            let mut sx = 0.0;
            let mut sy = 0.0;
            let mut sxx = 0.0;
            let mut syy = 0.0;
            let mut sxy = 0.0;
            for i in r..r + win {
                for j in c..c + win {
                    let x = pred[(i, j)];
                    let y = target[(i, j)];
                    sx += x;
                    sy += y;
                    sxx += x * x;
                    syy += y * y;
                    sxy += x * y;
                }
            }
            let mx = sx / wn;
            let my = sy / wn;
            let vx = (sxx / wn - mx * mx).max(0.0);
            let vy = (syy / wn - my * my).max(0.0);
            let cov = sxy / wn - mx * my;
            let s = ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            acc += s;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// AUROC in the Mann-Whitney form: the probability that a random
/// positive outscores a random negative, with ties counted as 0.5.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    // Rank-sum with midranks for ties.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the midrank
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Mean and sample standard deviation of a slice (std is 0 for n < 2).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
