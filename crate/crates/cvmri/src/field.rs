//! Two-channel complex image representation.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// An H x W complex-valued image carried as paired real/imaginary
/// channels. The universal representation for slices, patches, and
/// latent fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    data: Array2<Complex64>,
}

impl ComplexField {
    pub fn new(data: Array2<Complex64>) -> Self {
        ComplexField { data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ComplexField { data: Array2::zeros((height, width)) }
    }

    /// Builds a field from separate real and imaginary channels.
    pub fn from_parts(re: &Array2<f64>, im: &Array2<f64>) -> Result<Self> {
        if re.dim() != im.dim() {
            return Err(Error::shape(format!(
                "re {:?} vs im {:?}",
                re.dim(),
                im.dim()
            )));
        }
        let data = Array2::from_shape_fn(re.dim(), |idx| Complex64::new(re[idx], im[idx]));
        Ok(ComplexField { data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        ComplexField { data: Array2::from_shape_fn((height, width), |(r, c)| f(r, c)) }
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array2<Complex64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<Complex64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array2<Complex64> {
        self.data
    }

    pub fn re(&self) -> Array2<f64> {
        self.data.mapv(|z| z.re)
    }

    pub fn im(&self) -> Array2<f64> {
        self.data.mapv(|z| z.im)
    }

    pub fn magnitude(&self) -> Array2<f64> {
        self.data.mapv(|z| z.norm())
    }

    /// Phase in [-pi, pi]; zero-magnitude pixels yield 0 by the atan2
    /// convention.
    pub fn phase(&self) -> Array2<f64> {
        self.data.mapv(|z| z.im.atan2(z.re))
    }

    pub fn max_magnitude(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn scale(&self, s: f64) -> Self {
        ComplexField { data: self.data.mapv(|z| z * s) }
    }

    /// Multiplies by a global unit-phase factor e^{i phi}.
    pub fn rotate_phase(&self, phi: f64) -> Self {
        let w = Complex64::from_polar(1.0, phi);
        ComplexField { data: self.data.mapv(|z| z * w) }
    }

    /// Extracts the `size x size` window with top-left corner at
    /// (`row`, `col`).
    pub fn crop(&self, row: usize, col: usize, size: usize) -> Result<Self> {
        if row + size > self.height() || col + size > self.width() {
            return Err(Error::invalid(format!(
                "crop {}x{} at ({},{}) exceeds {:?}",
                size,
                size,
                row,
                col,
                self.dim()
            )));
        }
        let view = self.data.slice(ndarray::s![row..row + size, col..col + size]);
        Ok(ComplexField { data: view.to_owned() })
    }

    /// Flattens to channel-major `[re..., im...]` f32 samples, the patch
    /// archive record layout.
    pub fn to_channels_f32(&self) -> Vec<f32> {
        let n = self.height() * self.width();
        let mut out = Vec::with_capacity(2 * n);
        out.extend(self.data.iter().map(|z| z.re as f32));
        out.extend(self.data.iter().map(|z| z.im as f32));
        out
    }

    /// Inverse of [`ComplexField::to_channels_f32`].
    pub fn from_channels_f32(buf: &[f32], height: usize, width: usize) -> Result<Self> {
        let n = height * width;
        if buf.len() != 2 * n {
            return Err(Error::shape(format!(
                "expected {} samples for 2x{}x{}, got {}",
                2 * n,
                height,
                width,
                buf.len()
            )));
        }
        let data = Array2::from_shape_fn((height, width), |(r, c)| {
            let i = r * width + c;
            Complex64::new(buf[i] as f64, buf[n + i] as f64)
        });
        Ok(ComplexField { data })
    }

    pub fn max_abs_diff(&self, other: &ComplexField) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_roundtrip() {
        let f = ComplexField::from_fn(4, 3, |r, c| Complex64::new(r as f64, c as f64 - 1.0));
        let buf = f.to_channels_f32();
        assert_eq!(buf.len(), 24);
        let g = ComplexField::from_channels_f32(&buf, 4, 3).unwrap();
        assert!(f.max_abs_diff(&g) < 1e-6);
    }

    #[test]
    fn from_parts_rejects_mismatched_shapes() {
        let re = Array2::zeros((2, 2));
        let im = Array2::zeros((2, 3));
        assert!(ComplexField::from_parts(&re, &im).is_err());
    }

    #[test]
    fn crop_bounds() {
        let f = ComplexField::zeros(10, 10);
        assert!(f.crop(5, 5, 6).is_err());
        assert_eq!(f.crop(2, 3, 7).unwrap().dim(), (7, 7));
    }
}
