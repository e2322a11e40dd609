//! Flow-matching building blocks on analytic velocity fields: the
//! linear interpolation path, the regression target, classifier-free
//! guidance, and the Heun integrator's accuracy.
//!
//! ```bash
//! cargo run --example flow_matching_basics
//! ```

use candle_core::Tensor;
use cvmri::flowmatch::{cfg_combine, fm_loss, heun_sample, interpolate, Velocity};
use cvmri::nn::device;
use cvmri::Result;

/// dx/dt = x has the closed-form solution x(1) = e * x(0).
struct Exponential;

impl Velocity for Exponential {
    fn velocity(&self, x: &Tensor, _t: f64) -> Result<Tensor> {
        Ok(x.clone())
    }
}

fn scalar(t: &Tensor) -> Result<f32> {
    Ok(t.flatten_all()?.to_vec1::<f32>()?[0])
}

fn main() -> Result<()> {
    let dev = device();
    let x0 = Tensor::from_vec(vec![1.0f32, -2.0, 0.5, 3.0], (1, 4), &dev)?;
    let eps = Tensor::from_vec(vec![0.2f32, 0.1, -0.4, 0.9], (1, 4), &dev)?;

    // The probability path is a straight line from noise (t=0) to data
    // (t=1); the training target is its constant velocity x0 - eps.
    for t in [0.0, 0.5, 1.0] {
        let xt = interpolate(&x0, &eps, t)?;
        println!("x({t:.1}) = {:?}", xt.flatten_all()?.to_vec1::<f32>()?);
    }
    let target = (&x0 - &eps)?;
    let perfect = fm_loss(&target, &x0, &eps)?.to_scalar::<f32>()?;
    println!("loss at the exact velocity: {perfect:.2e}");

    // Guidance extrapolates from the unconditional toward the
    // conditional prediction: v_u + w (v_c - v_u).
    let v_u = Tensor::from_vec(vec![1.0f32], (1,), &dev)?;
    let v_c = Tensor::from_vec(vec![2.0f32], (1,), &dev)?;
    for w in [1.0, 2.0, 4.0] {
        let v = scalar(&cfg_combine(&v_u, &v_c, w)?)?;
        println!("w = {w}: guided velocity {v}");
    }

    // Heun integration of dx/dt = x from x(0) = 1: the error shrinks
    // roughly 4x per doubling of the step count (second order).
    let one = Tensor::from_vec(vec![1.0f32], (1,), &dev)?;
    let exact = std::f64::consts::E;
    let mut prev_err = f64::NAN;
    for n_steps in [4usize, 8, 16, 32] {
        let x1 = scalar(&heun_sample(&Exponential, &one, n_steps)?)? as f64;
        let err = (x1 - exact).abs();
        let ratio = prev_err / err;
        println!("{n_steps:>3} steps: x(1) = {x1:.6}, |error| = {err:.2e}, ratio {ratio:.2}");
        prev_err = err;
    }
    Ok(())
}
