use crate::error::{Error, Result};
use crate::numerics::NdArray;

/// World-loss weight at `step`: cosine decay from `base` to zero over `total` steps.
/// Steps past the end clamp to zero.
pub fn cca_weight(step: u64, total: u64, base: f64) -> f64 {
    if total == 0 || step > total {
        log::warn!("world-loss weight requested at step {step} beyond {total}; using 0");
        return 0.0;
    }
    let frac = step as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Linear path between data and noise: `t * z1 + (1 - t) * z0`.
pub fn flow_interpolate(z0: &NdArray<f32>, z1: &NdArray<f32>, t: f32) -> Result<NdArray<f32>> {
    if z0.shape() != z1.shape() {
        return Err(Error::Shape(format!("interpolating {:?} with {:?}", z0.shape(), z1.shape())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("interpolation time {t} outside [0, 1]")));
    }
    let data = z0.data().iter().zip(z1.data()).map(|(&a, &b)| t * b + (1.0 - t) * a).collect();
    Ok(NdArray::new(z0.shape().to_vec(), data)?)
}

/// Learning rate with linear warmup over `warmup` steps, then constant.
pub fn warmup_lr(step: u64, base: f64, warmup: u64) -> f64 {
    if warmup == 0 {
        base
    } else {
        base * ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}
