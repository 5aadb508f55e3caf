use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::NdArray;

/// Motion-to-colour mapping: value encodes normalized speed, hue encodes direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowRgbParams {
    pub sigma: f64,
}

impl Default for FlowRgbParams {
    fn default() -> Self {
        Self { sigma: 0.1 }
    }
}

impl FlowRgbParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// `(m, alpha)` for one displacement on an `h x w` frame.
pub fn magnitude_angle(u: f64, v: f64, h: usize, w: usize, sigma: f64) -> (f64, f64) {
    let norm = sigma * ((h * h + w * w) as f64).sqrt();
    let m = ((u * u + v * v).sqrt() / norm).min(1.0);
    let alpha = if u == 0.0 && v == 0.0 { 0.0 } else { v.atan2(u) };
    (m, alpha)
}

/// alpha in [-pi, pi] to hue in [0, 1).
pub fn hue_of_angle(alpha: f64) -> f64 {
    let h = (alpha + 2.0 * PI).rem_euclid(2.0 * PI) / (2.0 * PI);
    if h >= 1.0 {
        0.0
    } else {
        h
    }
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Inverse of the saturation-1 colour wheel: returns `(m, alpha)`.
pub fn rgb_to_magnitude_angle(rgb: [f64; 3]) -> (f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if max <= 0.0 || delta <= 0.0 {
        return (max, 0.0);
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    } / 6.0;
    let mut alpha = h * 2.0 * PI;
    if alpha > PI {
        alpha -= 2.0 * PI;
    }
    (max, alpha)
}

/// `H x W x 2` displacement field to an `H x W x 3` image in [0, 1].
pub fn flow_to_rgb(flow: &NdArray<f32>, params: &FlowRgbParams) -> Result<NdArray<f32>> {
    let s = flow.shape();
    if s.len() != 3 || s[2] != 2 {
        return Err(Error::Shape(format!("flow must be H x W x 2, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let mut out = Vec::with_capacity(h * w * 3);
    for uv in flow.data().chunks_exact(2) {
        let (m, alpha) = magnitude_angle(uv[0] as f64, uv[1] as f64, h, w, params.sigma);
        let rgb = hsv_to_rgb(hue_of_angle(alpha), 1.0, m);
        out.extend(rgb.iter().map(|&c| c as f32));
    }
    Ok(NdArray::new(vec![h, w, 3], out)?)
}

/// Colour-codes a `(F-1) x H x W x 2` flow sequence as an `F`-frame video; the
/// final frame repeats the last displacement field so the result matches the
/// source video's frame count.
pub fn flow_video(flow: &NdArray<f32>, params: &FlowRgbParams) -> Result<NdArray<f32>> {
    let s = flow.shape();
    if s.len() != 4 || s[3] != 2 || s[0] == 0 {
        return Err(Error::Shape(format!("flow sequence must be T x H x W x 2, got {s:?}")));
    }
    let (t, h, w) = (s[0], s[1], s[2]);
    let mut data = Vec::with_capacity((t + 1) * h * w * 3);
    for i in 0..=t {
        let field = flow.slice_axis(0, i.min(t - 1), 1)?.reshape(&[h, w, 2])?;
        data.extend_from_slice(flow_to_rgb(&field, params)?.data());
    }
    Ok(NdArray::new(vec![t + 1, h, w, 3], data)?)
}
