use crate::error::{Error, Result};
use crate::numerics::NdArray;

/// Source coordinate and weights for half-pixel-centred bilinear resampling.
fn taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let x = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let x0 = x.floor() as usize;
    let x1 = (x0 + 1).min(src_len - 1);
    (x0, x1, x - x0 as f64)
}

/// Resamples `F x H x W x D` features to `F_lat x H_lat x W_lat x D`: bilinear
/// in space, then non-overlapping average pooling over time.
pub fn align(feature: &NdArray<f32>, target: [usize; 3]) -> Result<NdArray<f32>> {
    let s = feature.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("feature must be F x H x W x D, got {s:?}")));
    }
    let (f, h, w, d) = (s[0], s[1], s[2], s[3]);
    let [fl, hl, wl] = target;
    if fl == 0 || hl == 0 || wl == 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("cannot align {s:?} to {target:?}")));
    }
    if f % fl != 0 {
        return Err(Error::NotDivisible {
            axis: "frames",
            extent: f,
            factor: fl,
        });
    }
    let pool = f / fl;
    let src = feature.data();
    let ys: Vec<_> = (0..hl).map(|y| taps(y, h, hl)).collect();
    let xs: Vec<_> = (0..wl).map(|x| taps(x, w, wl)).collect();
    let mut out = vec![0f64; fl * hl * wl * d];
    for t in 0..f {
        let tl = t / pool;
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                let o = ((tl * hl + oy) * wl + ox) * d;
                let at = |y: usize, x: usize, c: usize| src[((t * h + y) * w + x) * d + c] as f64;
                for c in 0..d {
                    let top = at(y0, x0, c) * (1.0 - wx) + at(y0, x1, c) * wx;
                    let bot = at(y1, x0, c) * (1.0 - wx) + at(y1, x1, c) * wx;
                    out[o + c] += top * (1.0 - wy) + bot * wy;
                }
            }
        }
    }
    let inv = 1.0 / pool as f64;
    Ok(NdArray::new(
        vec![fl, hl, wl, d],
        out.into_iter().map(|v| (v * inv) as f32).collect(),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_extents_is_identity() {
        let x = NdArray::from_fn(&[2, 5, 3, 4], |i| (i as f32 * 0.77).sin());
        assert_eq!(align(&x, [2, 5, 3]).unwrap(), x);
    }

    #[test]
    fn constants_stay_constant() {
        let x = NdArray::full(&[4, 32, 32, 3], 0.625f32);
        let y = align(&x, [2, 8, 8]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.625));
    }

    #[test]
    fn ramp_downsample_samples_patch_centres() {
        // f(x, y) = x + 10 y; 2x downsample of pixel-centred samples evaluates
        // the bilinear formula at source coordinates 2i + 0.5
        let (h, w) = (8, 8);
        let x = NdArray::from_fn(&[1, h, w, 1], |i| ((i % w) + 10 * (i / w)) as f32);
        let y = align(&x, [1, 4, 4]).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                let expect = (2.0 * ox as f32 + 0.5) + 10.0 * (2.0 * oy as f32 + 0.5);
                assert_eq!(y.data()[oy * 4 + ox], expect);
            }
        }
    }

    #[test]
    fn temporal_pooling_averages_groups() {
        let x = NdArray::from_fn(&[4, 1, 1, 1], |i| i as f32);
        assert_eq!(align(&x, [2, 1, 1]).unwrap().data(), &[0.5, 2.5]);
        assert!(align(&x, [3, 1, 1]).is_err());
    }
}
