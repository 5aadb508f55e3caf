use super::flow::DARK;
use crate::error::{Error, Result};
use crate::numerics::NdArray;
use crate::worldsim::PALETTE;

/// Colour classes smaller than this are treated as stray pixels.
pub const MIN_SEGMENT: usize = 4;

/// Palette index per pixel by nearest normalized chroma, `None` for background.
pub fn classify(frame: &[f32]) -> Vec<Option<usize>> {
    frame
        .chunks_exact(3)
        .map(|px| {
            let m = px[0].max(px[1]).max(px[2]);
            if m < DARK {
                return None;
            }
            let chroma = [px[0] / m, px[1] / m, px[2] / m];
            (0..PALETTE.len()).min_by(|&a, &b| {
                let d = |k: usize| -> f32 { (0..3).map(|c| (chroma[c] - PALETTE[k].1[c]).powi(2)).sum() };
                d(a).total_cmp(&d(b))
            })
        })
        .collect()
}

/// Pixel coordinates of each palette colour with at least `MIN_SEGMENT` pixels.
fn segments(labels: &[Option<usize>], w: usize) -> Vec<(usize, Vec<(i64, i64)>)> {
    let mut by_color: Vec<Vec<(i64, i64)>> = vec![Vec::new(); PALETTE.len()];
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = l {
            by_color[*c].push(((i % w) as i64, (i / w) as i64));
        }
    }
    by_color.into_iter().enumerate().filter(|(_, p)| p.len() >= MIN_SEGMENT).collect()
}

fn centroid(p: &[(i64, i64)]) -> (i64, i64) {
    let n = p.len() as f64;
    let sx: f64 = p.iter().map(|q| q.0 as f64).sum();
    let sy: f64 = p.iter().map(|q| q.1 as f64).sum();
    ((sx / n).round() as i64, (sy / n).round() as i64)
}

/// IoU after translating `b` so its rounded centroid lands on `a`'s.
fn aligned_iou(a: &[(i64, i64)], b: &[(i64, i64)]) -> f64 {
    let (ca, cb) = (centroid(a), centroid(b));
    let set: std::collections::HashSet<(i64, i64)> = a.iter().copied().collect();
    let inter = b.iter().filter(|q| set.contains(&(q.0 - cb.0 + ca.0, q.1 - cb.1 + ca.1))).count();
    inter as f64 / (a.len() + b.len() - inter) as f64
}

/// Mean frame-to-frame overlap of colour segments. Returns the score and
/// whether any segment was found at all (score 0 when none was).
pub fn subject_consistency_proxy(video: &NdArray<f32>) -> Result<(f64, bool)> {
    let s = video.shape();
    if s.len() != 4 || s[3] != 3 || s[0] < 2 {
        return Err(Error::Shape(format!("video must be F x H x W x 3 with F >= 2, got {s:?}")));
    }
    let (f, h, w) = (s[0], s[1], s[2]);
    let per = h * w * 3;
    let segs: Vec<_> = (0..f)
        .map(|i| segments(&classify(&video.data()[i * per..(i + 1) * per]), w))
        .collect();
    if segs.iter().all(|s| s.is_empty()) {
        return Ok((0.0, false));
    }
    let mut total = 0f64;
    for pair in segs.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        // one segment per colour, so greedy matching pairs equal colours
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (i, (ca, pa)) in a.iter().enumerate() {
            for (j, (cb, pb)) in b.iter().enumerate() {
                if ca == cb {
                    candidates.push((aligned_iou(pa, pb), i, j));
                }
            }
        }
        candidates.sort_by(|x, y| y.0.total_cmp(&x.0));
        let (mut used_a, mut used_b) = (vec![false; a.len()], vec![false; b.len()]);
        let mut sum = 0.0;
        for (iou, i, j) in candidates {
            if !used_a[i] && !used_b[j] {
                used_a[i] = true;
                used_b[j] = true;
                sum += iou;
            }
        }
        let n = a.len().max(b.len());
        if n > 0 {
            total += sum / n as f64;
        }
    }
    Ok((total / (f - 1) as f64, true))
}
