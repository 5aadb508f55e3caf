use crate::codec::{self, ChannelGroup, CodecConfig, LatentGrid};
use crate::error::{Error, Result};
use crate::numerics::NdArray;
use crate::worldfeat::{flow_to_rgb, FlowRgbParams};

pub const BLOCK: usize = 4;
pub const SEARCH: i64 = 4;
/// Pixels whose brightest channel is below this carry no texture and are
/// assigned zero motion.
pub const DARK: f32 = 0.1;

fn frame_view(video: &NdArray<f32>, f: usize) -> &[f32] {
    let s = video.shape();
    let per = s[1] * s[2] * 3;
    &video.data()[f * per..(f + 1) * per]
}

/// Per-pixel absolute colour difference between `a(x, y)` and `b(x + dx, y + dy)`,
/// or `None` when the target falls outside the frame.
fn pixel_cost(a: &[f32], b: &[f32], h: usize, w: usize, x: usize, y: usize, d: (i64, i64)) -> Option<f32> {
    let (tx, ty) = (x as i64 + d.0, y as i64 + d.1);
    if tx < 0 || ty < 0 || tx >= w as i64 || ty >= h as i64 {
        return None;
    }
    let (i, j) = ((y * w + x) * 3, (ty as usize * w + tx as usize) * 3);
    Some((0..3).map(|c| (a[i + c] - b[j + c]).abs()).sum())
}

/// Forward displacement field `H x W x 2` from frame `a` to frame `b`
/// (both `H x W x 3`): exhaustive SAD search over ±4 px on 4x4 blocks, ties
/// to the shortest displacement, then a per-pixel choice between zero and
/// the displacements of the surrounding blocks by brightness constancy.
/// Dark pixels keep zero displacement.
pub fn block_matching(a: &[f32], b: &[f32], h: usize, w: usize) -> NdArray<f32> {
    let (bh, bw) = (h.div_ceil(BLOCK), w.div_ceil(BLOCK));
    let mut offsets: Vec<(i64, i64)> = (-SEARCH..=SEARCH).flat_map(|dy| (-SEARCH..=SEARCH).map(move |dx| (dx, dy))).collect();
    offsets.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dy, dx));
    let mut block_d = vec![(0i64, 0i64); bh * bw];
    for by in 0..bh {
        for bx in 0..bw {
            let mut best: Option<(f32, (i64, i64))> = None;
            'cand: for &d in &offsets {
                let mut sad = 0f32;
                for y in by * BLOCK..((by + 1) * BLOCK).min(h) {
                    for x in bx * BLOCK..((bx + 1) * BLOCK).min(w) {
                        match pixel_cost(a, b, h, w, x, y, d) {
                            Some(c) => sad += c,
                            None => continue 'cand,
                        }
                    }
                }
                if best.is_none_or(|(s, _)| sad < s) {
                    best = Some((sad, d));
                }
            }
            block_d[by * bw + bx] = best.map_or((0, 0), |(_, d)| d);
        }
    }
    let mut out = NdArray::zeros(&[h, w, 2]);
    let data = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let (by, bx) = (y / BLOCK, x / BLOCK);
            let i = (y * w + x) * 3;
            if a[i..i + 3].iter().all(|&v| v < DARK) {
                continue;
            }
            let mut cands = vec![(0i64, 0i64)];
            for ny in by.saturating_sub(1)..(by + 2).min(bh) {
                for nx in bx.saturating_sub(1)..(bx + 2).min(bw) {
                    let d = block_d[ny * bw + nx];
                    if !cands.contains(&d) {
                        cands.push(d);
                    }
                }
            }
            // the pixel's own block first among moving candidates
            let own = block_d[by * bw + bx];
            cands[1..].sort_by_key(|&d| (d != own, d.0 * d.0 + d.1 * d.1));
            if cands.len() > 1 {
                cands.rotate_left(1);
            }
            let mut best: Option<(f32, (i64, i64))> = None;
            for d in cands {
                if let Some(c) = pixel_cost(a, b, h, w, x, y, d) {
                    if best.is_none_or(|(s, _)| c < s) {
                        best = Some((c, d));
                    }
                }
            }
            let d = best.map_or((0, 0), |(_, d)| d);
            data[(y * w + x) * 2] = d.0 as f32;
            data[(y * w + x) * 2 + 1] = d.1 as f32;
        }
    }
    out
}

fn check_video(video: &NdArray<f32>) -> Result<(usize, usize, usize)> {
    let s = video.shape();
    if s.len() != 4 || s[3] != 3 || s[0] < 2 {
        return Err(Error::Shape(format!("video must be F x H x W x 3 with F >= 2, got {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

/// Agreement in [0, 1] between the colour-coded motion decoded from a
/// predicted temporal latent and the colour-coded block-matching motion
/// of the video itself, over frames `0..F-1`.
pub fn flow_consistency(video: &NdArray<f32>, temporal: &NdArray<f32>, codec_cfg: &CodecConfig, params: &FlowRgbParams) -> Result<f64> {
    let (f, h, w) = check_video(video)?;
    let decoded = codec::decode(&LatentGrid::new(temporal.clone(), ChannelGroup::Temporal)?, codec_cfg.p, codec_cfg.q)
        .map_err(|e| Error::Shape(format!("temporal latent is not decodable: {e}")))?;
    if decoded.shape() != video.shape() {
        return Err(Error::Shape(format!(
            "decoded motion video {:?} does not match video {:?}",
            decoded.shape(),
            video.shape()
        )));
    }
    let mut total = 0f64;
    for i in 0..f - 1 {
        let flow = block_matching(frame_view(video, i), frame_view(video, i + 1), h, w);
        let observed = flow_to_rgb(&flow, params)?;
        let predicted = frame_view(&decoded, i);
        total += observed
            .data()
            .iter()
            .zip(predicted)
            .map(|(&o, &p)| (o - p.clamp(0.0, 1.0)).abs() as f64)
            .sum::<f64>();
    }
    Ok(1.0 - total / ((f - 1) * h * w * 3) as f64)
}
