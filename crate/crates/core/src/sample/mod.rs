//! Euler integration of the joint velocity from noise to data, steered by a
//! combination of the conditional prediction, a null-prompt prediction and
//! one prediction per hidden world group.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{self, ChannelGroup, CodecConfig, LatentGrid};
use crate::error::{Error, Result};
use crate::model::{split, standard_normal, ChannelLayout, JointModel};
use crate::numerics::NdArray;
use crate::rng::{substream, SAMPLING};
use crate::worldsim::prompt;

/// How a hidden world group is filled in the joint state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskPolicy {
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub w_txt: f64,
    pub w_temp: f64,
    pub w_sem: f64,
    pub w_spa: f64,
    pub steps: usize,
    pub seed: u64,
    pub mask: MaskPolicy,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w_txt: 5.0,
            w_temp: 1.0,
            w_sem: 1.0,
            w_spa: 1.0,
            steps: 20,
            seed: 42,
            mask: MaskPolicy::Zero,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        if self.weights().iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("guidance weights must be finite".into()));
        }
        Ok(())
    }

    /// `[w_txt, w_temp, w_sem, w_spa]`.
    pub fn weights(&self) -> [f64; 4] {
        [self.w_txt, self.w_temp, self.w_sem, self.w_spa]
    }

    /// Branch coefficients `[cond, text-null, no-temporal, no-semantic, no-spatial]`.
    pub fn coefficients(&self) -> [f64; 5] {
        let w = self.weights();
        [1.0 + w.iter().sum::<f64>(), -w[0], -w[1], -w[2], -w[3]]
    }
}

pub const BRANCHES: [&str; 5] = ["conditional", "text-null", "no-temporal", "no-semantic", "no-spatial"];

/// Zero-fills one world group of a joint tensor (any rank, channels last).
pub fn mask_channels(z: &NdArray<f32>, group: ChannelGroup, layout: &ChannelLayout) -> Result<NdArray<f32>> {
    if !ChannelGroup::WORLD.contains(&group) {
        return Err(Error::UnknownGroup(format!("{group} (only world groups can be masked)")));
    }
    let c = layout.total();
    if z.shape().last() != Some(&c) {
        return Err(Error::Shape(format!("joint tensor {:?} does not have {c} channels", z.shape())));
    }
    let (start, len) = layout.range(group)?;
    let mut out = z.clone();
    for cell in out.data_mut().chunks_exact_mut(c) {
        cell[start..start + len].fill(0.0);
    }
    Ok(out)
}

/// Weighted sum of the five branch velocities, computed in 64-bit.
pub fn combine(branches: &[&NdArray<f32>; 5], g: &GuidanceConfig) -> Result<NdArray<f32>> {
    for (b, name) in branches.iter().zip(BRANCHES) {
        if b.shape() != branches[0].shape() {
            return Err(Error::Shape(format!("{name} branch has shape {:?}", b.shape())));
        }
        if !b.is_finite() {
            return Err(Error::NonFinite {
                context: format!("{name} guidance branch"),
            });
        }
    }
    let coef = g.coefficients();
    let data = (0..branches[0].len())
        .map(|i| {
            let mut acc = 0f64;
            for (c, b) in coef.iter().zip(branches) {
                if *c != 0.0 {
                    acc += c * b.data()[i] as f64;
                }
            }
            acc as f32
        })
        .collect();
    Ok(NdArray::new(branches[0].shape().to_vec(), data)?)
}

/// Guided velocity for one joint state `F x H x W x C`. Branches whose weight
/// is zero are not evaluated.
pub fn guided_velocity(model: &JointModel, z_t: &NdArray<f32>, t: f32, tokens: &[u32], g: &GuidanceConfig) -> Result<NdArray<f32>> {
    let layout = &model.layout;
    let w = g.weights();
    let mut inputs = vec![z_t.clone()];
    let mut prompts = vec![tokens.to_vec()];
    let mut slots = [None; 5];
    slots[0] = Some(0);
    if w[0] != 0.0 {
        slots[1] = Some(inputs.len());
        inputs.push(z_t.clone());
        prompts.push(prompt::null_prompt());
    }
    for (k, group) in ChannelGroup::WORLD.into_iter().enumerate() {
        if w[k + 1] != 0.0 {
            slots[k + 2] = Some(inputs.len());
            inputs.push(mask_channels(z_t, group, layout)?);
            prompts.push(tokens.to_vec());
        }
    }
    let n = inputs.len();
    let mut shape = vec![n];
    shape.extend_from_slice(z_t.shape());
    let batch = NdArray::concat(&inputs.iter().collect::<Vec<_>>(), 0)?.reshape(&shape)?;
    let v = model.velocity(&batch, &vec![t; n], &prompts).map_err(|e| match e {
        Error::NonFinite { context } => Error::NonFinite {
            context: format!("guidance forward ({context})"),
        },
        other => other,
    })?;
    let per: Vec<NdArray<f32>> = (0..n)
        .map(|i| Ok(v.slice_axis(0, i, 1)?.reshape(z_t.shape())?))
        .collect::<Result<_>>()?;
    let pick = |s: Option<usize>| s.map_or(&per[0], |i| &per[i]);
    combine(&[pick(slots[0]), pick(slots[1]), pick(slots[2]), pick(slots[3]), pick(slots[4])], g)
}

/// Integrates from `t = 1` to `t = 0` on a uniform grid of `steps` points,
/// `z <- z - dt * v(z, t_i)`. Returns the endpoint and the RMS velocity per step.
pub fn euler_integrate(
    z1: &NdArray<f32>,
    steps: usize,
    mut velocity: impl FnMut(&NdArray<f32>, f32) -> Result<NdArray<f32>>,
) -> Result<(NdArray<f32>, Vec<f64>)> {
    if steps == 0 {
        return Err(Error::Config("sampling needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = z1.clone();
    let mut norms = Vec::with_capacity(steps);
    for i in 0..steps {
        let t = (1.0 - i as f64 * dt) as f32;
        let v = velocity(&z, t)?;
        if v.shape() != z.shape() {
            return Err(Error::Shape(format!("velocity {:?} for state {:?}", v.shape(), z.shape())));
        }
        let mut sq = 0f64;
        for (zi, &vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi = (*zi as f64 - dt * vi as f64) as f32;
            sq += (vi as f64).powi(2);
        }
        norms.push((sq / v.len().max(1) as f64).sqrt());
        if !z.is_finite() {
            return Err(Error::NonFinite {
                context: format!("sampling state after step {i}"),
            });
        }
    }
    Ok((z, norms))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    /// `F x H x W x 3`, clamped to [0, 1].
    pub video: NdArray<f32>,
    /// Final joint latent `F_lat x H_lat x W_lat x C_total`.
    pub latent: NdArray<f32>,
    /// `[vae, temporal, semantic, spatial]` slices of `latent`.
    pub groups: [NdArray<f32>; 4],
    pub velocity_norms: Vec<f64>,
}

/// Initial joint noise for sample `index`.
pub fn initial_noise(model: &JointModel, g: &GuidanceConfig, index: u64) -> Result<NdArray<f32>> {
    let [f, h, w] = model.config.grid;
    let c = model.layout.total();
    let mut rng = substream(g.seed, SAMPLING, index);
    Ok(NdArray::new(vec![f, h, w, c], standard_normal(&mut rng, f * h * w * c))?)
}

/// Generates one clip for `tokens`; `index` selects the noise substream.
pub fn sample(model: &JointModel, tokens: &[u32], g: &GuidanceConfig, codec_cfg: &CodecConfig, index: u64) -> Result<SampleResult> {
    g.validate()?;
    model.validate()?;
    if model.layout.vae != codec_cfg.channels() {
        return Err(Error::Config(format!(
            "model has {} video channels, codec produces {}",
            model.layout.vae,
            codec_cfg.channels()
        )));
    }
    let z1 = initial_noise(model, g, index)?;
    let (latent, velocity_norms) = euler_integrate(&z1, g.steps, |z, t| guided_velocity(model, z, t, tokens, g))?;
    let groups = split(&latent, &model.layout)?;
    let video = codec::decode(&LatentGrid::new(groups[0].clone(), ChannelGroup::Vae)?, codec_cfg.p, codec_cfg.q)?.map(|x| x.clamp(0.0, 1.0));
    Ok(SampleResult {
        video,
        latent,
        groups,
        velocity_norms,
    })
}

/// Writes an `H x W x 3` frame in [0, 1] as binary 8-bit PPM.
pub fn write_ppm(path: &Path, frame: &NdArray<f32>) -> Result<()> {
    let s = frame.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Shape(format!("frame must be H x W x 3, got {s:?}")));
    }
    let mut bytes = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    bytes.extend(frame.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary 8-bit PPM back into `H x W x 3` floats.
pub fn read_ppm(path: &Path) -> Result<NdArray<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, "bad PPM header"));
    if fields[0] != "P6" || num(&fields[3])? != 255 {
        return Err(Error::format(path, "only binary 8-bit PPM is supported"));
    }
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let body = bytes.get(pos..pos + w * h * 3).ok_or_else(|| Error::format(path, "truncated PPM body"))?;
    Ok(NdArray::new(vec![h, w, 3], body.iter().map(|&b| b as f32 / 255.0).collect())?)
}

/// Writes each frame of an `F x H x W x 3` video as `{prefix}_{i:02}.ppm`.
pub fn write_video(dir: &Path, prefix: &str, video: &NdArray<f32>) -> Result<()> {
    let s = video.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("video must be F x H x W x 3, got {s:?}")));
    }
    for i in 0..s[0] {
        let frame = video.slice_axis(0, i, 1)?.reshape(&s[1..])?;
        write_ppm(&dir.join(format!("{prefix}_{i:02}.ppm")), &frame)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
