//! Exactly invertible latent codec: space-to-depth over `p x p` pixel
//! patches and optional grouping of `q` consecutive frames.
//!
//! Channel `c` of a latent cell holds pixel `(dt, dy, dx, rgb)` of its patch,
//! with `c = ((dt * p + dy) * p + dx) * 3 + rgb`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::NdArray;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelGroup {
    Vae,
    Temporal,
    Semantic,
    Spatial,
    Joint,
}

impl ChannelGroup {
    pub const WORLD: [ChannelGroup; 3] = [ChannelGroup::Temporal, ChannelGroup::Semantic, ChannelGroup::Spatial];

    pub fn name(self) -> &'static str {
        match self {
            ChannelGroup::Vae => "vae",
            ChannelGroup::Temporal => "temporal",
            ChannelGroup::Semantic => "semantic",
            ChannelGroup::Spatial => "spatial",
            ChannelGroup::Joint => "joint",
        }
    }
}

impl fmt::Display for ChannelGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ChannelGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vae" => Ok(ChannelGroup::Vae),
            "temporal" => Ok(ChannelGroup::Temporal),
            "semantic" => Ok(ChannelGroup::Semantic),
            "spatial" => Ok(ChannelGroup::Spatial),
            "joint" => Ok(ChannelGroup::Joint),
            other => Err(Error::UnknownGroup(other.to_string())),
        }
    }
}

/// `F_lat x H_lat x W_lat x C` grid tagged with the channel group it carries.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub data: NdArray<f32>,
    pub group: ChannelGroup,
}

impl LatentGrid {
    pub fn new(data: NdArray<f32>, group: ChannelGroup) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::Shape(format!("latent grid must be rank 4, got {:?}", data.shape())));
        }
        Ok(Self { data, group })
    }

    /// `(F_lat, H_lat, W_lat)`.
    pub fn grid(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[3]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    /// Spatial patch edge.
    pub p: usize,
    /// Frames per temporal group.
    pub q: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { p: 4, q: 1 }
    }
}

impl CodecConfig {
    pub fn channels(&self) -> usize {
        3 * self.p * self.p * self.q
    }
}

fn check_div(axis: &'static str, extent: usize, factor: usize) -> Result<usize> {
    if factor == 0 || extent % factor != 0 {
        return Err(Error::NotDivisible { axis, extent, factor });
    }
    Ok(extent / factor)
}

pub fn encode(video: &NdArray<f32>, p: usize, q: usize) -> Result<LatentGrid> {
    let s = video.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::Shape(format!("video must be F x H x W x 3, got {s:?}")));
    }
    let (f, h, w) = (s[0], s[1], s[2]);
    let fl = check_div("frames", f, q)?;
    let hl = check_div("height", h, p)?;
    let wl = check_div("width", w, p)?;
    let c = 3 * p * p * q;
    let src = video.data();
    let mut out = vec![0f32; f * h * w * 3];
    let mut o = 0;
    for tf in 0..fl {
        for ty in 0..hl {
            for tx in 0..wl {
                for dt in 0..q {
                    for dy in 0..p {
                        let row = (((tf * q + dt) * h + ty * p + dy) * w + tx * p) * 3;
                        out[o..o + 3 * p].copy_from_slice(&src[row..row + 3 * p]);
                        o += 3 * p;
                    }
                }
            }
        }
    }
    LatentGrid::new(NdArray::new(vec![fl, hl, wl, c], out)?, ChannelGroup::Vae)
}

pub fn decode(latent: &LatentGrid, p: usize, q: usize) -> Result<NdArray<f32>> {
    let [fl, hl, wl] = latent.grid();
    let c = latent.channels();
    if c != 3 * p * p * q {
        return Err(Error::Shape(format!(
            "latent has {c} channels but p={p}, q={q} requires {}",
            3 * p * p * q
        )));
    }
    let (f, h, w) = (fl * q, hl * p, wl * p);
    let src = latent.data.data();
    let mut out = vec![0f32; f * h * w * 3];
    let mut o = 0;
    for tf in 0..fl {
        for ty in 0..hl {
            for tx in 0..wl {
                for dt in 0..q {
                    for dy in 0..p {
                        let row = (((tf * q + dt) * h + ty * p + dy) * w + tx * p) * 3;
                        out[row..row + 3 * p].copy_from_slice(&src[o..o + 3 * p]);
                        o += 3 * p;
                    }
                }
            }
        }
    }
    Ok(NdArray::new(vec![f, h, w, 3], out)?)
}
