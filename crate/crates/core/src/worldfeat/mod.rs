//! World-knowledge latent construction from oracle features.
//!
//! Three sources feed the world latent: motion (flow colour-coded as RGB and
//! passed through the video codec), semantic identity maps and spatial
//! layout maps. The last two are resampled onto the latent grid, z-scored
//! and PCA-compressed with models fitted once on the training corpus.

mod align;
mod flow_rgb;
mod pca;
mod standardize;

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use align::align;
pub use flow_rgb::{flow_to_rgb, flow_video, hsv_to_rgb, hue_of_angle, magnitude_angle, rgb_to_magnitude_angle, FlowRgbParams};
pub use pca::PcaModel;
pub use standardize::{Standardizer, DEFAULT_EPS};

use crate::codec::{self, ChannelGroup, CodecConfig};
use crate::error::{Error, Result};
use crate::numerics::NdArray;
use crate::worldsim::Episode;

pub const FEATURE_MAGIC: &[u8; 4] = b"DWFM";
pub const FEATURE_VERSION: u32 = 1;

/// Fixed concatenation order of the world latent.
pub const WORLD_ORDER: [ChannelGroup; 3] = ChannelGroup::WORLD;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureParams {
    pub sigma: f64,
    pub k_semantic: usize,
    pub k_spatial: usize,
    pub eps: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            sigma: FlowRgbParams::default().sigma,
            k_semantic: 8,
            k_spatial: 8,
            eps: DEFAULT_EPS,
        }
    }
}

impl FeatureParams {
    pub fn flow_rgb(&self) -> FlowRgbParams {
        FlowRgbParams { sigma: self.sigma }
    }
}

/// Concatenated `[temporal, semantic, spatial]` grid with per-group channel ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldLatent {
    pub data: NdArray<f32>,
    /// `(group, start, len)` in concatenation order.
    pub offsets: [(ChannelGroup, usize, usize); 3],
}

impl WorldLatent {
    pub fn assemble(temporal: &NdArray<f32>, semantic: &NdArray<f32>, spatial: &NdArray<f32>) -> Result<Self> {
        let parts = [temporal, semantic, spatial];
        for (g, p) in WORLD_ORDER.iter().zip(&parts) {
            if p.rank() != 4 {
                return Err(Error::Shape(format!("{g} latent must be rank 4, got {:?}", p.shape())));
            }
            if p.shape()[..3] != temporal.shape()[..3] {
                return Err(Error::Shape(format!(
                    "{g} grid {:?} does not match temporal grid {:?}",
                    &p.shape()[..3],
                    &temporal.shape()[..3]
                )));
            }
        }
        let mut start = 0;
        let offsets = std::array::from_fn(|i| {
            let len = parts[i].shape()[3];
            let o = (WORLD_ORDER[i], start, len);
            start += len;
            o
        });
        Ok(Self {
            data: NdArray::concat(&parts, 3)?,
            offsets,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn range(&self, group: ChannelGroup) -> Result<(usize, usize)> {
        self.offsets
            .iter()
            .find(|o| o.0 == group)
            .map(|o| (o.1, o.2))
            .ok_or_else(|| Error::UnknownGroup(group.to_string()))
    }

    pub fn split(&self, group: ChannelGroup) -> Result<NdArray<f32>> {
        let (start, len) = self.range(group)?;
        Ok(self.data.slice_axis(3, start, len)?)
    }
}

/// Frozen standardizer + PCA for one raw source.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedSource {
    pub group: ChannelGroup,
    pub standardizer: Standardizer,
    pub pca: PcaModel,
}

impl FittedSource {
    /// Fits on aligned features whose last axis is the raw channel dimension.
    pub fn fit(group: ChannelGroup, corpus: &NdArray<f32>, k: usize, eps: f64) -> Result<Self> {
        let standardizer = Standardizer::fit(corpus, eps)?;
        let pca = PcaModel::fit(&standardizer.apply(corpus)?, k).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{group}: {m}")),
            other => other,
        })?;
        Ok(Self {
            group,
            standardizer,
            pca,
        })
    }

    pub fn apply(&self, aligned: &NdArray<f32>) -> Result<NdArray<f32>> {
        self.pca.apply(&self.standardizer.apply(aligned)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        let name = self.group.name().as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(self.pca.k() as u32).to_le_bytes());
        let d = self.pca.raw_dim();
        let arrays = [
            NdArray::new(vec![d], self.standardizer.mean.clone()).unwrap(),
            NdArray::new(vec![d], self.standardizer.std.clone()).unwrap(),
            NdArray::scalar(self.standardizer.eps),
            self.pca.components.clone(),
            NdArray::new(vec![d], self.pca.mean.clone()).unwrap(),
            NdArray::new(vec![self.pca.k()], self.pca.variances.clone()).unwrap(),
        ];
        for a in &arrays {
            a.write_to(&mut out).expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn from_reader(r: &mut impl Read, path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m.to_string());
        let mut head = [0u8; 8];
        r.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
        if &head[..4] != FEATURE_MAGIC {
            return Err(bad("not a fitted feature model (bad magic)"));
        }
        if u32::from_le_bytes(head[4..].try_into().unwrap()) != FEATURE_VERSION {
            return Err(bad("unsupported fitted feature model version"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
        let len = u32::from_le_bytes(word) as usize;
        if len > 64 {
            return Err(bad("group name too long"));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| Error::io(path, e))?;
        let group: ChannelGroup = String::from_utf8(name).map_err(|_| bad("group name is not utf-8"))?.parse()?;
        r.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
        let k = u32::from_le_bytes(word) as usize;
        let mut next = || NdArray::<f64>::read_from(r).map_err(|e| Error::format(path, e.to_string()));
        let (mean, std, eps, components, pmean, variances) = (next()?, next()?, next()?, next()?, next()?, next()?);
        let d = mean.len();
        if std.len() != d || pmean.len() != d || components.shape() != [d, k] || variances.len() != k {
            return Err(bad("inconsistent array extents"));
        }
        Ok(Self {
            group,
            standardizer: Standardizer {
                mean: mean.into_data(),
                std: std.into_data(),
                eps: eps.item(),
            },
            pca: PcaModel {
                components,
                mean: pmean.into_data(),
                variances: variances.into_data(),
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
        Self::from_reader(&mut f, path)
    }
}

/// Fitted models for the two sources that need compression.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureModels {
    pub semantic: FittedSource,
    pub spatial: FittedSource,
}

impl FeatureModels {
    pub const SEMANTIC_FILE: &'static str = "semantic.dwfm";
    pub const SPATIAL_FILE: &'static str = "spatial.dwfm";

    /// Fits on the aligned raw features of a training corpus.
    pub fn fit(episodes: &[Episode], codec: &CodecConfig, params: &FeatureParams) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::Config("cannot fit feature models on an empty corpus".into()));
        }
        let mut sem = Vec::new();
        let mut spa = Vec::new();
        for ep in episodes {
            let grid = latent_grid(ep, codec)?;
            sem.push(align(&ep.semantic_raw, grid)?);
            spa.push(align(&ep.spatial_raw, grid)?);
        }
        let stack = |parts: Vec<NdArray<f32>>| NdArray::concat(&parts.iter().collect::<Vec<_>>(), 0);
        Ok(Self {
            semantic: FittedSource::fit(ChannelGroup::Semantic, &stack(sem)?, params.k_semantic, params.eps)?,
            spatial: FittedSource::fit(ChannelGroup::Spatial, &stack(spa)?, params.k_spatial, params.eps)?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.semantic.save(&dir.join(Self::SEMANTIC_FILE))?;
        self.spatial.save(&dir.join(Self::SPATIAL_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let semantic = FittedSource::load(&dir.join(Self::SEMANTIC_FILE))?;
        let spatial = FittedSource::load(&dir.join(Self::SPATIAL_FILE))?;
        if semantic.group != ChannelGroup::Semantic || spatial.group != ChannelGroup::Spatial {
            return Err(Error::format(dir, "fitted model files hold the wrong groups"));
        }
        Ok(Self { semantic, spatial })
    }
}

fn latent_grid(ep: &Episode, codec: &CodecConfig) -> Result<[usize; 3]> {
    Ok(codec::encode(&ep.video, codec.p, codec.q)?.grid())
}

/// Video latent of an episode.
pub fn vae_latent(ep: &Episode, codec: &CodecConfig) -> Result<NdArray<f32>> {
    Ok(codec::encode(&ep.video, codec.p, codec.q)?.data)
}

/// Motion latent: colour-coded flow passed through the video codec.
pub fn temporal_latent(flow: &NdArray<f32>, codec: &CodecConfig, params: &FlowRgbParams) -> Result<NdArray<f32>> {
    Ok(codec::encode(&flow_video(flow, params)?, codec.p, codec.q)?.data)
}

pub fn world_latent(ep: &Episode, models: &FeatureModels, codec: &CodecConfig, params: &FeatureParams) -> Result<WorldLatent> {
    let temporal = temporal_latent(&ep.flow, codec, &params.flow_rgb())?;
    let grid = [temporal.shape()[0], temporal.shape()[1], temporal.shape()[2]];
    let semantic = models.semantic.apply(&align(&ep.semantic_raw, grid)?)?;
    let spatial = models.spatial.apply(&align(&ep.spatial_raw, grid)?)?;
    WorldLatent::assemble(&temporal, &semantic, &spatial)
}

#[cfg(test)]
mod tests;
