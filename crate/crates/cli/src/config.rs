//! Run configuration: one TOML file with a section per pipeline stage.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use worldflow::codec::CodecConfig;
use worldflow::model::{ChannelLayout, ModelConfig};
use worldflow::sample::GuidanceConfig;
use worldflow::train::TrainConfig;
use worldflow::worldfeat::FeatureParams;
use worldflow::worldsim::WorldConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training episodes written by `gen-data`.
    pub episodes: usize,
    /// Episodes after the training range whose prompts are kept for sampling.
    pub held_out: usize,
    pub max_objects: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            episodes: 256,
            held_out: 32,
            max_objects: 4,
        }
    }
}

/// Where the joint model's video weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseInit {
    /// The final checkpoint of `pretrain-base` in `paths.base`.
    Pretrained,
    /// A freshly initialized video-only model, expanded like a pretrained one.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseConfig {
    pub init: BaseInit,
    /// Optimizer steps of `pretrain-base`.
    pub steps: u64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            init: BaseInit::Pretrained,
            steps: 2000,
        }
    }
}

/// Output locations; relative paths resolve against the working directory.
/// Paths are not part of the fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: PathBuf,
    pub features: PathBuf,
    pub base: PathBuf,
    pub run: PathBuf,
    pub samples: PathBuf,
    pub eval: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        let root = PathBuf::from("work");
        Self {
            data: root.join("data"),
            features: root.join("features"),
            base: root.join("base"),
            run: root.join("run"),
            samples: root.join("samples"),
            eval: root.join("eval"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every random stream derives from it by name.
    pub seed: u64,
    pub data: DataConfig,
    pub world: WorldConfig,
    pub codec: CodecConfig,
    pub layout: ChannelLayout,
    pub features: FeatureParams,
    pub model: ModelConfig,
    pub base: BaseConfig,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut config = Self {
            seed: 42,
            data: DataConfig::default(),
            world: WorldConfig::default(),
            codec: CodecConfig::default(),
            layout: ChannelLayout::default(),
            features: FeatureParams::default(),
            model: ModelConfig::default(),
            base: BaseConfig::default(),
            train: TrainConfig::default(),
            guidance: GuidanceConfig::default(),
            paths: Paths::default(),
        };
        config.propagate_seed();
        config
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut config: Self = toml::from_str(text)?;
        config.propagate_seed();
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Training and sampling streams follow the master seed.
    pub fn propagate_seed(&mut self) {
        self.train.seed = self.seed;
        self.guidance.seed = self.seed;
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.propagate_seed();
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.guidance.validate()?;
        if self.codec.channels() != self.layout.vae {
            bail!(
                "codec produces {} channels (3 * p^2 * q with p={}, q={}) but layout.vae is {}",
                self.codec.channels(),
                self.codec.p,
                self.codec.q,
                self.layout.vae
            );
        }
        if self.layout.temporal != self.layout.vae {
            bail!("layout.temporal ({}) must equal layout.vae ({}): motion goes through the same codec", self.layout.temporal, self.layout.vae);
        }
        if self.features.k_semantic != self.layout.semantic {
            bail!("features.k_semantic ({}) must equal layout.semantic ({})", self.features.k_semantic, self.layout.semantic);
        }
        if self.features.k_spatial != self.layout.spatial {
            bail!("features.k_spatial ({}) must equal layout.spatial ({})", self.features.k_spatial, self.layout.spatial);
        }
        let grid = [
            self.world.frames / self.codec.q.max(1),
            self.world.height / self.codec.p.max(1),
            self.world.width / self.codec.p.max(1),
        ];
        if self.world.frames % self.codec.q != 0 || self.world.height % self.codec.p != 0 || self.world.width % self.codec.p != 0 {
            bail!("world {}x{}x{} is not divisible by codec (q={}, p={})", self.world.frames, self.world.height, self.world.width, self.codec.q, self.codec.p);
        }
        if grid != self.model.grid {
            bail!("model.grid {:?} does not match the latent grid {grid:?} of the world and codec", self.model.grid);
        }
        Ok(())
    }

    /// Canonical TOML of everything that affects artifact contents.
    pub fn canonical(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        toml::to_string(&c).expect("config serializes")
    }

    /// Hex SHA-256 of [`RunConfig::canonical`].
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}
