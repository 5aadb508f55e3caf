//! Joint denoiser: a small spacetime transformer whose input and output
//! projections span the video channels followed by the world channels.

mod checkpoint;
mod forward;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{bind, forward, forward_graph, Bound};

use crate::codec::ChannelGroup;
use crate::error::{Error, Result};
use crate::numerics::{NdArray, Scalar};
use crate::rng::{substream, INIT};
use crate::worldsim::prompt::{PROMPT_LEN, VOCAB_SIZE};

/// Channel counts of the joint state, concatenated as `[vae, temporal, semantic, spatial]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelLayout {
    pub vae: usize,
    pub temporal: usize,
    pub semantic: usize,
    pub spatial: usize,
}

impl Default for ChannelLayout {
    fn default() -> Self {
        Self {
            vae: 48,
            temporal: 48,
            semantic: 8,
            spatial: 8,
        }
    }
}

impl ChannelLayout {
    pub const GROUPS: [ChannelGroup; 4] = [
        ChannelGroup::Vae,
        ChannelGroup::Temporal,
        ChannelGroup::Semantic,
        ChannelGroup::Spatial,
    ];

    /// Layout of a model that only sees video latents.
    pub fn video_only(vae: usize) -> Self {
        Self {
            vae,
            temporal: 0,
            semantic: 0,
            spatial: 0,
        }
    }

    pub fn world(&self) -> usize {
        self.temporal + self.semantic + self.spatial
    }

    pub fn total(&self) -> usize {
        self.vae + self.world()
    }

    pub fn len(&self, group: ChannelGroup) -> Result<usize> {
        Ok(match group {
            ChannelGroup::Vae => self.vae,
            ChannelGroup::Temporal => self.temporal,
            ChannelGroup::Semantic => self.semantic,
            ChannelGroup::Spatial => self.spatial,
            ChannelGroup::Joint => return Err(Error::UnknownGroup(group.to_string())),
        })
    }

    /// `(start, len)` of a group in the joint channel axis.
    pub fn range(&self, group: ChannelGroup) -> Result<(usize, usize)> {
        let mut start = 0;
        for g in Self::GROUPS {
            let len = self.len(g)?;
            if g == group {
                return Ok((start, len));
            }
            start += len;
        }
        Err(Error::UnknownGroup(group.to_string()))
    }
}

/// Splits the last axis of a joint tensor into the four group slices.
pub fn split<T: Scalar>(v: &NdArray<T>, layout: &ChannelLayout) -> Result<[NdArray<T>; 4]> {
    let axis = v.rank().checked_sub(1).ok_or_else(|| Error::Shape("cannot split a scalar".into()))?;
    if v.shape()[axis] != layout.total() {
        return Err(Error::Shape(format!(
            "joint tensor has {} channels, layout expects {}",
            v.shape()[axis],
            layout.total()
        )));
    }
    let mut out = Vec::with_capacity(4);
    for g in ChannelLayout::GROUPS {
        let (start, len) = layout.range(g)?;
        out.push(v.slice_axis(axis, start, len)?);
    }
    Ok(out.try_into().unwrap())
}

/// Transformer hyperparameters and the latent grid it is built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// `(F_lat, H_lat, W_lat)`.
    pub grid: [usize; 3],
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            grid: [8, 8, 8],
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even for the timestep embedding".into()));
        }
        if self.mlp_ratio == 0 || self.grid.contains(&0) {
            return Err(Error::Config("mlp_ratio and grid extents must be positive".into()));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("init_std must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.grid.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zero,
}

/// Names, shapes and initializers of every parameter, in storage order.
fn param_specs(config: &ModelConfig, layout: &ChannelLayout) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.d_model;
    let c = layout.total();
    let m = d * config.mlp_ratio;
    let [f, h, w] = config.grid;
    let mut specs = vec![
        ("in_proj.w".to_string(), vec![c, d], Init::Normal),
        ("in_proj.b".to_string(), vec![d], Init::Zero),
        ("pos_f.table".to_string(), vec![f, d], Init::Normal),
        ("pos_h.table".to_string(), vec![h, d], Init::Normal),
        ("pos_w.table".to_string(), vec![w, d], Init::Normal),
        ("time.fc1.w".to_string(), vec![d, d], Init::Normal),
        ("time.fc1.b".to_string(), vec![d], Init::Zero),
        ("time.fc2.w".to_string(), vec![d, d], Init::Normal),
        ("time.fc2.b".to_string(), vec![d], Init::Zero),
        ("prompt.table".to_string(), vec![VOCAB_SIZE, d], Init::Normal),
        ("prompt_pos.table".to_string(), vec![PROMPT_LEN, d], Init::Normal),
    ];
    for l in 0..config.layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        specs.extend([
            (p("modulation.w"), vec![d, 4 * d], Init::Normal),
            (p("modulation.b"), vec![4 * d], Init::Zero),
            (p("attn.qkv.w"), vec![d, 3 * d], Init::Normal),
            (p("attn.out.w"), vec![d, d], Init::Normal),
            (p("attn.out.b"), vec![d], Init::Zero),
            (p("cross.q.w"), vec![d, d], Init::Normal),
            (p("cross.kv.w"), vec![d, 2 * d], Init::Normal),
            (p("cross.out.w"), vec![d, d], Init::Normal),
            (p("cross.out.b"), vec![d], Init::Zero),
            (p("mlp.fc1.w"), vec![d, m], Init::Normal),
            (p("mlp.fc1.b"), vec![m], Init::Zero),
            (p("mlp.fc2.w"), vec![m, d], Init::Normal),
            (p("mlp.fc2.b"), vec![d], Init::Zero),
        ]);
    }
    specs.extend([
        ("final.modulation.w".to_string(), vec![d, 2 * d], Init::Normal),
        ("final.modulation.b".to_string(), vec![2 * d], Init::Zero),
        ("out_proj.w".to_string(), vec![d, c], Init::Normal),
        ("out_proj.b".to_string(), vec![c], Init::Zero),
    ]);
    specs
}

/// Whether AdamW weight decay applies: dense weight matrices only, not
/// biases or embedding tables (norms carry no parameters here).
pub fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

/// Ordered named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub names: Vec<String>,
    pub values: Vec<NdArray<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn get(&self, name: &str) -> Option<&NdArray<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NdArray<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.values[i])
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.cast()).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| if a.shape() == b.shape() { a.max_abs_diff(b) } else { f64::INFINITY })
            .fold(0.0, f64::max)
    }
}

/// Architecture, channel layout and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub config: ModelConfig,
    pub layout: ChannelLayout,
    pub params: ParamStore<f32>,
}

impl JointModel {
    /// Random initialization from the `init` substream of `seed`.
    pub fn init(config: ModelConfig, layout: ChannelLayout, seed: u64) -> Result<Self> {
        config.validate()?;
        if layout.total() == 0 {
            return Err(Error::Config("channel layout is empty".into()));
        }
        let mut rng = substream(seed, INIT, 0);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut names = Vec::new();
        let mut values = Vec::new();
        for (name, shape, init) in param_specs(&config, &layout) {
            let v = match init {
                Init::Zero => NdArray::zeros(&shape),
                Init::Normal => NdArray::from_fn(&shape, |_| normal.sample(&mut rng) as f32),
            };
            names.push(name);
            values.push(v);
        }
        Ok(Self {
            config,
            layout,
            params: ParamStore { names, values },
        })
    }

    /// Same parameter set with every entry zero.
    pub fn zeros(config: ModelConfig, layout: ChannelLayout) -> Result<Self> {
        let mut m = Self::init(ModelConfig { init_std: 0.0, ..config }, layout, 0)?;
        m.params.values.iter_mut().for_each(|v| v.data_mut().fill(0.0));
        Ok(m)
    }

    /// Widens a video-only model to `layout`: world rows of the input
    /// projection and world columns of the output projection start at zero,
    /// so the video output is unchanged and the world output is zero.
    pub fn init_expanded(base: &JointModel, layout: ChannelLayout) -> Result<Self> {
        if base.layout.world() != 0 || base.layout.vae != layout.vae {
            return Err(Error::Shape(format!(
                "base layout {:?} is not video-only with {} channels",
                base.layout, layout.vae
            )));
        }
        let expected = param_specs(&base.config, &base.layout);
        let matches = expected.len() == base.params.names.len()
            && expected
                .iter()
                .zip(base.params.names.iter().zip(&base.params.values))
                .all(|((n, s, _), (bn, bv))| n == bn && s.as_slice() == bv.shape());
        if !matches {
            return Err(Error::Shape("base parameters do not match its architecture".into()));
        }
        let (d, cv, ct) = (base.config.d_model, layout.vae, layout.total());
        let mut params = base.params.clone();
        let w_in = params.get_mut("in_proj.w").unwrap();
        let mut data = w_in.data().to_vec();
        data.resize(ct * d, 0.0);
        *w_in = NdArray::new(vec![ct, d], data)?;
        let w_out = params.get_mut("out_proj.w").unwrap();
        let src = w_out.data().to_vec();
        *w_out = NdArray::from_fn(&[d, ct], |i| {
            let (r, c) = (i / ct, i % ct);
            if c < cv {
                src[r * cv + c]
            } else {
                0.0
            }
        });
        let b_out = params.get_mut("out_proj.b").unwrap();
        let mut data = b_out.data().to_vec();
        data.resize(ct, 0.0);
        *b_out = NdArray::new(vec![ct], data)?;
        Ok(Self {
            config: base.config.clone(),
            layout,
            params,
        })
    }

    /// Checks that stored parameters match the architecture.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = param_specs(&self.config, &self.layout);
        if expected.len() != self.params.names.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.params.names.len()
            )));
        }
        for ((name, shape, _), (n, v)) in expected.iter().zip(self.params.names.iter().zip(&self.params.values)) {
            if name != n || shape.as_slice() != v.shape() {
                return Err(Error::Shape(format!(
                    "parameter {n} {:?} does not match expected {name} {shape:?}",
                    v.shape()
                )));
            }
        }
        if !self.params.is_finite() {
            return Err(Error::NonFinite {
                context: "model parameters".into(),
            });
        }
        Ok(())
    }

    /// Predicted joint velocity for a batch: `z` is `B x F x H x W x C`, `t`
    /// has `B` entries and `prompts` holds `B` token sequences.
    pub fn velocity(&self, z: &NdArray<f32>, t: &[f32], prompts: &[Vec<u32>]) -> Result<NdArray<f32>> {
        forward(&self.params, &self.config, &self.layout, z, t, prompts)
    }
}

/// Draws `n` standard normal values from `rng`.
pub fn standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal)).collect()
}
