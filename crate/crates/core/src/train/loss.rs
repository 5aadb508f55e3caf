use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::ChannelGroup;
use crate::error::{Error, Result};
use crate::model::{bind, forward_graph, ChannelLayout, JointModel};
use crate::numerics::{Graph, NdArray, Scalar, Var};
use crate::worldsim::prompt;

/// Per-term losses and world weights at one step; `total = vae + Σ λ_k L_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_vae")]
    pub vae: f64,
    #[serde(rename = "L_temporal")]
    pub temporal: f64,
    #[serde(rename = "L_semantic")]
    pub semantic: f64,
    #[serde(rename = "L_spatial")]
    pub spatial: f64,
    #[serde(rename = "lambda_temp")]
    pub lambda_temporal: f64,
    #[serde(rename = "lambda_sem")]
    pub lambda_semantic: f64,
    #[serde(rename = "lambda_spa")]
    pub lambda_spatial: f64,
    #[serde(rename = "L_total")]
    pub total: f64,
}

impl LossBreakdown {
    /// `|total - (vae + Σ λ_k L_k)|` recomputed in 64-bit.
    pub fn decomposition_error(&self) -> f64 {
        let sum = self.vae
            + self.lambda_temporal * self.temporal
            + self.lambda_semantic * self.semantic
            + self.lambda_spatial * self.spatial;
        (self.total - sum).abs()
    }
}

/// One training batch: clean joint latents `B x F x H x W x C` and prompts,
/// with per-sample flags marking world groups hidden by condition dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub z0: NdArray<f32>,
    pub prompts: Vec<Vec<u32>>,
    /// Per sample, `[temporal, semantic, spatial]`.
    pub masked: Vec<[bool; 3]>,
}

/// Independent per-condition drop probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropoutProbs {
    pub text: f64,
    pub temporal: f64,
    pub semantic: f64,
    pub spatial: f64,
}

impl Default for DropoutProbs {
    fn default() -> Self {
        Self {
            text: 0.1,
            temporal: 0.1,
            semantic: 0.1,
            spatial: 0.1,
        }
    }
}

impl DropoutProbs {
    pub fn none() -> Self {
        Self {
            text: 0.0,
            temporal: 0.0,
            semantic: 0.0,
            spatial: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.text, self.temporal, self.semantic, self.spatial] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("dropout probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Replaces prompts by the null prompt and marks world groups as hidden,
/// independently per sample. Always draws four numbers per sample so the
/// stream position does not depend on the outcomes.
pub fn dropout_conditions(batch: &Batch, probs: &DropoutProbs, rng: &mut impl Rng) -> Batch {
    let mut out = batch.clone();
    for (prompt, mask) in out.prompts.iter_mut().zip(out.masked.iter_mut()) {
        let draws: [f64; 4] = std::array::from_fn(|_| rng.random());
        if draws[0] < probs.text {
            *prompt = prompt::null_prompt();
        }
        for (k, p) in [probs.temporal, probs.semantic, probs.spatial].into_iter().enumerate() {
            if draws[k + 1] < p {
                mask[k] = true;
            }
        }
    }
    out
}

/// Zeroes the channels of `group` in sample `b` of a `B x ... x C` tensor.
fn zero_group(x: &mut NdArray<f32>, b: usize, start: usize, len: usize) {
    let c = *x.shape().last().unwrap();
    let per = x.len() / x.shape()[0];
    for cell in x.data_mut()[b * per..(b + 1) * per].chunks_exact_mut(c) {
        cell[start..start + len].fill(0.0);
    }
}

/// Inputs of one loss evaluation after noise and time have been drawn.
pub struct LossInputs {
    pub z_t: NdArray<f32>,
    pub target: NdArray<f32>,
    pub t: Vec<f32>,
    pub prompts: Vec<Vec<u32>>,
}

/// Builds `z_t` and the velocity target `z1 - z0`, hiding masked groups in
/// both the clean latent and the noisy input.
pub fn prepare(batch: &Batch, z1: &NdArray<f32>, t: &[f32], layout: &ChannelLayout) -> Result<LossInputs> {
    if batch.z0.shape() != z1.shape() || batch.z0.shape().first() != Some(&t.len()) {
        return Err(Error::Shape(format!(
            "batch {:?}, noise {:?}, {} timesteps",
            batch.z0.shape(),
            z1.shape(),
            t.len()
        )));
    }
    let mut z0 = batch.z0.clone();
    for (b, mask) in batch.masked.iter().enumerate() {
        for (k, g) in ChannelGroup::WORLD.into_iter().enumerate() {
            if mask[k] {
                let (s, l) = layout.range(g)?;
                zero_group(&mut z0, b, s, l);
            }
        }
    }
    let per = z0.len() / t.len();
    let mut z_t = z0.clone();
    for (b, &tb) in t.iter().enumerate() {
        let (lo, hi) = (b * per, (b + 1) * per);
        for (o, (&a, &n)) in z_t.data_mut()[lo..hi].iter_mut().zip(z0.data()[lo..hi].iter().zip(&z1.data()[lo..hi])) {
            *o = tb * n + (1.0 - tb) * a;
        }
    }
    for (b, mask) in batch.masked.iter().enumerate() {
        for (k, g) in ChannelGroup::WORLD.into_iter().enumerate() {
            if mask[k] {
                let (s, l) = layout.range(g)?;
                zero_group(&mut z_t, b, s, l);
            }
        }
    }
    let target = NdArray::new(
        z0.shape().to_vec(),
        z1.data().iter().zip(z0.data()).map(|(&n, &a)| n - a).collect(),
    )?;
    Ok(LossInputs {
        z_t,
        target,
        t: t.to_vec(),
        prompts: batch.prompts.clone(),
    })
}

/// Records the weighted loss on `g`; returns the total and per-group terms.
pub fn loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: &NdArray<T>,
    layout: &ChannelLayout,
    lambdas: [f64; 3],
) -> Result<(Var, [Option<Var>; 4])> {
    let axis = target.rank() - 1;
    let tv = g.constant(target.clone());
    let diff = g.sub(pred, tv)?;
    let mut terms = [None; 4];
    for (i, grp) in ChannelLayout::GROUPS.into_iter().enumerate() {
        let (s, l) = layout.range(grp)?;
        if l == 0 {
            continue;
        }
        let d = g.slice(diff, axis, s, l)?;
        let sq = g.mul(d, d)?;
        terms[i] = Some(g.mean(sq)?);
    }
    let vae = terms[0].ok_or_else(|| Error::Config("layout has no video channels".into()))?;
    let mut total = vae;
    for k in 0..3 {
        if let Some(term) = terms[k + 1] {
            let w = g.scale(term, lambdas[k]);
            total = g.add(total, w)?;
        }
    }
    Ok((total, terms))
}

/// Loss value and parameter gradients for one prepared batch.
pub fn joint_loss(model: &JointModel, inputs: &LossInputs, lambdas: [f64; 3], step: u64) -> Result<(LossBreakdown, Vec<NdArray<f32>>)> {
    let mut g = Graph::new();
    let bound = bind(&mut g, &model.params, true);
    let zv = g.constant(inputs.z_t.clone());
    let tv = g.constant(NdArray::new(vec![inputs.t.len()], inputs.t.clone())?);
    let pred = forward_graph(&mut g, &bound, &model.config, &model.layout, zv, tv, &inputs.prompts)?;
    let (total, terms) = loss_graph(&mut g, pred, &inputs.target, &model.layout, lambdas)?;
    let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item() as f64);
    let breakdown = LossBreakdown {
        vae: value(terms[0]),
        temporal: value(terms[1]),
        semantic: value(terms[2]),
        spatial: value(terms[3]),
        lambda_temporal: lambdas[0],
        lambda_semantic: lambdas[1],
        lambda_spatial: lambdas[2],
        total: g.value(total).item() as f64,
    };
    let named = [
        ("L_vae", breakdown.vae),
        ("L_temporal", breakdown.temporal),
        ("L_semantic", breakdown.semantic),
        ("L_spatial", breakdown.spatial),
        ("L_total", breakdown.total),
    ];
    if let Some((name, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("{name} at step {step}"),
        });
    }
    let mut grads = g.backward(total)?;
    let out = bound
        .vars
        .iter()
        .zip(&model.params.values)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| NdArray::zeros(p.shape())))
        .collect();
    Ok((breakdown, out))
}
