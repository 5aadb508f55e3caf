use std::collections::HashMap;

use super::{ChannelLayout, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::{Graph, NdArray, Scalar, Var};
use crate::worldsim::prompt::{PROMPT_LEN, VOCAB_SIZE};

const LN_EPS: f64 = 1e-6;
/// Scales `t in [0, 1]` so the sinusoid frequencies cover a useful range.
const TIME_SCALE: f64 = 1000.0;

/// Parameters recorded on a graph, looked up by name.
pub struct Bound {
    pub vars: Vec<Var>,
    index: HashMap<String, Var>,
}

impl Bound {
    /// Pairs already-recorded leaves with parameter names.
    pub fn from_vars(names: &[String], vars: &[Var]) -> Self {
        let index = names.iter().cloned().zip(vars.iter().copied()).collect();
        Self {
            vars: vars.to_vec(),
            index,
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }
}

/// Records every parameter as a leaf; `trainable` leaves receive gradients.
pub fn bind<T: Scalar>(g: &mut Graph<T>, params: &ParamStore<T>, trainable: bool) -> Bound {
    let mut vars = Vec::with_capacity(params.values.len());
    let mut index = HashMap::with_capacity(params.values.len());
    for (name, value) in params.names.iter().zip(&params.values) {
        let v = if trainable {
            g.param(value.clone())
        } else {
            g.constant(value.clone())
        };
        vars.push(v);
        index.insert(name.clone(), v);
    }
    Bound { vars, index }
}

fn linear<T: Scalar>(g: &mut Graph<T>, p: &Bound, x: Var, name: &str, bias: bool) -> Result<Var> {
    let y = g.matmul(x, p.get(&format!("{name}.w"))?)?;
    if bias {
        Ok(g.add(y, p.get(&format!("{name}.b"))?)?)
    } else {
        Ok(y)
    }
}

/// `x * (1 + scale) + shift`, with `scale` and `shift` of shape `B x D`.
fn modulate<T: Scalar>(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let (b, d) = (g.shape(shift)[0], g.shape(shift)[1]);
    let shift = g.reshape(shift, &[b, 1, d])?;
    let scale = g.reshape(scale, &[b, 1, d])?;
    let gain = g.add_scalar(scale, 1.0);
    let y = g.mul(x, gain)?;
    Ok(g.add(y, shift)?)
}

/// Splits `[B, N, D]` into `[B * heads, N, D / heads]`.
fn to_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, n, heads, d / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    Ok(g.reshape(x, &[b * heads, n, d / heads])?)
}

fn from_heads<T: Scalar>(g: &mut Graph<T>, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (n, dh) = (s[1], s[2]);
    let x = g.reshape(x, &[batch, heads, n, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    Ok(g.reshape(x, &[batch, n, heads * dh])?)
}

fn attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let batch = g.shape(q)[0];
    let dh = g.shape(q)[2] / heads;
    let (q, k, v) = (to_heads(g, q, heads)?, to_heads(g, k, heads)?, to_heads(g, v, heads)?);
    let s = g.matmul_t(q, k, false, true)?;
    let s = g.scale(s, 1.0 / (dh as f64).sqrt());
    let a = g.softmax(s)?;
    let o = g.matmul(a, v)?;
    from_heads(g, o, batch, heads)
}

fn check_prompts(prompts: &[Vec<u32>], batch: usize) -> Result<Vec<usize>> {
    if prompts.len() != batch {
        return Err(Error::Shape(format!("{} prompts for a batch of {batch}", prompts.len())));
    }
    let mut rows = Vec::with_capacity(batch * PROMPT_LEN);
    for p in prompts {
        if p.len() != PROMPT_LEN {
            return Err(Error::Shape(format!("prompt must have {PROMPT_LEN} tokens, got {}", p.len())));
        }
        for &id in p {
            if id as usize >= VOCAB_SIZE {
                return Err(Error::Shape(format!("prompt token {id} outside vocabulary of {VOCAB_SIZE}")));
            }
            rows.push(id as usize);
        }
    }
    Ok(rows)
}

/// Records the forward pass. `z` is `B x F x H x W x C` and `t` has shape `[B]`;
/// returns the velocity with `z`'s shape.
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    config: &ModelConfig,
    layout: &ChannelLayout,
    z: Var,
    t: Var,
    prompts: &[Vec<u32>],
) -> Result<Var> {
    let zs = g.shape(z).to_vec();
    let [f, h, w] = config.grid;
    let c = layout.total();
    if zs.len() != 5 || zs[1..] != [f, h, w, c] {
        return Err(Error::Shape(format!(
            "joint state must be B x {f} x {h} x {w} x {c}, got {zs:?}"
        )));
    }
    let batch = zs[0];
    if g.shape(t) != [batch] {
        return Err(Error::Shape(format!("timesteps {:?} for a batch of {batch}", g.shape(t))));
    }
    if let Some(bad) = g.value(t).data().iter().find(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0)) {
        return Err(Error::Config(format!("timestep {} outside [0, 1]", bad.as_f64())));
    }
    let rows = check_prompts(prompts, batch)?;
    let (d, n, heads) = (config.d_model, config.tokens(), config.heads);

    let x = g.reshape(z, &[batch, n, c])?;
    let mut hid = linear(g, p, x, "in_proj", true)?;
    let fi: Vec<usize> = (0..n).map(|i| i / (h * w)).collect();
    let hi: Vec<usize> = (0..n).map(|i| i / w % h).collect();
    let wi: Vec<usize> = (0..n).map(|i| i % w).collect();
    let pf = g.gather(p.get("pos_f.table")?, &fi)?;
    let ph = g.gather(p.get("pos_h.table")?, &hi)?;
    let pw = g.gather(p.get("pos_w.table")?, &wi)?;
    let pos = g.add(pf, ph)?;
    let pos = g.add(pos, pw)?;
    hid = g.add(hid, pos)?;

    let temb = g.sinusoidal_embed(t, d, TIME_SCALE)?;
    let temb = linear(g, p, temb, "time.fc1", true)?;
    let temb = g.gelu(temb);
    let temb = linear(g, p, temb, "time.fc2", true)?;
    let cond = g.gelu(temb);

    let ctx = g.gather(p.get("prompt.table")?, &rows)?;
    let ctx = g.reshape(ctx, &[batch, PROMPT_LEN, d])?;
    let ctx = g.add(ctx, p.get("prompt_pos.table")?)?;
    let ctx = g.layer_norm(ctx, LN_EPS)?;

    for l in 0..config.layers {
        let name = |s: &str| format!("layers.{l}.{s}");
        let m = linear(g, p, cond, &name("modulation"), true)?;
        let part = |g: &mut Graph<T>, i: usize| g.slice(m, 1, i * d, d);
        let (shift_a, scale_a, shift_m, scale_m) = (part(g, 0)?, part(g, 1)?, part(g, 2)?, part(g, 3)?);

        let x = g.layer_norm(hid, LN_EPS)?;
        let x = modulate(g, x, shift_a, scale_a)?;
        let qkv = linear(g, p, x, &name("attn.qkv"), false)?;
        let q = g.slice(qkv, 2, 0, d)?;
        let k = g.slice(qkv, 2, d, d)?;
        let v = g.slice(qkv, 2, 2 * d, d)?;
        let a = attention(g, q, k, v, heads)?;
        let a = linear(g, p, a, &name("attn.out"), true)?;
        hid = g.add(hid, a)?;

        let x = g.layer_norm(hid, LN_EPS)?;
        let q = linear(g, p, x, &name("cross.q"), false)?;
        let kv = linear(g, p, ctx, &name("cross.kv"), false)?;
        let k = g.slice(kv, 2, 0, d)?;
        let v = g.slice(kv, 2, d, d)?;
        let a = attention(g, q, k, v, heads)?;
        let a = linear(g, p, a, &name("cross.out"), true)?;
        hid = g.add(hid, a)?;

        let x = g.layer_norm(hid, LN_EPS)?;
        let x = modulate(g, x, shift_m, scale_m)?;
        let x = linear(g, p, x, &name("mlp.fc1"), true)?;
        let x = g.gelu(x);
        let x = linear(g, p, x, &name("mlp.fc2"), true)?;
        hid = g.add(hid, x)?;

        g.check_finite(hid).map_err(|_| Error::NonFinite {
            context: format!("transformer layer {l}"),
        })?;
    }

    let m = linear(g, p, cond, "final.modulation", true)?;
    let shift = g.slice(m, 1, 0, d)?;
    let scale = g.slice(m, 1, d, d)?;
    let x = g.layer_norm(hid, LN_EPS)?;
    let x = modulate(g, x, shift, scale)?;
    let out = linear(g, p, x, "out_proj", true)?;
    g.check_finite(out).map_err(|_| Error::NonFinite {
        context: "output projection".into(),
    })?;
    Ok(g.reshape(out, &zs)?)
}

/// Inference forward without gradient bookkeeping.
pub fn forward<T: Scalar>(
    params: &ParamStore<T>,
    config: &ModelConfig,
    layout: &ChannelLayout,
    z: &NdArray<T>,
    t: &[T],
    prompts: &[Vec<u32>],
) -> Result<NdArray<T>> {
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let zv = g.constant(z.clone());
    let tv = g.constant(NdArray::new(vec![t.len()], t.to_vec())?);
    let out = forward_graph(&mut g, &bound, config, layout, zv, tv, prompts)?;
    Ok(g.value(out).clone())
}
