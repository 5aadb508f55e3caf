//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and enough state to
//! apply its vector-Jacobian product. Nodes are created in topological order,
//! so `backward` is a single reverse sweep; accumulation order is therefore
//! fixed by the order ops were recorded.

use super::array::{numel, strides, NdArray};
use super::scalar::Scalar;
use super::NumericsError;

type Result<T> = std::result::Result<T, NumericsError>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary elementwise op maps onto the left.
#[derive(Debug, Clone)]
enum Broadcast {
    Same,
    /// `b` equals the trailing extents of `a`; index is `i % len`.
    Suffix(usize),
    /// General broadcast with an explicit index table.
    Map(Vec<usize>),
}

impl Broadcast {
    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Suffix(n) => i % n,
            Broadcast::Map(m) => m[i],
        }
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, T),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        shared_b: bool,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Mean(Var),
    MeanAxis(Var, usize),
    LayerNorm {
        x: Var,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Gelu(Var),
    SinEmbed {
        t: Var,
        scale: T,
    },
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Mean(..) => "mean",
            Op::MeanAxis(..) => "mean_axis",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax",
            Op::Gelu(..) => "gelu",
            Op::SinEmbed { .. } => "sinusoidal_embed",
            Op::Gather { .. } => "gather",
        }
    }
}

/// Recorded computation. Values are immutable once pushed.
#[derive(Debug, Default)]
pub struct Graph<T> {
    values: Vec<NdArray<T>>,
    ops: Vec<Op<T>>,
    needs_grad: Vec<bool>,
}

/// Gradients of a scalar output with respect to every grad-flagged leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<NdArray<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&NdArray<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<NdArray<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn broadcast_plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    let mismatch = || NumericsError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if b.len() > a.len() {
        return Err(mismatch());
    }
    let offset = a.len() - b.len();
    for (i, &e) in b.iter().enumerate() {
        if e != 1 && e != a[offset + i] {
            return Err(mismatch());
        }
    }
    if a[offset..] == *b {
        return Ok(Broadcast::Suffix(numel(b).max(1)));
    }
    let bs = strides(b);
    let mut eff = vec![0usize; a.len()];
    for (i, &e) in b.iter().enumerate() {
        if e != 1 {
            eff[offset + i] = bs[i];
        }
    }
    let mut map = Vec::with_capacity(numel(a));
    strided_walk(a, &eff, |_, off| map.push(off));
    Ok(Broadcast::Map(map))
}

/// Visits every multi-index of `shape` in row-major order, passing the flat
/// output index and the offset `sum(idx[d] * src_strides[d])`.
fn strided_walk(shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel(shape);
    if n == 0 {
        return;
    }
    if shape.is_empty() {
        f(0, 0);
        return;
    }
    let rank = shape.len();
    let inner = shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let mut out = 0usize;
    while out < n {
        for j in 0..inner {
            f(out + j, base + j * inner_stride);
        }
        out += inner;
        // advance the odometer on the outer dims
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            base -= src_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let x = x.as_f64();
    let u = GELU_C * (x + GELU_A * x * x * x);
    T::from_f64(0.5 * x * (1.0 + u.tanh()))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let x = x.as_f64();
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    T::from_f64(0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x))
}

fn sin_freqs(dim: usize) -> Vec<f64> {
    let half = dim / 2;
    (0..half)
        .map(|j| (-(10_000f64.ln()) * j as f64 / half as f64).exp())
        .collect()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: NdArray<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    /// Leaf that receives a gradient in `backward`.
    pub fn param(&mut self, value: NdArray<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as data; no gradient is accumulated for it.
    pub fn constant(&mut self, value: NdArray<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &NdArray<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.ops[v.0].name()
    }

    pub fn check_finite(&self, v: Var) -> Result<()> {
        if self.values[v.0].is_finite() {
            Ok(())
        } else {
            Err(NumericsError::NonFinite {
                op: self.op_name(v),
            })
        }
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(NdArray<T>, Broadcast)> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        let plan = broadcast_plan(name, av.shape(), bv.shape())?;
        let (ad, bd) = (av.data(), bv.data());
        let data: Vec<T> = match &plan {
            Broadcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            _ => ad
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[plan.index(i)]))
                .collect(),
        };
        Ok((NdArray::new(av.shape().to_vec(), data)?, plan))
    }

    /// Elementwise `a + b`; `b` may broadcast into `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, plan) = self.binary("add", a, b, |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Add(a, b, plan), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, plan) = self.binary("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b, plan), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, plan) = self.binary("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b, plan), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let v = self.values[x.0].map(|e| e * c);
        let ng = self.ng(&[x]);
        self.push(v, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let v = self.values[x.0].map(|e| e + c);
        let ng = self.ng(&[x]);
        self.push(v, Op::AddScalar(x), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product over the last two axes, optionally transposing either
    /// operand. `a` may carry leading batch axes; `b` is either a plain matrix
    /// shared across the batch or has exactly `a`'s batch axes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ash, bsh) = (self.values[a.0].shape(), self.values[b.0].shape());
        let mismatch = || NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: ash.to_vec(),
            rhs: bsh.to_vec(),
        };
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(mismatch());
        }
        let ar = ash.len();
        let br = bsh.len();
        let (m, k) = if ta {
            (ash[ar - 1], ash[ar - 2])
        } else {
            (ash[ar - 2], ash[ar - 1])
        };
        let (kb, n) = if tb {
            (bsh[br - 1], bsh[br - 2])
        } else {
            (bsh[br - 2], bsh[br - 1])
        };
        let shared_b = br == 2;
        if k != kb || (!shared_b && bsh[..br - 2] != ash[..ar - 2]) {
            return Err(mismatch());
        }
        let batch: usize = ash[..ar - 2].iter().product();
        let mut out_shape = ash[..ar - 2].to_vec();
        out_shape.extend_from_slice(&[m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        let ad = self.values[a.0].data();
        let bd = self.values[b.0].data();
        let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
        let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
        // SAFETY: slices are sized exactly batch*m*k, k*n (per batch) and batch*m*n.
        unsafe {
            if shared_b && !ta {
                T::gemm(
                    batch * m,
                    k,
                    n,
                    T::one(),
                    ad.as_ptr(),
                    rsa,
                    csa,
                    bd.as_ptr(),
                    rsb,
                    csb,
                    T::zero(),
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            } else {
                for i in 0..batch {
                    let boff = if shared_b { 0 } else { i * k * n };
                    T::gemm(
                        m,
                        k,
                        n,
                        T::one(),
                        ad.as_ptr().add(i * m * k),
                        rsa,
                        csa,
                        bd.as_ptr().add(boff),
                        rsb,
                        csb,
                        T::zero(),
                        out.as_mut_ptr().add(i * m * n),
                        n as isize,
                        1,
                    );
                }
            }
        }
        let v = NdArray::new(out_shape, out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            v,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                shared_b,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.values[x.0].clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sh = self.values[x.0].shape();
        let mut seen = vec![false; sh.len()];
        if perm.len() != sh.len() || perm.iter().any(|&p| p >= sh.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(NumericsError::ShapeMismatch {
                op: "permute",
                lhs: sh.to_vec(),
                rhs: perm.to_vec(),
            });
        }
        let st = strides(sh);
        let out_shape: Vec<usize> = perm.iter().map(|&p| sh[p]).collect();
        let src: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
        let xd = self.values[x.0].data();
        let mut out = vec![T::zero(); xd.len()];
        strided_walk(&out_shape, &src, |o, s| out[o] = xd[s]);
        let v = NdArray::new(out_shape, out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::Permute(x, perm.to_vec()), ng))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.values[x.0].slice_axis(axis, start, len)?;
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::Slice { x, axis, start }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let arrays: Vec<&NdArray<T>> = parts.iter().map(|p| &self.values[p.0]).collect();
        let v = NdArray::concat(&arrays, axis)?;
        let ng = self.ng(parts);
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Mean of all elements, as a rank-0 array.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = &self.values[x.0];
        if xv.is_empty() {
            return Err(NumericsError::Empty { op: "mean" });
        }
        let s: f64 = xv.data().iter().map(|e| e.as_f64()).sum();
        let v = NdArray::scalar(T::from_f64(s / xv.len() as f64));
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::Mean(x), ng))
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sh = self.values[x.0].shape().to_vec();
        if axis >= sh.len() || sh[axis] == 0 {
            return Err(NumericsError::BadAxis {
                op: "mean_axis",
                shape: sh,
                axis,
            });
        }
        let outer: usize = sh[..axis].iter().product();
        let inner: usize = sh[axis + 1..].iter().product();
        let ext = sh[axis];
        let xd = self.values[x.0].data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..ext {
                let base = (o * ext + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[base + i];
                }
            }
        }
        let inv = T::from_f64(1.0 / ext as f64);
        out.iter_mut().for_each(|e| *e *= inv);
        let mut out_shape = sh.clone();
        out_shape.remove(axis);
        let v = NdArray::new(out_shape, out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::MeanAxis(x, axis), ng))
    }

    /// Normalizes over the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = &self.values[x.0];
        let d = *xv.shape().last().ok_or(NumericsError::BadAxis {
            op: "layer_norm",
            shape: vec![],
            axis: 0,
        })?;
        let rows = xv.len() / d.max(1);
        let mut out = vec![T::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().map(|e| e.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|e| (e.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for (o, &e) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = T::from_f64((e.as_f64() - mean) * rs);
            }
            rstd.push(T::from_f64(rs));
        }
        let v = NdArray::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::LayerNorm { x, rstd }, ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.values[x.0];
        let d = *xv.shape().last().ok_or(NumericsError::BadAxis {
            op: "softmax",
            shape: vec![],
            axis: 0,
        })?;
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(d.max(1)) {
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for e in row.iter_mut() {
                *e = (*e - mx).exp();
                s += *e;
            }
            let inv = T::one() / s;
            row.iter_mut().for_each(|e| *e *= inv);
        }
        let v = NdArray::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(v, Op::Softmax(x), ng))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.values[x.0].map(gelu);
        let ng = self.ng(&[x]);
        self.push(v, Op::Gelu(x), ng)
    }

    /// Sinusoidal embedding of a rank-1 input `t` into `[len(t), dim]`:
    /// first half cosines, second half sines of `scale * t * f_j` with
    /// geometrically spaced frequencies `f_j = 10000^(-j/half)`.
    pub fn sinusoidal_embed(&mut self, t: Var, dim: usize, scale: f64) -> Result<Var> {
        let tv = &self.values[t.0];
        if tv.rank() != 1 || dim < 2 || dim % 2 != 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "sinusoidal_embed",
                lhs: tv.shape().to_vec(),
                rhs: vec![dim],
            });
        }
        let freqs = sin_freqs(dim);
        let half = dim / 2;
        let n = tv.len();
        let mut out = vec![T::zero(); n * dim];
        for (i, &ti) in tv.data().iter().enumerate() {
            for (j, f) in freqs.iter().enumerate() {
                let arg = scale * ti.as_f64() * f;
                out[i * dim + j] = T::from_f64(arg.cos());
                out[i * dim + half + j] = T::from_f64(arg.sin());
            }
        }
        let v = NdArray::new(vec![n, dim], out)?;
        let ng = self.ng(&[t]);
        Ok(self.push(
            v,
            Op::SinEmbed {
                t,
                scale: T::from_f64(scale),
            },
            ng,
        ))
    }

    /// Row lookup: `table[rows[i], :]` stacked into `[rows.len(), D]`.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let tv = &self.values[table.0];
        if tv.rank() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "gather",
                lhs: tv.shape().to_vec(),
                rhs: vec![rows.len()],
            });
        }
        let (v_rows, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= v_rows) {
            return Err(NumericsError::IndexOutOfRange {
                op: "gather",
                index: bad,
                extent: v_rows,
            });
        }
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&tv.data()[r * d..(r + 1) * d]);
        }
        let v = NdArray::new(vec![rows.len(), d], out)?;
        let ng = self.ng(&[table]);
        Ok(self.push(
            v,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = &self.values[output.0];
        if out.len() != 1 {
            return Err(NumericsError::NotScalar {
                shape: out.shape().to_vec(),
            });
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[output.0] = Some(vec![T::one()]);
        for id in (0..n).rev() {
            if !self.needs_grad[id] {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.ops[id], Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.apply_vjp(id, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| matches!(self.ops[i], Op::Leaf) && self.needs_grad[i])
                    .map(|g| NdArray::new(self.values[i].shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn apply_vjp(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let acc = |v: Var, grads: &mut [Option<Vec<T>>]| -> Option<*mut T> {
            if !self.needs_grad[v.0] {
                return None;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.values[v.0].len()]);
            Some(slot.as_mut_ptr())
        };
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:block) => {
                if self.needs_grad[$v.0] {
                    let len = self.values[$v.0].len();
                    let $buf = grads[$v.0].get_or_insert_with(|| vec![T::zero(); len]);
                    $body
                }
            };
        }
        match &self.ops[id] {
            Op::Leaf => {}
            Op::Add(a, b, plan) | Op::Sub(a, b, plan) => {
                let sign = if matches!(self.ops[id], Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                with_grad!(a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                });
                with_grad!(b, |gb| {
                    for (i, &y) in g.iter().enumerate() {
                        gb[plan.index(i)] += sign * y;
                    }
                });
            }
            Op::Mul(a, b, plan) => {
                let (av, bv) = (self.values[a.0].data(), self.values[b.0].data());
                with_grad!(a, |ga| {
                    for (i, &y) in g.iter().enumerate() {
                        ga[i] += y * bv[plan.index(i)];
                    }
                });
                with_grad!(b, |gb| {
                    for (i, &y) in g.iter().enumerate() {
                        gb[plan.index(i)] += y * av[i];
                    }
                });
            }
            Op::Scale(x, c) => with_grad!(x, |gx| {
                gx.iter_mut().zip(g).for_each(|(e, &y)| *e += y * *c);
            }),
            Op::AddScalar(x) | Op::Reshape(x) => with_grad!(x, |gx| {
                gx.iter_mut().zip(g).for_each(|(e, &y)| *e += y);
            }),
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                shared_b,
            } => {
                let (ta, tb, shared_b) = (*ta, *tb, *shared_b);
                let ash = self.values[a.0].shape();
                let ar = ash.len();
                let (m, k) = if ta {
                    (ash[ar - 1], ash[ar - 2])
                } else {
                    (ash[ar - 2], ash[ar - 1])
                };
                let out_sh = self.values[id].shape();
                let n = out_sh[out_sh.len() - 1];
                let batch: usize = ash[..ar - 2].iter().product();
                let ad = self.values[a.0].data().as_ptr();
                let bd = self.values[b.0].data().as_ptr();
                let gd = g.as_ptr();
                // op(A) is m x k; op(B) is k x n; G is m x n.
                let (rsa, csa) = if ta { (1isize, m as isize) } else { (k as isize, 1isize) };
                let (rsb, csb) = if tb { (1isize, k as isize) } else { (n as isize, 1isize) };
                // dA_op = G op(B)^T written through op(A)'s strides; dB_op = op(A)^T G.
                if let Some(ga) = acc(*a, grads) {
                    unsafe {
                        if shared_b && !ta {
                            T::gemm(batch * m, n, k, T::one(), gd, n as isize, 1, bd, csb, rsb, T::one(), ga, rsa, csa);
                        } else {
                            for i in 0..batch {
                                let boff = if shared_b { 0 } else { i * k * n };
                                T::gemm(
                                    m,
                                    n,
                                    k,
                                    T::one(),
                                    gd.add(i * m * n),
                                    n as isize,
                                    1,
                                    bd.add(boff),
                                    csb,
                                    rsb,
                                    T::one(),
                                    ga.add(i * m * k),
                                    rsa,
                                    csa,
                                );
                            }
                        }
                    }
                }
                if let Some(gb) = acc(*b, grads) {
                    unsafe {
                        if shared_b && !ta {
                            T::gemm(k, batch * m, n, T::one(), ad, csa, rsa, gd, n as isize, 1, T::one(), gb, rsb, csb);
                        } else {
                            for i in 0..batch {
                                let boff = if shared_b { 0 } else { i * k * n };
                                T::gemm(
                                    k,
                                    m,
                                    n,
                                    T::one(),
                                    ad.add(i * m * k),
                                    csa,
                                    rsa,
                                    gd.add(i * m * n),
                                    n as isize,
                                    1,
                                    T::one(),
                                    gb.add(boff),
                                    rsb,
                                    csb,
                                );
                            }
                        }
                    }
                }
            }
            Op::Permute(x, perm) => with_grad!(x, |gx| {
                let sh = self.values[x.0].shape();
                let st = strides(sh);
                let out_shape: Vec<usize> = perm.iter().map(|&p| sh[p]).collect();
                let src: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
                strided_walk(&out_shape, &src, |o, s| gx[s] += g[o]);
            }),
            Op::Slice { x, axis, start } => with_grad!(x, |gx| {
                let sh = self.values[x.0].shape();
                let outer: usize = sh[..*axis].iter().product();
                let inner: usize = sh[axis + 1..].iter().product();
                let ext = sh[*axis];
                let len = self.values[id].shape()[*axis];
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        gx[dst + i] += g[src + i];
                    }
                }
            }),
            Op::Concat { parts, axis } => {
                let sh = self.values[id].shape();
                let outer: usize = sh[..*axis].iter().product();
                let inner: usize = sh[axis + 1..].iter().product();
                let total = sh[*axis];
                let mut offset = 0;
                for p in parts {
                    let ext = self.values[p.0].shape()[*axis];
                    with_grad!(p, |gp| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * ext * inner;
                            for i in 0..ext * inner {
                                gp[dst + i] += g[src + i];
                            }
                        }
                    });
                    offset += ext;
                }
            }
            Op::Mean(x) => with_grad!(x, |gx| {
                let s = g[0] / T::from_f64(gx.len() as f64);
                gx.iter_mut().for_each(|e| *e += s);
            }),
            Op::MeanAxis(x, axis) => with_grad!(x, |gx| {
                let sh = self.values[x.0].shape();
                let outer: usize = sh[..*axis].iter().product();
                let inner: usize = sh[axis + 1..].iter().product();
                let ext = sh[*axis];
                let inv = T::from_f64(1.0 / ext as f64);
                for o in 0..outer {
                    for a in 0..ext {
                        for i in 0..inner {
                            gx[(o * ext + a) * inner + i] += g[o * inner + i] * inv;
                        }
                    }
                }
            }),
            Op::LayerNorm { x, rstd } => with_grad!(x, |gx| {
                let y = self.values[id].data();
                let d = y.len() / rstd.len().max(1);
                let inv_d = 1.0 / d as f64;
                for (r, &rs) in rstd.iter().enumerate() {
                    let range = r * d..(r + 1) * d;
                    let (yr, gr) = (&y[range.clone()], &g[range.clone()]);
                    let mg = gr.iter().map(|e| e.as_f64()).sum::<f64>() * inv_d;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>() * inv_d;
                    for (j, e) in gx[range].iter_mut().enumerate() {
                        *e += T::from_f64(rs.as_f64() * (gr[j].as_f64() - mg - yr[j].as_f64() * mgy));
                    }
                }
            }),
            Op::Softmax(x) => with_grad!(x, |gx| {
                let y = self.values[id].data();
                let d = *self.values[id].shape().last().unwrap();
                for ((yr, gr), gxr) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(gx.chunks_exact_mut(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gxr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }),
            Op::Gelu(x) => with_grad!(x, |gx| {
                let xv = self.values[x.0].data();
                for (i, e) in gx.iter_mut().enumerate() {
                    *e += g[i] * gelu_grad(xv[i]);
                }
            }),
            Op::SinEmbed { t, scale } => with_grad!(t, |gt| {
                let tv = self.values[t.0].data();
                let dim = self.values[id].shape()[1];
                let half = dim / 2;
                let freqs = sin_freqs(dim);
                let s = scale.as_f64();
                for (i, &ti) in tv.iter().enumerate() {
                    let mut acc = 0.0;
                    for (j, f) in freqs.iter().enumerate() {
                        let arg = s * ti.as_f64() * f;
                        acc += -g[i * dim + j].as_f64() * arg.sin() * s * f;
                        acc += g[i * dim + half + j].as_f64() * arg.cos() * s * f;
                    }
                    gt[i] += T::from_f64(acc);
                }
            }),
            Op::Gather { table, rows } => with_grad!(table, |gt| {
                let d = self.values[table.0].shape()[1];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        gt[r * d + j] += g[i * d + j];
                    }
                }
            }),
        }
    }
}
