use crate::error::{Error, Result};
use crate::model::{decays, ParamStore};
use crate::numerics::NdArray;

/// AdamW with decoupled weight decay on dense weight matrices only.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<NdArray<f32>>,
    pub v: Vec<NdArray<f32>>,
    /// Updates applied so far, for bias correction.
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || params.values.iter().map(|p| NdArray::zeros(p.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &[NdArray<f32>], lr: f64) -> Result<()> {
        if grads.len() != params.values.len() || self.m.len() != grads.len() {
            return Err(Error::Shape("optimizer state does not match the parameters".into()));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 / (1.0 - self.beta1.powi(self.t as i32));
        let c2 = 1.0 / (1.0 - self.beta2.powi(self.t as i32));
        let step = (lr * c1) as f32;
        let c2 = c2 as f32;
        let eps = self.eps as f32;
        for (i, name) in params.names.iter().enumerate() {
            let shrink = if decays(name) { (1.0 - lr * self.weight_decay) as f32 } else { 1.0 };
            let p = params.values[i].data_mut();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grads[i].data()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p = *p * shrink - step * *m / ((*v * c2).sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moments as named arrays for checkpointing.
    pub fn export(&self, names: &[String]) -> Vec<(String, NdArray<f32>)> {
        let mut out = vec![("adam.t".to_string(), NdArray::scalar(self.t as f32))];
        for (n, m) in names.iter().zip(&self.m) {
            out.push((format!("adam.m.{n}"), m.clone()));
        }
        for (n, v) in names.iter().zip(&self.v) {
            out.push((format!("adam.v.{n}"), v.clone()));
        }
        out
    }

    /// Restores moments saved by [`AdamW::export`].
    pub fn restore(&mut self, names: &[String], extra: &[(String, NdArray<f32>)]) -> Result<()> {
        let find = |key: String| {
            extra
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Error::Config(format!("checkpoint lacks optimizer state {key}")))
        };
        self.t = find("adam.t".into())?.item() as u64;
        for (i, n) in names.iter().enumerate() {
            let (m, v) = (find(format!("adam.m.{n}"))?, find(format!("adam.v.{n}"))?);
            if m.shape() != self.m[i].shape() || v.shape() != self.v[i].shape() {
                return Err(Error::Shape(format!("optimizer state for {n} has the wrong shape")));
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}
