use crate::error::{Error, Result};
use crate::numerics::NdArray;

pub const DEFAULT_EPS: f64 = 1e-6;

/// Per-channel z-scoring fitted on a corpus of `N x D` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub eps: f64,
}

impl Standardizer {
    pub fn fit(corpus: &NdArray<f32>, eps: f64) -> Result<Self> {
        let (n, d) = rows(corpus)?;
        if n == 0 {
            return Err(Error::Shape("standardizer corpus is empty".into()));
        }
        if !(eps > 0.0) {
            return Err(Error::Config("standardizer eps must be positive".into()));
        }
        let mut mean = vec![0f64; d];
        for row in corpus.data().chunks_exact(d) {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += x as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0f64; d];
        for row in corpus.data().chunks_exact(d) {
            for c in 0..d {
                var[c] += (row[c] as f64 - mean[c]).powi(2);
            }
        }
        let std = var.into_iter().map(|v| (v / n as f64).sqrt().max(eps)).collect();
        Ok(Self { mean, std, eps })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Applies to any array whose last axis has `dim()` channels.
    pub fn apply(&self, x: &NdArray<f32>) -> Result<NdArray<f32>> {
        let d = self.dim();
        if x.shape().last() != Some(&d) {
            return Err(Error::Shape(format!("standardizer expects {d} channels, got {:?}", x.shape())));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            for c in 0..d {
                row[c] = ((row[c] as f64 - self.mean[c]) / self.std[c]) as f32;
            }
        }
        Ok(out)
    }
}

pub(crate) fn rows(x: &NdArray<f32>) -> Result<(usize, usize)> {
    let d = *x.shape().last().ok_or_else(|| Error::Shape("scalar corpus".into()))?;
    if d == 0 {
        return Err(Error::Shape("corpus has zero channels".into()));
    }
    Ok((x.len() / d, d))
}
