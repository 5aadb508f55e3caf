use nalgebra::{DMatrix, SymmetricEigen};

use super::standardize::rows;
use crate::error::{Error, Result};
use crate::numerics::NdArray;

/// Top-`k` principal axes of an `N x D` corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    /// `D x k`, columns orthonormal, sorted by decreasing variance.
    pub components: NdArray<f64>,
    pub mean: Vec<f64>,
    /// Eigenvalues of the retained axes.
    pub variances: Vec<f64>,
}

impl PcaModel {
    pub fn fit(corpus: &NdArray<f32>, k: usize) -> Result<Self> {
        let (n, d) = rows(corpus)?;
        if k == 0 || k > d {
            return Err(Error::Config(format!("pca needs 1 <= k <= raw dim, got k={k} with raw dim {d}")));
        }
        if n <= k {
            return Err(Error::Config(format!("pca needs more samples than components, got {n} <= k={k}")));
        }
        let mut mean = vec![0f64; d];
        for row in corpus.data().chunks_exact(d) {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += x as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = DMatrix::<f64>::zeros(d, d);
        let mut centred = vec![0f64; d];
        for row in corpus.data().chunks_exact(d) {
            for c in 0..d {
                centred[c] = row[c] as f64 - mean[c];
            }
            for i in 0..d {
                for j in i..d {
                    cov[(i, j)] += centred[i] * centred[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] /= (n - 1) as f64;
                cov[(j, i)] = cov[(i, j)];
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        // stable sort keeps ties in the solver's order, which is deterministic
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut comps = vec![0f64; d * k];
        let mut variances = Vec::with_capacity(k);
        for (j, &src) in order.iter().take(k).enumerate() {
            let col = eig.eigenvectors.column(src);
            let pivot = (0..d).fold(0, |best, i| if col[i].abs() > col[best].abs() { i } else { best });
            let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..d {
                comps[i * k + j] = sign * col[i];
            }
            variances.push(eig.eigenvalues[src].max(0.0));
        }
        Ok(Self {
            components: NdArray::new(vec![d, k], comps)?,
            mean,
            variances,
        })
    }

    pub fn raw_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.shape()[1]
    }

    /// Projects the last axis from `D` onto `k` coefficients.
    pub fn apply(&self, x: &NdArray<f32>) -> Result<NdArray<f32>> {
        let (d, k) = (self.raw_dim(), self.k());
        let (n, xd) = rows(x)?;
        if xd != d {
            return Err(Error::Shape(format!("pca expects {d} channels, got {:?}", x.shape())));
        }
        let w = self.components.data();
        let mut out = Vec::with_capacity(n * k);
        for row in x.data().chunks_exact(d) {
            for j in 0..k {
                let s: f64 = (0..d).map(|i| (row[i] as f64 - self.mean[i]) * w[i * k + j]).sum();
                out.push(s as f32);
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = k;
        Ok(NdArray::new(shape, out)?)
    }

    /// Maps `k` coefficients back to `D` channels.
    pub fn reconstruct(&self, z: &NdArray<f32>) -> Result<NdArray<f32>> {
        let (d, k) = (self.raw_dim(), self.k());
        let (_, zk) = rows(z)?;
        if zk != k {
            return Err(Error::Shape(format!("pca expects {k} coefficients, got {:?}", z.shape())));
        }
        let w = self.components.data();
        let mut out = Vec::with_capacity(z.len() / k * d);
        for row in z.data().chunks_exact(k) {
            for i in 0..d {
                let s: f64 = (0..k).map(|j| row[j] as f64 * w[i * k + j]).sum();
                out.push((s + self.mean[i]) as f32);
            }
        }
        let mut shape = z.shape().to_vec();
        *shape.last_mut().unwrap() = d;
        Ok(NdArray::new(shape, out)?)
    }

    /// Largest deviation of `WᵀW` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let (d, k) = (self.raw_dim(), self.k());
        let w = self.components.data();
        let mut worst = 0f64;
        for a in 0..k {
            for b in 0..k {
                let dot: f64 = (0..d).map(|i| w[i * k + a] * w[i * k + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> NdArray<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        // mix independent normals so channels are correlated
        let base: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        NdArray::from_fn(&[n, d], |i| {
            let (r, c) = (i / d, i % d);
            (0..=c).map(|j| base[r * d + j] * (1.0 + j as f64) / (1.0 + c as f64)).sum::<f64>() as f32
        })
    }

    fn sq_error(a: &NdArray<f32>, b: &NdArray<f32>) -> f64 {
        a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
    }

    #[test]
    fn rank_one_data_reconstructs_exactly() {
        let x = NdArray::from_fn(&[20, 3], |i| {
            let s = (i / 3) as f32 * 0.25 - 2.0;
            [1.0, -2.0, 0.5][i % 3] * s + [3.0, 1.0, -1.0][i % 3]
        });
        let p = PcaModel::fit(&x, 1).unwrap();
        let back = p.reconstruct(&p.apply(&x).unwrap()).unwrap();
        assert!(x.max_abs_diff(&back) < 1e-5);
    }

    #[test]
    fn full_basis_reconstructs_exactly() {
        let x = gaussian(50, 4, 3);
        let p = PcaModel::fit(&x, 4).unwrap();
        let back = p.reconstruct(&p.apply(&x).unwrap()).unwrap();
        assert!(x.max_abs_diff(&back) < 1e-5);
    }

    #[test]
    fn leading_axis_matches_closed_form_2x2() {
        let x = gaussian(400, 2, 11);
        let p = PcaModel::fit(&x, 1).unwrap();
        // closed-form eigenvector of [[a, b], [b, c]]
        let n = 400.0;
        let col = |c: usize| x.data().chunks(2).map(move |r| r[c] as f64);
        let (m0, m1) = (col(0).sum::<f64>() / n, col(1).sum::<f64>() / n);
        let cov = |i: usize, j: usize, mi: f64, mj: f64| {
            x.data().chunks(2).map(|r| (r[i] as f64 - mi) * (r[j] as f64 - mj)).sum::<f64>() / (n - 1.0)
        };
        let (a, b, c) = (cov(0, 0, m0, m0), cov(0, 1, m0, m1), cov(1, 1, m1, m1));
        let l1 = 0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt();
        let (mut v0, mut v1) = (b, l1 - a);
        let norm = (v0 * v0 + v1 * v1).sqrt();
        v0 /= norm;
        v1 /= norm;
        let pivot = if v1.abs() > v0.abs() { v1 } else { v0 };
        if pivot < 0.0 {
            v0 = -v0;
            v1 = -v1;
        }
        let got = p.components.data();
        assert!((got[0] - v0).abs() < 1e-6 && (got[1] - v1).abs() < 1e-6, "{got:?} vs {v0} {v1}");
        assert!((p.variances[0] - l1).abs() < 1e-9 * l1.max(1.0));
    }

    #[test]
    fn reconstruction_error_non_increasing_in_k() {
        let x = gaussian(300, 11, 5);
        let errs: Vec<f64> = (1..=11)
            .map(|k| {
                let p = PcaModel::fit(&x, k).unwrap();
                assert!(p.orthonormality_error() < 1e-6);
                sq_error(&x, &p.reconstruct(&p.apply(&x).unwrap()).unwrap())
            })
            .collect();
        for w in errs.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "{errs:?}");
        }
    }

    #[test]
    fn invalid_k_is_rejected() {
        let x = gaussian(10, 3, 1);
        assert!(PcaModel::fit(&x, 4).is_err());
        assert!(PcaModel::fit(&x, 0).is_err());
        assert!(PcaModel::fit(&gaussian(3, 3, 1), 3).is_err());
    }

    #[test]
    fn largest_entry_is_positive() {
        let p = PcaModel::fit(&gaussian(100, 5, 8), 5).unwrap();
        for j in 0..5 {
            let col: Vec<f64> = (0..5).map(|i| p.components.data()[i * 5 + j]).collect();
            let pivot = col.iter().cloned().fold(0f64, |b, v| if v.abs() > b.abs() { v } else { b });
            assert!(pivot > 0.0);
        }
    }

    proptest! {
        #[test]
        fn components_orthonormal_and_apply_linear(seed in 0u64..500, d in 2usize..9, a in -3f32..3.0) {
            let x = gaussian(60, d, seed);
            let k = 1 + seed as usize % d;
            let p = PcaModel::fit(&x, k).unwrap();
            prop_assert!(p.orthonormality_error() < 1e-6);
            // affine in x, so differences are linear
            let u = x.slice_axis(0, 0, 1).unwrap();
            let v = x.slice_axis(0, 1, 1).unwrap();
            let mix = NdArray::new(u.shape().to_vec(), u.data().iter().zip(v.data()).map(|(&p, &q)| a * p + (1.0 - a) * q).collect()).unwrap();
            let (pu, pv, pm) = (p.apply(&u).unwrap(), p.apply(&v).unwrap(), p.apply(&mix).unwrap());
            for j in 0..k {
                let want = a * pu.data()[j] + (1.0 - a) * pv.data()[j];
                prop_assert!((pm.data()[j] - want).abs() < 1e-3 * (1.0 + want.abs()));
            }
        }
    }
}
