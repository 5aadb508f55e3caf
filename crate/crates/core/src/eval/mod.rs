//! Desk-scale quality metrics and the base-equivalence regression check.

mod flow;
mod subject;

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use flow::{block_matching, flow_consistency, BLOCK, DARK, SEARCH};
pub use subject::{classify, subject_consistency_proxy, MIN_SEGMENT};

use crate::error::{Error, Result};
use crate::model::{split, standard_normal, JointModel};
use crate::numerics::NdArray;
use crate::rng::substream;
use crate::worldsim::{prompt, PALETTE};

/// Per-sample values of one metric with their summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub fingerprint: String,
    /// Conditions worth knowing about, such as samples with no segments.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl MetricReport {
    pub fn new(metric: &str, values: Vec<f64>, fingerprint: &str) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("{metric} value {bad}"),
            });
        }
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Ok(Self {
            metric: metric.to_string(),
            values,
            mean,
            std,
            fingerprint: fingerprint.to_string(),
            flags: Vec::new(),
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Fixed-width plain-text table of report means.
pub fn summary_table(reports: &[MetricReport]) -> String {
    let width = reports.iter().map(|r| r.metric.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>5}  {:>8}  {:>8}", "metric", "n", "mean", "std");
    for r in reports {
        let _ = writeln!(out, "{:<width$}  {:>5}  {:>8.4}  {:>8.4}", r.metric, r.values.len(), r.mean, r.std);
    }
    out
}

/// Outcome of comparing an expanded model's video output with its base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseEquivalence {
    pub max_deviation: f64,
    pub max_world_output: f64,
    pub trials: usize,
    /// No trials were run, so the maximum is vacuous.
    pub vacuous: bool,
}

/// Worst-case `|video output(expanded) - output(base)|` over random joint
/// states, timesteps and prompts.
pub fn base_equivalence_report(expanded: &JointModel, base: &JointModel, trials: usize, seed: u64) -> Result<BaseEquivalence> {
    let layout = expanded.layout;
    if base.layout.total() != layout.vae || base.config.grid != expanded.config.grid {
        return Err(Error::Shape("base and expanded models do not correspond".into()));
    }
    let [f, h, w] = expanded.config.grid;
    let cells = f * h * w;
    let mut rng = substream(seed, "base-equivalence", 0);
    let mut report = BaseEquivalence {
        max_deviation: 0.0,
        max_world_output: 0.0,
        trials,
        vacuous: trials == 0,
    };
    for _ in 0..trials {
        let zv = NdArray::new(vec![1, f, h, w, layout.vae], standard_normal(&mut rng, cells * layout.vae))?;
        let zw = NdArray::new(vec![1, f, h, w, layout.world()], standard_normal(&mut rng, cells * layout.world()))?;
        let joint = NdArray::concat(&[&zv, &zw], 4)?;
        let t = [rng.random::<f32>()];
        let tokens = if rng.random_bool(0.1) {
            prompt::null_prompt()
        } else {
            let n = rng.random_range(1..=4);
            let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
            for k in 0..n {
                let j = rng.random_range(k..colors.len());
                colors.swap(k, j);
            }
            prompt::encode(&colors[..n], rng.random_bool(0.5))
        };
        let vb = base.velocity(&zv, &t, std::slice::from_ref(&tokens))?;
        let vj = expanded.velocity(&joint, &t, &[tokens])?;
        let parts = split(&vj, &layout)?;
        report.max_deviation = report.max_deviation.max(parts[0].max_abs_diff(&vb));
        for p in &parts[1..] {
            let m = p.data().iter().fold(0f64, |a, &x| a.max(x.abs() as f64));
            report.max_world_output = report.max_world_output.max(m);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
