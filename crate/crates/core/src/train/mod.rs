//! Flow-matching training of the joint model, with annealed world-loss
//! weights and condition dropout; the same loop pretrains the video-only base.

mod loss;
mod optim;
mod schedule;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use loss::{dropout_conditions, joint_loss, loss_graph, prepare, Batch, DropoutProbs, LossBreakdown, LossInputs};
pub use optim::AdamW;
pub use schedule::{cca_weight, flow_interpolate, warmup_lr};

use crate::error::{Error, Result};
use crate::model::{forward_graph, standard_normal, Bound, ChannelLayout, Checkpoint, CheckpointHeader, JointModel, ModelConfig};
use crate::numerics::{grad_check, GradCheckReport, Graph, NdArray, Var};
use crate::worldsim::prompt;
use crate::rng::{substream, DROPOUT};

/// How the world-loss weight evolves over training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaSchedule {
    /// Cosine decay from `lambda_base` to zero.
    Cosine,
    /// `lambda_base` throughout.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub lambda_base: f64,
    pub schedule: LambdaSchedule,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub warmup: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub dropout: DropoutProbs,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lambda_base: 0.2,
            schedule: LambdaSchedule::Cosine,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            weight_decay: 0.2,
            warmup: 400,
            batch_size: 4,
            seed: 42,
            dropout: DropoutProbs::default(),
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("train steps and batch_size must be positive".into()));
        }
        if !(self.lambda_base >= 0.0 && self.lambda_base.is_finite()) {
            return Err(Error::Config("lambda_base must be finite and non-negative".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        self.dropout.validate()
    }

    /// World-loss weights `[temporal, semantic, spatial]` at `step`.
    pub fn lambdas(&self, step: u64) -> [f64; 3] {
        let l = match self.schedule {
            LambdaSchedule::Cosine => cca_weight(step, self.steps, self.lambda_base),
            LambdaSchedule::Constant => self.lambda_base,
        };
        [l; 3]
    }
}

/// One preprocessed clip: clean joint latent `F x H x W x C` and its prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub z0: NdArray<f32>,
    pub prompt: Vec<u32>,
}

/// Draws the step's batch, timesteps and noise from the step-indexed
/// substreams, then applies condition dropout.
pub fn draw_batch(data: &[TrainExample], config: &TrainConfig, step: u64) -> Result<(Batch, NdArray<f32>, Vec<f32>)> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = substream(config.seed, "batch", step);
    let b = config.batch_size;
    let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..data.len())).collect();
    let t: Vec<f32> = (0..b).map(|_| rng.random::<f32>()).collect();
    let cell = data[0].z0.shape().to_vec();
    let per = data[0].z0.len();
    let mut z0 = Vec::with_capacity(b * per);
    for &i in &idx {
        if data[i].z0.shape() != cell.as_slice() {
            return Err(Error::Shape(format!("training example {i} has shape {:?}, expected {cell:?}", data[i].z0.shape())));
        }
        z0.extend_from_slice(data[i].z0.data());
    }
    let mut shape = vec![b];
    shape.extend_from_slice(&cell);
    let z1 = NdArray::new(shape.clone(), standard_normal(&mut rng, b * per))?;
    let batch = Batch {
        z0: NdArray::new(shape, z0)?,
        prompts: idx.iter().map(|&i| data[i].prompt.clone()).collect(),
        masked: vec![[false; 3]; b],
    };
    let mut drng = substream(config.seed, DROPOUT, step);
    Ok((dropout_conditions(&batch, &config.dropout, &mut drng), z1, t))
}

/// Finite-difference check of the full joint loss with respect to every
/// parameter of a tiny 64-bit model, on one drawn training batch.
pub fn joint_loss_grad_check(seed: u64) -> Result<GradCheckReport> {
    let config = ModelConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        mlp_ratio: 2,
        grid: [2, 2, 2],
        init_std: 0.3,
    };
    let layout = ChannelLayout {
        vae: 3,
        temporal: 2,
        semantic: 1,
        spatial: 1,
    };
    let model = JointModel::init(config.clone(), layout, seed)?;
    let c = layout.total();
    let data: Vec<TrainExample> = (0..4)
        .map(|i| TrainExample {
            z0: NdArray::from_fn(&[2, 2, 2, c], |j| (((i * 31 + j * 7) % 13) as f32 - 6.0) / 6.0),
            prompt: prompt::encode(&[i % 8], i % 2 == 0),
        })
        .collect();
    let tc = TrainConfig {
        batch_size: 2,
        seed,
        ..TrainConfig::default()
    };
    let (batch, z1, t) = draw_batch(&data, &tc, 3)?;
    let inp = prepare(&batch, &z1, &t, &layout)?;
    let (z_t, target) = (inp.z_t.cast::<f64>(), inp.target.cast::<f64>());
    let t64 = NdArray::new(vec![t.len()], inp.t.iter().map(|&x| x as f64).collect())?;
    let params = model.params.cast::<f64>();
    let names = params.names.clone();
    let mut report = grad_check(
        |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
            let bound = Bound::from_vars(&names, vars);
            let zv = g.constant(z_t.clone());
            let tv = g.constant(t64.clone());
            let pred = forward_graph(g, &bound, &config, &layout, zv, tv, &inp.prompts)?;
            Ok(loss_graph(g, pred, &target, &layout, [0.2, 0.15, 0.1])?.0)
        },
        &params.values,
        1e-5,
    )?;
    report.name = "joint_loss".into();
    Ok(report)
}

/// Model and optimizer between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: JointModel,
    pub optimizer: AdamW,
    /// Steps completed.
    pub step: u64,
}

impl TrainState {
    pub fn new(model: JointModel, config: &TrainConfig) -> Self {
        let optimizer = AdamW::new(&model.params, config.beta1, config.beta2, config.adam_eps, config.weight_decay);
        Self { model, optimizer, step: 0 }
    }

    pub fn checkpoint(&self, fingerprint: &str) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                layout: self.model.layout,
                model: self.model.config.clone(),
                step: self.step,
                fingerprint: fingerprint.to_string(),
            },
            model: self.model.clone(),
            extra: self.optimizer.export(&self.model.params.names),
        }
    }

    /// Restores a state saved by [`TrainState::checkpoint`].
    pub fn from_checkpoint(ck: Checkpoint, config: &TrainConfig) -> Result<Self> {
        let mut state = Self::new(ck.model, config);
        state.optimizer.restore(&state.model.params.names, &ck.extra)?;
        state.step = ck.header.step;
        Ok(state)
    }
}

/// Applies one optimizer step and returns the loss terms.
pub fn train_step(state: &mut TrainState, data: &[TrainExample], config: &TrainConfig) -> Result<LossBreakdown> {
    let step = state.step;
    let (batch, z1, t) = draw_batch(data, config, step)?;
    let inputs = prepare(&batch, &z1, &t, &state.model.layout)?;
    let (losses, grads) = joint_loss(&state.model, &inputs, config.lambdas(step), step)?;
    let lr = warmup_lr(step, config.lr, config.warmup);
    state.optimizer.update(&mut state.model.params, &grads, lr)?;
    state.step += 1;
    Ok(losses)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub wall_ms: u64,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.dwck";

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step:06}.dwck"))
}

/// Runs from `state.step` up to `config.steps`, appending one record per step
/// to `dir/metrics.jsonl` and writing checkpoints at the configured cadence
/// plus `dir/final.dwck`.
pub fn train_loop(config: &TrainConfig, data: &[TrainExample], mut state: TrainState, dir: &Path, fingerprint: &str) -> Result<TrainState> {
    config.validate()?;
    state.model.validate()?;
    if let Some(ex) = data.first() {
        if ex.z0.shape().last() != Some(&state.model.layout.total()) {
            return Err(Error::Shape(format!(
                "training data has {:?} channels, model layout expects {}",
                ex.z0.shape().last(),
                state.model.layout.total()
            )));
        }
    }
    std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
    let log_path = dir.join(METRICS_FILE);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(state.step > 0)
        .write(true)
        .truncate(state.step == 0)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    let started = Instant::now();
    let result: Result<()> = (|| {
        while state.step < config.steps {
            let step = state.step;
            let losses = train_step(&mut state, data, config)?;
            let rec = MetricsRecord {
                step,
                losses,
                wall_ms: started.elapsed().as_millis() as u64,
            };
            writeln!(log, "{}", serde_json::to_string(&rec).expect("record serializes")).map_err(|e| Error::io(&log_path, e))?;
            if step % 100 == 0 {
                log::info!(
                    "step {step}: L_vae {:.4} L_temp {:.4} L_sem {:.4} L_spa {:.4} lambda {:.4}",
                    losses.vae,
                    losses.temporal,
                    losses.semantic,
                    losses.spatial,
                    losses.lambda_temporal
                );
            }
            if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 && state.step < config.steps {
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                state.checkpoint(fingerprint).save(&checkpoint_path(dir, state.step))?;
            }
        }
        Ok(())
    })();
    let flushed = log.flush().map_err(|e| Error::io(&log_path, e));
    result?;
    flushed?;
    let ck = state.checkpoint(fingerprint);
    ck.save(&checkpoint_path(dir, state.step))?;
    ck.save(&dir.join(FINAL_CHECKPOINT))?;
    Ok(state)
}

/// Reads a metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}
