//! One function per subcommand. Each validates its config, prints the config
//! fingerprint and records it in the artifacts it writes.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use worldflow::codec::{self, ChannelGroup, LatentGrid};
use worldflow::eval::{base_equivalence_report, flow_consistency, subject_consistency_proxy, summary_table, BaseEquivalence, MetricReport};
use worldflow::model::{split, ChannelLayout, Checkpoint, JointModel};
use worldflow::numerics::{primitive_suite, GradCheckReport, NdArray};
use worldflow::sample::{sample, write_video};
use worldflow::train::{joint_loss_grad_check, read_metrics, train_loop, TrainConfig, TrainExample, TrainState, FINAL_CHECKPOINT, METRICS_FILE};
use worldflow::worldfeat::{vae_latent, world_latent, FeatureModels};
use worldflow::worldsim::{episode_config, generate_episode, prompt};

use crate::config::{BaseInit, RunConfig};
use crate::data::{self, episode_name, non_empty, sha256_hex, Manifest};

/// A problem with how the command was invoked rather than a fault while running it.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const BASE_EQUIVALENCE_TRIALS: usize = 100;
pub const BASE_EQUIVALENCE_TOL: f64 = 1e-6;
pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const JOINT_LOSS_TOL: f64 = 1e-4;

pub const FEATURE_INDEX: &str = "features.json";
pub const LATENT_DIR: &str = "latents";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const BASE_EQUIVALENCE_FILE: &str = "base_equivalence.json";

fn announce(command: &str, config: &RunConfig) -> String {
    let fp = config.fingerprint();
    println!("{command}: config fingerprint {fp}");
    fp
}

/// Refuses to reuse a non-empty output directory unless forced.
fn claim_output(dir: &Path, force: bool) -> Result<()> {
    if non_empty(dir) && !force {
        return Err(UsageError(format!("{} is not empty; pass --force to overwrite", dir.display())).into());
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}

pub fn gen_data(config: &RunConfig, out: &Path, force: bool) -> Result<Manifest> {
    let fp = announce("gen-data", config);
    claim_output(out, force)?;
    // a stale manifest must not vouch for a half-rewritten directory
    let manifest_path = out.join(data::MANIFEST);
    if manifest_path.exists() {
        std::fs::remove_file(&manifest_path).with_context(|| format!("removing {}", manifest_path.display()))?;
    }
    let episodes_dir = out.join(data::EPISODE_DIR);
    if episodes_dir.exists() {
        std::fs::remove_dir_all(&episodes_dir).with_context(|| format!("removing {}", episodes_dir.display()))?;
    }
    let d = &config.data;
    let episode = |i: usize| generate_episode(&episode_config(&config.world, d.max_objects, config.seed, i as u64));
    let mut entries = Vec::with_capacity(d.episodes);
    for i in 0..d.episodes {
        entries.push(data::write_episode(out, &episode_name(i), &episode(i)?)?);
    }
    let held_out_prompts = (d.episodes..d.episodes + d.held_out)
        .map(|i| Ok(prompt::to_text(&episode(i)?.prompt)))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        fingerprint: fp,
        episodes: entries,
        held_out_prompts,
        checksum: String::new(),
    }
    .seal();
    write_atomic(&manifest_path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    println!("gen-data: {} episodes, {} held-out prompts -> {}", d.episodes, d.held_out, out.display());
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureIndex {
    pub fingerprint: String,
    pub manifest_checksum: String,
    pub world_channels: usize,
    pub latents: Vec<data::FileEntry>,
}

pub fn preprocess(config: &RunConfig, data_dir: &Path, out: &Path, force: bool) -> Result<FeatureIndex> {
    let fp = announce("preprocess", config);
    let manifest = Manifest::load(data_dir)?;
    let episodes = data::read_all(data_dir, &manifest)?;
    if episodes.is_empty() {
        bail!("preprocessing needs at least one episode; {} has none", data_dir.display());
    }
    claim_output(out, force)?;
    let models = FeatureModels::fit(&episodes, &config.codec, &config.features)?;
    models.save(out)?;
    let latent_dir = out.join(LATENT_DIR);
    std::fs::create_dir_all(&latent_dir).with_context(|| format!("creating {}", latent_dir.display()))?;
    let mut latents = Vec::with_capacity(episodes.len());
    for (ep, entry) in episodes.iter().zip(&manifest.episodes) {
        let z = world_latent(ep, &models, &config.codec, &config.features)?;
        if z.channels() != config.layout.world() {
            bail!("world latent has {} channels, layout expects {}", z.channels(), config.layout.world());
        }
        let bytes = z.data.to_bytes();
        let rel = PathBuf::from(LATENT_DIR).join(format!("{}.nda", entry.name));
        std::fs::write(out.join(&rel), &bytes).with_context(|| format!("writing {}", rel.display()))?;
        latents.push(data::FileEntry {
            path: rel.to_string_lossy().into_owned(),
            sha256: sha256_hex(&bytes),
        });
    }
    let index = FeatureIndex {
        fingerprint: fp,
        manifest_checksum: manifest.checksum.clone(),
        world_channels: config.layout.world(),
        latents,
    };
    write_atomic(&out.join(FEATURE_INDEX), serde_json::to_string_pretty(&index)?.as_bytes())?;
    println!("preprocess: {} world latents with {} channels -> {}", episodes.len(), config.layout.world(), out.display());
    Ok(index)
}

/// Clean training latents: video only, or video followed by the cached world latent.
pub fn load_training_data(config: &RunConfig, with_world: bool) -> Result<Vec<TrainExample>> {
    let manifest = Manifest::load(&config.paths.data)?;
    let episodes = data::read_all(&config.paths.data, &manifest)?;
    if episodes.is_empty() {
        bail!("training needs at least one episode; {} has none", config.paths.data.display());
    }
    let index = if with_world {
        let path = config.paths.features.join(FEATURE_INDEX);
        let text = std::fs::read_to_string(&path).with_context(|| format!("no fitted features at {} (run preprocess first)", path.display()))?;
        let index: FeatureIndex = serde_json::from_str(&text).with_context(|| format!("malformed {}", path.display()))?;
        if index.manifest_checksum != manifest.checksum || index.latents.len() != episodes.len() {
            bail!("features in {} were computed from a different dataset; rerun preprocess", config.paths.features.display());
        }
        Some(index)
    } else {
        None
    };
    let mut out = Vec::with_capacity(episodes.len());
    for (i, ep) in episodes.iter().enumerate() {
        let mut z0 = vae_latent(ep, &config.codec)?;
        if let Some(index) = &index {
            let f = &index.latents[i];
            let path = config.paths.features.join(&f.path);
            let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            if sha256_hex(&bytes) != f.sha256 {
                bail!("{} does not match its recorded checksum", path.display());
            }
            let world = NdArray::<f32>::read_from(&mut bytes.as_slice())?;
            z0 = NdArray::concat(&[&z0, &world], 3)?;
        }
        out.push(TrainExample { z0, prompt: ep.prompt.clone() });
    }
    Ok(out)
}

fn latest_checkpoint(dir: &Path) -> Result<PathBuf> {
    let ckdir = dir.join("checkpoints");
    let mut found: Vec<PathBuf> = std::fs::read_dir(&ckdir)
        .with_context(|| format!("no checkpoints to resume from in {}", ckdir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "dwck"))
        .collect();
    found.sort();
    found.pop().with_context(|| format!("no checkpoints to resume from in {}", ckdir.display()))
}

/// Drops log records at or after `step` so a resumed run appends cleanly.
fn truncate_metrics(dir: &Path, step: u64) -> Result<()> {
    let path = dir.join(METRICS_FILE);
    let text = std::fs::read_to_string(&path).unwrap_or_default();
    let mut kept = String::new();
    for line in text.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).with_context(|| format!("malformed record in {}", path.display()))?;
        if rec["step"].as_u64().is_some_and(|s| s < step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(&path, kept).with_context(|| format!("writing {}", path.display()))
}

fn run_training(command: &str, config: &RunConfig, tc: &TrainConfig, data: &[TrainExample], fresh: JointModel, out: &Path, force: bool, resume: bool) -> Result<TrainState> {
    let fp = announce(command, config);
    let state = if resume {
        let path = latest_checkpoint(out)?;
        let ck = Checkpoint::load(&path)?;
        if ck.header.layout != fresh.layout || ck.header.model != fresh.config {
            bail!("checkpoint {} has a different model shape than the config", path.display());
        }
        if ck.header.fingerprint != fp {
            log::warn!("resuming from {} written under config {}", path.display(), ck.header.fingerprint);
        }
        truncate_metrics(out, ck.header.step)?;
        println!("{command}: resuming from step {}", ck.header.step);
        TrainState::from_checkpoint(ck, tc)?
    } else {
        claim_output(out, force)?;
        TrainState::new(fresh, tc)
    };
    let state = train_loop(tc, data, state, out, &fp)?;
    let last = read_metrics(&out.join(METRICS_FILE))?.pop();
    if let Some(r) = last {
        println!("{command}: step {} L_vae {:.5} L_total {:.5} -> {}", r.step, r.losses.vae, r.losses.total, out.display());
    }
    Ok(state)
}

pub fn pretrain_base(config: &RunConfig, out: &Path, force: bool, resume: bool) -> Result<BaseEquivalence> {
    let data = load_training_data(config, false)?;
    let tc = TrainConfig {
        steps: config.base.steps,
        ..config.train.clone()
    };
    let fresh = JointModel::init(config.model.clone(), ChannelLayout::video_only(config.layout.vae), config.seed)?;
    let state = run_training("pretrain-base", config, &tc, &data, fresh, out, force, resume)?;
    let expanded = JointModel::init_expanded(&state.model, config.layout)?;
    let report = base_equivalence_report(&expanded, &state.model, BASE_EQUIVALENCE_TRIALS, config.seed)?;
    write_atomic(&out.join(BASE_EQUIVALENCE_FILE), serde_json::to_string_pretty(&report)?.as_bytes())?;
    println!(
        "pretrain-base: expansion deviates by at most {:.3e} over {} inputs, world output {:.3e}",
        report.max_deviation, report.trials, report.max_world_output
    );
    if report.max_deviation > BASE_EQUIVALENCE_TOL || report.max_world_output != 0.0 {
        bail!("expanded model does not reproduce the base (deviation {:.3e})", report.max_deviation);
    }
    Ok(report)
}

/// The video-only model the joint model is expanded from.
pub fn base_model(config: &RunConfig) -> Result<JointModel> {
    let video_only = ChannelLayout::video_only(config.layout.vae);
    match config.base.init {
        BaseInit::Random => Ok(JointModel::init(config.model.clone(), video_only, config.seed)?),
        BaseInit::Pretrained => {
            let path = config.paths.base.join(FINAL_CHECKPOINT);
            if !path.exists() {
                bail!("no base checkpoint at {} (run pretrain-base, or set base.init = \"random\")", path.display());
            }
            let ck = Checkpoint::load(&path)?;
            if ck.model.layout != video_only || ck.model.config != config.model {
                bail!("base checkpoint {} does not match the configured model", path.display());
            }
            Ok(ck.model)
        }
    }
}

pub fn train(config: &RunConfig, out: &Path, force: bool, resume: bool) -> Result<TrainState> {
    let data = load_training_data(config, true)?;
    let fresh = JointModel::init_expanded(&base_model(config)?, config.layout)?;
    run_training("train", config, &config.train, &data, fresh, out, force, resume)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub prompt: String,
    pub latent: String,
    pub checkpoint_step: u64,
    pub final_velocity_rms: f64,
    pub fingerprint: String,
}

pub fn load_model(checkpoint: &Path) -> Result<Checkpoint> {
    if !checkpoint.exists() {
        bail!("no checkpoint at {} (run train first)", checkpoint.display());
    }
    Ok(Checkpoint::load(checkpoint)?)
}

pub fn sample_prompts(config: &RunConfig, checkpoint: &Path, out: &Path, force: bool) -> Result<Vec<SampleRecord>> {
    let fp = announce("sample", config);
    let ck = load_model(checkpoint)?;
    if ck.model.layout != config.layout || ck.model.config != config.model {
        bail!("checkpoint {} does not match the configured model", checkpoint.display());
    }
    let manifest = Manifest::load(&config.paths.data)?;
    claim_output(out, force)?;
    let mut records = Vec::with_capacity(manifest.held_out_prompts.len());
    for (i, text) in manifest.held_out_prompts.iter().enumerate() {
        let tokens = prompt::parse(text).with_context(|| format!("held-out prompt {i} is unparsable: {text:?}"))?;
        let result = sample(&ck.model, &tokens, &config.guidance, &config.codec, i as u64)?;
        let name = format!("sample_{i:03}");
        let latent = format!("{name}.nda");
        std::fs::write(out.join(&latent), result.latent.to_bytes()).with_context(|| format!("writing {latent}"))?;
        write_video(out, &name, &result.video)?;
        records.push(SampleRecord {
            index: i,
            prompt: text.clone(),
            latent,
            checkpoint_step: ck.header.step,
            final_velocity_rms: result.velocity_norms.last().copied().unwrap_or(0.0),
            fingerprint: fp.clone(),
        });
    }
    let lines: String = records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect();
    write_atomic(&out.join(SAMPLES_FILE), lines.as_bytes())?;
    println!("sample: {} clips from step {} -> {}", records.len(), ck.header.step, out.display());
    Ok(records)
}

pub fn read_samples(dir: &Path) -> Result<Vec<SampleRecord>> {
    let path = dir.join(SAMPLES_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("no samples at {} (run sample first)", path.display()))?;
    text.lines()
        .map(|l| serde_json::from_str(l).with_context(|| format!("malformed record in {}", path.display())))
        .collect()
}

/// Scores a directory of samples; also usable without writing anything.
pub fn score_samples(config: &RunConfig, samples: &Path) -> Result<Vec<MetricReport>> {
    let fp = config.fingerprint();
    let records = read_samples(samples)?;
    let (mut flow, mut subject, mut empty) = (Vec::new(), Vec::new(), 0usize);
    for r in &records {
        let path = samples.join(&r.latent);
        let latent = NdArray::<f32>::load(&path).with_context(|| format!("reading {}", path.display()))?;
        let groups = split(&latent, &config.layout)?;
        let grid = LatentGrid::new(groups[0].clone(), ChannelGroup::Vae)?;
        let video = codec::decode(&grid, config.codec.p, config.codec.q)?.map(|x| x.clamp(0.0, 1.0));
        flow.push(flow_consistency(&video, &groups[1], &config.codec, &config.features.flow_rgb())?);
        let (s, found) = subject_consistency_proxy(&video)?;
        if !found {
            empty += 1;
        }
        subject.push(s);
    }
    let mut subject_report = MetricReport::new("subject_consistency_proxy", subject, &fp)?;
    if empty > 0 {
        subject_report.flags.push(format!("{empty} samples had no colour segments and scored 0"));
    }
    Ok(vec![MetricReport::new("flow_consistency", flow, &fp)?, subject_report])
}

pub fn eval(config: &RunConfig, samples: &Path, out: &Path, force: bool) -> Result<Vec<MetricReport>> {
    announce("eval", config);
    let reports = score_samples(config, samples)?;
    claim_output(out, force)?;
    let lines: String = reports.iter().map(|r| r.to_json_line() + "\n").collect();
    write_atomic(&out.join(EVAL_FILE), lines.as_bytes())?;
    let table = summary_table(&reports);
    write_atomic(&out.join(SUMMARY_FILE), table.as_bytes())?;
    print!("{table}");
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOutcome {
    pub primitives: Vec<GradCheckReport>,
    pub joint: GradCheckReport,
}

impl GradCheckOutcome {
    pub fn failures(&self) -> Vec<String> {
        let mut bad: Vec<String> = self
            .primitives
            .iter()
            .filter(|r| !(r.max_rel_error <= PRIMITIVE_TOL))
            .map(|r| format!("{} ({:.3e})", r.name, r.max_rel_error))
            .collect();
        if !(self.joint.max_rel_error <= JOINT_LOSS_TOL) {
            bad.push(format!("joint_loss ({:.3e})", self.joint.max_rel_error));
        }
        bad
    }
}

pub fn grad_check(config: &RunConfig) -> Result<GradCheckOutcome> {
    announce("grad-check", config);
    let primitives = primitive_suite(config.seed, 1e-5)?;
    for r in &primitives {
        println!("{:<24} max rel {:.3e}  ({} coords)", r.name, r.max_rel_error, r.coordinates);
    }
    let joint = joint_loss_grad_check(config.seed)?;
    println!("{:<24} max rel {:.3e}  ({} coords)", joint.name, joint.max_rel_error, joint.coordinates);
    Ok(GradCheckOutcome { primitives, joint })
}
