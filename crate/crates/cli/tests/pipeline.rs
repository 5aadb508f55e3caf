use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use worldflow::numerics::NdArray;
use worldflow_cli::data::Manifest;

const TINY: &str = r#"
seed = 3
[data]
episodes = 4
held_out = 2
[model]
d_model = 16
layers = 1
heads = 2
mlp_ratio = 2
[base]
init = "random"
[train]
steps = 6
checkpoint_every = 3
warmup = 2
[guidance]
steps = 2
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let paths = format!(
            "[paths]\ndata = \"{0}/data\"\nfeatures = \"{0}/features\"\nbase = \"{0}/base\"\nrun = \"{0}/run\"\nsamples = \"{0}/samples\"\neval = \"{0}/eval\"\n",
            dir.path().display()
        );
        std::fs::write(dir.path().join("run.toml"), format!("{TINY}{extra}\n{paths}")).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        let config = self.path("run.toml");
        let mut full = vec!["--config", config.to_str().unwrap()];
        full.extend_from_slice(args);
        Command::new(env!("CARGO_BIN_EXE_worldflow")).args(&full).env("RUST_LOG", "warn").output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn strip_wall_time(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

#[test]
fn gen_data_is_deterministic_and_sealed() {
    let ws = Workspace::new("");
    let stdout = ws.ok(&["gen-data"]);
    assert!(stdout.contains("config fingerprint"));
    let first = std::fs::read(ws.path("data/manifest.json")).unwrap();
    let m = Manifest::load(&ws.path("data")).unwrap();
    assert_eq!(m.episodes.len(), 4);
    assert_eq!(m.held_out_prompts.len(), 2);
    assert_eq!(std::fs::read_dir(ws.path("data/episodes")).unwrap().count(), 4);
    ws.ok(&["gen-data", "--force"]);
    assert_eq!(std::fs::read(ws.path("data/manifest.json")).unwrap(), first);
}

#[test]
fn gen_data_with_no_episodes_succeeds() {
    let ws = Workspace::new("");
    let text = std::fs::read_to_string(ws.path("run.toml")).unwrap().replace("episodes = 4", "episodes = 0");
    std::fs::write(ws.path("run.toml"), text).unwrap();
    ws.ok(&["gen-data"]);
    assert!(Manifest::load(&ws.path("data")).unwrap().episodes.is_empty());
    let out = ws.run(&["preprocess"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("at least one episode"));
}

#[test]
fn refuses_to_overwrite_without_force() {
    let ws = Workspace::new("");
    ws.ok(&["gen-data"]);
    let out = ws.run(&["gen-data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--force"));
}

#[test]
fn unwritable_output_is_a_runtime_fault() {
    let ws = Workspace::new("");
    std::fs::write(ws.path("blocker"), b"not a directory").unwrap();
    let out = ws.run(&["gen-data", "--out", ws.path("blocker/data").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("blocker"));
}

#[test]
fn config_errors_are_usage_errors() {
    let ws = Workspace::new("[world]\nframez = 8");
    let out = ws.run(&["gen-data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("framez"));

    let ws = Workspace::new("[codec]\np = 2\nq = 1");
    let out = ws.run(&["gen-data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("layout.vae"));
}

#[test]
fn corrupted_episode_is_detected() {
    let ws = Workspace::new("");
    ws.ok(&["gen-data"]);
    let victim = ws.path("data/episodes/ep_00001/flow.nda");
    let mut bytes = std::fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&victim, bytes).unwrap();
    let out = ws.run(&["preprocess"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("checksum"));
}

#[test]
fn oversized_pca_rank_names_the_constraint() {
    let ws = Workspace::new("[layout]\nvae = 48\ntemporal = 48\nsemantic = 12\nspatial = 8\n[features]\nk_semantic = 12");
    let text = std::fs::read_to_string(ws.path("run.toml")).unwrap().replace("episodes = 4", "episodes = 1");
    std::fs::write(ws.path("run.toml"), text).unwrap();
    ws.ok(&["gen-data"]);
    let out = ws.run(&["preprocess"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("k=12"), "{}", stderr(&out));
}

#[test]
fn preprocess_caches_world_latents_reproducibly() {
    let ws = Workspace::new("");
    ws.ok(&["gen-data"]);
    ws.ok(&["preprocess"]);
    let z = NdArray::<f32>::load(&ws.path("features/latents/ep_00000.nda")).unwrap();
    assert_eq!(z.shape(), &[8, 8, 8, 64]);
    let other = ws.path("features2");
    ws.ok(&["preprocess", "--out", other.to_str().unwrap()]);
    for file in ["features.json", "semantic.dwfm", "spatial.dwfm", "latents/ep_00003.nda"] {
        assert_eq!(std::fs::read(ws.path("features").join(file)).unwrap(), std::fs::read(other.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn sampling_without_a_checkpoint_fails_clearly() {
    let ws = Workspace::new("");
    ws.ok(&["gen-data"]);
    let out = ws.run(&["sample"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no checkpoint"));
}

#[test]
fn train_without_a_pretrained_base_fails_clearly() {
    let ws = Workspace::new("");
    let text = std::fs::read_to_string(ws.path("run.toml")).unwrap().replace("init = \"random\"", "init = \"pretrained\"");
    std::fs::write(ws.path("run.toml"), text).unwrap();
    ws.ok(&["gen-data"]);
    ws.ok(&["preprocess"]);
    let out = ws.run(&["train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("pretrain-base"));
    ws.ok(&["pretrain-base", "--steps", "3"]);
    assert!(ws.path("base/base_equivalence.json").exists());
}

#[test]
fn resumed_training_reproduces_the_log() {
    let ws = Workspace::new("");
    ws.ok(&["gen-data"]);
    ws.ok(&["preprocess"]);
    ws.ok(&["train"]);
    let copy = ws.path("resumed");
    std::fs::create_dir_all(copy.join("checkpoints")).unwrap();
    std::fs::copy(ws.path("run/checkpoints/step_000003.dwck"), copy.join("checkpoints/step_000003.dwck")).unwrap();
    std::fs::copy(ws.path("run/metrics.jsonl"), copy.join("metrics.jsonl")).unwrap();
    let stdout = ws.ok(&["train", "--resume", "--out", copy.to_str().unwrap()]);
    assert!(stdout.contains("resuming from step 3"));
    assert_eq!(strip_wall_time(&ws.path("run/metrics.jsonl")), strip_wall_time(&copy.join("metrics.jsonl")));
    assert_eq!(std::fs::read(ws.path("run/final.dwck")).unwrap(), std::fs::read(copy.join("final.dwck")).unwrap());
}

#[test]
fn full_pipeline_produces_reports() {
    let ws = Workspace::new("");
    ws.ok(&["gen-data"]);
    ws.ok(&["preprocess"]);
    ws.ok(&["train"]);
    ws.ok(&["sample"]);
    let stdout = ws.ok(&["eval"]);
    assert!(stdout.contains("flow_consistency") && stdout.contains("subject_consistency_proxy"));
    let lines = std::fs::read_to_string(ws.path("eval/eval.jsonl")).unwrap();
    let fp = ws.ok(&["show-config"]).lines().next().unwrap().trim_start_matches("# fingerprint ").to_string();
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["fingerprint"], fp.as_str());
        assert_eq!(v["values"].as_array().unwrap().len(), 2);
    }
}

#[test]
fn grad_check_passes() {
    let ws = Workspace::new("");
    let stdout = ws.ok(&["grad-check"]);
    assert!(stdout.contains("joint_loss") && stdout.contains("all within tolerance"));
}
