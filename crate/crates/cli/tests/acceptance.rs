//! Acceptance criteria, one PASS/FAIL line each.
//!
//! `WORLDFLOW_ACCEPTANCE=1,2,5` restricts the run to the listed criteria.
//! `WORLDFLOW_ACCEPTANCE_DIR=path` keeps the artifacts of criteria 7 to 9
//! there instead of in a temporary directory.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{ensure, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use worldflow::codec::{self, ChannelGroup};
use worldflow::eval::base_equivalence_report;
use worldflow::model::{ChannelLayout, JointModel, ModelConfig};
use worldflow::numerics::NdArray;
use worldflow::sample::{combine, euler_integrate, guided_velocity, GuidanceConfig};
use worldflow::train::{cca_weight, LambdaSchedule, METRICS_FILE};
use worldflow::worldfeat::{align, flow_to_rgb, rgb_to_magnitude_angle, FlowRgbParams, PcaModel, Standardizer, WorldLatent, DEFAULT_EPS};
use worldflow::worldsim::{episode_config, generate_episode, prompt, Episode, WorldConfig};
use worldflow_cli::commands;
use worldflow_cli::config::{BaseInit, RunConfig};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict { pass, detail: detail.into() })
}

fn episodes(n: u64, seed: u64) -> Vec<Episode> {
    (0..n).map(|i| generate_episode(&episode_config(&WorldConfig::default(), 4, seed, i)).unwrap()).collect()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        layers: 1,
        heads: 2,
        mlp_ratio: 2,
        ..ModelConfig::default()
    }
}

fn criterion_1() -> Result<Verdict> {
    let started = Instant::now();
    let layout = ChannelLayout::default();
    let base = JointModel::init(ModelConfig::default(), ChannelLayout::video_only(layout.vae), 11)?;
    let expanded = JointModel::init_expanded(&base, layout)?;
    let r = base_equivalence_report(&expanded, &base, 100, 5)?;
    let secs = started.elapsed().as_secs_f64();
    verdict(
        r.trials == 100 && r.max_deviation <= 1e-6 && r.max_world_output == 0.0 && secs < 60.0,
        format!(
            "max |video out diff| {:.3e} <= 1e-6, max |world out| {:.1e} == 0, over {} inputs in {secs:.1}s (< 60s)",
            r.max_deviation, r.max_world_output, r.trials
        ),
    )
}

fn criterion_2() -> Result<Verdict> {
    let total = 1998u64;
    let reference = |s: u64| 0.2 * 0.5 * (1.0 + (PI * s as f64 / total as f64).cos());
    let mut worst = 0f64;
    let mut monotone = true;
    let mut prev = f64::INFINITY;
    for i in 0..1000u64 {
        let s = 2 * i;
        let l = cca_weight(s, total, 0.2);
        worst = worst.max((l - reference(s)).abs());
        monotone &= l <= prev;
        prev = l;
    }
    let ends = [
        (cca_weight(0, total, 0.2) - 0.2).abs(),
        (cca_weight(total / 2, total, 0.2) - 0.1).abs(),
        cca_weight(total, total, 0.2).abs(),
    ];
    let end_err = ends.iter().cloned().fold(0.0, f64::max);
    verdict(
        worst <= 1e-12 && end_err <= 1e-12 && monotone,
        format!("max grid error {worst:.2e}, endpoint/midpoint error {end_err:.2e} (<= 1e-12), monotone non-increasing: {monotone}"),
    )
}

fn criterion_3() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut sum_err = 0f64;
    let mut fixed_err = 0f64;
    for _ in 0..1000 {
        let g = GuidanceConfig {
            w_txt: rng.random_range(0.0..10.0),
            w_temp: rng.random_range(0.0..3.0),
            w_sem: rng.random_range(0.0..3.0),
            w_spa: rng.random_range(0.0..3.0),
            ..GuidanceConfig::default()
        };
        sum_err = sum_err.max((g.coefficients().iter().sum::<f64>() - 1.0).abs());
        let v = NdArray::from_fn(&[16], |_| rng.random_range(-4.0f32..4.0));
        let out = combine(&[&v, &v, &v, &v, &v], &g)?;
        for (a, b) in out.data().iter().zip(v.data()) {
            fixed_err = fixed_err.max((*a as f64 - *b as f64).abs() / (b.abs() as f64).max(1.0));
        }
    }

    let g = GuidanceConfig {
        w_txt: 5.0,
        w_temp: 3.0,
        w_sem: 0.0,
        w_spa: 0.0,
        ..GuidanceConfig::default()
    };
    let s = |x: f32| NdArray::scalar(x);
    let scalar = combine(&[&s(2.0), &s(1.0), &s(1.5), &s(7.0), &s(7.0)], &g)?.item();

    // zero world weights: batched guided velocity against two separate forwards
    let config = ModelConfig {
        grid: [2, 2, 2],
        init_std: 0.2,
        ..tiny_model()
    };
    let layout = ChannelLayout {
        vae: 6,
        temporal: 6,
        semantic: 2,
        spatial: 2,
    };
    let model = JointModel::init(config, layout, 9)?;
    let cfg = GuidanceConfig {
        w_txt: 5.0,
        w_temp: 0.0,
        w_sem: 0.0,
        w_spa: 0.0,
        ..GuidanceConfig::default()
    };
    let z = NdArray::from_fn(&[2, 2, 2, layout.total()], |_| rng.random_range(-1.0f32..1.0));
    let tokens = prompt::encode(&[1, 4], true);
    let guided = guided_velocity(&model, &z, 0.6, &tokens, &cfg)?;
    let zb = z.reshape(&[1, 2, 2, 2, layout.total()])?;
    let cond = model.velocity(&zb, &[0.6], std::slice::from_ref(&tokens))?;
    let uncond = model.velocity(&zb, &[0.6], &[prompt::null_prompt()])?;
    let mut cfg_err = 0f64;
    for ((g, c), u) in guided.data().iter().zip(cond.data()).zip(uncond.data()) {
        let reference = *c as f64 + 5.0 * (*c as f64 - *u as f64);
        cfg_err = cfg_err.max((*g as f64 - reference).abs() / reference.abs().max(1.0));
    }
    let cfg_tol = 16.0 * f32::EPSILON as f64;
    verdict(
        sum_err <= 1e-12 && fixed_err <= 1e-12 && scalar == 8.5 && cfg_err <= cfg_tol,
        format!(
            "coefficient sum error {sum_err:.1e}, fixed-point error {fixed_err:.1e} (<= 1e-12), 9*2-5*1-3*1.5 = {scalar}, zero-world vs CFG {cfg_err:.1e} (<= {cfg_tol:.1e})"
        ),
    )
}

fn criterion_4() -> Result<Verdict> {
    let started = Instant::now();
    let outcome = commands::grad_check(&RunConfig::default())?;
    let worst = outcome.primitives.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let secs = started.elapsed().as_secs_f64();
    verdict(
        outcome.failures().is_empty() && secs < 300.0,
        format!(
            "{} primitives, worst {} {:.2e} (<= 1e-6); joint loss {:.2e} (<= 1e-4) over {} coords; {secs:.1}s (< 300s)",
            outcome.primitives.len(),
            worst.name,
            worst.max_rel_error,
            outcome.joint.max_rel_error,
            outcome.joint.coordinates
        ),
    )
}

fn criterion_5() -> Result<Verdict> {
    let exact = (-1f64).exp();
    let err = |n: usize| -> Result<f64> {
        let (z, _) = euler_integrate(&NdArray::scalar(1.0f32), n, |z, _| Ok(z.clone()))?;
        Ok((z.item() as f64 - exact).abs())
    };
    let (e20, e200) = (err(20)?, err(200)?);
    let ratio = e20 / e200;
    verdict((8.0..=12.0).contains(&ratio), format!("error N=20 {e20:.3e}, N=200 {e200:.3e}, ratio {ratio:.3} in [8, 12]"))
}

fn criterion_6() -> Result<Verdict> {
    let started = Instant::now();
    let params = FlowRgbParams::default();
    let (h, w) = (32usize, 32usize);
    let norm = params.sigma * ((h * h + w * w) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let flow = NdArray::from_fn(&[h, w, 2], |_| rng.random_range(-3.0f32..3.0));
    let rgb = flow_to_rgb(&flow, &params)?;
    let (mut m_err, mut a_err, mut below) = (0f64, 0f64, 0usize);
    for (d, c) in flow.data().chunks(2).zip(rgb.data().chunks(3)) {
        let (u, v) = (d[0] as f64, d[1] as f64);
        let m = (u * u + v * v).sqrt() / norm;
        if m >= 1.0 {
            continue;
        }
        below += 1;
        let (mi, ai) = rgb_to_magnitude_angle([c[0] as f64, c[1] as f64, c[2] as f64]);
        m_err = m_err.max((mi - m).abs());
        if m > 0.05 {
            let diff = (ai - v.atan2(u)).rem_euclid(2.0 * PI);
            a_err = a_err.max(diff.min(2.0 * PI - diff));
        }
    }

    let eps = episodes(8, 6);
    let mut codec_exact = true;
    for ep in &eps {
        let z = codec::encode(&ep.video, 4, 1)?;
        codec_exact &= codec::decode(&z, 4, 1)?.data().iter().zip(ep.video.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    }

    let aligned: Vec<NdArray<f32>> = eps.iter().map(|e| align(&e.semantic_raw, [8, 8, 8])).collect::<Result<_, _>>()?;
    let corpus = NdArray::concat(&aligned.iter().collect::<Vec<_>>(), 0)?;
    let corpus = Standardizer::fit(&corpus, DEFAULT_EPS)?.apply(&corpus)?;
    let d = *corpus.shape().last().unwrap();
    let (mut ortho, mut recon) = (0f64, Vec::new());
    for k in 1..=d {
        let pca = PcaModel::fit(&corpus, k)?;
        ortho = ortho.max(pca.orthonormality_error());
        let back = pca.reconstruct(&pca.apply(&corpus)?)?;
        let mse = back.data().iter().zip(corpus.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / corpus.len() as f64;
        recon.push(mse);
    }
    let recon_tol = 1e-7;
    let non_increasing = recon.windows(2).all(|p| p[1] <= p[0] + recon_tol);

    let mut split_exact = true;
    for ep in eps.iter().take(2) {
        let t = codec::encode(&ep.video, 4, 1)?.data;
        let s = NdArray::from_fn(&[8, 8, 8, 8], |_| rng.random::<f32>());
        let p = NdArray::from_fn(&[8, 8, 8, 8], |_| rng.random::<f32>());
        let z = WorldLatent::assemble(&t, &s, &p)?;
        for (group, part) in [(ChannelGroup::Temporal, &t), (ChannelGroup::Semantic, &s), (ChannelGroup::Spatial, &p)] {
            split_exact &= z.split(group)?.data().iter().zip(part.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        m_err <= 1e-3 && a_err <= 1e-3 && below > 0 && codec_exact && ortho <= 1e-6 && non_increasing && split_exact && secs < 60.0,
        format!(
            "flow-RGB inverse m err {m_err:.1e}, angle err {a_err:.1e} (<= 1e-3, {below} px); codec bit-exact {codec_exact}; \
             PCA orthonormality {ortho:.1e} (<= 1e-6), recon error non-increasing over k=1..{d}: {non_increasing} \
             ({:.3} -> {:.1e}); assemble/split bit-exact {split_exact}; {secs:.1}s",
            recon[0],
            recon[d - 1]
        ),
    )
}

fn work_dir() -> (PathBuf, Option<tempfile::TempDir>) {
    match std::env::var_os("WORLDFLOW_ACCEPTANCE_DIR") {
        Some(p) => {
            let p = PathBuf::from(p);
            std::fs::create_dir_all(&p).unwrap();
            (p, None)
        }
        None => {
            let t = tempfile::tempdir().unwrap();
            (t.path().to_path_buf(), Some(t))
        }
    }
}

fn with_paths(mut config: RunConfig, root: &Path) -> RunConfig {
    config.paths.data = root.join("data");
    config.paths.features = root.join("features");
    config.paths.base = root.join("base");
    config.paths.run = root.join("run");
    config.paths.samples = root.join("samples");
    config.paths.eval = root.join("eval");
    config
}

/// Desk-scale runs shared by criteria 7 and 8.
struct Ablation {
    root: PathBuf,
    cca_secs: f64,
    total_secs: f64,
    means: BTreeMap<&'static str, (f64, f64)>,
}

const VARIANTS: [(&str, LambdaSchedule, f64); 3] = [("cca", LambdaSchedule::Cosine, 0.2), ("static", LambdaSchedule::Constant, 0.2), ("zero", LambdaSchedule::Cosine, 0.0)];

fn desk_config(root: &Path) -> RunConfig {
    let mut config = with_paths(RunConfig::default(), root);
    config.base.init = BaseInit::Random;
    config
}

fn run_ablation(root: &Path) -> Result<Ablation> {
    let started = Instant::now();
    let shared = desk_config(root);
    commands::gen_data(&shared, &shared.paths.data, true)?;
    commands::preprocess(&shared, &shared.paths.data, &shared.paths.features, true)?;
    let mut means = BTreeMap::new();
    let mut cca_secs = 0.0;
    for (name, schedule, lambda) in VARIANTS {
        let mut config = shared.clone();
        config.train.schedule = schedule;
        config.train.lambda_base = lambda;
        config.paths.run = root.join(format!("run_{name}"));
        config.paths.samples = root.join(format!("samples_{name}"));
        let t = Instant::now();
        commands::train(&config, &config.paths.run, true, false)?;
        if name == "cca" {
            cca_secs = t.elapsed().as_secs_f64();
        }
        commands::sample_prompts(&config, &config.paths.run.join(worldflow::train::FINAL_CHECKPOINT), &config.paths.samples, true)?;
        let reports = commands::score_samples(&config, &config.paths.samples)?;
        means.insert(name, (reports[0].mean, reports[0].std));
        eprintln!("{name}: flow_consistency {:.4} +- {:.4} after {:.0}s", reports[0].mean, reports[0].std, started.elapsed().as_secs_f64());
    }
    let report = serde_json::json!({
        "metric": "flow_consistency",
        "prompts": shared.data.held_out,
        "runs": means.iter().map(|(k, (m, s))| (k.to_string(), serde_json::json!({"mean": m, "std": s}))).collect::<serde_json::Map<_, _>>(),
    });
    std::fs::write(root.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(Ablation {
        root: root.to_path_buf(),
        cca_secs,
        total_secs: started.elapsed().as_secs_f64(),
        means,
    })
}

fn criterion_7(ab: &Ablation) -> Result<Verdict> {
    let text = std::fs::read_to_string(ab.root.join("run_cca").join(METRICS_FILE))?;
    let keys = ["L_vae", "L_temporal", "L_semantic", "L_spatial", "lambda_temp", "lambda_sem", "lambda_spa", "L_total"];
    let mut vae = Vec::new();
    let (mut logged, mut worst_decomp) = (true, 0f64);
    let mut decomp_ok = true;
    for line in text.lines() {
        let rec: serde_json::Value = serde_json::from_str(line)?;
        let get = |k: &str| rec[k].as_f64();
        logged &= keys.iter().all(|k| get(k).is_some_and(f64::is_finite));
        let v = |k: &str| get(k).unwrap_or(f64::NAN);
        let parts = [v("L_vae"), v("lambda_temp") * v("L_temporal"), v("lambda_sem") * v("L_semantic"), v("lambda_spa") * v("L_spatial")];
        let err = (v("L_total") - parts.iter().sum::<f64>()).abs();
        // a handful of f32 roundings of the summands
        let tol = 8.0 * f32::EPSILON as f64 * parts.iter().map(|p| p.abs()).sum::<f64>();
        decomp_ok &= err <= tol;
        worst_decomp = worst_decomp.max(err);
        vae.push(v("L_vae"));
    }
    ensure!(vae.len() >= 20, "metrics log has only {} records", vae.len());
    let ma = |end: usize| vae[end - 9..=end].iter().sum::<f64>() / 10.0;
    let (early, last) = (ma(9), ma(vae.len() - 1));
    let ratio = last / early;
    verdict(
        vae.len() == 2000 && ratio <= 0.5 && logged && decomp_ok && ab.cca_secs <= 7200.0,
        format!(
            "{} steps, L_vae 10-step average {early:.4} -> {last:.4} (ratio {ratio:.3} <= 0.5); all terms logged: {logged}; \
             decomposition max error {worst_decomp:.1e} within f32 rounding: {decomp_ok}; {:.0}s (<= 7200s)",
            vae.len(),
            ab.cca_secs
        ),
    )
}

fn criterion_8(ab: &Ablation) -> Result<Verdict> {
    let (cca, stat, zero) = (ab.means["cca"], ab.means["static"], ab.means["zero"]);
    verdict(
        cca.0 >= stat.0 && cca.0 > zero.0 && ab.total_secs <= 6.0 * 3600.0,
        format!(
            "flow_consistency on 32 held-out prompts: cca {:.4} (sd {:.4}), static {:.4} (sd {:.4}), lambda=0 {:.4} (sd {:.4}); \
             need cca >= static and cca > lambda=0; {:.0}s (<= 21600s)",
            cca.0, cca.1, stat.0, stat.1, zero.0, zero.1, ab.total_secs
        ),
    )
}

fn files(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) -> Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                out.insert(path.strip_prefix(root)?.to_path_buf(), std::fs::read(&path)?);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

/// Metrics records carry wall-clock time; everything else must match.
fn without_wall_time(bytes: &[u8]) -> Result<Vec<serde_json::Value>> {
    std::str::from_utf8(bytes)?
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l)?;
            v.as_object_mut().unwrap().remove("wall_ms");
            Ok(v)
        })
        .collect()
}

fn criterion_9(root: &Path) -> Result<Verdict> {
    let pipeline = |tag: &str| -> Result<RunConfig> {
        let mut config = with_paths(RunConfig::default(), &root.join(tag));
        config.data.episodes = 6;
        config.data.held_out = 2;
        config.model = tiny_model();
        config.base.init = BaseInit::Random;
        config.train.steps = 4;
        config.train.checkpoint_every = 2;
        config.guidance.steps = 2;
        let p = config.paths.clone();
        commands::gen_data(&config, &p.data, true)?;
        commands::preprocess(&config, &p.data, &p.features, true)?;
        commands::train(&config, &p.run, true, false)?;
        commands::sample_prompts(&config, &p.run.join(worldflow::train::FINAL_CHECKPOINT), &p.samples, true)?;
        Ok(config)
    };
    let (a, b) = (pipeline("det_a")?, pipeline("det_b")?);
    let mut details = Vec::new();
    let mut all = true;
    for (name, da, db) in [
        ("gen-data", &a.paths.data, &b.paths.data),
        ("preprocess", &a.paths.features, &b.paths.features),
        ("train", &a.paths.run, &b.paths.run),
        ("sample", &a.paths.samples, &b.paths.samples),
    ] {
        let (fa, fb) = (files(da)?, files(db)?);
        let mut same = fa.keys().eq(fb.keys()) && !fa.is_empty();
        for (path, bytes) in &fa {
            let other = fb.get(path).map(Vec::as_slice).unwrap_or_default();
            same &= if path.file_name().is_some_and(|n| n == METRICS_FILE) {
                without_wall_time(bytes)? == without_wall_time(other)?
            } else {
                bytes.as_slice() == other
            };
        }
        all &= same;
        details.push(format!("{name} {} files identical: {same}", fa.len()));
    }
    verdict(all, details.join("; ") + " (metrics compared without wall_ms)")
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("WORLDFLOW_ACCEPTANCE").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: u32| only.as_ref().is_none_or(|o| o.contains(&i));
    let names = [
        "zero-init base equivalence",
        "CCA schedule exactness",
        "guidance algebra",
        "gradient correctness",
        "ODE solver order",
        "preprocessing fidelity",
        "training convergence",
        "directional CCA ablation",
        "determinism",
    ];
    let (root, _guard) = work_dir();
    let mut ablation: Option<Result<Ablation>> = None;
    let mut failed = 0;
    for id in 1..=9u32 {
        if !wanted(id) {
            continue;
        }
        let started = Instant::now();
        let outcome = match id {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(),
            7 | 8 => {
                let ab = ablation.get_or_insert_with(|| run_ablation(&root.join("ablation")));
                match ab {
                    Ok(ab) if id == 7 => criterion_7(ab),
                    Ok(ab) => criterion_8(ab),
                    Err(e) => Err(anyhow::anyhow!("desk runs failed: {e:#}")),
                }
            }
            _ => criterion_9(&root.join("determinism")),
        };
        let (pass, detail) = match outcome {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {id} {}: {} ({detail}) [{:.1}s]",
            names[id as usize - 1],
            if pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
