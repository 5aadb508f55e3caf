use super::*;
use crate::codec::CodecConfig;
use crate::model::{ChannelLayout, ModelConfig};
use crate::worldfeat::{temporal_latent, FlowRgbParams};
use crate::worldsim::{episode_config, generate_episode, WorldConfig};

fn oracle_episode(i: u64) -> crate::worldsim::Episode {
    generate_episode(&episode_config(&WorldConfig::default(), 4, 42, i)).unwrap()
}

#[test]
fn oracle_episodes_have_consistent_flow() {
    let codec = CodecConfig::default();
    let params = FlowRgbParams::default();
    for i in 0..16 {
        let ep = oracle_episode(i);
        let z = temporal_latent(&ep.flow, &codec, &params).unwrap();
        let s = flow_consistency(&ep.video, &z, &codec, &params).unwrap();
        assert!(s >= 0.99, "episode {i}: {s}");
    }
}

#[test]
fn static_video_scores() {
    let codec = CodecConfig::default();
    let params = FlowRgbParams::default();
    let ep = oracle_episode(3);
    let frame = ep.video.slice_axis(0, 0, 1).unwrap();
    let still = NdArray::concat(&vec![&frame; 8], 0).unwrap();
    let zero = NdArray::zeros(&[8, 8, 8, 48]);
    assert_eq!(flow_consistency(&still, &zero, &codec, &params).unwrap(), 1.0);
    let gray = NdArray::full(&[8, 8, 8, 48], 0.5);
    assert!(flow_consistency(&still, &gray, &codec, &params).unwrap() < 1.0);
    assert!(flow_consistency(&still, &NdArray::zeros(&[8, 8, 8, 47]), &codec, &params).is_err());
}

#[test]
fn block_matching_recovers_a_shifted_disk() {
    let ep = oracle_episode(5);
    let (h, w) = (32, 32);
    let per = h * w * 3;
    for f in 0..7 {
        let est = block_matching(&ep.video.data()[f * per..(f + 1) * per], &ep.video.data()[(f + 1) * per..(f + 2) * per], h, w);
        let truth = ep.flow.slice_axis(0, f, 1).unwrap();
        let wrong = est.data().chunks(2).zip(truth.data().chunks(2)).filter(|(a, b)| a != b).count();
        assert!(wrong * 50 < h * w, "frame {f}: {wrong} pixels off");
    }
}

#[test]
fn oracle_episodes_have_consistent_subjects() {
    for i in 0..16 {
        let (s, found) = subject_consistency_proxy(&oracle_episode(i).video).unwrap();
        assert!(found);
        assert!(s >= 0.8, "episode {i}: {s}");
    }
}

#[test]
fn repeated_frame_scores_one() {
    let frame = oracle_episode(1).video.slice_axis(0, 0, 1).unwrap();
    let still = NdArray::concat(&vec![&frame; 4], 0).unwrap();
    assert_eq!(subject_consistency_proxy(&still).unwrap(), (1.0, true));
}

#[test]
fn noise_video_scores_low() {
    let mut rng = substream(7, "noise", 0);
    let noise = NdArray::from_fn(&[8, 32, 32, 3], |_| rng.random::<f32>());
    let (s, found) = subject_consistency_proxy(&noise).unwrap();
    assert!(found && s < 0.3, "{s}");
}

#[test]
fn empty_video_is_flagged() {
    assert_eq!(subject_consistency_proxy(&NdArray::zeros(&[3, 8, 8, 3])).unwrap(), (0.0, false));
}

#[test]
fn classification_ignores_shading() {
    for (k, (_, rgb)) in PALETTE.iter().enumerate() {
        let dim: Vec<f32> = rgb.iter().map(|c| c * 0.55).collect();
        assert_eq!(classify(&dim), vec![Some(k)]);
    }
    assert_eq!(classify(&[0.05, 0.02, 0.0]), vec![None]);
}

fn small() -> (ModelConfig, ChannelLayout) {
    (
        ModelConfig {
            d_model: 16,
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
            grid: [2, 2, 2],
            init_std: 0.1,
        },
        ChannelLayout {
            vae: 6,
            temporal: 6,
            semantic: 2,
            spatial: 2,
        },
    )
}

#[test]
fn fresh_expansion_is_equivalent() {
    let (config, layout) = small();
    let base = JointModel::init(config, ChannelLayout::video_only(6), 1).unwrap();
    let joint = JointModel::init_expanded(&base, layout).unwrap();
    let r = base_equivalence_report(&joint, &base, 20, 3).unwrap();
    assert!(r.max_deviation <= 1e-6 && r.max_world_output == 0.0 && !r.vacuous);
    let none = base_equivalence_report(&joint, &base, 0, 3).unwrap();
    assert!(none.vacuous && none.max_deviation == 0.0);
}

#[test]
fn trained_weights_break_equivalence() {
    let (config, layout) = small();
    let base = JointModel::init(config, ChannelLayout::video_only(6), 1).unwrap();
    let mut joint = JointModel::init_expanded(&base, layout).unwrap();
    joint.params.get_mut("in_proj.w").unwrap().data_mut()[6 * 16] = 0.5;
    let r = base_equivalence_report(&joint, &base, 5, 3).unwrap();
    assert!(r.max_deviation > 1e-6);
}

#[test]
fn report_statistics_and_table() {
    let r = MetricReport::new("flow_consistency", vec![0.5, 1.0], "fp").unwrap();
    assert_eq!((r.mean, r.std), (0.75, 0.25));
    let back: MetricReport = serde_json::from_str(&r.to_json_line()).unwrap();
    assert_eq!(back, r);
    let table = summary_table(&[r]);
    assert!(table.contains("flow_consistency") && table.contains("0.7500"));
    assert!(MetricReport::new("x", vec![f64::NAN], "fp").is_err());
}

