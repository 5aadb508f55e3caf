use proptest::prelude::*;

use super::*;
use crate::worldsim::{episode_config, generate_episode, WorldConfig};

fn episodes(n: u64) -> Vec<Episode> {
    let base = WorldConfig::default();
    (0..n)
        .map(|i| generate_episode(&episode_config(&base, 4, 7, i)).unwrap())
        .collect()
}

fn grid(f: usize, c: usize, salt: f32) -> NdArray<f32> {
    NdArray::from_fn(&[f, 2, 3, c], |i| (i as f32 * 0.37 + salt).sin())
}

#[test]
fn desk_layout_offsets() {
    let w = WorldLatent::assemble(&grid(2, 48, 0.0), &grid(2, 8, 1.0), &grid(2, 8, 2.0)).unwrap();
    assert_eq!(w.channels(), 64);
    assert_eq!(
        w.offsets,
        [
            (ChannelGroup::Temporal, 0, 48),
            (ChannelGroup::Semantic, 48, 8),
            (ChannelGroup::Spatial, 56, 8)
        ]
    );
}

#[test]
fn reference_layout_channel_total() {
    let w = WorldLatent::assemble(&grid(1, 16, 0.0), &grid(1, 8, 1.0), &grid(1, 8, 2.0)).unwrap();
    assert_eq!(w.channels(), 32);
    assert_eq!(16 + w.channels(), 48);
}

#[test]
fn grid_mismatch_is_rejected() {
    let err = WorldLatent::assemble(&grid(2, 4, 0.0), &grid(1, 4, 0.0), &grid(2, 4, 0.0)).unwrap_err();
    assert!(err.to_string().contains("semantic"), "{err}");
}

proptest! {
    #[test]
    fn assemble_split_identity(ct in 1usize..6, cs in 1usize..6, cp in 1usize..6, salt in -5f32..5.0) {
        let (t, s, p) = (grid(2, ct, salt), grid(2, cs, salt + 1.0), grid(2, cp, salt + 2.0));
        let w = WorldLatent::assemble(&t, &s, &p).unwrap();
        prop_assert_eq!(w.split(ChannelGroup::Temporal).unwrap(), t);
        prop_assert_eq!(w.split(ChannelGroup::Semantic).unwrap(), s);
        prop_assert_eq!(w.split(ChannelGroup::Spatial).unwrap(), p);
        prop_assert!(w.split(ChannelGroup::Vae).is_err());
    }
}

#[test]
fn desk_pipeline_shapes_and_determinism() {
    let eps = episodes(6);
    let codec = CodecConfig::default();
    let params = FeatureParams::default();
    let models = FeatureModels::fit(&eps, &codec, &params).unwrap();
    let z = world_latent(&eps[0], &models, &codec, &params).unwrap();
    assert_eq!(z.data.shape(), &[8, 8, 8, 64]);
    assert!(z.data.is_finite());
    let again = FeatureModels::fit(&eps, &codec, &params).unwrap();
    assert_eq!(models, again);
    assert_eq!(z, world_latent(&eps[0], &again, &codec, &params).unwrap());
    assert!(models.semantic.pca.orthonormality_error() < 1e-6);
    assert!(models.spatial.pca.orthonormality_error() < 1e-6);
}

#[test]
fn oversized_k_names_the_source() {
    let eps = episodes(1);
    let params = FeatureParams {
        k_semantic: 40,
        ..FeatureParams::default()
    };
    let err = FeatureModels::fit(&eps, &CodecConfig::default(), &params).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("semantic") && msg.contains("k=40"), "{msg}");
}

#[test]
fn fitted_models_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let models = FeatureModels::fit(&episodes(3), &CodecConfig::default(), &FeatureParams::default()).unwrap();
    models.save(dir.path()).unwrap();
    assert_eq!(FeatureModels::load(dir.path()).unwrap(), models);
    let bytes = std::fs::read(dir.path().join(FeatureModels::SEMANTIC_FILE)).unwrap();
    assert_eq!(&bytes[..4], FEATURE_MAGIC);
    std::fs::write(dir.path().join(FeatureModels::SPATIAL_FILE), &bytes[..20]).unwrap();
    assert!(FeatureModels::load(dir.path()).is_err());
}

#[test]
fn temporal_latent_of_static_scene_is_black() {
    let flow = NdArray::zeros(&[7, 32, 32, 2]);
    let z = temporal_latent(&flow, &CodecConfig::default(), &FlowRgbParams::default()).unwrap();
    assert_eq!(z.shape(), &[8, 8, 8, 48]);
    assert!(z.data().iter().all(|&v| v == 0.0));
}
