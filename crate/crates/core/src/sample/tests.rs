use super::*;
use crate::model::ModelConfig;

fn desk_state() -> NdArray<f32> {
    NdArray::from_fn(&[2, 2, 112], |i| 1.0 + (i % 7) as f32)
}

#[test]
fn masking_temporal_zeroes_its_range_only() {
    let l = ChannelLayout::default();
    let z = desk_state();
    let m = mask_channels(&z, ChannelGroup::Temporal, &l).unwrap();
    for (i, (&a, &b)) in z.data().iter().zip(m.data()).enumerate() {
        let c = i % 112;
        if (48..96).contains(&c) {
            assert_eq!(b, 0.0);
        } else {
            assert_eq!(a, b);
        }
    }
    assert_eq!(mask_channels(&m, ChannelGroup::Temporal, &l).unwrap(), m);
}

#[test]
fn masking_every_world_group_leaves_video_only() {
    let l = ChannelLayout::default();
    let mut z = desk_state();
    for g in ChannelGroup::WORLD {
        z = mask_channels(&z, g, &l).unwrap();
    }
    for (i, &v) in z.data().iter().enumerate() {
        assert_eq!(v != 0.0, i % 112 < 48);
    }
    assert!(mask_channels(&z, ChannelGroup::Vae, &l).is_err());
}

fn scalar(x: f32) -> NdArray<f32> {
    NdArray::full(&[1], x)
}

fn weights(w_txt: f64, w_temp: f64, w_sem: f64, w_spa: f64) -> GuidanceConfig {
    GuidanceConfig {
        w_txt,
        w_temp,
        w_sem,
        w_spa,
        ..GuidanceConfig::default()
    }
}

#[test]
fn coefficient_examples() {
    let b = [scalar(2.0), scalar(1.0), scalar(1.5), scalar(1.5), scalar(1.5)];
    let refs = [&b[0], &b[1], &b[2], &b[3], &b[4]];
    assert_eq!(combine(&refs, &GuidanceConfig::default()).unwrap().data(), &[8.5]);
    assert_eq!(combine(&refs, &weights(0.0, 0.0, 0.0, 0.0)).unwrap().data(), &[2.0]);
    let same = scalar(0.3);
    assert_eq!(combine(&[&same; 5], &weights(3.0, -2.0, 7.5, 0.25)).unwrap().data(), &[0.3]);
    assert!(combine(&[&scalar(f32::NAN), &same, &same, &same, &same], &GuidanceConfig::default())
        .unwrap_err()
        .to_string()
        .contains("conditional"));
}

#[test]
fn world_weights_zero_is_classifier_free_guidance() {
    let (c, n) = (NdArray::from_fn(&[5], |i| i as f32 * 0.3 - 0.4), NdArray::from_fn(&[5], |i| 1.0 - i as f32 * 0.2));
    let junk = NdArray::full(&[5], 99.0);
    let out = combine(&[&c, &n, &junk, &junk, &junk], &weights(5.0, 0.0, 0.0, 0.0)).unwrap();
    for i in 0..5 {
        let cfg = 6.0 * c.data()[i] as f64 - 5.0 * n.data()[i] as f64;
        assert!((out.data()[i] as f64 - cfg).abs() < 1e-6);
    }
}

#[test]
fn constant_field_integrates_exactly() {
    let z1 = NdArray::from_fn(&[4], |i| i as f32 * 0.5 - 1.0);
    for n in [1, 4, 16, 20] {
        let (z0, norms) = euler_integrate(&z1, n, |z, _| Ok(NdArray::full(z.shape(), 0.25))).unwrap();
        for (a, b) in z0.data().iter().zip(z1.data()) {
            assert!((a - (b - 0.25)).abs() <= 1e-6, "n={n}");
            if n.is_power_of_two() {
                assert_eq!(*a, b - 0.25);
            }
        }
        assert_eq!(norms.len(), n);
    }
    let (z0, _) = euler_integrate(&z1, 7, |z, _| Ok(NdArray::zeros(z.shape()))).unwrap();
    assert_eq!(z0, z1);
}

#[test]
fn euler_error_is_first_order() {
    let z1 = NdArray::full(&[1], 1.0f32);
    let exact = (-1.0f64).exp();
    let err = |n| {
        let (z, _) = euler_integrate(&z1, n, |z, _| Ok(z.clone())).unwrap();
        (z.data()[0] as f64 - exact).abs()
    };
    let ratio = err(20) / err(200);
    assert!((ratio - 10.0).abs() <= 2.0, "ratio {ratio}");
}

#[test]
fn non_finite_state_reports_the_step() {
    let z1 = NdArray::full(&[1], 1.0f32);
    let err = euler_integrate(&z1, 5, |z, t| Ok(if t < 0.5 { NdArray::full(z.shape(), f32::INFINITY) } else { z.clone() }))
        .unwrap_err();
    assert!(err.to_string().contains("step 3"), "{err}");
}

fn tiny_model(zero: bool) -> JointModel {
    let config = ModelConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        mlp_ratio: 2,
        grid: [2, 2, 2],
        init_std: 0.2,
    };
    let layout = ChannelLayout {
        vae: 12,
        temporal: 12,
        semantic: 2,
        spatial: 2,
    };
    if zero {
        JointModel::zeros(config, layout).unwrap()
    } else {
        JointModel::init(config, layout, 8).unwrap()
    }
}

fn codec_2x2() -> CodecConfig {
    CodecConfig { p: 2, q: 1 }
}

#[test]
fn sampling_is_deterministic_with_codec_shape() {
    let m = tiny_model(false);
    let g = GuidanceConfig {
        steps: 4,
        ..GuidanceConfig::default()
    };
    let tokens = prompt::encode(&[0, 3], true);
    let a = sample(&m, &tokens, &g, &codec_2x2(), 0).unwrap();
    let b = sample(&m, &tokens, &g, &codec_2x2(), 0).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.video.shape(), &[2, 4, 4, 3]);
    assert!(a.video.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_ne!(sample(&m, &tokens, &g, &codec_2x2(), 1).unwrap().latent, a.latent);
}

#[test]
fn zero_model_decodes_the_initial_noise() {
    let m = tiny_model(true);
    let g = GuidanceConfig {
        steps: 3,
        ..GuidanceConfig::default()
    };
    let r = sample(&m, &prompt::null_prompt(), &g, &codec_2x2(), 5).unwrap();
    let z1 = initial_noise(&m, &g, 5).unwrap();
    assert_eq!(r.latent, z1);
    let vae = split(&z1, &m.layout).unwrap()[0].clone();
    let want = codec::decode(&LatentGrid::new(vae, ChannelGroup::Vae).unwrap(), 2, 1).unwrap().map(|x| x.clamp(0.0, 1.0));
    assert_eq!(r.video, want);
}

#[test]
fn codec_mismatch_is_reported() {
    assert!(sample(&tiny_model(true), &prompt::null_prompt(), &GuidanceConfig::default(), &CodecConfig::default(), 0).is_err());
}

#[test]
fn guided_velocity_skips_nothing_it_needs() {
    // with only text guidance the result equals CFG built from two direct forwards
    let m = tiny_model(false);
    let z = initial_noise(&m, &GuidanceConfig::default(), 2).unwrap();
    let tokens = prompt::encode(&[5], false);
    let g = weights(2.0, 0.0, 0.0, 0.0);
    let v = guided_velocity(&m, &z, 0.7, &tokens, &g).unwrap();
    let one = |p: Vec<u32>| {
        let mut shape = vec![1];
        shape.extend_from_slice(z.shape());
        m.velocity(&z.clone().reshape(&shape).unwrap(), &[0.7], &[p]).unwrap()
    };
    let (c, n) = (one(tokens.clone()), one(prompt::null_prompt()));
    for i in 0..v.len() {
        let want = 3.0 * c.data()[i] as f64 - 2.0 * n.data()[i] as f64;
        assert!((v.data()[i] as f64 - want).abs() < 1e-5);
    }
}

#[test]
fn ppm_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let frame = NdArray::from_fn(&[3, 5, 3], |i| (i % 256) as f32 / 255.0);
    let path = dir.path().join("f.ppm");
    write_ppm(&path, &frame).unwrap();
    assert!(std::fs::read(&path).unwrap().starts_with(b"P6\n5 3\n255\n"));
    assert!(read_ppm(&path).unwrap().max_abs_diff(&frame) < 1e-6);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn coefficients_sum_to_one(w in proptest::array::uniform4(-20f64..20.0)) {
            let g = weights(w[0], w[1], w[2], w[3]);
            prop_assert!((g.coefficients().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn equal_branches_are_a_fixed_point(w in proptest::array::uniform4(-5f64..5.0), x in -3f32..3.0) {
            let v = scalar(x);
            let out = combine(&[&v; 5], &weights(w[0], w[1], w[2], w[3])).unwrap();
            prop_assert!((out.data()[0] as f64 - x as f64).abs() <= 1e-12);
        }
    }
}

