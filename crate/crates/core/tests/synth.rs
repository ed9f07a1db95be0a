use std::fs;

use cycleadapt::benchmark::{source_domain, target_domain};
use cycleadapt::body::{build_toy_body, project_weak_perspective, CameraParams, SmplParams, IDENTITY_6D, SHAPE_DIM};
use cycleadapt::md::gaussian_filter_baseline;
use cycleadapt::metrics::accel_error;
use cycleadapt::synth::{gen_motion, read_video, render_features, simulate_keypoints, synthesize_video, write_video, geometry_path, DomainSpec};
use cycleadapt::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn quiet(mut spec: DomainSpec) -> DomainSpec {
    spec.feature_noise = 0.0;
    spec.nuisance = 0.0;
    spec.keypoint_noise = 0.0;
    spec.p_drop = 0.0;
    spec
}

#[test]
fn generation_is_a_pure_function_of_spec_length_and_seed() {
    let body = build_toy_body(0, 24, 60).unwrap();
    let a = synthesize_video(&body, &target_domain(), 30, 16, 5).unwrap();
    let b = synthesize_video(&body, &target_domain(), 30, 16, 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, synthesize_video(&body, &target_domain(), 30, 16, 6).unwrap());
    assert_eq!((a.len(), a.feature_dim(), a.gt_mesh[0].len(), a.gt_joints[0].len()), (30, 16, 60, 24));
    assert!(a.keypoints.iter().flat_map(|k| k.confidences()).all(|c| c == 0.0 || c == 1.0));
}

#[test]
fn zero_amplitude_holds_the_identity_pose() {
    let body = build_toy_body(0, 24, 60).unwrap();
    let spec = DomainSpec { amp_range: (0.0, 0.0), ..source_domain() };
    let motion = gen_motion(&body, &spec, 20, 3).unwrap();
    let rest = IDENTITY_6D.repeat(24);
    assert!(motion.params.iter().all(|p| p.theta == rest));
    assert!(motion.params.iter().all(|p| p.beta == motion.params[0].beta && p.beta.iter().all(|b| b.abs() <= 2.0)));
}

#[test]
fn motion_is_smoother_than_matched_white_noise() {
    let body = build_toy_body(0, 24, 60).unwrap();
    let motion = gen_motion(&body, &target_domain(), 200, 11).unwrap();
    let poses: Vec<Vec<f64>> = motion.params.iter().map(|p| p.theta.clone()).collect();
    let variance = {
        let flat: Vec<f64> = poses.iter().flatten().copied().collect();
        let mean = flat.iter().sum::<f64>() / flat.len() as f64;
        flat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / flat.len() as f64
    };
    let noise = Normal::new(0.0, variance.sqrt()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let white: Vec<Vec<f64>> = poses.iter().map(|r| r.iter().map(|_| noise.sample(&mut rng)).collect()).collect();
    // Pose rows viewed as 48 three-vectors so the joint metric applies.
    let as_frames = |seq: &[Vec<f64>]| -> Vec<Vec<[f64; 3]>> { seq.iter().map(|r| r.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()).collect() };
    let self_accel = |seq: &[Vec<f64>]| accel_error(&as_frames(seq), &as_frames(&gaussian_filter_baseline(seq, 2.0).unwrap())).unwrap();
    let smooth = self_accel(&poses);
    let rough = self_accel(&white);
    assert!(smooth < 0.05 * rough, "{smooth} vs {rough}");
}

#[test]
fn features_are_deterministic_without_noise_and_differ_across_domains() {
    let params = SmplParams { theta: IDENTITY_6D.repeat(24), beta: vec![0.3; SHAPE_DIM] };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let src = quiet(source_domain());
    let a = render_features(&params, &src, 32, &mut rng);
    let b = render_features(&params, &src, 32, &mut rng);
    assert_eq!(a, b);
    let other = DomainSpec { mixing_seed: 9, ..src.clone() };
    let c = render_features(&params, &other, 32, &mut rng);
    assert!(a.iter().zip(&c).map(|(x, y)| (x - y).powi(2)).sum::<f64>() > 0.0);
}

#[test]
fn nuisance_varies_per_frame_and_spans_few_directions() {
    let params = SmplParams { theta: IDENTITY_6D.repeat(24), beta: vec![0.0; SHAPE_DIM] };
    let spec = DomainSpec { nuisance: 1.0, ..quiet(target_domain()) };
    let clean = render_features(&params, &quiet(target_domain()), 64, &mut ChaCha8Rng::seed_from_u64(0));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let deltas: Vec<Vec<f64>> = (0..20)
        .map(|_| render_features(&params, &spec, 64, &mut rng).iter().zip(&clean).map(|(a, b)| a - b).collect())
        .collect();
    assert_ne!(deltas[0], deltas[1]);
    // Residual of each delta after projecting out the first eight is zero.
    let basis = gram_schmidt(&deltas[..8]);
    for d in &deltas[8..] {
        let mut r = d.clone();
        for q in &basis {
            let dot: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
            r.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        assert!(r.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-9);
    }
}

fn gram_schmidt(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut r = v.clone();
        for q in &out {
            let dot: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
            r.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.push(r.into_iter().map(|x| x / n).collect());
    }
    out
}

#[test]
fn perfect_evidence_reproduces_the_projection() {
    let body = build_toy_body(0, 24, 60).unwrap();
    let motion = gen_motion(&body, &target_domain(), 3, 2).unwrap();
    let camera = CameraParams { s: 1.1, tx: 0.05, ty: -0.05 };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let kp = simulate_keypoints(&motion.joints[1], camera, &quiet(target_domain()), &mut rng).unwrap();
    let exact = project_weak_perspective(camera, &motion.joints[1]);
    for (k, p) in kp.0.iter().zip(&exact) {
        assert_eq!([k[0], k[1], k[2]], [p[0], p[1], 1.0]);
    }
    let all_dropped = DomainSpec { p_drop: 1.0, ..target_domain() };
    let kp = simulate_keypoints(&motion.joints[1], camera, &all_dropped, &mut rng).unwrap();
    assert!(kp.0.iter().all(|k| *k == [0.0, 0.0, 0.0]));
}

#[test]
fn drop_rate_matches_its_probability() {
    let joints = vec![[0.1, 0.2, 0.3]; 100];
    let spec = DomainSpec { p_drop: 0.3, ..target_domain() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dropped: usize = (0..100)
        .map(|_| simulate_keypoints(&joints, CameraParams::IDENTITY, &spec, &mut rng).unwrap().confidences().filter(|&c| c == 0.0).count())
        .sum();
    let rate = dropped as f64 / 10_000.0;
    assert!((rate - 0.30).abs() <= 0.01, "{rate}");
}

#[test]
fn invalid_specs_are_rejected() {
    let body = build_toy_body(0, 24, 60).unwrap();
    for bad in [
        DomainSpec { p_drop: 1.5, ..target_domain() },
        DomainSpec { amp_range: (0.5, 0.1), ..target_domain() },
        DomainSpec { freq_range: (-0.1, 0.1), ..target_domain() },
        DomainSpec { nuisance: -1.0, ..target_domain() },
        DomainSpec { gap: 2.0, ..target_domain() },
    ] {
        assert!(matches!(gen_motion(&body, &bad, 5, 0), Err(Error::Config(_))));
    }
    assert!(gen_motion(&body, &target_domain(), 0, 0).is_err());
}

#[test]
fn video_files_round_trip_bit_exactly() {
    let body = build_toy_body(0, 24, 60).unwrap();
    let video = synthesize_video(&body, &target_domain(), 12, 16, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("target.jsonl");
    write_video(&path, &video).unwrap();
    assert!(geometry_path(&path).exists());
    assert_eq!(read_video(&path).unwrap(), video);
}

#[test]
fn truncated_and_wrong_version_files_fail_cleanly() {
    let body = build_toy_body(0, 24, 60).unwrap();
    let video = synthesize_video(&body, &target_domain(), 6, 16, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.jsonl");
    write_video(&path, &video).unwrap();
    let text = fs::read_to_string(&path).unwrap();

    fs::write(&path, &text[..text.len() / 2]).unwrap();
    assert!(matches!(read_video(&path), Err(Error::Parse { .. })));

    fs::write(&path, text.replacen("\"version\":1", "\"version\":2", 1)).unwrap();
    assert!(matches!(read_video(&path), Err(Error::Version { found: 2, expected: 1, .. })));

    fs::write(&path, "").unwrap();
    assert!(matches!(read_video(&path), Err(Error::Parse { .. })));
    assert!(matches!(read_video(&dir.path().join("missing.jsonl")), Err(Error::Io { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn gt_keypoints_reproject_onto_gt_joints(seed in 0u64..1000) {
        let body = build_toy_body(0, 24, 30).unwrap();
        let spec = quiet(target_domain());
        let video = synthesize_video(&body, &spec, 2, 8, seed).unwrap();
        for (kp, joints) in video.keypoints.iter().zip(&video.gt_joints) {
            let exact = project_weak_perspective(video.gt_camera, joints);
            for (k, p) in kp.0.iter().zip(&exact) {
                prop_assert_eq!([k[0], k[1]], *p);
            }
        }
    }

    #[test]
    fn bounded_amplitudes_bound_joint_angles(seed in 0u64..1000) {
        let body = build_toy_body(0, 24, 30).unwrap();
        let spec = DomainSpec { amp_range: (0.0, 0.3), ..source_domain() };
        let motion = gen_motion(&body, &spec, 10, seed).unwrap();
        // Hinge rotations by at most 0.3 rad keep the first column near e_x.
        let bound = 1.0 - 0.3f64.cos() + 1e-12;
        for p in &motion.params {
            for code in p.theta.chunks(6) {
                let d = ((code[0] - 1.0).powi(2) + code[1].powi(2) + code[2].powi(2)).sqrt();
                prop_assert!(d <= (2.0 * bound).sqrt() + 1e-9);
            }
        }
    }
}
