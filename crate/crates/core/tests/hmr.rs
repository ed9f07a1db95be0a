use cycleadapt::body::{build_toy_body, rotmat_to_rot6d, axis_angle_to_rotmat, body_forward, SmplParams, IDENTITY_6D, SHAPE_DIM};
use cycleadapt::hmr::{hmr_loss_value, HmrConfig, HmrLossOptions, HmrNet, KeypointBatch};
use diffcore::{grad_check_report, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> HmrConfig {
    HmrConfig { feature_dim: 6, hidden_dim: 5, num_hidden_layers: 2, num_joints: 24 }
}

fn features(rng: &mut ChaCha8Rng, rows: usize, width: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..width).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn keypoints_from(params: &SmplParams, s: f64, conf: &[f64]) -> KeypointBatch {
    let body = build_toy_body(0, 24, 40).unwrap();
    let joints = body_forward(&body, params).unwrap().joints;
    let coords: Vec<f64> = joints.iter().flat_map(|p| [s * p[0], s * p[1]]).collect();
    KeypointBatch { coords: Tensor::new([1, 24, 2], coords).unwrap(), confidence: Tensor::new([1, 24], conf.to_vec()).unwrap() }
}

#[test]
fn init_is_deterministic() {
    let a = HmrNet::init(HmrConfig::default(), 7).unwrap();
    let b = HmrNet::init(HmrConfig::default(), 7).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, HmrNet::init(HmrConfig::default(), 8).unwrap());
}

#[test]
fn zero_feature_maps_to_rest() {
    let net = HmrNet::init(HmrConfig::default(), 7).unwrap();
    let out = &net.forward(&[vec![0.0; 512]]).unwrap()[0];
    assert_eq!(out.theta, IDENTITY_6D.repeat(24));
    assert_eq!(out.beta, vec![0.0; SHAPE_DIM]);
    assert_eq!((out.camera.s, out.camera.tx, out.camera.ty), (1.0, 0.0, 0.0));
}

#[test]
fn outputs_have_fixed_dims_and_rows_are_independent() {
    let net = HmrNet::init(HmrConfig::default(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rows = features(&mut rng, 32, 512);
    let batch = net.forward(&rows).unwrap();
    let single = net.forward(&rows[..1]).unwrap();
    assert_eq!(batch[0], single[0]);
    for o in &batch {
        assert_eq!((o.theta.len(), o.beta.len()), (144, 10));
        assert!(o.theta.iter().chain(&o.beta).all(|v| v.is_finite()));
    }
}

#[test]
fn forward_gradient_matches_finite_differences() {
    let net = HmrNet::init(tiny(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rows = features(&mut rng, 3, 6);
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([3, 6], rows.concat()).unwrap());
    let nodes = net.build(&mut g, x);
    let all = g.concat(&[nodes.theta, nodes.beta, nodes.camera], 1);
    let total = g.sum(all);
    let loss = g.scale(total, 1.0 / (3.0 * 157.0));
    let report = grad_check_report(&g, net.params(), loss, 1e-6).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert!(report.checked > 0);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let body = build_toy_body(0, 24, 40).unwrap();
    let mut net = HmrNet::init(tiny(), 4).unwrap();
    // Spread the output bias so every joint carries a well-conditioned code.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bias = net.params_mut().get_mut("hmr.fc2.bias").unwrap();
    for v in bias.data_mut().iter_mut().take(144) {
        *v += rng.random_range(-0.2..0.2);
    }
    let rows = features(&mut rng, 2, 6);
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([2, 6], rows.concat()).unwrap());
    let nodes = net.build(&mut g, x);
    let kp = KeypointBatch {
        coords: Tensor::new([2, 24, 2], (0..96).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap(),
        confidence: Tensor::new([2, 24], (0..48).map(|i| if i % 5 == 0 { 0.0 } else { 1.0 }).collect()).unwrap(),
    };
    let theta_t = Tensor::new([2, 144], (0..288).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let beta_t = Tensor::new([2, 10], (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let loss = net.build_loss(&mut g, nodes, Some((theta_t, beta_t)), &kp, &body, HmrLossOptions::default()).unwrap();
    let report = grad_check_report(&g, net.params(), loss.total, 1e-6).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert!(report.checked > report.skipped);
}

#[test]
fn loss_vanishes_at_the_truth() {
    let body = build_toy_body(0, 24, 40).unwrap();
    let net = HmrNet::init(tiny(), 3).unwrap();
    let out = &net.forward(&[vec![0.0; 6]]).unwrap()[0];
    let kp = keypoints_from(&out.params(), 1.0, &[1.0; 24]);
    let gt = (Tensor::new([1, 144], out.theta.clone()).unwrap(), Tensor::new([1, 10], out.beta.clone()).unwrap());
    let (total, smpl, two_d) = hmr_loss_value(&net, &[vec![0.0; 6]], Some(gt), &kp, &body, HmrLossOptions::default()).unwrap();
    assert_eq!((total, smpl, two_d), (0.0, 0.0, 0.0));
}

#[test]
fn parameter_term_weights_shape_by_gamma() {
    let body = build_toy_body(0, 24, 40).unwrap();
    let net = HmrNet::init(tiny(), 3).unwrap();
    let out = &net.forward(&[vec![0.0; 6]]).unwrap()[0];
    let kp = keypoints_from(&out.params(), 1.0, &[1.0; 24]);
    let theta_t: Vec<f64> = out.theta.iter().map(|v| v + 2.0).collect();
    let beta_t: Vec<f64> = out.beta.iter().map(|v| v - 1.0).collect();
    let gt = (Tensor::new([1, 144], theta_t).unwrap(), Tensor::new([1, 10], beta_t).unwrap());
    let (total, smpl, two_d) = hmr_loss_value(&net, &[vec![0.0; 6]], Some(gt.clone()), &kp, &body, HmrLossOptions::default()).unwrap();
    assert_eq!(two_d, 0.0);
    assert!((smpl - 2.001).abs() < 1e-12 && (total - 2.001).abs() < 1e-12);

    let first = HmrLossOptions { first_cycle: true, ..HmrLossOptions::default() };
    let (total, smpl, _) = hmr_loss_value(&net, &[vec![0.0; 6]], Some(gt), &kp, &body, first).unwrap();
    assert_eq!((total, smpl), (0.0, 0.0));
}

#[test]
fn all_dropped_keypoints_give_zero_reprojection_loss() {
    let body = build_toy_body(0, 24, 40).unwrap();
    let net = HmrNet::init(tiny(), 3).unwrap();
    let kp = KeypointBatch { coords: Tensor::full([1, 24, 2], 5.0), confidence: Tensor::zeros([1, 24]) };
    let (_, _, two_d) = hmr_loss_value(&net, &[vec![0.3; 6]], None, &kp, &body, HmrLossOptions::default()).unwrap();
    assert_eq!(two_d, 0.0);
}

#[test]
fn confidence_weighting_matches_hand_computation() {
    let body = build_toy_body(0, 24, 40).unwrap();
    let net = HmrNet::init(tiny(), 3).unwrap();
    let out = &net.forward(&[vec![0.0; 6]]).unwrap()[0];
    let mut conf = vec![1.0; 24];
    conf[0] = 0.0;
    let mut kp = keypoints_from(&out.params(), 1.0, &conf);
    // Keypoint 1 off by 0.3 in x: its mean coordinate residual is 0.15,
    // averaged over 23 live keypoints.
    kp.coords.data_mut()[2] += 0.3;
    kp.coords.data_mut()[0] += 100.0;
    let (_, _, two_d) = hmr_loss_value(&net, &[vec![0.0; 6]], None, &kp, &body, HmrLossOptions::default()).unwrap();
    assert!((two_d - 0.15 / 23.0).abs() < 1e-12);

    let unweighted = HmrLossOptions { weighted_2d: false, ..HmrLossOptions::default() };
    let (_, _, two_d) = hmr_loss_value(&net, &[vec![0.0; 6]], None, &kp, &body, unweighted).unwrap();
    assert!((two_d - (100.3 / 48.0)).abs() < 1e-9);
}

#[test]
fn gt_params_reproject_exactly() {
    let body = build_toy_body(0, 24, 40).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let theta: Vec<f64> = (0..24)
        .flat_map(|_| rotmat_to_rot6d(&axis_angle_to_rotmat(std::array::from_fn(|_| rng.random_range(-0.5..0.5)))))
        .collect();
    let params = SmplParams::new(theta, vec![0.2; 10]).unwrap();
    // Make the network emit exactly these parameters through its bias.
    let mut net = HmrNet::init(tiny(), 0).unwrap();
    let bias = net.params_mut().get_mut("hmr.fc2.bias").unwrap();
    bias.data_mut()[..144].copy_from_slice(&params.theta);
    bias.data_mut()[144..154].copy_from_slice(&params.beta);
    let kp = keypoints_from(&params, 1.0, &[1.0; 24]);
    let (_, _, two_d) = hmr_loss_value(&net, &[vec![0.0; 6]], None, &kp, &body, HmrLossOptions::default()).unwrap();
    assert!(two_d < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dropped_keypoints_never_move_the_loss(seed in any::<u64>(), joint in 0usize..24, dx in -10.0f64..10.0) {
        let body = build_toy_body(0, 24, 40).unwrap();
        let net = HmrNet::init(tiny(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conf: Vec<f64> = (0..24).map(|j| if j == joint || rng.random_bool(0.3) { 0.0 } else { 1.0 }).collect();
        let coords: Vec<f64> = (0..48).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kp = KeypointBatch { coords: Tensor::new([1, 24, 2], coords).unwrap(), confidence: Tensor::new([1, 24], conf).unwrap() };
        let mut moved = kp.clone();
        moved.coords.data_mut()[2 * joint] += dx;
        moved.coords.data_mut()[2 * joint + 1] -= dx;
        let f = features(&mut rng, 1, 6);
        let a = hmr_loss_value(&net, &f, None, &kp, &body, HmrLossOptions::default()).unwrap();
        let b = hmr_loss_value(&net, &f, None, &moved, &body, HmrLossOptions::default()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn loss_is_nonnegative(seed in any::<u64>()) {
        let body = build_toy_body(0, 24, 40).unwrap();
        let net = HmrNet::init(tiny(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kp = KeypointBatch {
            coords: Tensor::new([1, 24, 2], (0..48).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
            confidence: Tensor::new([1, 24], (0..24).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect()).unwrap(),
        };
        let gt = (Tensor::new([1, 144], (0..144).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(), Tensor::zeros([1, 10]));
        let (total, smpl, two_d) = hmr_loss_value(&net, &features(&mut rng, 1, 6), Some(gt), &kp, &body, HmrLossOptions::default()).unwrap();
        prop_assert!(total >= 0.0 && smpl >= 0.0 && two_d >= 0.0);
    }
}
