use std::sync::Arc;

use diffcore::{backward, evaluate, grad_check, grad_check_report, DiffError, Graph, NodeId, Tensor, TensorMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const STEP: f64 = 1e-6;
// Bilinear primitives are differenced exactly at any step, so the sweep uses
// a larger step that keeps round-off far below tiny gradient entries.
const SWEEP_STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn bind(pairs: Vec<(&str, Tensor)>) -> TensorMap {
    pairs.into_iter().collect()
}

#[test]
fn add_doubles() {
    let mut g = Graph::new();
    let x = g.leaf("x");
    let y = g.add(x, x);
    let vals = evaluate(&g, &bind(vec![("x", Tensor::scalar(3.0))])).unwrap();
    assert_eq!(vals[y.index()].data(), &[6.0]);
}

#[test]
fn layer_norm_of_constant_collapses_to_bias() {
    let mut g = Graph::new();
    let x = g.leaf("x");
    let gain = g.constant(Tensor::full([4], 1.0));
    let bias = g.constant(Tensor::zeros([4]));
    let y = g.layer_norm(x, gain, bias);
    let vals = evaluate(&g, &bind(vec![("x", Tensor::full([1, 4], 5.0))])).unwrap();
    assert_eq!(vals[y.index()].data(), &[0.0; 4]);
}

#[test]
fn matmul_hand_arithmetic() {
    let mut g = Graph::new();
    let a = g.leaf("a");
    let b = g.leaf("b");
    let c = g.matmul(a, b);
    let bindings = bind(vec![
        ("a", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]])),
        ("b", Tensor::from_rows(&[vec![5.0], vec![6.0]])),
    ]);
    let vals = evaluate(&g, &bindings).unwrap();
    assert_eq!(vals[c.index()].shape(), &[2, 1]);
    assert_eq!(vals[c.index()].data(), &[17.0, 39.0]);
}

#[test]
fn shape_mismatch_names_node() {
    let mut g = Graph::new();
    let a = g.leaf("a");
    let b = g.leaf("b");
    let c = g.matmul(a, b);
    let bindings = bind(vec![("a", Tensor::zeros([2, 3])), ("b", Tensor::zeros([2, 3]))]);
    match evaluate(&g, &bindings) {
        Err(DiffError::ShapeMismatch { node, op, .. }) => {
            assert_eq!(node, c.index());
            assert_eq!(op, "matmul");
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn unbound_leaf_is_reported() {
    let mut g = Graph::new();
    let a = g.leaf("a");
    g.relu(a);
    assert_eq!(
        evaluate(&g, &TensorMap::new()).unwrap_err(),
        DiffError::UnboundLeaf("a".into())
    );
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::new();
    let a = g.leaf("a");
    let r = g.relu(a);
    let err = backward(&g, &bind(vec![("a", Tensor::zeros([3]))]), r).unwrap_err();
    assert!(matches!(err, DiffError::NonScalarLoss { .. }));
}

#[test]
fn mean_abs_gradient_is_sign() {
    let mut g = Graph::new();
    let x = g.leaf("x");
    let t = g.constant(Tensor::scalar(0.0));
    let d = g.sub(x, t);
    let loss = g.mean_abs(d);
    let grads = backward(&g, &bind(vec![("x", Tensor::scalar(2.0))]), loss).unwrap();
    assert_eq!(grads.get("x").unwrap().data(), &[1.0]);
}

#[test]
fn mean_abs_subgradient_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.leaf("x");
    let loss = g.mean_abs(x);
    let grads = backward(&g, &bind(vec![("x", Tensor::zeros([3]))]), loss).unwrap();
    assert_eq!(grads.get("x").unwrap().data(), &[0.0; 3]);
}

#[test]
fn square_gradient() {
    let mut g = Graph::new();
    let x = g.leaf("x");
    let sq = g.mul(x, x);
    let loss = g.sum(sq);
    let grads = backward(&g, &bind(vec![("x", Tensor::scalar(3.0))]), loss).unwrap();
    assert_eq!(grads.get("x").unwrap().data(), &[6.0]);
}

#[test]
fn unreachable_leaf_gets_exact_zero() {
    let mut g = Graph::new();
    let x = g.leaf("x");
    let y = g.leaf("unused");
    g.relu(y);
    let loss = g.sum(x);
    let bindings = bind(vec![("x", Tensor::zeros([2])), ("unused", Tensor::full([3], 1.5))]);
    let grads = backward(&g, &bindings, loss).unwrap();
    assert_eq!(grads.get("unused").unwrap(), &Tensor::zeros([3]));
}

#[test]
fn kink_points_are_skipped() {
    let mut g = Graph::new();
    let x = g.leaf("x");
    let t = g.leaf("t");
    let d = g.sub(x, t);
    let loss = g.mean_abs(d);
    let bindings = bind(vec![("x", Tensor::full([4], 0.5)), ("t", Tensor::full([4], 0.5))]);
    let report = grad_check_report(&g, &bindings, loss, STEP).unwrap();
    assert_eq!(report.checked, 0);
    assert_eq!(report.skipped, 8);
}

#[test]
fn double_transpose_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::new();
    let x = g.leaf("x");
    let t1 = g.transpose(x);
    let t2 = g.transpose(t1);
    let w = g.constant(randn(&mut rng, &[3, 5]));
    let prod = g.mul(t2, w);
    let loss = g.sum(prod);
    let xv = randn(&mut rng, &[3, 5]);
    let vals = evaluate(&g, &bind(vec![("x", xv.clone())])).unwrap();
    assert_eq!(vals[t2.index()], xv);
    // d/dx sum(x ⊙ w) = w exactly, through both transposes.
    let grads = backward(&g, &bind(vec![("x", xv)]), loss).unwrap();
    let Some(diffcore::Op::Const(w_val)) = Some(g.op(w).clone()) else { unreachable!() };
    assert_eq!(grads.get("x").unwrap(), &*w_val);
}

#[test]
fn evaluation_is_bit_deterministic() {
    let (g, loss, bindings) = mlp(3);
    let a = evaluate(&g, &bindings).unwrap();
    let b = evaluate(&g, &bindings).unwrap();
    assert_eq!(a, b);
    assert_eq!(backward(&g, &bindings, loss).unwrap(), backward(&g, &bindings, loss).unwrap());
}

fn mlp(seed: u64) -> (Graph, NodeId, TensorMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let x = g.leaf("x");
    let mut h = x;
    let dims = [5, 7, 6, 3];
    let mut bindings = bind(vec![("x", randn(&mut rng, &[4, dims[0]]))]);
    for l in 0..3 {
        let w = g.leaf(&format!("w{l}"));
        let b = g.leaf(&format!("b{l}"));
        bindings.insert(format!("w{l}"), randn(&mut rng, &[dims[l], dims[l + 1]]));
        bindings.insert(format!("b{l}"), randn(&mut rng, &[dims[l + 1]]));
        h = g.linear(h, w, b);
        if l < 2 {
            h = g.relu(h);
        }
    }
    let loss = g.sum(h);
    (g, loss, bindings)
}

#[test]
fn three_layer_perceptron_matches_finite_differences() {
    let (g, loss, bindings) = mlp(0);
    let report = grad_check_report(&g, &bindings, loss, STEP).unwrap();
    assert!(report.checked > 100, "{report:?}");
    assert!(report.max_rel_error < TOL, "{report:?}");
}

#[test]
fn linear_layer_grad_check_seed0() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let x = g.leaf("x");
    let w = g.leaf("w");
    let b = g.leaf("b");
    let y = g.linear(x, w, b);
    let c = g.constant(randn(&mut rng, &[3, 4]));
    let prod = g.mul(y, c);
    let loss = g.sum(prod);
    let bindings = bind(vec![
        ("x", randn(&mut rng, &[3, 5])),
        ("w", randn(&mut rng, &[5, 4])),
        ("b", randn(&mut rng, &[4])),
    ]);
    assert!(grad_check(&g, &bindings, loss, STEP).unwrap() < TOL);
}

#[test]
fn layer_norm_grad_check_seed1() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let x = g.leaf("x");
    let gain = g.leaf("gain");
    let bias = g.leaf("bias");
    let y = g.layer_norm(x, gain, bias);
    let c = g.constant(randn(&mut rng, &[4, 6]));
    let prod = g.mul(y, c);
    let loss = g.sum(prod);
    let bindings = bind(vec![
        ("x", randn(&mut rng, &[4, 6])),
        ("gain", randn(&mut rng, &[6])),
        ("bias", randn(&mut rng, &[6])),
    ]);
    assert!(grad_check(&g, &bindings, loss, STEP).unwrap() < TOL);
}

/// One randomized instance of each primitive, reduced to a scalar through a
/// random linear functional so every output entry carries gradient.
fn primitive_instance(kind: usize, rng: &mut ChaCha8Rng) -> (Graph, NodeId, TensorMap) {
    let mut g = Graph::new();
    let mut bindings = TensorMap::new();
    let mut leaf = |g: &mut Graph, name: &str, t: Tensor| {
        bindings.insert(name, t);
        g.leaf(name)
    };
    let out = match kind {
        0 => {
            let a = leaf(&mut g, "a", randn(rng, &[3, 4]));
            let b = leaf(&mut g, "b", randn(rng, &[4, 2]));
            g.matmul(a, b)
        }
        1 => {
            let a = leaf(&mut g, "a", randn(rng, &[2, 3, 4]));
            let b = leaf(&mut g, "b", randn(rng, &[2, 4, 2]));
            g.matmul(a, b)
        }
        2 => {
            let a = leaf(&mut g, "a", randn(rng, &[3, 4]));
            let b = leaf(&mut g, "b", randn(rng, &[2, 4, 2]));
            g.matmul(a, b)
        }
        3 => {
            let a = leaf(&mut g, "a", randn(rng, &[2, 3, 4]));
            let b = leaf(&mut g, "b", randn(rng, &[4]));
            g.add(a, b)
        }
        4 => {
            let a = leaf(&mut g, "a", randn(rng, &[3, 4]));
            let b = leaf(&mut g, "b", randn(rng, &[3, 4]));
            g.sub(a, b)
        }
        5 => {
            let a = leaf(&mut g, "a", randn(rng, &[3, 4]));
            g.scale(a, -1.7)
        }
        6 => {
            let a = leaf(&mut g, "a", randn(rng, &[2, 3, 4]));
            let b = leaf(&mut g, "b", randn(rng, &[3, 4]));
            g.mul(a, b)
        }
        7 => {
            let a = leaf(&mut g, "a", randn(rng, &[2, 3, 4]));
            g.transpose(a)
        }
        8 => {
            let a = leaf(&mut g, "a", randn(rng, &[2, 6]));
            g.reshape(a, [3, 4])
        }
        9 => {
            let a = leaf(&mut g, "a", randn(rng, &[2, 3, 2]));
            let b = leaf(&mut g, "b", randn(rng, &[2, 1, 2]));
            g.concat(&[a, b, a], 1)
        }
        10 => {
            let a = leaf(&mut g, "a", randn(rng, &[3, 5, 2]));
            g.slice(a, 1, 1, 4)
        }
        11 => {
            let a = leaf(&mut g, "a", randn(rng, &[4, 5]));
            g.relu(a)
        }
        12 => {
            let a = leaf(&mut g, "a", randn(rng, &[3, 5]));
            let gain = leaf(&mut g, "gain", randn(rng, &[5]));
            let bias = leaf(&mut g, "bias", randn(rng, &[5]));
            g.layer_norm(a, gain, bias)
        }
        13 => {
            let a = leaf(&mut g, "a", randn(rng, &[3, 4]));
            let m = g.mean_abs(a);
            return (g, m, bindings);
        }
        14 => {
            let a = leaf(&mut g, "a", randn(rng, &[5, 3]));
            g.mask_select(a, vec![4, 0, 2, 0])
        }
        15 => {
            let a = leaf(&mut g, "a", randn(rng, &[3, 4]));
            let s = g.sum(a);
            return (g, s, bindings);
        }
        16 => {
            let a = leaf(&mut g, "a", randn(rng, &[4, 6]));
            g.rot6d(a)
        }
        17 => {
            let parents: Arc<[Option<usize>]> = vec![None, Some(0), Some(1), Some(0)].into();
            let codes = leaf(&mut g, "codes", randn(rng, &[2 * 4, 6]));
            let rest = leaf(&mut g, "rest", randn(rng, &[2, 4, 3]));
            let rot = g.rot6d(codes);
            let rot = g.reshape(rot, [2, 4, 3, 3]);
            g.kinematics(rot, rest, parents)
        }
        _ => {
            let p = leaf(&mut g, "p", randn(rng, &[2, 5, 3]));
            let c = leaf(&mut g, "c", randn(rng, &[2, 3]));
            g.weak_project(p, c)
        }
    };
    let shape = evaluate(&g, &bindings).unwrap()[out.index()].shape().to_vec();
    let probe = g.constant(randn(rng, &shape));
    let prod = g.mul(out, probe);
    let loss = g.sum(prod);
    (g, loss, bindings)
}

#[test]
fn every_primitive_passes_grad_check_on_100_seeds() {
    for kind in 0..19 {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 * kind as u64 + seed);
            let (g, loss, bindings) = primitive_instance(kind, &mut rng);
            let report = grad_check_report(&g, &bindings, loss, SWEEP_STEP).unwrap();
            assert!(
                report.max_rel_error < TOL,
                "primitive {kind} seed {seed}: {report:?}"
            );
        }
    }
}
