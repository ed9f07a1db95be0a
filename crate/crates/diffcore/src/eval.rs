//! Forward evaluation and reverse accumulation over a [`Graph`].

use crate::graph::{Graph, NodeId, Op, LAYER_NORM_EPS};
use crate::{DiffError, Tensor, TensorMap};

/// Norm below which a 6D rotation code is treated as degenerate.
pub const ROT6D_MIN_NORM: f64 = 1e-8;

/// Evaluates every node of `graph`, returning values indexed by node id.
pub fn evaluate(graph: &Graph, bindings: &TensorMap) -> Result<Vec<Tensor>, DiffError> {
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.len());
    for (idx, op) in graph.ops().iter().enumerate() {
        let v = forward_op(idx, op, &values, bindings)?;
        values.push(v);
    }
    Ok(values)
}

/// Gradients of the scalar node `loss` with respect to every leaf.
pub fn backward(graph: &Graph, bindings: &TensorMap, loss: NodeId) -> Result<TensorMap, DiffError> {
    let values = evaluate(graph, bindings)?;
    backward_from_values(graph, &values, loss)
}

/// Evaluates the graph once and returns both node values and leaf gradients.
pub fn value_and_grad(
    graph: &Graph,
    bindings: &TensorMap,
    loss: NodeId,
) -> Result<(Vec<Tensor>, TensorMap), DiffError> {
    let values = evaluate(graph, bindings)?;
    let grads = backward_from_values(graph, &values, loss)?;
    Ok((values, grads))
}

/// Reverse pass given the values produced by [`evaluate`] on the same graph.
///
/// Leaves that do not influence `loss` get zero tensors. Gradients flowing
/// into a node from several consumers are summed.
pub fn backward_from_values(
    graph: &Graph,
    values: &[Tensor],
    loss: NodeId,
) -> Result<TensorMap, DiffError> {
    let loss_value = &values[loss.0];
    if loss_value.numel() != 1 {
        return Err(DiffError::NonScalarLoss {
            node: loss.0,
            shape: loss_value.shape().to_vec(),
        });
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
    grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

    for idx in (0..=loss.0).rev() {
        let Some(g) = grads[idx].take() else { continue };
        let op = graph.op(NodeId(idx));
        if let Op::Leaf(_) = op {
            grads[idx] = Some(g);
            continue;
        }
        backward_op(idx, op, values, g, &mut grads)?;
    }

    let mut out = TensorMap::new();
    for (idx, op) in graph.ops().iter().enumerate() {
        if let Op::Leaf(name) = op {
            let g = grads
                .get_mut(idx)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(values[idx].shape()));
            out.insert(name.clone(), g);
        }
    }
    Ok(out)
}

fn mismatch(node: usize, op: &Op, detail: String) -> DiffError {
    DiffError::ShapeMismatch {
        node,
        op: op.name(),
        detail,
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Option<MatMulDims> {
    let (ab, m, k) = match *a {
        [m, k] => (None, m, k),
        [bt, m, k] => (Some(bt), m, k),
        _ => return None,
    };
    let (bb, k2, n) = match *b {
        [k2, n] => (None, k2, n),
        [bt, k2, n] => (Some(bt), k2, n),
        _ => return None,
    };
    if k != k2 {
        return None;
    }
    let batch = match (ab, bb) {
        (Some(x), Some(y)) if x != y => return None,
        (Some(x), _) | (None, Some(x)) => x,
        (None, None) => 1,
    };
    Some(MatMulDims {
        batch,
        m,
        k,
        n,
        a_batched: ab.is_some(),
        b_batched: bb.is_some(),
    })
}

/// `c ← beta·c + a·b` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the debug assertions above describe the extents dgemm reads and
    // writes; every caller derives the strides from the same shapes it uses
    // to size the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn forward_op(idx: usize, op: &Op, values: &[Tensor], bindings: &TensorMap) -> Result<Tensor, DiffError> {
    let val = |id: &NodeId| &values[id.0];
    Ok(match op {
        Op::Leaf(name) => bindings
            .get(name)
            .cloned()
            .ok_or_else(|| DiffError::UnboundLeaf(name.clone()))?,
        Op::Const(t) => (**t).clone(),
        Op::MatMul(a, b) => {
            let (a, b) = (val(a), val(b));
            let d = matmul_dims(a.shape(), b.shape()).ok_or_else(|| {
                mismatch(idx, op, format!("{:?} x {:?}", a.shape(), b.shape()))
            })?;
            let mut out = vec![0.0; d.batch * d.m * d.n];
            for bi in 0..d.batch {
                let ao = if d.a_batched { bi * d.m * d.k } else { 0 };
                let bo = if d.b_batched { bi * d.k * d.n } else { 0 };
                gemm(
                    d.m,
                    d.k,
                    d.n,
                    &a.data()[ao..],
                    d.k,
                    1,
                    &b.data()[bo..],
                    d.n,
                    1,
                    &mut out[bi * d.m * d.n..],
                    0.0,
                );
            }
            let shape = if d.a_batched || d.b_batched {
                vec![d.batch, d.m, d.n]
            } else {
                vec![d.m, d.n]
            };
            Tensor::new(shape, out)?
        }
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            let (a, b) = (val(a), val(b));
            if !is_suffix(a.shape(), b.shape()) {
                return Err(mismatch(
                    idx,
                    op,
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let bn = b.numel();
            let bd = b.data();
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add(..) => |x, y| x + y,
                Op::Sub(..) => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let out = a
                .data()
                .chunks_exact(bn)
                .flat_map(|chunk| chunk.iter().zip(bd).map(move |(&x, &y)| f(x, y)))
                .collect();
            Tensor::new(a.shape(), out)?
        }
        Op::ScalarMul(a, c) => {
            let a = val(a);
            Tensor::new(a.shape(), a.data().iter().map(|x| x * c).collect())?
        }
        Op::Transpose(a) => {
            let a = val(a);
            let r = a.rank();
            if r < 2 {
                return Err(mismatch(idx, op, format!("rank {r} input")));
            }
            let (rows, cols) = (a.shape()[r - 2], a.shape()[r - 1]);
            let mut shape = a.shape().to_vec();
            shape.swap(r - 2, r - 1);
            Tensor::new(shape, transpose_last(a.data(), rows, cols))?
        }
        Op::Reshape(a, shape) => val(a)
            .clone()
            .reshaped(shape.clone())
            .map_err(|_| mismatch(idx, op, format!("{:?} -> {:?}", val(a).shape(), shape)))?,
        Op::Concat(parts, axis) => {
            let first = val(&parts[0]);
            let axis = *axis;
            if axis >= first.rank() {
                return Err(mismatch(idx, op, format!("axis {axis} of rank {}", first.rank())));
            }
            let mut total = 0;
            for p in parts {
                let s = val(p).shape();
                let compatible = s.len() == first.rank()
                    && s.iter()
                        .zip(first.shape())
                        .enumerate()
                        .all(|(i, (x, y))| i == axis || x == y);
                if !compatible {
                    return Err(mismatch(idx, op, format!("{:?} vs {:?}", first.shape(), s)));
                }
                total += s[axis];
            }
            let (outer, inner) = split_axis(first.shape(), axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let t = val(p);
                    let chunk = t.shape()[axis] * inner;
                    out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[axis] = total;
            Tensor::new(shape, out)?
        }
        Op::Slice {
            input,
            axis,
            start,
            end,
        } => {
            let a = val(input);
            let (axis, start, end) = (*axis, *start, *end);
            if axis >= a.rank() || start >= end || end > a.shape()[axis] {
                return Err(mismatch(
                    idx,
                    op,
                    format!("{start}..{end} on axis {axis} of {:?}", a.shape()),
                ));
            }
            let (outer, inner) = split_axis(a.shape(), axis);
            let len = a.shape()[axis];
            let mut out = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                let base = o * len * inner;
                out.extend_from_slice(&a.data()[base + start * inner..base + end * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[axis] = end - start;
            Tensor::new(shape, out)?
        }
        Op::Relu(a) => {
            let a = val(a);
            Tensor::new(a.shape(), a.data().iter().map(|&x| x.max(0.0)).collect())?
        }
        Op::LayerNorm { input, gain, bias } => {
            let (x, g, b) = (val(input), val(gain), val(bias));
            let d = *x.shape().last().unwrap_or(&1);
            if g.shape() != [d] || b.shape() != [d] {
                return Err(mismatch(
                    idx,
                    op,
                    format!("input {:?}, gain {:?}, bias {:?}", x.shape(), g.shape(), b.shape()),
                ));
            }
            let mut out = Vec::with_capacity(x.numel());
            for row in x.data().chunks_exact(d) {
                let (mean, inv_std) = row_stats(row);
                out.extend(
                    row.iter()
                        .zip(g.data().iter().zip(b.data()))
                        .map(|(&v, (&gi, &bi))| (v - mean) * inv_std * gi + bi),
                );
            }
            Tensor::new(x.shape(), out)?
        }
        Op::MeanAbs(a) => {
            let a = val(a);
            let s: f64 = a.data().iter().map(|x| x.abs()).sum();
            Tensor::scalar(s / a.numel() as f64)
        }
        Op::MaskSelect(a, rows) => {
            let a = val(a);
            let n0 = a.shape()[0];
            if rows.is_empty() || rows.iter().any(|&r| r >= n0) {
                return Err(mismatch(idx, op, format!("rows {rows:?} of {:?}", a.shape())));
            }
            let width = a.numel() / n0;
            let mut out = Vec::with_capacity(rows.len() * width);
            for &r in rows {
                out.extend_from_slice(&a.data()[r * width..(r + 1) * width]);
            }
            let mut shape = a.shape().to_vec();
            shape[0] = rows.len();
            Tensor::new(shape, out)?
        }
        Op::Sum(a) => Tensor::scalar(val(a).data().iter().sum()),
        Op::Rot6d(a) => {
            let a = val(a);
            if a.shape().last() != Some(&6) {
                return Err(mismatch(idx, op, format!("input {:?}", a.shape())));
            }
            let mut out = Vec::with_capacity(a.numel() / 6 * 9);
            for code in a.data().chunks_exact(6) {
                let frame = gram_schmidt(code).ok_or(DiffError::DegenerateRotation { node: idx })?;
                out.extend_from_slice(&frame.matrix());
            }
            let mut shape = a.shape()[..a.rank() - 1].to_vec();
            shape.extend([3, 3]);
            Tensor::new(shape, out)?
        }
        Op::Kinematics {
            rotations,
            rest_joints,
            parents,
        } => {
            let (rot, rest) = (val(rotations), val(rest_joints));
            let j = parents.len();
            let ok = rot.rank() == 4
                && rot.shape()[1..] == [j, 3, 3]
                && rest.shape() == [rot.shape()[0], j, 3]
                && parents
                    .iter()
                    .enumerate()
                    .all(|(i, p)| p.map_or(true, |p| p < i));
            if !ok {
                return Err(mismatch(
                    idx,
                    op,
                    format!("rotations {:?}, rest {:?}, {j} parents", rot.shape(), rest.shape()),
                ));
            }
            let batch = rot.shape()[0];
            let mut out = vec![0.0; batch * j * 12];
            for b in 0..batch {
                kinematics_forward(
                    &rot.data()[b * j * 9..(b + 1) * j * 9],
                    &rest.data()[b * j * 3..(b + 1) * j * 3],
                    parents,
                    &mut out[b * j * 12..(b + 1) * j * 12],
                );
            }
            Tensor::new([batch, j, 3, 4], out)?
        }
        Op::WeakProject { points, camera } => {
            let (p, c) = (val(points), val(camera));
            let ok = p.rank() == 3 && p.shape()[2] == 3 && c.shape() == [p.shape()[0], 3];
            if !ok {
                return Err(mismatch(
                    idx,
                    op,
                    format!("points {:?}, camera {:?}", p.shape(), c.shape()),
                ));
            }
            let (batch, n) = (p.shape()[0], p.shape()[1]);
            let mut out = Vec::with_capacity(batch * n * 2);
            for b in 0..batch {
                let cam = &c.data()[b * 3..b * 3 + 3];
                for pt in p.data()[b * n * 3..(b + 1) * n * 3].chunks_exact(3) {
                    out.push(cam[0] * pt[0] + cam[1]);
                    out.push(cam[0] * pt[1] + cam[2]);
                }
            }
            Tensor::new([batch, n, 2], out)?
        }
    })
}

fn backward_op(
    idx: usize,
    op: &Op,
    values: &[Tensor],
    g: Tensor,
    grads: &mut [Option<Tensor>],
) -> Result<(), DiffError> {
    let val = |id: &NodeId| &values[id.0];
    match op {
        Op::Leaf(_) | Op::Const(_) => {}
        Op::MatMul(a_id, b_id) => {
            let (a, b) = (val(a_id), val(b_id));
            let d = matmul_dims(a.shape(), b.shape())
                .ok_or_else(|| mismatch(idx, op, "matmul dims".into()))?;
            let mut ga = vec![0.0; a.numel()];
            let mut gb = vec![0.0; b.numel()];
            for bi in 0..d.batch {
                let ao = if d.a_batched { bi * d.m * d.k } else { 0 };
                let bo = if d.b_batched { bi * d.k * d.n } else { 0 };
                let gc = &g.data()[bi * d.m * d.n..(bi + 1) * d.m * d.n];
                // gA = gC · Bᵀ
                gemm(d.m, d.n, d.k, gc, d.n, 1, &b.data()[bo..], 1, d.n, &mut ga[ao..], 1.0);
                // gB = Aᵀ · gC
                gemm(d.k, d.m, d.n, &a.data()[ao..], 1, d.k, gc, d.n, 1, &mut gb[bo..], 1.0);
            }
            accumulate(grads, *a_id, Tensor::new(a.shape(), ga)?);
            accumulate(grads, *b_id, Tensor::new(b.shape(), gb)?);
        }
        Op::Add(a_id, b_id) | Op::Sub(a_id, b_id) => {
            let b = val(b_id);
            let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let mut gb = vec![0.0; b.numel()];
            for chunk in g.data().chunks_exact(b.numel()) {
                for (acc, &x) in gb.iter_mut().zip(chunk) {
                    *acc += sign * x;
                }
            }
            accumulate(grads, *b_id, Tensor::new(b.shape(), gb)?);
            accumulate(grads, *a_id, g);
        }
        Op::Mul(a_id, b_id) => {
            let (a, b) = (val(a_id), val(b_id));
            let bn = b.numel();
            let mut ga = Vec::with_capacity(a.numel());
            let mut gb = vec![0.0; bn];
            for (gc, ac) in g.data().chunks_exact(bn).zip(a.data().chunks_exact(bn)) {
                for i in 0..bn {
                    ga.push(gc[i] * b.data()[i]);
                    gb[i] += gc[i] * ac[i];
                }
            }
            accumulate(grads, *a_id, Tensor::new(a.shape(), ga)?);
            accumulate(grads, *b_id, Tensor::new(b.shape(), gb)?);
        }
        Op::ScalarMul(a_id, c) => {
            let shape = g.shape().to_vec();
            accumulate(grads, *a_id, Tensor::new(shape, g.into_data().into_iter().map(|x| x * c).collect())?);
        }
        Op::Transpose(a_id) => {
            let r = g.rank();
            let (rows, cols) = (g.shape()[r - 2], g.shape()[r - 1]);
            let data = transpose_last(g.data(), rows, cols);
            accumulate(grads, *a_id, Tensor::new(val(a_id).shape(), data)?);
        }
        Op::Reshape(a_id, _) => {
            let shape = val(a_id).shape().to_vec();
            accumulate(grads, *a_id, g.reshaped(shape)?);
        }
        Op::Concat(parts, axis) => {
            let (outer, inner) = split_axis(g.shape(), *axis);
            let total = g.shape()[*axis];
            let mut offset = 0;
            for p in parts {
                let t = val(p);
                let len = t.shape()[*axis];
                let mut gp = Vec::with_capacity(t.numel());
                for o in 0..outer {
                    let base = o * total * inner + offset * inner;
                    gp.extend_from_slice(&g.data()[base..base + len * inner]);
                }
                offset += len;
                accumulate(grads, *p, Tensor::new(t.shape(), gp)?);
            }
        }
        Op::Slice {
            input,
            axis,
            start,
            end,
        } => {
            let a = val(input);
            let (outer, inner) = split_axis(a.shape(), *axis);
            let len = a.shape()[*axis];
            let width = (end - start) * inner;
            let mut ga = vec![0.0; a.numel()];
            for o in 0..outer {
                let dst = o * len * inner + start * inner;
                ga[dst..dst + width].copy_from_slice(&g.data()[o * width..(o + 1) * width]);
            }
            accumulate(grads, *input, Tensor::new(a.shape(), ga)?);
        }
        Op::Relu(a_id) => {
            let a = val(a_id);
            let ga = g
                .data()
                .iter()
                .zip(a.data())
                .map(|(&gi, &x)| if x > 0.0 { gi } else { 0.0 })
                .collect();
            accumulate(grads, *a_id, Tensor::new(a.shape(), ga)?);
        }
        Op::LayerNorm { input, gain, bias } => {
            let (x, gain_v) = (val(input), val(gain));
            let d = gain_v.numel();
            let mut gx = Vec::with_capacity(x.numel());
            let mut gg = vec![0.0; d];
            let mut gbias = vec![0.0; d];
            for (row, grow) in x.data().chunks_exact(d).zip(g.data().chunks_exact(d)) {
                let (mean, inv_std) = row_stats(row);
                let mut mean_gh = 0.0;
                let mut mean_gh_xh = 0.0;
                for i in 0..d {
                    let xh = (row[i] - mean) * inv_std;
                    let gh = grow[i] * gain_v.data()[i];
                    gg[i] += grow[i] * xh;
                    gbias[i] += grow[i];
                    mean_gh += gh;
                    mean_gh_xh += gh * xh;
                }
                mean_gh /= d as f64;
                mean_gh_xh /= d as f64;
                for i in 0..d {
                    let xh = (row[i] - mean) * inv_std;
                    let gh = grow[i] * gain_v.data()[i];
                    gx.push(inv_std * (gh - mean_gh - xh * mean_gh_xh));
                }
            }
            accumulate(grads, *input, Tensor::new(x.shape(), gx)?);
            accumulate(grads, *gain, Tensor::new([d], gg)?);
            accumulate(grads, *bias, Tensor::new([d], gbias)?);
        }
        Op::MeanAbs(a_id) => {
            let a = val(a_id);
            let scale = g.item() / a.numel() as f64;
            let ga = a.data().iter().map(|&x| sign(x) * scale).collect();
            accumulate(grads, *a_id, Tensor::new(a.shape(), ga)?);
        }
        Op::MaskSelect(a_id, rows) => {
            let a = val(a_id);
            let width = a.numel() / a.shape()[0];
            let mut ga = vec![0.0; a.numel()];
            for (k, &r) in rows.iter().enumerate() {
                for (dst, src) in ga[r * width..(r + 1) * width]
                    .iter_mut()
                    .zip(&g.data()[k * width..(k + 1) * width])
                {
                    *dst += src;
                }
            }
            accumulate(grads, *a_id, Tensor::new(a.shape(), ga)?);
        }
        Op::Sum(a_id) => {
            let a = val(a_id);
            accumulate(grads, *a_id, Tensor::full(a.shape(), g.item()));
        }
        Op::Rot6d(a_id) => {
            let a = val(a_id);
            let mut ga = Vec::with_capacity(a.numel());
            for (code, gr) in a.data().chunks_exact(6).zip(g.data().chunks_exact(9)) {
                let frame = gram_schmidt(code).ok_or(DiffError::DegenerateRotation { node: idx })?;
                ga.extend_from_slice(&frame.backward(code, gr));
            }
            accumulate(grads, *a_id, Tensor::new(a.shape(), ga)?);
        }
        Op::Kinematics {
            rotations,
            rest_joints,
            parents,
        } => {
            let (rot, rest, out) = (val(rotations), val(rest_joints), &values[idx]);
            let j = parents.len();
            let batch = rot.shape()[0];
            let mut g_rot = vec![0.0; rot.numel()];
            let mut g_rest = vec![0.0; rest.numel()];
            for b in 0..batch {
                kinematics_backward(
                    &rot.data()[b * j * 9..(b + 1) * j * 9],
                    &rest.data()[b * j * 3..(b + 1) * j * 3],
                    &out.data()[b * j * 12..(b + 1) * j * 12],
                    &g.data()[b * j * 12..(b + 1) * j * 12],
                    parents,
                    &mut g_rot[b * j * 9..(b + 1) * j * 9],
                    &mut g_rest[b * j * 3..(b + 1) * j * 3],
                );
            }
            accumulate(grads, *rotations, Tensor::new(rot.shape(), g_rot)?);
            accumulate(grads, *rest_joints, Tensor::new(rest.shape(), g_rest)?);
        }
        Op::WeakProject { points, camera } => {
            let (p, c) = (val(points), val(camera));
            let (batch, n) = (p.shape()[0], p.shape()[1]);
            let mut gp = vec![0.0; p.numel()];
            let mut gc = vec![0.0; c.numel()];
            for b in 0..batch {
                let s = c.data()[b * 3];
                for i in 0..n {
                    let pi = (b * n + i) * 3;
                    let gi = (b * n + i) * 2;
                    let (g0, g1) = (g.data()[gi], g.data()[gi + 1]);
                    gp[pi] = s * g0;
                    gp[pi + 1] = s * g1;
                    gc[b * 3] += p.data()[pi] * g0 + p.data()[pi + 1] * g1;
                    gc[b * 3 + 1] += g0;
                    gc[b * 3 + 2] += g1;
                }
            }
            accumulate(grads, *points, Tensor::new(p.shape(), gp)?);
            accumulate(grads, *camera, Tensor::new(c.shape(), gc)?);
        }
    }
    Ok(())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn transpose_last(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let block = rows * cols;
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn axpy(alpha: f64, x: Vec3, y: Vec3) -> Vec3 {
    [alpha * x[0] + y[0], alpha * x[1] + y[1], alpha * x[2] + y[2]]
}

fn scaled(alpha: f64, x: Vec3) -> Vec3 {
    [alpha * x[0], alpha * x[1], alpha * x[2]]
}

/// Orthonormal frame built from a 6D code, with the norms needed for the
/// reverse pass.
pub(crate) struct Frame {
    b1: Vec3,
    b2: Vec3,
    b3: Vec3,
    norm1: f64,
    norm_u: f64,
}

pub(crate) fn gram_schmidt(code: &[f64]) -> Option<Frame> {
    let a1 = [code[0], code[1], code[2]];
    let a2 = [code[3], code[4], code[5]];
    let norm1 = dot(a1, a1).sqrt();
    if !(norm1 > ROT6D_MIN_NORM) || !(dot(a2, a2).sqrt() > ROT6D_MIN_NORM) {
        return None;
    }
    let b1 = scaled(1.0 / norm1, a1);
    let u = axpy(-dot(b1, a2), b1, a2);
    let norm_u = dot(u, u).sqrt();
    if !(norm_u > ROT6D_MIN_NORM) {
        return None;
    }
    let b2 = scaled(1.0 / norm_u, u);
    let b3 = cross(b1, b2);
    Some(Frame {
        b1,
        b2,
        b3,
        norm1,
        norm_u,
    })
}

impl Frame {
    /// Row-major 3×3 matrix with columns `b1, b2, b3`.
    pub(crate) fn matrix(&self) -> [f64; 9] {
        let (b1, b2, b3) = (self.b1, self.b2, self.b3);
        [
            b1[0], b2[0], b3[0], //
            b1[1], b2[1], b3[1], //
            b1[2], b2[2], b3[2],
        ]
    }

    fn backward(&self, code: &[f64], g: &[f64]) -> [f64; 6] {
        let a2 = [code[3], code[4], code[5]];
        let col = |c: usize| [g[c], g[3 + c], g[6 + c]];
        let (mut gb1, mut gb2, gb3) = (col(0), col(1), col(2));
        // b3 = b1 × b2
        gb1 = axpy(1.0, cross(self.b2, gb3), gb1);
        gb2 = axpy(1.0, cross(gb3, self.b1), gb2);
        // b2 = u / |u|
        let gu = scaled(1.0 / self.norm_u, axpy(-dot(self.b2, gb2), self.b2, gb2));
        // u = a2 − (b1·a2) b1
        let d = dot(self.b1, a2);
        let gd = -dot(self.b1, gu);
        let ga2 = axpy(gd, self.b1, gu);
        gb1 = axpy(-d, gu, gb1);
        gb1 = axpy(gd, a2, gb1);
        // b1 = a1 / |a1|
        let ga1 = scaled(1.0 / self.norm1, axpy(-dot(self.b1, gb1), self.b1, gb1));
        [ga1[0], ga1[1], ga1[2], ga2[0], ga2[1], ga2[2]]
    }
}

type Mat3 = [f64; 9];

fn mat3(src: &[f64]) -> Mat3 {
    let mut m = [0.0; 9];
    m.copy_from_slice(&src[..9]);
    m
}

fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [0.0; 9];
    for r in 0..3 {
        for k in 0..3 {
            let ark = a[r * 3 + k];
            for col in 0..3 {
                c[r * 3 + col] += ark * b[k * 3 + col];
            }
        }
    }
    c
}

fn mat3_vec(a: &Mat3, v: Vec3) -> Vec3 {
    [
        a[0] * v[0] + a[1] * v[1] + a[2] * v[2],
        a[3] * v[0] + a[4] * v[1] + a[5] * v[2],
        a[6] * v[0] + a[7] * v[1] + a[8] * v[2],
    ]
}

fn mat3t_vec(a: &Mat3, v: Vec3) -> Vec3 {
    [
        a[0] * v[0] + a[3] * v[1] + a[6] * v[2],
        a[1] * v[0] + a[4] * v[1] + a[7] * v[2],
        a[2] * v[0] + a[5] * v[1] + a[8] * v[2],
    ]
}

/// `aᵀ · b`.
fn mat3t_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [0.0; 9];
    for r in 0..3 {
        for k in 0..3 {
            let akr = a[k * 3 + r];
            for col in 0..3 {
                c[r * 3 + col] += akr * b[k * 3 + col];
            }
        }
    }
    c
}

/// `a · bᵀ`.
fn mat3_mul_t(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [0.0; 9];
    for r in 0..3 {
        for col in 0..3 {
            c[r * 3 + col] = (0..3).map(|k| a[r * 3 + k] * b[col * 3 + k]).sum();
        }
    }
    c
}

fn local_offset(rot: &Mat3, t: Vec3) -> Vec3 {
    // (I − R) t
    let rt = mat3_vec(rot, t);
    [t[0] - rt[0], t[1] - rt[1], t[2] - rt[2]]
}

fn split_transform(a: &[f64]) -> (Mat3, Vec3) {
    (
        [a[0], a[1], a[2], a[4], a[5], a[6], a[8], a[9], a[10]],
        [a[3], a[7], a[11]],
    )
}

fn write_transform(rot: &Mat3, t: Vec3, out: &mut [f64]) {
    for r in 0..3 {
        out[r * 4..r * 4 + 3].copy_from_slice(&rot[r * 3..r * 3 + 3]);
        out[r * 4 + 3] = t[r];
    }
}

// Skinning transform of joint j: A_j = A_parent ∘ [R_j | (I − R_j) t_j].
fn kinematics_forward(rot: &[f64], rest: &[f64], parents: &[Option<usize>], out: &mut [f64]) {
    for j in 0..parents.len() {
        let r = mat3(&rot[j * 9..]);
        let t = [rest[j * 3], rest[j * 3 + 1], rest[j * 3 + 2]];
        let c = local_offset(&r, t);
        let (ra, ta) = match parents[j] {
            Some(p) => {
                let (rp, tp) = split_transform(&out[p * 12..p * 12 + 12]);
                let rc = mat3_vec(&rp, c);
                (mat3_mul(&rp, &r), [rc[0] + tp[0], rc[1] + tp[1], rc[2] + tp[2]])
            }
            None => (r, c),
        };
        write_transform(&ra, ta, &mut out[j * 12..j * 12 + 12]);
    }
}

fn kinematics_backward(
    rot: &[f64],
    rest: &[f64],
    out: &[f64],
    g_out: &[f64],
    parents: &[Option<usize>],
    g_rot: &mut [f64],
    g_rest: &mut [f64],
) {
    let mut g_acc = g_out.to_vec();
    for j in (0..parents.len()).rev() {
        let r = mat3(&rot[j * 9..]);
        let t = [rest[j * 3], rest[j * 3 + 1], rest[j * 3 + 2]];
        let c = local_offset(&r, t);
        let (g_ra, g_ta) = split_transform(&g_acc[j * 12..j * 12 + 12]);
        let (mut g_r, g_c) = match parents[j] {
            Some(p) => {
                let (rp, _) = split_transform(&out[p * 12..p * 12 + 12]);
                let (mut g_rp, mut g_tp) = split_transform(&g_acc[p * 12..p * 12 + 12]);
                let via_rot = mat3_mul_t(&g_ra, &r);
                for row in 0..3 {
                    for col in 0..3 {
                        g_rp[row * 3 + col] += via_rot[row * 3 + col] + g_ta[row] * c[col];
                    }
                    g_tp[row] += g_ta[row];
                }
                write_transform(&g_rp, g_tp, &mut g_acc[p * 12..p * 12 + 12]);
                (mat3t_mul(&rp, &g_ra), mat3t_vec(&rp, g_ta))
            }
            None => (g_ra, g_ta),
        };
        // c = t − R t
        for row in 0..3 {
            for col in 0..3 {
                g_r[row * 3 + col] -= g_c[row] * t[col];
            }
        }
        let rt_gc = mat3t_vec(&r, g_c);
        g_rot[j * 9..j * 9 + 9].copy_from_slice(&g_r);
        for k in 0..3 {
            g_rest[j * 3 + k] = g_c[k] - rt_gc[k];
        }
    }
}

/// Rotation matrix (row-major, columns `b1, b2, b3`) for a 6D code, or `None`
/// when the code is degenerate.
pub fn rot6d_matrix(code: &[f64; 6]) -> Option<[f64; 9]> {
    gram_schmidt(code).map(|f| f.matrix())
}
