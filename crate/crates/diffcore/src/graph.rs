use std::collections::HashMap;
use std::sync::Arc;

use crate::Tensor;

/// Index of a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive recorded on the tape.
///
/// Elementwise binary primitives (`Add`, `Sub`, `Mul`) accept a right operand
/// whose shape is a trailing suffix of the left operand's shape; it is then
/// broadcast over the leading axes.
#[derive(Clone, Debug)]
pub enum Op {
    /// Named leaf bound at evaluation time. Leaves receive gradients.
    Leaf(String),
    /// Embedded value that never receives a gradient.
    Const(Arc<Tensor>),
    /// Matrix product. Operands are rank 2 or rank 3 (batched); a rank-2
    /// operand is broadcast against a rank-3 one.
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    Mul(NodeId, NodeId),
    /// Swaps the last two axes.
    Transpose(NodeId),
    Reshape(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    /// Half-open range `start..end` along `axis`.
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    },
    Relu(NodeId),
    /// Normalization over the last axis with per-feature gain and bias.
    LayerNorm {
        input: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    /// Mean of absolute values, producing a one-element tensor.
    MeanAbs(NodeId),
    /// Gathers the listed indices along the first axis.
    MaskSelect(NodeId, Vec<usize>),
    Sum(NodeId),
    /// Continuous 6D rotation code `[.., 6]` to rotation matrices `[.., 3, 3]`.
    Rot6d(NodeId),
    /// Skinning transforms of a kinematic tree; see [`Graph::kinematics`].
    Kinematics {
        rotations: NodeId,
        rest_joints: NodeId,
        parents: Arc<[Option<usize>]>,
    },
    /// Weak-perspective projection of `[B, N, 3]` points by `[B, 3]` cameras.
    WeakProject { points: NodeId, camera: NodeId },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::ScalarMul(..) => "scalar-mul",
            Op::Mul(..) => "elementwise-mul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Relu(_) => "relu",
            Op::LayerNorm { .. } => "layer-norm",
            Op::MeanAbs(_) => "mean-abs",
            Op::MaskSelect(..) => "mask-select",
            Op::Sum(_) => "sum",
            Op::Rot6d(_) => "rot6d",
            Op::Kinematics { .. } => "kinematics",
            Op::WeakProject { .. } => "weak-project",
        }
    }

    /// Input node ids, in operand order.
    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf(_) | Op::Const(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ScalarMul(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a, _)
            | Op::Relu(a)
            | Op::MeanAbs(a)
            | Op::MaskSelect(a, _)
            | Op::Sum(a)
            | Op::Rot6d(a) => vec![*a],
            Op::Slice { input, .. } => vec![*input],
            Op::Concat(parts, _) => parts.clone(),
            Op::LayerNorm { input, gain, bias } => vec![*input, *gain, *bias],
            Op::Kinematics {
                rotations,
                rest_joints,
                ..
            } => vec![*rotations, *rest_joints],
            Op::WeakProject { points, camera } => vec![*points, *camera],
        }
    }

    /// Primitives with a derivative discontinuity at zero input.
    pub(crate) fn has_kink(&self) -> bool {
        matches!(self, Op::Relu(_) | Op::MeanAbs(_))
    }
}

/// Tape of primitives in topological order.
///
/// Every builder method appends one node whose inputs were created earlier,
/// so node order is always a valid evaluation order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Op>,
    leaves: HashMap<String, NodeId>,
}

/// Layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0]
    }

    pub fn ops(&self) -> &[Op] {
        &self.nodes
    }

    /// Names of all leaves, in creation order.
    pub fn leaf_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|op| match op {
                Op::Leaf(name) => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, op: Op) -> NodeId {
        debug_assert!(op.inputs().iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf bound by name at evaluation time. Requesting the same name twice
    /// returns the same node.
    pub fn leaf(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let id = self.push(Op::Leaf(name.to_owned()));
        self.leaves.insert(name.to_owned(), id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(Arc::new(value)))
    }

    pub fn shared_constant(&mut self, value: Arc<Tensor>) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::ScalarMul(a, factor))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> NodeId {
        self.push(Op::Reshape(a, shape.into()))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        self.push(Op::Concat(parts.to_vec(), axis))
    }

    pub fn slice(&mut self, input: NodeId, axis: usize, start: usize, end: usize) -> NodeId {
        self.push(Op::Slice {
            input,
            axis,
            start,
            end,
        })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn layer_norm(&mut self, input: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::LayerNorm { input, gain, bias })
    }

    pub fn mean_abs(&mut self, a: NodeId) -> NodeId {
        self.push(Op::MeanAbs(a))
    }

    pub fn mask_select(&mut self, a: NodeId, rows: Vec<usize>) -> NodeId {
        self.push(Op::MaskSelect(a, rows))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn rot6d(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Rot6d(a))
    }

    /// Skinning transforms for a kinematic tree.
    ///
    /// `rotations` is `[B, J, 3, 3]` (local joint rotations), `rest_joints` is
    /// `[B, J, 3]`. The output `[B, J, 3, 4]` holds for every joint the rigid
    /// transform `[R | t]` mapping a rest-pose point attached to that joint to
    /// its posed position. `parents[j]` must be `< j` for every non-root.
    pub fn kinematics(
        &mut self,
        rotations: NodeId,
        rest_joints: NodeId,
        parents: Arc<[Option<usize>]>,
    ) -> NodeId {
        self.push(Op::Kinematics {
            rotations,
            rest_joints,
            parents,
        })
    }

    pub fn weak_project(&mut self, points: NodeId, camera: NodeId) -> NodeId {
        self.push(Op::WeakProject { points, camera })
    }

    /// Convenience: `x · w + b` for `x: [.., in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = self.matmul(x, w);
        self.add(y, b)
    }
}
