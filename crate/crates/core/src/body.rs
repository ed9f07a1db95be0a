//! Simplified SMPL-style body: 6D-rotation pose, linear shape blend shapes,
//! forward kinematics, linear blend skinning and joint regression.
//!
//! Everything that maps parameters to geometry is expressed as a
//! differentiable graph (see [`BodyModel::build_graph`]) so the reprojection
//! loss can be back-propagated into the pose and shape predictions. The
//! plain-value helpers below evaluate that same graph.

use std::sync::Arc;

use diffcore::{evaluate, Graph, NodeId, Tensor, TensorMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Joints of the default body.
pub const NUM_JOINTS: usize = 24;
/// Length of a pose vector: 24 joints × 6D rotation code.
pub const POSE_DIM: usize = NUM_JOINTS * 6;
pub const SHAPE_DIM: usize = 10;
pub const DEFAULT_VERTICES: usize = 120;
/// 6D code of the identity rotation.
pub const IDENTITY_6D: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Parent table of the SMPL kinematic tree.
const SMPL_PARENTS: [usize; 23] = [0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21];

/// Approximate SMPL rest offsets from each joint to its parent, meters.
const SMPL_OFFSETS: [[f64; 3]; 23] = [
    [0.07, -0.09, 0.0],
    [-0.07, -0.09, 0.0],
    [0.0, 0.11, -0.02],
    [0.04, -0.38, 0.0],
    [-0.04, -0.38, 0.0],
    [0.0, 0.13, 0.01],
    [-0.01, -0.40, -0.04],
    [0.01, -0.40, -0.04],
    [0.0, 0.05, 0.02],
    [0.02, -0.06, 0.12],
    [-0.02, -0.06, 0.12],
    [0.0, 0.21, -0.03],
    [0.08, 0.12, -0.01],
    [-0.08, 0.12, -0.01],
    [0.0, 0.09, 0.05],
    [0.12, 0.04, -0.02],
    [-0.12, 0.04, -0.02],
    [0.26, -0.01, -0.02],
    [-0.26, -0.01, -0.02],
    [0.25, 0.01, 0.0],
    [-0.25, 0.01, 0.0],
    [0.09, -0.01, -0.01],
    [-0.09, -0.01, -0.01],
];

/// Pose and shape coefficients of one body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmplParams {
    /// Per-joint 6D rotation codes, `6 × joints` entries.
    pub theta: Vec<f64>,
    /// Shape coefficients.
    pub beta: Vec<f64>,
}

impl SmplParams {
    pub fn new(theta: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() || theta.len() % 6 != 0 {
            return Err(Error::Shape(format!("theta has {} entries, expected 6 per joint", theta.len())));
        }
        if beta.len() != SHAPE_DIM {
            return Err(Error::Shape(format!("beta has {} entries, expected {SHAPE_DIM}", beta.len())));
        }
        if theta.iter().chain(&beta).any(|v| !v.is_finite()) {
            return Err(Error::Range("non-finite body parameter".into()));
        }
        Ok(Self { theta, beta })
    }

    /// Identity rotation at every joint and mean shape.
    pub fn rest(num_joints: usize) -> Self {
        Self {
            theta: IDENTITY_6D.repeat(num_joints),
            beta: vec![0.0; SHAPE_DIM],
        }
    }

    pub fn zeros(num_joints: usize) -> Self {
        Self {
            theta: vec![0.0; 6 * num_joints],
            beta: vec![0.0; SHAPE_DIM],
        }
    }

    pub fn num_joints(&self) -> usize {
        self.theta.len() / 6
    }
}

/// Weak-perspective camera: `(s·x + tx, s·y + ty)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub s: f64,
    pub tx: f64,
    pub ty: f64,
}

impl CameraParams {
    pub const IDENTITY: CameraParams = CameraParams { s: 1.0, tx: 0.0, ty: 0.0 };

    pub fn to_array(self) -> [f64; 3] {
        [self.s, self.tx, self.ty]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { s: v[0], tx: v[1], ty: v[2] }
    }
}

pub fn project_weak_perspective(camera: CameraParams, points: &[[f64; 3]]) -> Vec<[f64; 2]> {
    points
        .iter()
        .map(|p| [camera.s * p[0] + camera.tx, camera.s * p[1] + camera.ty])
        .collect()
}

/// Row-major 3×3 rotation matrix.
pub type Mat3 = [[f64; 3]; 3];

/// Gram-Schmidt map from a 6D code (two stacked 3-vectors) to a rotation
/// whose first two columns span the same plane.
pub fn rot6d_to_rotmat(code: &[f64; 6]) -> Result<Mat3> {
    let m = diffcore::rot6d_matrix(code).ok_or(Error::DegenerateRotation(*code))?;
    Ok([[m[0], m[1], m[2]], [m[3], m[4], m[5]], [m[6], m[7], m[8]]])
}

/// 6D code (first two columns) of a rotation matrix.
pub fn rotmat_to_rot6d(r: &Mat3) -> [f64; 6] {
    [r[0][0], r[1][0], r[2][0], r[0][1], r[1][1], r[2][1]]
}

/// Rotation matrix of an axis-angle vector (Rodrigues).
pub fn axis_angle_to_rotmat(w: [f64; 3]) -> Mat3 {
    let angle = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    if angle < 1e-12 {
        return [[1.0, -w[2], w[1]], [w[2], 1.0, -w[0]], [-w[1], w[0], 1.0]];
    }
    let k = [w[0] / angle, w[1] / angle, w[2] / angle];
    let (s, c) = angle.sin_cos();
    let v = 1.0 - c;
    [
        [c + k[0] * k[0] * v, k[0] * k[1] * v - k[2] * s, k[0] * k[2] * v + k[1] * s],
        [k[1] * k[0] * v + k[2] * s, c + k[1] * k[1] * v, k[1] * k[2] * v - k[0] * s],
        [k[2] * k[0] * v - k[1] * s, k[2] * k[1] * v + k[0] * s, c + k[2] * k[2] * v],
    ]
}

/// Serialized form of [`BodyModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyModelData {
    pub template_vertices: Vec<[f64; 3]>,
    pub template_joints: Vec<[f64; 3]>,
    pub parents: Vec<Option<usize>>,
    pub skin_weights: Vec<Vec<f64>>,
    /// `V × 3 × SHAPE_DIM`.
    pub shape_dirs: Vec<[[f64; SHAPE_DIM]; 3]>,
    pub joint_regressor: Vec<Vec<f64>>,
}

/// Validated body model with graph constants prepared once.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "BodyModelData", into = "BodyModelData")]
pub struct BodyModel {
    data: BodyModelData,
    parents: Arc<[Option<usize>]>,
    template: Arc<Tensor>,
    shape_basis: Arc<Tensor>,
    skin: Arc<Tensor>,
    regressor: Arc<Tensor>,
}

impl PartialEq for BodyModel {
    fn eq(&self, other: &Self) -> bool {
        self.data == other.data
    }
}

impl From<BodyModel> for BodyModelData {
    fn from(m: BodyModel) -> Self {
        m.data
    }
}

impl TryFrom<BodyModelData> for BodyModel {
    type Error = Error;

    fn try_from(data: BodyModelData) -> Result<Self> {
        BodyModel::new(data)
    }
}

const ROW_SUM_TOL: f64 = 1e-9;

impl BodyModel {
    pub fn new(data: BodyModelData) -> Result<Self> {
        let j = data.parents.len();
        let v = data.template_vertices.len();
        let bad = |msg: String| Err(Error::InvalidModel(msg));
        if j == 0 || v == 0 {
            return bad("model needs at least one joint and one vertex".into());
        }
        if data.parents[0].is_some() {
            return bad("joint 0 must be the root".into());
        }
        for (i, p) in data.parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < i => {}
                _ => return bad(format!("joint {i} must have a parent with a smaller index")),
            }
        }
        if data.template_joints.len() != j || data.shape_dirs.len() != v {
            return bad("template_joints/shape_dirs sizes disagree with parents/vertices".into());
        }
        let check_rows = |rows: &[Vec<f64>], n_rows: usize, n_cols: usize, what: &str| -> Result<()> {
            if rows.len() != n_rows || rows.iter().any(|r| r.len() != n_cols) {
                return Err(Error::InvalidModel(format!("{what} must be {n_rows}×{n_cols}")));
            }
            for (i, r) in rows.iter().enumerate() {
                if r.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
                    return Err(Error::InvalidModel(format!("{what} row {i} has a negative entry")));
                }
                let s: f64 = r.iter().sum();
                if (s - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::InvalidModel(format!("{what} row {i} sums to {s}")));
                }
            }
            Ok(())
        };
        check_rows(&data.skin_weights, v, j, "skin_weights")?;
        check_rows(&data.joint_regressor, j, v, "joint_regressor")?;

        let template = Tensor::vector(data.template_vertices.iter().flatten().copied().collect());
        let mut basis = vec![0.0; SHAPE_DIM * 3 * v];
        for (vi, dirs) in data.shape_dirs.iter().enumerate() {
            for (axis, row) in dirs.iter().enumerate() {
                for (k, &d) in row.iter().enumerate() {
                    basis[k * 3 * v + vi * 3 + axis] = d;
                }
            }
        }
        let shape_basis = Tensor::new([SHAPE_DIM, 3 * v], basis)?;
        let skin = Tensor::new([v, j], data.skin_weights.concat())?;
        let regressor = Tensor::new([j, v], data.joint_regressor.concat())?;
        Ok(Self {
            parents: data.parents.clone().into(),
            data,
            template: Arc::new(template),
            shape_basis: Arc::new(shape_basis),
            skin: Arc::new(skin),
            regressor: Arc::new(regressor),
        })
    }

    pub fn data(&self) -> &BodyModelData {
        &self.data
    }

    pub fn num_joints(&self) -> usize {
        self.data.parents.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.data.template_vertices.len()
    }

    pub fn pose_dim(&self) -> usize {
        6 * self.num_joints()
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    /// Appends the parameters-to-geometry map for a batch.
    ///
    /// `theta` is `[batch, 6J]`, `beta` is `[batch, 10]`. Returns vertices
    /// `[batch, V, 3]` and joints `[batch, J, 3]`, where joints are regressed
    /// from the skinned vertices so both share one rigid frame.
    pub fn build_graph(&self, g: &mut Graph, theta: NodeId, beta: NodeId, batch: usize) -> BodyNodes {
        let (j, v) = (self.num_joints(), self.num_vertices());
        let shaped = self.build_shaped_rest(g, beta, batch);
        let regressor = g.shared_constant(self.regressor.clone());
        let rest_joints = g.matmul(regressor, shaped);

        let codes = g.reshape(theta, [batch * j, 6]);
        let rot = g.rot6d(codes);
        let rot = g.reshape(rot, [batch, j, 3, 3]);
        let transforms = g.kinematics(rot, rest_joints, self.parents.clone());

        // Skin with the deviation from identity so an identity pose leaves
        // every vertex bit-for-bit at its rest position.
        let identity = g.constant(Tensor::new([3, 4], vec![1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0.]).expect("3x4"));
        let deltas = g.sub(transforms, identity);
        let deltas = g.reshape(deltas, [batch, j, 12]);
        let skin = g.shared_constant(self.skin.clone());
        let blended = g.matmul(skin, deltas);
        let blended = g.reshape(blended, [batch * v, 3, 4]);
        let ones = g.constant(Tensor::full([batch, v, 1], 1.0));
        let homogeneous = g.concat(&[shaped, ones], 2);
        let homogeneous = g.reshape(homogeneous, [batch * v, 4, 1]);
        let offsets = g.matmul(blended, homogeneous);
        let offsets = g.reshape(offsets, [batch, v, 3]);
        let vertices = g.add(shaped, offsets);
        let joints = g.matmul(regressor, vertices);
        BodyNodes { vertices, joints }
    }

    /// Rest mesh with shape blend shapes applied, `[batch, V, 3]`.
    pub fn build_shaped_rest(&self, g: &mut Graph, beta: NodeId, batch: usize) -> NodeId {
        let basis = g.shared_constant(self.shape_basis.clone());
        let template = g.shared_constant(self.template.clone());
        let shaped = g.matmul(beta, basis);
        let shaped = g.add(shaped, template);
        g.reshape(shaped, [batch, self.num_vertices(), 3])
    }

    /// Geometry for each parameter set.
    pub fn forward_batch(&self, params: &[SmplParams]) -> Result<Vec<BodyPose>> {
        if params.is_empty() {
            return Ok(Vec::new());
        }
        let (j, v) = (self.num_joints(), self.num_vertices());
        for p in params {
            if p.theta.len() != 6 * j || p.beta.len() != SHAPE_DIM {
                return Err(Error::Shape(format!(
                    "params with {} pose / {} shape entries for a {j}-joint model",
                    p.theta.len(),
                    p.beta.len()
                )));
            }
        }
        let b = params.len();
        let mut g = Graph::new();
        let theta = g.constant(Tensor::new([b, 6 * j], params.iter().flat_map(|p| p.theta.iter().copied()).collect())?);
        let beta = g.constant(Tensor::new([b, SHAPE_DIM], params.iter().flat_map(|p| p.beta.iter().copied()).collect())?);
        let nodes = self.build_graph(&mut g, theta, beta, b);
        let values = evaluate(&g, &TensorMap::new()).map_err(|e| match e {
            diffcore::DiffError::DegenerateRotation { .. } => first_degenerate(params).unwrap_or(Error::Diff(e)),
            other => Error::Diff(other),
        })?;
        let verts = values[nodes.vertices.index()].data();
        let joints = values[nodes.joints.index()].data();
        Ok((0..b)
            .map(|i| BodyPose {
                vertices: to_points(&verts[i * v * 3..(i + 1) * v * 3]),
                joints: to_points(&joints[i * j * 3..(i + 1) * j * 3]),
            })
            .collect())
    }

    /// Shaped rest mesh (before skinning) for one shape vector.
    pub fn shaped_rest(&self, beta: &[f64]) -> Result<Vec<[f64; 3]>> {
        let mut g = Graph::new();
        let b = g.constant(Tensor::new([1, SHAPE_DIM], beta.to_vec())?);
        let node = self.build_shaped_rest(&mut g, b, 1);
        let values = evaluate(&g, &TensorMap::new())?;
        Ok(to_points(values[node.index()].data()))
    }
}

fn first_degenerate(params: &[SmplParams]) -> Option<Error> {
    params.iter().flat_map(|p| p.theta.chunks_exact(6)).find_map(|c| {
        let code: [f64; 6] = c.try_into().ok()?;
        rot6d_to_rotmat(&code).err()
    })
}

/// Node handles returned by [`BodyModel::build_graph`].
#[derive(Clone, Copy, Debug)]
pub struct BodyNodes {
    pub vertices: NodeId,
    pub joints: NodeId,
}

/// Posed geometry of one body.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyPose {
    /// Mesh vertices, meters.
    pub vertices: Vec<[f64; 3]>,
    pub joints: Vec<[f64; 3]>,
}

pub fn body_forward(model: &BodyModel, params: &SmplParams) -> Result<BodyPose> {
    Ok(model.forward_batch(std::slice::from_ref(params))?.remove(0))
}

fn to_points(flat: &[f64]) -> Vec<[f64; 3]> {
    flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm3(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn softmax_neg_sq(dists: impl Iterator<Item = f64>, temperature: f64) -> Vec<f64> {
    let logits: Vec<f64> = dists.map(|d| -d * d / (2.0 * temperature * temperature)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Maximum allowed distance between a regressed rest joint and the skeleton
/// joint it was built around.
pub const REGRESSOR_TOLERANCE: f64 = 0.05;

/// Procedural stand-in for the SMPL asset. Deterministic in all arguments.
pub fn build_toy_body(seed: u64, num_joints: usize, num_vertices: usize) -> Result<BodyModel> {
    if num_joints < 2 || num_vertices < num_joints {
        return Err(Error::InvalidSize(format!(
            "toy body needs J >= 2 and V >= J (got J={num_joints}, V={num_vertices})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (j, v) = (num_joints, num_vertices);

    let parents: Vec<Option<usize>> = (0..j)
        .map(|i| match i {
            0 => None,
            _ if j == NUM_JOINTS => Some(SMPL_PARENTS[i - 1]),
            1..=3 => Some(0),
            _ => Some(i - 3),
        })
        .collect();

    let mut skeleton = vec![[0.0; 3]; j];
    for i in 1..j {
        let offset = if j == NUM_JOINTS {
            let base = SMPL_OFFSETS[i - 1];
            let stretch = rng.random_range(0.9..1.1);
            [base[0] * stretch, base[1] * stretch, base[2] * stretch]
        } else {
            let dir = random_unit(&mut rng);
            let len = rng.random_range(0.1..0.3);
            [dir[0] * len, dir[1] * len, dir[2] * len]
        };
        let p = skeleton[parents[i].expect("non-root")];
        skeleton[i] = [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]];
    }

    let mut first_child = vec![None; j];
    for i in (1..j).rev() {
        first_child[parents[i].expect("non-root")] = Some(i);
    }

    // The first J vertices sit right at their joints so the regressor can be
    // concentrated on them; the rest are spread along the bones.
    let mut vertices = Vec::with_capacity(v);
    for i in 0..v {
        let b = i % j;
        let jitter = random_unit(&mut rng);
        let pos = if i < j {
            let r = rng.random_range(0.0..0.01);
            [skeleton[b][0] + jitter[0] * r, skeleton[b][1] + jitter[1] * r, skeleton[b][2] + jitter[2] * r]
        } else {
            let bone = match (first_child[b], parents[b]) {
                (Some(c), _) => sub3(skeleton[c], skeleton[b]),
                (None, Some(p)) => {
                    let d = sub3(skeleton[b], skeleton[p]);
                    [0.5 * d[0], 0.5 * d[1], 0.5 * d[2]]
                }
                (None, None) => [0.0, 0.1, 0.0],
            };
            let u = rng.random_range(0.1..0.9);
            let r = rng.random_range(0.02..0.05);
            [
                skeleton[b][0] + u * bone[0] + jitter[0] * r,
                skeleton[b][1] + u * bone[1] + jitter[1] * r,
                skeleton[b][2] + u * bone[2] + jitter[2] * r,
            ]
        };
        vertices.push(pos);
    }

    let skin_weights: Vec<Vec<f64>> = vertices
        .iter()
        .map(|&x| softmax_neg_sq(skeleton.iter().map(|&s| norm3(sub3(x, s))), 0.06))
        .collect();
    let joint_regressor: Vec<Vec<f64>> = skeleton
        .iter()
        .map(|&s| softmax_neg_sq(vertices.iter().map(|&x| norm3(sub3(x, s))), 0.01))
        .collect();

    // Smooth shape directions: a random linear field per coefficient, capped
    // at 3 cm per unit coefficient.
    let fields: Vec<[[f64; 3]; 3]> = (0..SHAPE_DIM)
        .map(|_| std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-0.04..0.04))))
        .collect();
    let shape_dirs: Vec<[[f64; SHAPE_DIM]; 3]> = vertices
        .iter()
        .map(|&x| {
            let mut dirs = [[0.0; SHAPE_DIM]; 3];
            for (k, m) in fields.iter().enumerate() {
                let mut d: [f64; 3] = std::array::from_fn(|r| m[r][0] * x[0] + m[r][1] * x[1] + m[r][2] * x[2]);
                let n = norm3(d);
                if n > 0.03 {
                    d = [d[0] * 0.03 / n, d[1] * 0.03 / n, d[2] * 0.03 / n];
                }
                for axis in 0..3 {
                    dirs[axis][k] = d[axis];
                }
            }
            dirs
        })
        .collect();

    let mut data = BodyModelData {
        template_vertices: vertices,
        template_joints: skeleton.clone(),
        parents,
        skin_weights,
        shape_dirs,
        joint_regressor,
    };
    let model = BodyModel::new(data.clone())?;

    // Publish the regressed rest joints as the template skeleton, computed
    // through the same graph path as body_forward.
    let rest = body_forward(&model, &SmplParams::rest(j))?.joints;
    for (i, (r, s)) in rest.iter().zip(&skeleton).enumerate() {
        let err = norm3(sub3(*r, *s));
        if err > REGRESSOR_TOLERANCE {
            return Err(Error::InvalidModel(format!("regressed joint {i} is {err:.3} m from its bone")));
        }
    }
    data.template_joints = rest;
    BodyModel::new(data)
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = norm3(p);
        if n > 1e-3 && n <= 1.0 {
            return [p[0] / n, p[1] / n, p[2] / n];
        }
    }
}
