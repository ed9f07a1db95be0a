//! Pose-estimation error metrics, reported in millimeters for inputs in
//! meters.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Kinematic root used for alignment.
pub const ROOT_INDEX: usize = 0;
const MM: f64 = 1000.0;

/// Points of one frame.
pub type Frame = Vec<[f64; 3]>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpvpe: f64,
    /// mm per frame².
    pub accel: f64,
}

/// Similarity transform `x ↦ s·R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.scale * (self.rotation * Vector3::from(p)) + self.translation;
        [q.x, q.y, q.z]
    }
}

fn check_frames(pred: &[Frame], gt: &[Frame]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predicted frames vs {} ground-truth frames", pred.len(), gt.len())));
    }
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.len() != g.len() || p.is_empty() {
            return Err(Error::Shape(format!("frame {i}: {} vs {} points", p.len(), g.len())));
        }
    }
    Ok(())
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean per-joint position error after subtracting the root joint.
pub fn mpjpe(pred: &[Frame], gt: &[Frame], root_index: usize) -> Result<f64> {
    check_frames(pred, gt)?;
    if pred.iter().any(|f| root_index >= f.len()) {
        return Err(Error::Shape(format!("root index {root_index} out of range")));
    }
    let roots: Vec<([f64; 3], [f64; 3])> = pred.iter().zip(gt).map(|(p, g)| (p[root_index], g[root_index])).collect();
    Ok(MM * mean_aligned_distance(pred, gt, &roots))
}

fn mean_aligned_distance(pred: &[Frame], gt: &[Frame], roots: &[([f64; 3], [f64; 3])]) -> f64 {
    mean(pred.iter().zip(gt).zip(roots).flat_map(|((p, g), &(rp, rg))| {
        p.iter().zip(g).map(move |(a, b)| {
            dist([a[0] - rp[0], a[1] - rp[1], a[2] - rp[2]], [b[0] - rg[0], b[1] - rg[1], b[2] - rg[2]])
        })
    }))
}

/// Mean per-vertex error with the supplied per-frame roots subtracted.
pub fn mpvpe(pred: &[Frame], gt: &[Frame], pred_roots: &[[f64; 3]], gt_roots: &[[f64; 3]]) -> Result<f64> {
    check_frames(pred, gt)?;
    if pred_roots.len() != pred.len() || gt_roots.len() != gt.len() {
        return Err(Error::Shape("one root per frame required".into()));
    }
    let roots: Vec<_> = pred_roots.iter().copied().zip(gt_roots.iter().copied()).collect();
    Ok(MM * mean_aligned_distance(pred, gt, &roots))
}

/// Least-squares similarity transform taking `pred` onto `gt`, with the
/// rotation constrained to det = +1.
pub fn procrustes_align(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<Similarity> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} vs {} points", pred.len(), gt.len())));
    }
    if pred.len() < 3 {
        return Err(Error::DegenerateConfiguration(format!("{} points, need at least 3", pred.len())));
    }
    let n = pred.len() as f64;
    let mu_p: Vector3<f64> = pred.iter().map(|p| Vector3::from(*p)).sum::<Vector3<f64>>() / n;
    let mu_g: Vector3<f64> = gt.iter().map(|p| Vector3::from(*p)).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    let mut var_g = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let dp = Vector3::from(*p) - mu_p;
        let dg = Vector3::from(*g) - mu_g;
        cov += dg * dp.transpose();
        var_p += dp.norm_squared();
        var_g += dg.norm_squared();
    }
    if var_p <= f64::EPSILON * n || var_g <= f64::EPSILON * n {
        return Err(Error::DegenerateConfiguration("point set has zero variance".into()));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested V"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * d[(i, i)]).sum();
    let scale = trace / var_p;
    let translation = mu_g - scale * rotation * mu_p;
    Ok(Similarity { scale, rotation, translation })
}

/// Mean per-joint error after per-frame similarity alignment.
pub fn pa_mpjpe(pred: &[Frame], gt: &[Frame]) -> Result<f64> {
    check_frames(pred, gt)?;
    let mut per_joint = Vec::new();
    for (p, g) in pred.iter().zip(gt) {
        let t = procrustes_align(p, g)?;
        per_joint.extend(p.iter().zip(g).map(|(a, b)| dist(t.apply(*a), *b)));
    }
    Ok(MM * mean(per_joint.into_iter()))
}

/// Mean norm of the difference between predicted and ground-truth second
/// temporal differences.
pub fn accel_error(pred: &[Frame], gt: &[Frame]) -> Result<f64> {
    check_frames(pred, gt)?;
    if pred.len() < 3 {
        return Err(Error::TooShort(format!("{} frames, acceleration needs at least 3", pred.len())));
    }
    let accel = |x: &[Frame], t: usize, j: usize| -> [f64; 3] {
        std::array::from_fn(|a| x[t + 1][j][a] - 2.0 * x[t][j][a] + x[t - 1][j][a])
    };
    Ok(MM * mean((1..pred.len() - 1).flat_map(|t| (0..pred[t].len()).map(move |j| dist(accel(pred, t, j), accel(gt, t, j))))))
}

/// All four metrics for a predicted sequence against ground truth. Sequences
/// shorter than three frames report zero acceleration error.
pub fn evaluate_sequence(
    pred_joints: &[Frame],
    pred_mesh: &[Frame],
    gt_joints: &[Frame],
    gt_mesh: &[Frame],
) -> Result<MetricReport> {
    let root = |frames: &[Frame]| -> Vec<[f64; 3]> { frames.iter().map(|f| f[ROOT_INDEX]).collect() };
    Ok(MetricReport {
        mpjpe: mpjpe(pred_joints, gt_joints, ROOT_INDEX)?,
        pa_mpjpe: pa_mpjpe(pred_joints, gt_joints)?,
        mpvpe: mpvpe(pred_mesh, gt_mesh, &root(pred_joints), &root(gt_joints))?,
        accel: if pred_joints.len() >= 3 { accel_error(pred_joints, gt_joints)? } else { 0.0 },
    })
}
