//! Seeded synthetic videos: hinge-joint motion, linear "image" features with
//! a per-domain mixing map, and noisy 2D keypoints with dropout.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::body::{axis_angle_to_rotmat, rotmat_to_rot6d, BodyModel, CameraParams, SmplParams, SHAPE_DIM};
use crate::metrics::Frame;
use crate::{Error, Result};

pub const VIDEO_FORMAT_VERSION: u32 = 1;
/// Joint hinge axes are a property of the body, shared by every domain.
const AXIS_SEED: u64 = 0x5eed_a8e5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    /// Motion frequency range, cycles per frame.
    pub freq_range: (f64, f64),
    /// Joint swing amplitude range, radians.
    pub amp_range: (f64, f64),
    pub mixing_seed: u64,
    /// When set, the mixing map is `(1 − gap)·A(reference) + gap·A(mixing_seed)`.
    #[serde(default)]
    pub gap_reference: Option<u64>,
    #[serde(default = "one")]
    pub gap: f64,
    pub feature_noise: f64,
    /// Per-feature std of a rank-[`NUISANCE_RANK`] appearance factor drawn
    /// afresh for every frame.
    #[serde(default)]
    pub nuisance: f64,
    /// Keypoint noise std, normalized image units.
    pub keypoint_noise: f64,
    pub p_drop: f64,
    pub camera: CameraParams,
}

fn one() -> f64 {
    1.0
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b && a >= 0.0;
        if !ordered(self.freq_range) || !ordered(self.amp_range) {
            return Err(Error::Config(format!("domain {}: ranges must be ordered and nonnegative", self.name)));
        }
        if !(0.0..=1.0).contains(&self.p_drop) || !(0.0..=1.0).contains(&self.gap) {
            return Err(Error::Config(format!("domain {}: p_drop and gap must lie in [0, 1]", self.name)));
        }
        if !(self.feature_noise >= 0.0) || !(self.keypoint_noise >= 0.0) || !(self.nuisance >= 0.0) {
            return Err(Error::Config(format!("domain {}: noise levels must be nonnegative", self.name)));
        }
        Ok(())
    }
}

/// Per-joint `(x, y, confidence)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoints2D(pub Vec<[f64; 3]>);

impl Keypoints2D {
    pub fn confidences(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().map(|k| k[2])
    }
}

/// Ground-truth parameters and geometry of a generated motion.
#[derive(Clone, Debug, PartialEq)]
pub struct Motion {
    pub params: Vec<SmplParams>,
    pub joints: Vec<Frame>,
    pub mesh: Vec<Frame>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub spec: DomainSpec,
    pub features: Vec<Vec<f64>>,
    pub gt_params: Vec<SmplParams>,
    pub gt_joints: Vec<Frame>,
    pub gt_mesh: Vec<Frame>,
    pub keypoints: Vec<Keypoints2D>,
    pub gt_camera: CameraParams,
}

impl SyntheticVideo {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn gt_poses(&self) -> Vec<Vec<f64>> {
        self.gt_params.iter().map(|p| p.theta.clone()).collect()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

/// Fixed unit hinge axis of every joint.
pub fn hinge_axes(num_joints: usize) -> Vec<[f64; 3]> {
    let mut rng = stream(AXIS_SEED, 0);
    (0..num_joints)
        .map(|_| loop {
            let v = [normal(&mut rng), normal(&mut rng), normal(&mut rng)];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-3 {
                break [v[0] / n, v[1] / n, v[2] / n];
            }
        })
        .collect()
}

/// Sinusoidal swing of every joint about its hinge axis; shape drawn once per
/// video from `N(0, 0.5²)` clipped to `[−2, 2]`.
pub fn gen_motion(body: &BodyModel, spec: &DomainSpec, frames: usize, seed: u64) -> Result<Motion> {
    spec.validate()?;
    if frames == 0 {
        return Err(Error::InvalidSize("motion needs at least one frame".into()));
    }
    let j = body.num_joints();
    let mut rng = stream(seed, 1);
    let axes = hinge_axes(j);
    let sample = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
    let joints: Vec<(f64, f64, f64)> = (0..j)
        .map(|_| {
            let f = sample(&mut rng, spec.freq_range);
            let a = sample(&mut rng, spec.amp_range);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (f, a, phase)
        })
        .collect();
    let beta: Vec<f64> = (0..SHAPE_DIM).map(|_| (0.5 * normal(&mut rng)).clamp(-2.0, 2.0)).collect();
    let params: Vec<SmplParams> = (0..frames)
        .map(|t| {
            let theta = joints
                .iter()
                .zip(&axes)
                .flat_map(|(&(f, a, phase), axis)| {
                    let angle = a * (std::f64::consts::TAU * f * t as f64 + phase).sin();
                    rotmat_to_rot6d(&axis_angle_to_rotmat(axis.map(|c| c * angle)))
                })
                .collect();
            SmplParams { theta, beta: beta.clone() }
        })
        .collect();
    let geometry = body.forward_batch(&params)?;
    let (joints, mesh) = geometry.into_iter().map(|p| (p.joints, p.vertices)).unzip();
    Ok(Motion { params, joints, mesh })
}

/// The affine map from `[θ, β]` to a feature vector for one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    /// `F × (6J + 10)`, row-major.
    matrix: Vec<f64>,
    offset: Vec<f64>,
    input_dim: usize,
    noise: f64,
    /// `NUISANCE_RANK` directions of length `F`, pre-scaled.
    nuisance: Vec<Vec<f64>>,
}

pub const NUISANCE_RANK: usize = 8;

fn raw_mixing(seed: u64, feature_dim: usize, input_dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = stream(seed, 2);
    let scale = (input_dim as f64).powf(-0.5);
    let matrix = (0..feature_dim * input_dim).map(|_| scale * normal(&mut rng)).collect();
    let offset = (0..feature_dim).map(|_| 0.1 * normal(&mut rng)).collect();
    (matrix, offset)
}

impl FeatureMap {
    pub fn new(spec: &DomainSpec, feature_dim: usize, num_joints: usize) -> Self {
        let input_dim = 6 * num_joints + SHAPE_DIM;
        let (own_m, own_b) = raw_mixing(spec.mixing_seed, feature_dim, input_dim);
        let (matrix, offset) = match spec.gap_reference {
            Some(reference) => {
                let (ref_m, ref_b) = raw_mixing(reference, feature_dim, input_dim);
                let mix = |r: &[f64], o: &[f64]| r.iter().zip(o).map(|(r, o)| (1.0 - spec.gap) * r + spec.gap * o).collect();
                (mix(&ref_m, &own_m), mix(&ref_b, &own_b))
            }
            None => (own_m, own_b),
        };
        let nuisance = if spec.nuisance > 0.0 {
            let mut rng = stream(spec.mixing_seed, 5);
            (0..NUISANCE_RANK)
                .map(|_| (0..feature_dim).map(|_| spec.nuisance * normal(&mut rng) / (NUISANCE_RANK as f64).sqrt()).collect())
                .collect()
        } else {
            Vec::new()
        };
        Self { matrix, offset, input_dim, noise: spec.feature_noise, nuisance }
    }

    pub fn feature_dim(&self) -> usize {
        self.offset.len()
    }

    pub fn render<R: Rng + ?Sized>(&self, params: &SmplParams, rng: &mut R) -> Vec<f64> {
        let x: Vec<f64> = params.theta.iter().chain(&params.beta).copied().collect();
        assert_eq!(x.len(), self.input_dim, "parameter size does not match the feature map");
        let mut out: Vec<f64> = self
            .matrix
            .chunks_exact(self.input_dim)
            .zip(&self.offset)
            .map(|(row, b)| {
                let clean = row.iter().zip(&x).map(|(a, v)| a * v).sum::<f64>() + b;
                if self.noise > 0.0 {
                    clean + self.noise * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
                } else {
                    clean
                }
            })
            .collect();
        for direction in &self.nuisance {
            let z: f64 = StandardNormal.sample(rng);
            out.iter_mut().zip(direction).for_each(|(o, d)| *o += z * d);
        }
        out
    }
}

/// Feature vector of one frame; builds the domain map on every call, so
/// prefer [`FeatureMap`] in loops.
pub fn render_features<R: Rng + ?Sized>(params: &SmplParams, spec: &DomainSpec, feature_dim: usize, rng: &mut R) -> Vec<f64> {
    FeatureMap::new(spec, feature_dim, params.num_joints()).render(params, rng)
}

/// Projects with the ground-truth camera, adds Gaussian noise and drops each
/// keypoint with probability `p_drop`. Dropped keypoints are zeroed.
pub fn simulate_keypoints<R: Rng + ?Sized>(
    joints: &[[f64; 3]],
    camera: CameraParams,
    spec: &DomainSpec,
    rng: &mut R,
) -> Result<Keypoints2D> {
    let noise = Normal::new(0.0, spec.keypoint_noise).map_err(|e| Error::Config(e.to_string()))?;
    Ok(Keypoints2D(
        joints
            .iter()
            .map(|p| {
                let x = camera.s * p[0] + camera.tx + noise.sample(rng);
                let y = camera.s * p[1] + camera.ty + noise.sample(rng);
                if rng.random_bool(spec.p_drop) {
                    [0.0, 0.0, 0.0]
                } else {
                    [x, y, 1.0]
                }
            })
            .collect(),
    ))
}

/// A full video: motion, features and keypoints from one seed.
pub fn synthesize_video(body: &BodyModel, spec: &DomainSpec, frames: usize, feature_dim: usize, seed: u64) -> Result<SyntheticVideo> {
    let motion = gen_motion(body, spec, frames, seed)?;
    let map = FeatureMap::new(spec, feature_dim, body.num_joints());
    let mut feat_rng = stream(seed, 3);
    let mut kp_rng = stream(seed, 4);
    let features = motion.params.iter().map(|p| map.render(p, &mut feat_rng)).collect();
    let keypoints = motion
        .joints
        .iter()
        .map(|j| simulate_keypoints(j, spec.camera, spec, &mut kp_rng))
        .collect::<Result<_>>()?;
    Ok(SyntheticVideo {
        spec: spec.clone(),
        features,
        gt_params: motion.params,
        gt_joints: motion.joints,
        gt_mesh: motion.mesh,
        keypoints,
        gt_camera: spec.camera,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    n: usize,
    f: usize,
    j: usize,
    v: usize,
    spec: DomainSpec,
    camera: CameraParams,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameLine {
    feat: Vec<f64>,
    theta: Vec<f64>,
    beta: Vec<f64>,
    kp: Vec<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometryLine {
    joints: Vec<[f64; 3]>,
    mesh: Vec<[f64; 3]>,
}

/// Sibling file holding ground-truth geometry: `name.jsonl` → `name.gt.jsonl`.
pub fn geometry_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.gt.jsonl"))
}

fn write_lines<T: Serialize>(path: &Path, header: &Header, lines: impl Iterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    let json = |e: serde_json::Error| Error::parse(path, e.to_string());
    serde_json::to_writer(&mut w, header).map_err(json)?;
    w.write_all(b"\n").map_err(io)?;
    for line in lines {
        serde_json::to_writer(&mut w, &line).map_err(json)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_video(path: &Path, video: &SyntheticVideo) -> Result<()> {
    let header = Header {
        version: VIDEO_FORMAT_VERSION,
        n: video.len(),
        f: video.feature_dim(),
        j: video.gt_joints.first().map_or(0, Vec::len),
        v: video.gt_mesh.first().map_or(0, Vec::len),
        spec: video.spec.clone(),
        camera: video.gt_camera,
    };
    write_lines(
        path,
        &header,
        (0..video.len()).map(|i| FrameLine {
            feat: video.features[i].clone(),
            theta: video.gt_params[i].theta.clone(),
            beta: video.gt_params[i].beta.clone(),
            kp: video.keypoints[i].0.clone(),
        }),
    )?;
    write_lines(
        &geometry_path(path),
        &header,
        (0..video.len()).map(|i| GeometryLine { joints: video.gt_joints[i].clone(), mesh: video.gt_mesh[i].clone() }),
    )
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(Header, Vec<T>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines.next().ok_or_else(|| Error::parse(path, "missing header"))?.map_err(|e| Error::io(path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&header_line).map_err(|e| Error::parse(path, format!("header: {e}")))?;
    let version = raw.get("version").and_then(serde_json::Value::as_u64).ok_or_else(|| Error::parse(path, "header has no version"))?;
    if version != u64::from(VIDEO_FORMAT_VERSION) {
        return Err(Error::Version { path: path.into(), found: version as u32, expected: VIDEO_FORMAT_VERSION });
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| Error::parse(path, format!("header: {e}")))?;
    let mut rows = Vec::with_capacity(header.n);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::parse(path, format!("frame {i}: {e}")))?);
    }
    if rows.len() != header.n {
        return Err(Error::parse(path, format!("header declares {} frames, found {}", header.n, rows.len())));
    }
    Ok((header, rows))
}

pub fn read_video(path: &Path) -> Result<SyntheticVideo> {
    let (header, frames) = read_lines::<FrameLine>(path)?;
    let gt = geometry_path(path);
    let (gt_header, geometry) = read_lines::<GeometryLine>(&gt)?;
    if gt_header.n != header.n || gt_header.j != header.j || gt_header.v != header.v {
        return Err(Error::parse(&gt, "geometry file does not match its video"));
    }
    let bad_frame = frames.iter().position(|f| f.feat.len() != header.f || f.kp.len() != header.j || f.beta.len() != SHAPE_DIM || f.theta.len() != 6 * header.j);
    if let Some(i) = bad_frame {
        return Err(Error::parse(path, format!("frame {i} has inconsistent sizes")));
    }
    if let Some(i) = geometry.iter().position(|g| g.joints.len() != header.j || g.mesh.len() != header.v) {
        return Err(Error::parse(&gt, format!("frame {i} has inconsistent sizes")));
    }
    let mut video = SyntheticVideo {
        spec: header.spec,
        features: Vec::with_capacity(header.n),
        gt_params: Vec::with_capacity(header.n),
        gt_joints: Vec::with_capacity(header.n),
        gt_mesh: Vec::with_capacity(header.n),
        keypoints: Vec::with_capacity(header.n),
        gt_camera: header.camera,
    };
    for (f, g) in frames.into_iter().zip(geometry) {
        video.features.push(f.feat);
        video.gt_params.push(SmplParams { theta: f.theta, beta: f.beta });
        video.keypoints.push(Keypoints2D(f.kp));
        video.gt_joints.push(g.joints);
        video.gt_mesh.push(g.mesh);
    }
    Ok(video)
}
