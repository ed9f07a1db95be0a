//! Per-frame mesh regressor: an MLP from a feature vector to pose, shape and
//! weak-perspective camera, plus the adaptation loss.

use std::path::Path;

use diffcore::{evaluate, Graph, NodeId, Tensor, TensorMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::body::{BodyModel, CameraParams, SmplParams, IDENTITY_6D, POSE_DIM, SHAPE_DIM};
use crate::paramfile;
use crate::{Error, Result};

pub const HMR_MAGIC: &[u8; 4] = b"CAHM";
/// Weight on the shape term of the parameter loss.
pub const DEFAULT_GAMMA: f64 = 0.001;
const CAMERA_DIM: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmrConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub num_hidden_layers: usize,
    /// Joints of the body the head regresses.
    #[serde(default = "default_joints")]
    pub num_joints: usize,
}

fn default_joints() -> usize {
    POSE_DIM / 6
}

impl Default for HmrConfig {
    fn default() -> Self {
        Self { feature_dim: 512, hidden_dim: 256, num_hidden_layers: 3, num_joints: default_joints() }
    }
}

impl HmrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden_dim == 0 || self.num_hidden_layers == 0 || self.num_joints == 0 {
            return Err(Error::Config("hmr dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn pose_dim(&self) -> usize {
        6 * self.num_joints
    }

    pub fn output_dim(&self) -> usize {
        self.pose_dim() + SHAPE_DIM + CAMERA_DIM
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![(self.feature_dim, self.hidden_dim)];
        dims.extend((1..self.num_hidden_layers).map(|_| (self.hidden_dim, self.hidden_dim)));
        dims.push((self.hidden_dim, self.output_dim()));
        dims
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HmrOutput {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub camera: CameraParams,
}

impl HmrOutput {
    pub fn params(&self) -> SmplParams {
        SmplParams { theta: self.theta.clone(), beta: self.beta.clone() }
    }
}

/// 2D evidence for a batch: `coords` is `[B, J, 2]`, `confidence` is `[B, J]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointBatch {
    pub coords: Tensor,
    pub confidence: Tensor,
}

/// Graph handles of a regressor forward pass.
#[derive(Clone, Copy, Debug)]
pub struct HmrNodes {
    pub theta: NodeId,
    pub beta: NodeId,
    pub camera: NodeId,
}

/// Graph handles of the loss and its two components.
#[derive(Clone, Copy, Debug)]
pub struct HmrLossNodes {
    pub total: NodeId,
    /// `None` when the parameter term is switched off.
    pub smpl: Option<NodeId>,
    pub two_d: NodeId,
}

/// Switches of [`HmrNet::build_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HmrLossOptions {
    pub gamma: f64,
    pub first_cycle: bool,
    /// Weight keypoints by confidence; otherwise every coordinate counts
    /// equally.
    pub weighted_2d: bool,
}

impl Default for HmrLossOptions {
    fn default() -> Self {
        Self { gamma: DEFAULT_GAMMA, first_cycle: false, weighted_2d: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HmrNet {
    config: HmrConfig,
    params: TensorMap,
}

fn weight_name(i: usize) -> String {
    format!("hmr.fc{i}.weight")
}

fn bias_name(i: usize) -> String {
    format!("hmr.fc{i}.bias")
}

impl HmrNet {
    /// Seeded initialization. The output bias is chosen so a zero feature
    /// maps to the rest pose, mean shape and the unit camera.
    pub fn init(config: HmrConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = config.layer_dims();
        let mut params = TensorMap::new();
        for (i, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let scale = (fan_in as f64).powf(-0.5);
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            params.insert(weight_name(i), Tensor::new([fan_in, fan_out], w)?);
            let bias = if i + 1 == dims.len() {
                let mut b = IDENTITY_6D.repeat(config.num_joints);
                b.extend([0.0; SHAPE_DIM]);
                b.extend(CameraParams::IDENTITY.to_array());
                b
            } else {
                vec![0.0; fan_out]
            };
            params.insert(bias_name(i), Tensor::vector(bias));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &HmrConfig {
        &self.config
    }

    pub fn params(&self) -> &TensorMap {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut TensorMap {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Appends the forward pass for `features: [B, F]`; parameters enter as
    /// leaves named after [`HmrNet::params`].
    pub fn build(&self, g: &mut Graph, features: NodeId) -> HmrNodes {
        let layers = self.config.num_hidden_layers + 1;
        let mut x = features;
        for i in 0..layers {
            let w = g.leaf(&weight_name(i));
            let b = g.leaf(&bias_name(i));
            x = g.linear(x, w, b);
            if i + 1 < layers {
                x = g.relu(x);
            }
        }
        let p = self.config.pose_dim();
        HmrNodes {
            theta: g.slice(x, 1, 0, p),
            beta: g.slice(x, 1, p, p + SHAPE_DIM),
            camera: g.slice(x, 1, p + SHAPE_DIM, p + SHAPE_DIM + CAMERA_DIM),
        }
    }

    /// Appends `L_SMPL + L_2D` for a batch.
    ///
    /// `pseudo_gt` holds `[B, 6J]` pose and `[B, 10]` shape targets; the
    /// parameter term is dropped when it is `None` or in the first cycle.
    pub fn build_loss(
        &self,
        g: &mut Graph,
        nodes: HmrNodes,
        pseudo_gt: Option<(Tensor, Tensor)>,
        keypoints: &KeypointBatch,
        body: &BodyModel,
        options: HmrLossOptions,
    ) -> Result<HmrLossNodes> {
        let batch = keypoints.coords.shape()[0];
        let smpl = match pseudo_gt {
            Some((theta_t, beta_t)) if !options.first_cycle => {
                let tt = g.constant(theta_t);
                let bt = g.constant(beta_t);
                let dt = g.sub(nodes.theta, tt);
                let db = g.sub(nodes.beta, bt);
                let lt = g.mean_abs(dt);
                let lb = g.mean_abs(db);
                let lb = g.scale(lb, options.gamma);
                Some(g.add(lt, lb))
            }
            _ => None,
        };

        let geometry = body.build_graph(g, nodes.theta, nodes.beta, batch);
        let projected = g.weak_project(geometry.joints, nodes.camera);
        let target = g.constant(keypoints.coords.clone());
        let residual = g.sub(projected, target);
        let weights = residual_weights(keypoints, options.weighted_2d);
        let n = weights.numel() as f64;
        let w = g.constant(weights);
        let weighted = g.mul(residual, w);
        let two_d = g.mean_abs(weighted);
        // mean|w·r| · n = Σ w·|r| for nonnegative w.
        let two_d = g.scale(two_d, n);
        let total = match smpl {
            Some(s) => g.add(s, two_d),
            None => two_d,
        };
        Ok(HmrLossNodes { total, smpl, two_d })
    }

    /// Evaluates the regressor on rows of `features`.
    pub fn forward(&self, features: &[Vec<f64>]) -> Result<Vec<HmrOutput>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let f = self.config.feature_dim;
        if let Some(row) = features.iter().find(|r| r.len() != f) {
            return Err(Error::Shape(format!("feature width {} does not match {f}", row.len())));
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([features.len(), f], features.concat())?);
        let nodes = self.build(&mut g, x);
        let values = evaluate(&g, &self.params)?;
        Ok(split_outputs(&values, nodes, self.config.pose_dim()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        paramfile::write(path, HMR_MAGIC, &self.params.tensors().iter().collect::<Vec<_>>())
    }

    /// Loads a file written by [`HmrNet::save`], recovering the layer sizes
    /// from the stored shapes.
    pub fn load(path: &Path) -> Result<Self> {
        let tensors = paramfile::read(path, HMR_MAGIC)?;
        Self::from_tensors(tensors).map_err(|m| Error::parse(path, m))
    }

    fn from_tensors(tensors: Vec<Tensor>) -> std::result::Result<Self, String> {
        if tensors.len() < 4 || tensors.len() % 2 != 0 {
            return Err(format!("{} tensors do not form an MLP", tensors.len()));
        }
        let first = tensors[0].shape();
        let last = tensors[tensors.len() - 2].shape();
        if first.len() != 2 || last.len() != 2 {
            return Err("weights must be matrices".into());
        }
        let out = last[1];
        if out < SHAPE_DIM + CAMERA_DIM + 6 || (out - SHAPE_DIM - CAMERA_DIM) % 6 != 0 {
            return Err(format!("output width {out} is not 6J + 13"));
        }
        let config = HmrConfig {
            feature_dim: first[0],
            hidden_dim: first[1],
            num_hidden_layers: tensors.len() / 2 - 1,
            num_joints: (out - SHAPE_DIM - CAMERA_DIM) / 6,
        };
        let net = Self::init(config, 0).map_err(|e| e.to_string())?;
        if net.params.tensors().iter().zip(&tensors).any(|(a, b)| a.shape() != b.shape()) {
            return Err("layer shapes are inconsistent".into());
        }
        let params = net.params.names().map(str::to_owned).zip(tensors).collect();
        Ok(Self { config, params })
    }
}

fn residual_weights(keypoints: &KeypointBatch, weighted: bool) -> Tensor {
    let conf = keypoints.confidence.data();
    let mut w = Vec::with_capacity(conf.len() * 2);
    if weighted {
        let total: f64 = conf.iter().sum();
        for &c in conf {
            // Each keypoint contributes the mean over its two coordinates.
            let v = if total > 0.0 { c / (2.0 * total) } else { 0.0 };
            w.extend([v, v]);
        }
    } else {
        let v = 1.0 / (2.0 * conf.len() as f64);
        w.resize(conf.len() * 2, v);
    }
    Tensor::new(keypoints.coords.shape().to_vec(), w).expect("keypoint shape")
}

pub(crate) fn split_outputs(values: &[Tensor], nodes: HmrNodes, pose_dim: usize) -> Vec<HmrOutput> {
    let (t, b, c) = (values[nodes.theta.index()].data(), values[nodes.beta.index()].data(), values[nodes.camera.index()].data());
    (0..c.len() / CAMERA_DIM)
        .map(|i| HmrOutput {
            theta: t[i * pose_dim..(i + 1) * pose_dim].to_vec(),
            beta: b[i * SHAPE_DIM..(i + 1) * SHAPE_DIM].to_vec(),
            camera: CameraParams::from_slice(&c[i * CAMERA_DIM..(i + 1) * CAMERA_DIM]),
        })
        .collect()
}

/// Value of the loss components for one batch; convenience for tests and
/// logging.
pub fn hmr_loss_value(
    net: &HmrNet,
    features: &[Vec<f64>],
    pseudo_gt: Option<(Tensor, Tensor)>,
    keypoints: &KeypointBatch,
    body: &BodyModel,
    options: HmrLossOptions,
) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([features.len(), net.config.feature_dim], features.concat())?);
    let nodes = net.build(&mut g, x);
    let loss = net.build_loss(&mut g, nodes, pseudo_gt, keypoints, body, options)?;
    let values = evaluate(&g, net.params())?;
    let smpl = loss.smpl.map_or(0.0, |s| values[s.index()].item());
    Ok((values[loss.total.index()].item(), smpl, values[loss.two_d.index()].item()))
}
