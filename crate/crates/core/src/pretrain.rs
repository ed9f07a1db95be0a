//! Source-domain pre-training of the regressor.

use diffcore::{value_and_grad, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::{BodyModel, SHAPE_DIM};
use crate::hmr::{HmrLossOptions, HmrNet, KeypointBatch};
use crate::optim::{adam_step, cosine_lr, AdamConfig, OptState};
use crate::synth::SyntheticVideo;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HmrPretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Weight of the shape term relative to the pose term.
    pub beta_weight: f64,
    pub seed: u64,
}

impl Default for HmrPretrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch: 32, lr_start: 1e-3, lr_end: 1e-5, beta_weight: 1.0, seed: 0 }
    }
}

/// L1 on ground-truth pose and shape plus reprojection onto exact
/// keypoints, over every frame of the source videos. Returns the mean loss
/// of each epoch.
pub fn pretrain_hmr(net: &mut HmrNet, body: &BodyModel, videos: &[SyntheticVideo], config: &HmrPretrainConfig) -> Result<Vec<f64>> {
    let frames: Vec<(usize, usize)> =
        videos.iter().enumerate().flat_map(|(v, video)| (0..video.len()).map(move |i| (v, i))).collect();
    if frames.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.batch == 0 {
        return Err(Error::Config("pre-training batch must be positive".into()));
    }
    let f = net.config().feature_dim;
    let pose_dim = net.config().pose_dim();
    let j = body.num_joints();
    let total = config.epochs * frames.len().div_ceil(config.batch);
    let mut opt = OptState::new(net.params(), AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order = frames;
    let mut curve = Vec::with_capacity(config.epochs);
    let mut step = 0;
    let options = HmrLossOptions { gamma: config.beta_weight, first_cycle: false, weighted_2d: true };
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch) {
            let b = chunk.len();
            let mut feats = Vec::with_capacity(b * f);
            let mut theta = Vec::with_capacity(b * pose_dim);
            let mut beta = Vec::with_capacity(b * SHAPE_DIM);
            let mut coords = Vec::with_capacity(b * j * 2);
            for &(v, i) in chunk {
                let video = &videos[v];
                feats.extend_from_slice(&video.features[i]);
                theta.extend_from_slice(&video.gt_params[i].theta);
                beta.extend_from_slice(&video.gt_params[i].beta);
                let cam = video.gt_camera;
                for p in &video.gt_joints[i] {
                    coords.extend([cam.s * p[0] + cam.tx, cam.s * p[1] + cam.ty]);
                }
            }
            let keypoints =
                KeypointBatch { coords: Tensor::new([b, j, 2], coords)?, confidence: Tensor::full([b, j], 1.0) };
            let mut g = Graph::new();
            let x = g.constant(Tensor::new([b, f], feats)?);
            let nodes = net.build(&mut g, x);
            let gt = (Tensor::new([b, pose_dim], theta)?, Tensor::new([b, SHAPE_DIM], beta)?);
            let loss = net.build_loss(&mut g, nodes, Some(gt), &keypoints, body, options)?;
            let (values, grads) = value_and_grad(&g, net.params(), loss.total)?;
            epoch_loss += values[loss.total.index()].item();
            batches += 1;
            let lr = cosine_lr(step, total.max(1), config.lr_start, config.lr_end)?;
            adam_step(net.params_mut(), &grads, &mut opt, lr)?;
            step += 1;
        }
        curve.push(epoch_loss / batches.max(1) as f64);
    }
    Ok(curve)
}
