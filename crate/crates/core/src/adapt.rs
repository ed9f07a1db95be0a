//! Cyclic test-time adaptation: the regressor and the denoiser take turns
//! producing pseudo-labels for each other through a frame-indexed store.
//!
//! Adaptation code only ever sees [`AdaptInputs`] (features and 2D
//! keypoints). Ground truth enters through [`Evaluator`], which is consulted
//! after each cycle and never feeds back into training.

use diffcore::{value_and_grad, Graph, Tensor, TensorMap};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::{BodyModel, SmplParams, SHAPE_DIM};
use crate::hmr::{HmrLossOptions, HmrNet, KeypointBatch, DEFAULT_GAMMA};
use crate::md::{gaussian_filter_baseline, padded_window, sample_mask, MdNet};
use crate::metrics::{evaluate_sequence, Frame, MetricReport};
use crate::optim::{adam_step, cosine_lr, AdamConfig, OptState};
use crate::synth::{Keypoints2D, SyntheticVideo};
use crate::{Error, Result};

/// What refines the store between regressor stages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Refiner {
    MdNet,
    GaussianFilter { std_frames: f64 },
    /// The store keeps the regressor outputs.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub cycles: usize,
    pub batch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub gamma: f64,
    /// Denoiser updates per cycle; `None` means `⌈N/T⌉`.
    pub windows_per_cycle: Option<usize>,
    pub seed: u64,
    /// Keep the denoiser fixed and freeze the parameter targets after the
    /// first cycle (non-cyclic adaptation).
    pub frozen_md: bool,
    pub frozen_hmr: bool,
    /// Drop the parameter loss, leaving the reprojection loss alone.
    pub no_3d_loss: bool,
    pub weighted_2d: bool,
    pub refiner: Refiner,
    /// Schedule length in frames for online adaptation, fixed in advance so
    /// no output depends on how many frames follow it.
    pub online_horizon: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            cycles: 12,
            batch: 32,
            lr_start: 5e-5,
            lr_end: 1e-6,
            gamma: DEFAULT_GAMMA,
            windows_per_cycle: None,
            seed: 0,
            frozen_md: false,
            frozen_hmr: false,
            no_3d_loss: false,
            weighted_2d: true,
            refiner: Refiner::MdNet,
            online_horizon: 500,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr_start > 0.0) || !(self.lr_end > 0.0) || self.lr_start < self.lr_end {
            return Err(Error::Config("need batch > 0 and lr_start >= lr_end > 0".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config("gamma must be nonnegative".into()));
        }
        if self.windows_per_cycle == Some(0) || self.online_horizon == 0 {
            return Err(Error::Config("windows_per_cycle and online_horizon must be positive".into()));
        }
        if let Refiner::GaussianFilter { std_frames } = self.refiner {
            if !(std_frames > 0.0) {
                return Err(Error::Config("filter std must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn windows(&self, frames: usize, window: usize) -> usize {
        self.windows_per_cycle.unwrap_or_else(|| frames.div_ceil(window))
    }
}

/// Everything adaptation may look at.
#[derive(Clone, Copy, Debug)]
pub struct AdaptInputs<'a> {
    pub features: &'a [Vec<f64>],
    pub keypoints: &'a [Keypoints2D],
}

impl<'a> AdaptInputs<'a> {
    pub fn new(features: &'a [Vec<f64>], keypoints: &'a [Keypoints2D]) -> Result<Self> {
        if features.len() != keypoints.len() {
            return Err(Error::Shape(format!("{} feature rows vs {} keypoint sets", features.len(), keypoints.len())));
        }
        Ok(Self { features, keypoints })
    }

    pub fn from_video(video: &'a SyntheticVideo) -> Self {
        Self { features: &video.features, keypoints: &video.keypoints }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    fn truncated(&self, frames: usize) -> Self {
        Self { features: &self.features[..frames], keypoints: &self.keypoints[..frames] }
    }
}

/// Ground-truth scorer for predicted parameter sequences.
#[derive(Clone, Debug)]
pub struct Evaluator<'a> {
    body: &'a BodyModel,
    gt_joints: &'a [Frame],
    gt_mesh: &'a [Frame],
}

impl<'a> Evaluator<'a> {
    pub fn new(body: &'a BodyModel, video: &'a SyntheticVideo) -> Self {
        Self { body, gt_joints: &video.gt_joints, gt_mesh: &video.gt_mesh }
    }

    pub fn evaluate(&self, params: &[SmplParams]) -> Result<MetricReport> {
        if params.len() != self.gt_joints.len() {
            return Err(Error::Shape(format!("{} predictions for {} frames", params.len(), self.gt_joints.len())));
        }
        let posed = self.body.forward_batch(params)?;
        let (joints, mesh): (Vec<Frame>, Vec<Frame>) = posed.into_iter().map(|p| (p.joints, p.vertices)).unzip();
        evaluate_sequence(&joints, &mesh, self.gt_joints, self.gt_mesh)
    }

    pub fn evaluate_poses(&self, thetas: &[Vec<f64>], betas: &[Vec<f64>]) -> Result<MetricReport> {
        let params: Vec<SmplParams> =
            thetas.iter().zip(betas).map(|(t, b)| SmplParams { theta: t.clone(), beta: b.clone() }).collect();
        self.evaluate(&params)
    }
}

/// Frame-indexed `(θ, β)` estimates shared between the two stages.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultStore {
    pub theta: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
}

impl ResultStore {
    /// `frames` all-zero entries.
    pub fn new(frames: usize, pose_dim: usize) -> Self {
        Self { theta: vec![vec![0.0; pose_dim]; frames], beta: vec![vec![0.0; SHAPE_DIM]; frames] }
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn params(&self) -> Vec<SmplParams> {
        self.theta.iter().zip(&self.beta).map(|(t, b)| SmplParams { theta: t.clone(), beta: b.clone() }).collect()
    }

    fn targets(&self, frames: &[usize]) -> Result<(Tensor, Tensor)> {
        let b = frames.len();
        let theta = frames.iter().flat_map(|&i| self.theta[i].iter().copied()).collect();
        let beta = frames.iter().flat_map(|&i| self.beta[i].iter().copied()).collect();
        Ok((Tensor::new([b, self.theta[0].len()], theta)?, Tensor::new([b, SHAPE_DIM], beta)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Hmr,
    Md,
}

/// Loss components of one regressor batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub smpl: f64,
    pub two_d: f64,
}

/// Instrumentation hooks; every method defaults to a no-op.
pub trait Observer {
    fn store_initialized(&mut self, _store: &ResultStore) {}
    fn hmr_batch(&mut self, _cycle: usize, _frames: &[usize], _loss: BatchLoss) {}
    /// `mask` covers the whole window; only the first `valid` rows are real
    /// frames.
    fn md_window(&mut self, _cycle: usize, _start: usize, _mask: &[bool], _valid: usize) {}
    fn stage_done(&mut self, _cycle: usize, _stage: Stage, _store: &ResultStore) {}
    fn cycle_done(&mut self, _cycle: usize, _nets: &Nets) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct NoObserver;

impl Observer for NoObserver {}

#[derive(Clone, Debug, PartialEq)]
pub struct Nets {
    pub hmr: HmrNet,
    pub md: MdNet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Hmrnet,
    Store,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Hmrnet => "hmrnet",
            Source::Store => "store",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub cycle: usize,
    pub source: Source,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptResult {
    pub nets: Nets,
    pub store: ResultStore,
    /// Cycle 0 holds the regressor before adaptation; cycles `1..=C` hold a
    /// regressor row and a store row each.
    pub rows: Vec<MetricRow>,
}

impl AdaptResult {
    pub fn final_report(&self, source: Source) -> Option<MetricReport> {
        self.rows.iter().rev().find(|r| r.source == source).map(|r| r.report)
    }
}

/// Optimizer state and schedule position carried across stages.
pub struct Trainer {
    pub hmr_opt: OptState,
    pub md_opt: OptState,
    step: usize,
    total_steps: usize,
    lr_start: f64,
    lr_end: f64,
}

impl Trainer {
    pub fn new(nets: &Nets, config: &AdaptConfig, total_steps: usize) -> Self {
        Self {
            hmr_opt: OptState::new(nets.hmr.params(), AdamConfig::default()),
            md_opt: OptState::new(nets.md.params(), AdamConfig::default()),
            step: 0,
            total_steps: total_steps.max(1),
            lr_start: config.lr_start,
            lr_end: config.lr_end,
        }
    }

    fn next_lr(&mut self) -> Result<f64> {
        let lr = cosine_lr(self.step.min(self.total_steps), self.total_steps, self.lr_start, self.lr_end)?;
        self.step += 1;
        Ok(lr)
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }
}

fn keypoint_batch(keypoints: &[&Keypoints2D]) -> Result<KeypointBatch> {
    let b = keypoints.len();
    let j = keypoints[0].0.len();
    let mut coords = Vec::with_capacity(b * j * 2);
    let mut conf = Vec::with_capacity(b * j);
    for kp in keypoints {
        if kp.0.len() != j {
            return Err(Error::Shape("keypoint sets differ in size".into()));
        }
        for k in &kp.0 {
            coords.extend([k[0], k[1]]);
            conf.push(k[2]);
        }
    }
    Ok(KeypointBatch { coords: Tensor::new([b, j, 2], coords)?, confidence: Tensor::new([b, j], conf)? })
}

/// Loss and gradients of the regressor on a set of frames.
pub fn hmr_gradients(
    hmr: &HmrNet,
    body: &BodyModel,
    inputs: &AdaptInputs,
    frames: &[usize],
    pseudo_gt: Option<(Tensor, Tensor)>,
    options: HmrLossOptions,
) -> Result<(BatchLoss, TensorMap)> {
    let f = hmr.config().feature_dim;
    let feats: Vec<f64> = frames.iter().flat_map(|&i| inputs.features[i].iter().copied()).collect();
    let kps: Vec<&Keypoints2D> = frames.iter().map(|&i| &inputs.keypoints[i]).collect();
    let keypoints = keypoint_batch(&kps)?;
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([frames.len(), f], feats)?);
    let nodes = hmr.build(&mut g, x);
    let loss = hmr.build_loss(&mut g, nodes, pseudo_gt, &keypoints, body, options)?;
    let (values, grads) = value_and_grad(&g, hmr.params(), loss.total)?;
    let batch_loss = BatchLoss {
        total: values[loss.total.index()].item(),
        smpl: loss.smpl.map_or(0.0, |s| values[s.index()].item()),
        two_d: values[loss.two_d.index()].item(),
    };
    Ok((batch_loss, grads))
}

fn write_hmr_outputs(hmr: &HmrNet, inputs: &AdaptInputs, frames: &[usize], store: &mut ResultStore) -> Result<()> {
    let rows: Vec<Vec<f64>> = frames.iter().map(|&i| inputs.features[i].clone()).collect();
    for (&i, out) in frames.iter().zip(hmr.forward(&rows)?) {
        store.theta[i] = out.theta;
        store.beta[i] = out.beta;
    }
    Ok(())
}

/// Regressor stage: one shuffled pass over every frame in batches.
#[allow(clippy::too_many_arguments)]
pub fn hmr_stage(
    inputs: &AdaptInputs,
    body: &BodyModel,
    store: &mut ResultStore,
    targets: Option<&ResultStore>,
    nets: &mut Nets,
    trainer: &mut Trainer,
    config: &AdaptConfig,
    cycle: usize,
    observer: &mut dyn Observer,
) -> Result<()> {
    let n = inputs.len();
    if store.len() != n {
        return Err(Error::Invariant(format!("store has {} entries for {n} frames", store.len())));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut cycle_rng(config.seed, cycle, Stage::Hmr));
    let options = HmrLossOptions { gamma: config.gamma, first_cycle: cycle == 1, weighted_2d: config.weighted_2d };
    for frames in order.chunks(config.batch) {
        let lr = trainer.next_lr()?;
        if !config.frozen_hmr {
            let source = targets.unwrap_or(store);
            let pseudo_gt = if config.no_3d_loss || options.first_cycle { None } else { Some(source.targets(frames)?) };
            let (loss, grads) = hmr_gradients(&nets.hmr, body, inputs, frames, pseudo_gt, options)?;
            observer.hmr_batch(cycle, frames, loss);
            adam_step(nets.hmr.params_mut(), &grads, &mut trainer.hmr_opt, lr)?;
        }
        write_hmr_outputs(&nets.hmr, inputs, frames, store)?;
    }
    observer.stage_done(cycle, Stage::Hmr, store);
    Ok(())
}

fn cycle_rng(seed: u64, cycle: usize, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * cycle as u64 + matches!(stage, Stage::Md) as u64);
    rng
}

/// Denoiser stage: `windows` random windows, each trained once on a masked
/// copy and then written back through [`MdNet::denoise`], last write wins.
pub fn md_stage(
    store: &mut ResultStore,
    nets: &mut Nets,
    trainer: &mut Trainer,
    config: &AdaptConfig,
    cycle: usize,
    observer: &mut dyn Observer,
) -> Result<()> {
    let n = store.len();
    if n == 0 {
        return Err(Error::EmptyStore);
    }
    let t = nets.md.config().window;
    let windows = config.windows(n, t);
    let valid = n.min(t);
    let mut rng = cycle_rng(config.seed, cycle, Stage::Md);
    let filtered = match config.refiner {
        Refiner::GaussianFilter { std_frames } => Some(gaussian_filter_baseline(&store.theta, std_frames)?),
        _ => None,
    };
    for _ in 0..windows {
        let lr = trainer.next_lr()?;
        let start = rng.random_range(0..=n - valid);
        let mut mask = sample_mask(valid, &mut rng);
        mask.resize(t, false);
        observer.md_window(cycle, start, &mask, valid);
        match config.refiner {
            Refiner::MdNet => {
                let window = padded_window(&store.theta[start..start + valid], 0, t);
                if !config.frozen_md {
                    let (_, grads) = nets.md.selfsup_step(&window, &mask)?;
                    adam_step(nets.md.params_mut(), &grads, &mut trainer.md_opt, lr)?;
                }
                let out = nets.md.denoise(&window)?;
                for (k, row) in out.into_iter().take(valid).enumerate() {
                    store.theta[start + k] = row;
                }
            }
            Refiner::GaussianFilter { .. } => {
                let filtered = filtered.as_ref().expect("filter computed above");
                store.theta[start..start + valid].clone_from_slice(&filtered[start..start + valid]);
            }
            Refiner::None => {}
        }
    }
    observer.stage_done(cycle, Stage::Md, store);
    Ok(())
}

/// Runs `C` alternations of the two stages, scoring the regressor and the
/// store after each cycle when an evaluator is given.
pub fn cycle_adapt(
    inputs: &AdaptInputs,
    body: &BodyModel,
    nets: Nets,
    config: &AdaptConfig,
    evaluator: Option<&Evaluator>,
    observer: &mut dyn Observer,
) -> Result<AdaptResult> {
    config.validate()?;
    let n = inputs.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut nets = nets;
    let per_cycle = n.div_ceil(config.batch) + config.windows(n, nets.md.config().window);
    let mut trainer = Trainer::new(&nets, config, config.cycles * per_cycle);
    let mut store = ResultStore::new(n, nets.hmr.config().pose_dim());
    observer.store_initialized(&store);
    let mut rows = Vec::new();
    if let Some(ev) = evaluator {
        rows.push(MetricRow { cycle: 0, source: Source::Hmrnet, report: evaluate_hmr(&nets.hmr, inputs, ev)? });
    }
    let mut frozen_targets: Option<ResultStore> = None;
    for cycle in 1..=config.cycles {
        hmr_stage(inputs, body, &mut store, frozen_targets.as_ref(), &mut nets, &mut trainer, config, cycle, observer)?;
        md_stage(&mut store, &mut nets, &mut trainer, config, cycle, observer)?;
        if config.frozen_md && frozen_targets.is_none() {
            frozen_targets = Some(store.clone());
        }
        if let Some(ev) = evaluator {
            rows.push(MetricRow { cycle, source: Source::Hmrnet, report: evaluate_hmr(&nets.hmr, inputs, ev)? });
            rows.push(MetricRow { cycle, source: Source::Store, report: ev.evaluate(&store.params())? });
        }
        observer.cycle_done(cycle, &nets)?;
    }
    Ok(AdaptResult { nets, store, rows })
}

/// Scores the regressor's current outputs on every frame.
pub fn evaluate_hmr(hmr: &HmrNet, inputs: &AdaptInputs, evaluator: &Evaluator) -> Result<MetricReport> {
    let outputs = hmr.forward(inputs.features)?;
    evaluator.evaluate(&outputs.iter().map(|o| o.params()).collect::<Vec<_>>())
}

/// Per-frame outputs of the online variant.
#[derive(Clone, Debug, PartialEq)]
pub struct OnlineResult {
    pub nets: Nets,
    /// The regressor's estimate for each frame at the moment it arrived.
    pub outputs: Vec<SmplParams>,
    pub report: Option<MetricReport>,
}

/// Single causal pass: each arriving frame updates the regressor once and is
/// then estimated; every `T` frames the denoiser adapts on, and rewrites, the
/// most recent window.
pub fn online_adapt(
    inputs: &AdaptInputs,
    body: &BodyModel,
    nets: Nets,
    config: &AdaptConfig,
    evaluator: Option<&Evaluator>,
) -> Result<OnlineResult> {
    config.validate()?;
    let n = inputs.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut nets = nets;
    let t = nets.md.config().window;
    let mut hmr_opt = OptState::new(nets.hmr.params(), AdamConfig::default());
    let mut md_opt = OptState::new(nets.md.params(), AdamConfig::default());
    let mut store = ResultStore::new(n, nets.hmr.config().pose_dim());
    let mut refined = vec![false; n];
    let mut outputs = Vec::with_capacity(n);
    let mut rng = cycle_rng(config.seed, 0, Stage::Md);
    for i in 0..n {
        let horizon = config.online_horizon;
        let lr = cosine_lr(i.min(horizon), horizon, config.lr_start, config.lr_end)?;
        let frame = [i];
        let options = HmrLossOptions { gamma: config.gamma, first_cycle: !refined[i], weighted_2d: config.weighted_2d };
        if !config.frozen_hmr {
            let pseudo_gt = if config.no_3d_loss || !refined[i] { None } else { Some(store.targets(&frame)?) };
            let (_, grads) = hmr_gradients(&nets.hmr, body, inputs, &frame, pseudo_gt, options)?;
            adam_step(nets.hmr.params_mut(), &grads, &mut hmr_opt, lr)?;
        }
        write_hmr_outputs(&nets.hmr, inputs, &frame, &mut store)?;
        outputs.push(SmplParams { theta: store.theta[i].clone(), beta: store.beta[i].clone() });

        if (i + 1) % t == 0 && config.refiner == Refiner::MdNet {
            let start = i + 1 - t;
            let window = store.theta[start..=i].to_vec();
            if !config.frozen_md {
                let mask = sample_mask(t, &mut rng);
                let (_, grads) = nets.md.selfsup_step(&window, &mask)?;
                adam_step(nets.md.params_mut(), &grads, &mut md_opt, lr)?;
            }
            for (k, row) in nets.md.denoise(&window)?.into_iter().enumerate() {
                store.theta[start + k] = row;
                refined[start + k] = true;
            }
        }
    }
    let report = evaluator.map(|ev| ev.evaluate(&outputs)).transpose()?;
    Ok(OnlineResult { nets, outputs, report })
}

/// Online outputs for the first `frames` frames only; used to check that
/// later frames never influence earlier estimates.
pub fn online_prefix(
    inputs: &AdaptInputs,
    body: &BodyModel,
    nets: Nets,
    config: &AdaptConfig,
    frames: usize,
) -> Result<Vec<SmplParams>> {
    Ok(online_adapt(&inputs.truncated(frames.min(inputs.len())), body, nets, config, None)?.outputs)
}
