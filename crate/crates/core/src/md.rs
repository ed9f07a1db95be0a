//! Masked motion denoiser: pose-space FC, then mixer blocks acting along
//! time on the transposed window, then a pose-space FC back.
//!
//! Each window enters as offsets from the mean of its visible rows, so a
//! zeroed (masked) row reads as that mean pose.
//!
//! Each block computes `z + LN(z·W + b)` with the layer norm taken over the
//! time axis. Without the skip path the normalization would erase every
//! channel's mean and scale, so the output could not carry the static pose.

use std::path::Path;

use diffcore::{evaluate, value_and_grad, Graph, NodeId, Tensor, TensorMap};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::body::POSE_DIM;
use crate::optim::{adam_step, cosine_lr, AdamConfig, OptState};
use crate::paramfile;
use crate::{Error, Result};

pub const MD_MAGIC: &[u8; 4] = b"CAMD";
/// Pre-training input noise std.
pub const DEFAULT_SIGMA: f64 = 0.01;

/// `T` consecutive pose vectors, one row per frame.
pub type PoseSequence = Vec<Vec<f64>>;

/// How [`MdNet::denoise`] turns a window into pseudo-labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inference {
    /// One pass with nothing masked.
    Unmasked,
    /// Two passes hiding the even and then the odd rows; every row is read
    /// from the pass that hid it, so it is re-estimated from its neighbours
    /// exactly as in the masked objective.
    #[default]
    Complementary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdConfig {
    /// Window length `T`.
    pub window: usize,
    /// Pose dimension `H`.
    pub pose_dim: usize,
    /// Mixer blocks `M`.
    pub blocks: usize,
    /// Insert a ramp after each block's layer norm.
    #[serde(default)]
    pub ramp: bool,
    #[serde(default)]
    pub inference: Inference,
}

impl Default for MdConfig {
    fn default() -> Self {
        Self { window: 49, pose_dim: POSE_DIM, blocks: 4, ramp: false, inference: Inference::default() }
    }
}

impl MdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.pose_dim == 0 || self.blocks == 0 {
            return Err(Error::Config("md window, pose_dim and blocks must be positive".into()));
        }
        Ok(())
    }
}

/// Mean of the rows not hidden by `mask`; all-zero if every row is hidden.
fn visible_mean(rows: &[Vec<f64>], mask: Option<&[bool]>) -> Vec<f64> {
    let h = rows.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; h];
    let mut count = 0usize;
    for (i, row) in rows.iter().enumerate() {
        if !mask.is_some_and(|m| m[i]) {
            mean.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            count += 1;
        }
    }
    if count > 0 {
        mean.iter_mut().for_each(|a| *a /= count as f64);
    }
    mean
}

/// `Σ m_t = ⌈T/2⌉`; `true` marks a masked frame.
pub type MaskVector = Vec<bool>;

/// Masks `⌈T/2⌉` frames chosen uniformly without replacement.
pub fn sample_mask<R: Rng + ?Sized>(window: usize, rng: &mut R) -> MaskVector {
    let mut mask = vec![false; window];
    for i in index::sample(rng, window, window.div_ceil(2)) {
        mask[i] = true;
    }
    mask
}

/// Scale of the seeded perturbation on the identity-initialized pose FCs.
const POSE_FC_JITTER: f64 = 1e-3;
/// Initial layer-norm gain in every block.
const BLOCK_GAIN_INIT: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct MdNet {
    config: MdConfig,
    params: TensorMap,
}

impl MdNet {
    /// Seeded initialization close to the identity map: both pose FCs start
    /// at `I` plus small noise and every block's gain is small.
    pub fn init(config: MdConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, h) = (config.window, config.pose_dim);
        let mut normal = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect()
        };
        let near_identity = |mut w: Vec<f64>| {
            for i in 0..h {
                w[i * h + i] += 1.0;
            }
            w
        };
        let mut params = TensorMap::new();
        params.insert("md.in.weight", Tensor::new([h, h], near_identity(normal(h * h, POSE_FC_JITTER)))?);
        params.insert("md.in.bias", Tensor::zeros([h]));
        for m in 0..config.blocks {
            let scale = (t as f64).powf(-0.5);
            params.insert(format!("md.block{m}.weight"), Tensor::new([t, t], normal(t * t, scale))?);
            params.insert(format!("md.block{m}.bias"), Tensor::zeros([t]));
            params.insert(format!("md.block{m}.ln_gain"), Tensor::full([t], BLOCK_GAIN_INIT));
            params.insert(format!("md.block{m}.ln_bias"), Tensor::zeros([t]));
        }
        params.insert("md.out.weight", Tensor::new([h, h], near_identity(normal(h * h, POSE_FC_JITTER)))?);
        params.insert("md.out.bias", Tensor::zeros([h]));
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &MdConfig {
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

    /// Appends the network for `input: [B, T, H]`, returning `[B, T, H]`.
    pub fn build(&self, g: &mut Graph, input: NodeId) -> NodeId {
        let w = g.leaf("md.in.weight");
        let b = g.leaf("md.in.bias");
        let x = g.linear(input, w, b);
        let mut z = g.transpose(x);
        for m in 0..self.config.blocks {
            let w = g.leaf(&format!("md.block{m}.weight"));
            let b = g.leaf(&format!("md.block{m}.bias"));
            let gain = g.leaf(&format!("md.block{m}.ln_gain"));
            let shift = g.leaf(&format!("md.block{m}.ln_bias"));
            let mixed = g.linear(z, w, b);
            let mut normed = g.layer_norm(mixed, gain, shift);
            if self.config.ramp {
                normed = g.relu(normed);
            }
            z = g.add(z, normed);
        }
        let x = g.transpose(z);
        let w = g.leaf("md.out.weight");
        let b = g.leaf("md.out.bias");
        g.linear(x, w, b)
    }

    /// Centered window tensor and the center that was removed. Targets are
    /// centered with `center` when given, else with their own visible mean.
    fn window_tensor(&self, theta: &[Vec<f64>], mask: Option<&[bool]>, center: Option<&[f64]>) -> Result<(Tensor, Vec<f64>)> {
        let (t, h) = (self.config.window, self.config.pose_dim);
        if theta.len() != t || theta.iter().any(|r| r.len() != h) {
            return Err(Error::Shape(format!("window must be {t}×{h}")));
        }
        if mask.is_some_and(|m| m.len() != t) {
            return Err(Error::Shape(format!("mask must have {t} entries")));
        }
        let center = center.map_or_else(|| visible_mean(theta, mask), <[f64]>::to_vec);
        let mut data = Vec::with_capacity(t * h);
        for (i, row) in theta.iter().enumerate() {
            if mask.is_some_and(|m| m[i]) {
                data.extend(std::iter::repeat_n(0.0, h));
            } else {
                data.extend(row.iter().zip(&center).map(|(v, c)| v - c));
            }
        }
        Ok((Tensor::new([1, t, h], data)?, center))
    }

    /// Denoises one window; masked rows are zeroed before the network.
    pub fn forward(&self, theta: &[Vec<f64>], mask: Option<&[bool]>) -> Result<PoseSequence> {
        let (input, center) = self.window_tensor(theta, mask, None)?;
        let mut g = Graph::new();
        let x = g.constant(input);
        let out = self.build(&mut g, x);
        let values = evaluate(&g, &self.params)?;
        Ok(values[out.index()]
            .data()
            .chunks_exact(self.config.pose_dim)
            .map(|row| row.iter().zip(&center).map(|(v, c)| v + c).collect())
            .collect())
    }

    /// Pseudo-label inference on one window according to the configured
    /// [`Inference`] mode.
    pub fn denoise(&self, theta: &[Vec<f64>]) -> Result<PoseSequence> {
        match self.config.inference {
            Inference::Unmasked => self.forward(theta, None),
            Inference::Complementary => {
                let even: MaskVector = (0..self.config.window).map(|i| i % 2 == 0).collect();
                let odd: MaskVector = even.iter().map(|m| !m).collect();
                let a = self.forward(theta, Some(&even))?;
                let b = self.forward(theta, Some(&odd))?;
                Ok(a.into_iter().zip(b).zip(even).map(|((a, b), e)| if e { a } else { b }).collect())
            }
        }
    }

    /// Builds the masked self-supervised objective on one window and returns
    /// `(loss, gradients)`. Only masked rows are scored.
    pub fn selfsup_step(&self, theta: &[Vec<f64>], mask: &[bool]) -> Result<(f64, TensorMap)> {
        let (input, center) = self.window_tensor(theta, Some(mask), None)?;
        let (target, _) = self.window_tensor(theta, None, Some(&center))?;
        let mut g = Graph::new();
        let x = g.constant(input);
        let out = self.build(&mut g, x);
        let loss = md_selfsup_loss_graph(&mut g, out, target, mask, self.config.pose_dim);
        let (values, grads) = value_and_grad(&g, &self.params, loss)?;
        Ok((values[loss.index()].item(), grads))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        paramfile::write(path, MD_MAGIC, &self.params.tensors().iter().collect::<Vec<_>>())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensors = paramfile::read(path, MD_MAGIC)?;
        let bad = |m: &str| Error::parse(path, m);
        if tensors.len() < 8 || (tensors.len() - 4) % 4 != 0 {
            return Err(bad("tensor count does not match the denoiser layout"));
        }
        let h = tensors[0].shape().first().copied().ok_or_else(|| bad("empty shape"))?;
        let t = tensors[2].shape().first().copied().ok_or_else(|| bad("empty shape"))?;
        let config = MdConfig { window: t, pose_dim: h, blocks: (tensors.len() - 4) / 4, ..MdConfig::default() };
        let template = Self::init(config, 0)?;
        if template.params.tensors().iter().zip(&tensors).any(|(a, b)| a.shape() != b.shape()) {
            return Err(bad("layer shapes are inconsistent"));
        }
        let params = template.params.names().map(str::to_owned).zip(tensors).collect();
        Ok(Self { config, params })
    }

    /// Loads a checkpoint for `config`, which supplies the options the file
    /// does not record (ramp, inference).
    pub fn load_as(path: &Path, config: MdConfig) -> Result<Self> {
        let mut net = Self::load(path)?;
        let c = net.config;
        if (c.window, c.pose_dim, c.blocks) != (config.window, config.pose_dim, config.blocks) {
            return Err(Error::parse(
                path,
                format!(
                    "checkpoint has T={} H={} M={}, config expects T={} H={} M={}",
                    c.window, c.pose_dim, c.blocks, config.window, config.pose_dim, config.blocks
                ),
            ));
        }
        net.config = config;
        Ok(net)
    }
}

/// `(1/T)·Σ_t m_t·mean_h|out − target|`, appended to `g`. `out` is
/// `[1, T, H]`; `target` holds the unmasked input.
pub fn md_selfsup_loss_graph(g: &mut Graph, out: NodeId, target: Tensor, mask: &[bool], pose_dim: usize) -> NodeId {
    let weights: Vec<f64> = mask.iter().flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, pose_dim)).collect();
    let w = g.constant(Tensor::new([mask.len(), pose_dim], weights).expect("mask shape"));
    let t = g.constant(target);
    let diff = g.sub(out, t);
    let masked = g.mul(diff, w);
    g.mean_abs(masked)
}

/// Plain-value form of the self-supervised loss.
pub fn md_selfsup_loss(out: &[Vec<f64>], input: &[Vec<f64>], mask: &[bool]) -> Result<f64> {
    if out.len() != input.len() || mask.len() != out.len() || out.iter().zip(input).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Shape("denoiser output, input and mask must agree".into()));
    }
    if out.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = out
        .iter()
        .zip(input)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((o, i), _)| o.iter().zip(i).map(|(a, b)| (a - b).abs()).sum::<f64>() / o.len() as f64)
        .sum();
    Ok(total / out.len() as f64)
}

/// Settings of [`md_pretrain`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdPretrainConfig {
    pub sigma: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
}

impl Default for MdPretrainConfig {
    fn default() -> Self {
        Self { sigma: DEFAULT_SIGMA, steps: 300, batch: 4, lr_start: 1e-3, lr_end: 1e-5, seed: 0 }
    }
}

/// Extracts `window` rows starting at `start`, replicating the last frame
/// when the sequence is too short.
pub fn padded_window(seq: &[Vec<f64>], start: usize, window: usize) -> PoseSequence {
    (0..window).map(|i| seq[(start + i).min(seq.len() - 1)].clone()).collect()
}

/// Denoising pre-training on clean motions: Gaussian noise on the input,
/// a random mask when inference is complementary, and full-window L1
/// against the clean window. Returns the per-step losses.
pub fn md_pretrain(net: &mut MdNet, motions: &[PoseSequence], config: &MdPretrainConfig) -> Result<Vec<f64>> {
    if motions.is_empty() || motions.iter().any(|m| m.is_empty()) {
        return Err(Error::EmptyDataset);
    }
    if !(config.sigma >= 0.0) || config.batch == 0 {
        return Err(Error::Config("md pre-training needs sigma >= 0 and batch > 0".into()));
    }
    let (t, h) = (net.config.window, net.config.pose_dim);
    if motions.iter().flatten().any(|r| r.len() != h) {
        return Err(Error::Shape(format!("motion rows must have {h} entries")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut opt = OptState::new(&net.params, AdamConfig::default());
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut clean = Vec::with_capacity(config.batch * t * h);
        let mut noisy = Vec::with_capacity(config.batch * t * h);
        for _ in 0..config.batch {
            let m = &motions[rng.random_range(0..motions.len())];
            let start = rng.random_range(0..=m.len().saturating_sub(t));
            let mask = match net.config.inference {
                Inference::Complementary => sample_mask(t, &mut rng),
                Inference::Unmasked => vec![false; t],
            };
            let window = padded_window(m, start, t);
            let corrupted: PoseSequence =
                window.iter().map(|row| row.iter().map(|v| v + noise.sample(&mut rng)).collect()).collect();
            let center = visible_mean(&corrupted, Some(&mask));
            for ((row, bad), hidden) in window.iter().zip(&corrupted).zip(&mask) {
                clean.extend(row.iter().zip(&center).map(|(v, c)| v - c));
                if *hidden {
                    noisy.extend(std::iter::repeat_n(0.0, h));
                } else {
                    noisy.extend(bad.iter().zip(&center).map(|(v, c)| v - c));
                }
            }
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([config.batch, t, h], noisy)?);
        let out = net.build(&mut g, x);
        let target = g.constant(Tensor::new([config.batch, t, h], clean)?);
        let diff = g.sub(out, target);
        let loss = g.mean_abs(diff);
        let (values, grads) = value_and_grad(&g, &net.params, loss)?;
        curve.push(values[loss.index()].item());
        let lr = cosine_lr(step, config.steps.max(1), config.lr_start, config.lr_end)?;
        adam_step(&mut net.params, &grads, &mut opt, lr)?;
    }
    Ok(curve)
}

/// Mean absolute error of the denoiser output against `clean` windows when
/// fed `inputs`.
pub fn denoise_error(net: &MdNet, inputs: &[PoseSequence], clean: &[PoseSequence]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (x, c) in inputs.iter().zip(clean) {
        let out = net.denoise(x)?;
        for (o, r) in out.iter().zip(c) {
            total += o.iter().zip(r).map(|(a, b)| (a - b).abs()).sum::<f64>();
            n += o.len();
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Denoises a whole sequence with tiled windows, the last one aligned to
/// the end; shorter sequences are edge-padded to one window.
pub fn denoise_sequence(net: &MdNet, theta: &[Vec<f64>]) -> Result<PoseSequence> {
    let t = net.config.window;
    let n = theta.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut out = theta.to_vec();
    let mut starts: Vec<usize> = (0..n.saturating_sub(t) + 1).step_by(t).collect();
    if n > t && *starts.last().expect("nonempty") != n - t {
        starts.push(n - t);
    }
    for start in starts {
        let valid = t.min(n - start);
        let window = padded_window(&theta[start..start + valid], 0, t);
        for (k, row) in net.denoise(&window)?.into_iter().take(valid).enumerate() {
            out[start + k] = row;
        }
    }
    Ok(out)
}

/// Discrete Gaussian kernel of radius `⌈3·std⌉`, normalized.
pub fn gaussian_kernel(std_frames: f64) -> Result<Vec<f64>> {
    if !(std_frames > 0.0) || !std_frames.is_finite() {
        return Err(Error::Range(format!("filter std must be positive, got {std_frames}")));
    }
    let radius = (3.0 * std_frames).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius).map(|k| (-((k * k) as f64) / (2.0 * std_frames * std_frames)).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Per-dimension temporal Gaussian smoothing with edge replication.
pub fn gaussian_filter_baseline(theta: &[Vec<f64>], std_frames: f64) -> Result<PoseSequence> {
    let kernel = gaussian_kernel(std_frames)?;
    let radius = (kernel.len() / 2) as isize;
    let n = theta.len() as isize;
    Ok((0..n)
        .map(|t| {
            let mut row = vec![0.0; theta[t as usize].len()];
            for (k, w) in kernel.iter().enumerate() {
                let src = (t + k as isize - radius).clamp(0, n - 1) as usize;
                for (r, v) in row.iter_mut().zip(&theta[src]) {
                    *r += w * v;
                }
            }
            row
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_cardinality_small_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_mask(1, &mut rng), vec![true]);
        assert_eq!(sample_mask(49, &mut rng).iter().filter(|&&m| m).count(), 25);
    }

    #[test]
    fn loss_hand_arithmetic() {
        let out = vec![vec![0.4, 0.4], vec![5.0, 5.0]];
        let input = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        assert!((md_selfsup_loss(&out, &input, &[true, false]).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(md_selfsup_loss(&out, &input, &[false, false]).unwrap(), 0.0);
    }

    #[test]
    fn filter_rejects_nonpositive_std() {
        assert!(gaussian_filter_baseline(&[vec![1.0]], 0.0).is_err());
    }
}
