//! The standard synthetic benchmark and the ablation suites run on it.

use serde::{Deserialize, Serialize};

use crate::adapt::{cycle_adapt, online_adapt, AdaptConfig, AdaptInputs, Evaluator, Nets, NoObserver, Refiner, Source};
use crate::body::{build_toy_body, BodyModel, CameraParams, DEFAULT_VERTICES, NUM_JOINTS};
use crate::hmr::{HmrConfig, HmrNet};
use crate::md::{denoise_sequence, md_pretrain, MdConfig, MdNet, MdPretrainConfig};
use crate::metrics::MetricReport;
use crate::pretrain::{pretrain_hmr, HmrPretrainConfig};
use crate::synth::{synthesize_video, DomainSpec, SyntheticVideo};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub body_seed: u64,
    pub joints: usize,
    pub vertices: usize,
    /// Target video length `N`.
    pub frames: usize,
    pub source_videos: usize,
    pub source_frames: usize,
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub hmr: HmrConfig,
    pub md: MdConfig,
    pub hmr_pretrain: HmrPretrainConfig,
    pub md_pretrain: MdPretrainConfig,
    pub adapt: AdaptConfig,
}

pub fn source_domain() -> DomainSpec {
    DomainSpec {
        name: "source".into(),
        freq_range: (0.005, 0.02),
        amp_range: (0.1, 0.5),
        mixing_seed: 1,
        gap_reference: None,
        gap: 1.0,
        feature_noise: 0.01,
        nuisance: 0.0,
        keypoint_noise: 0.02,
        p_drop: 0.2,
        camera: CameraParams::IDENTITY,
    }
}

pub fn target_domain() -> DomainSpec {
    DomainSpec {
        name: "target".into(),
        freq_range: (0.008, 0.03),
        amp_range: (0.2, 0.7),
        mixing_seed: 2,
        gap_reference: Some(1),
        gap: 0.5,
        feature_noise: 0.01,
        nuisance: 1.5,
        keypoint_noise: 0.02,
        p_drop: 0.2,
        camera: CameraParams { s: 1.1, tx: 0.05, ty: -0.05 },
    }
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            body_seed: 42,
            joints: NUM_JOINTS,
            vertices: DEFAULT_VERTICES,
            frames: 500,
            source_videos: 8,
            source_frames: 250,
            source: source_domain(),
            target: target_domain(),
            hmr: HmrConfig::default(),
            md: MdConfig::default(),
            hmr_pretrain: HmrPretrainConfig::default(),
            md_pretrain: MdPretrainConfig { steps: 3000, ..MdPretrainConfig::default() },
            adapt: AdaptConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.target.validate()?;
        self.hmr.validate()?;
        self.md.validate()?;
        self.adapt.validate()?;
        if self.frames == 0 || self.source_videos == 0 || self.source_frames == 0 {
            return Err(Error::Config("benchmark sizes must be positive".into()));
        }
        if self.hmr.num_joints != self.joints || self.md.pose_dim != 6 * self.joints {
            return Err(Error::Config("network sizes disagree with the body".into()));
        }
        Ok(())
    }
}

/// Data and pre-trained networks for one seed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub body: BodyModel,
    pub sources: Vec<SyntheticVideo>,
    pub target: SyntheticVideo,
    pub pretrained: Nets,
    pub random: Nets,
}

fn video_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(k)
}

pub fn make_body(config: &BenchmarkConfig) -> Result<BodyModel> {
    build_toy_body(config.body_seed, config.joints, config.vertices)
}

pub fn make_videos(config: &BenchmarkConfig, body: &BodyModel, seed: u64) -> Result<(Vec<SyntheticVideo>, SyntheticVideo)> {
    let f = config.hmr.feature_dim;
    let sources = (0..config.source_videos as u64)
        .map(|k| synthesize_video(body, &config.source, config.source_frames, f, video_seed(seed, k)))
        .collect::<Result<Vec<_>>>()?;
    let target = synthesize_video(body, &config.target, config.frames, f, video_seed(seed, 999))?;
    Ok((sources, target))
}

pub fn random_nets(config: &BenchmarkConfig, seed: u64) -> Result<Nets> {
    Ok(Nets { hmr: HmrNet::init(config.hmr, video_seed(seed, 1 << 20))?, md: MdNet::init(config.md, video_seed(seed, 1 << 21))? })
}

pub fn pretrain_nets(config: &BenchmarkConfig, body: &BodyModel, sources: &[SyntheticVideo], seed: u64) -> Result<Nets> {
    let mut nets = random_nets(config, seed)?;
    let hp = HmrPretrainConfig { seed: video_seed(seed, 1 << 22), ..config.hmr_pretrain };
    pretrain_hmr(&mut nets.hmr, body, sources, &hp)?;
    let motions: Vec<Vec<Vec<f64>>> = sources.iter().map(SyntheticVideo::gt_poses).collect();
    let mp = MdPretrainConfig { seed: video_seed(seed, 1 << 23), ..config.md_pretrain };
    md_pretrain(&mut nets.md, &motions, &mp)?;
    Ok(nets)
}

pub fn prepare(config: &BenchmarkConfig, seed: u64) -> Result<Prepared> {
    config.validate()?;
    let body = make_body(config)?;
    let (sources, target) = make_videos(config, &body, seed)?;
    let pretrained = pretrain_nets(config, &body, &sources, seed)?;
    let random = random_nets(config, seed)?;
    Ok(Prepared { body, sources, target, pretrained, random })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Table1,
    Table2,
    Table4,
    Pretraining,
    Online,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Table1, Suite::Table2, Suite::Table4, Suite::Pretraining, Suite::Online];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Table1 => "table1",
            Suite::Table2 => "table2",
            Suite::Table4 => "table4",
            Suite::Pretraining => "pretraining",
            Suite::Online => "online",
        }
    }

    pub fn parse(name: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub suite: Suite,
    pub variant: &'static str,
    pub seed: u64,
    pub report: MetricReport,
}

/// Evaluates the pre-trained regressor without adaptation.
pub fn no_adapt(prepared: &Prepared) -> Result<MetricReport> {
    let ev = Evaluator::new(&prepared.body, &prepared.target);
    crate::adapt::evaluate_hmr(&prepared.pretrained.hmr, &AdaptInputs::from_video(&prepared.target), &ev)
}

/// Offline adaptation of `nets` with `config`, returning the final regressor
/// metrics.
pub fn run_offline(prepared: &Prepared, nets: &Nets, config: &AdaptConfig) -> Result<MetricReport> {
    let ev = Evaluator::new(&prepared.body, &prepared.target);
    let inputs = AdaptInputs::from_video(&prepared.target);
    let result = cycle_adapt(&inputs, &prepared.body, nets.clone(), config, Some(&ev), &mut NoObserver)?;
    result.final_report(Source::Hmrnet).ok_or_else(|| Error::Invariant("no metric rows".into()))
}

pub fn variant_config(base: &AdaptConfig, variant: &str) -> Option<AdaptConfig> {
    let mut c = base.clone();
    match variant {
        "full_cyclic" | "pretrained" | "offline" => {}
        "2d_only" => c.no_3d_loss = true,
        "3d_noncyclic" => c.frozen_md = true,
        "gaussian_filter" => c.refiner = Refiner::GaussianFilter { std_frames: 2.0 },
        "random_init" => {}
        _ => return None,
    }
    Some(c)
}

/// Runs one suite for one seed.
pub fn run_suite(suite: Suite, prepared: &Prepared, base: &AdaptConfig, seed: u64) -> Result<Vec<AblationRow>> {
    let row = |variant, report| AblationRow { suite, variant, seed, report };
    let offline = |variant: &str, nets: &Nets| run_offline(prepared, nets, &variant_config(base, variant).expect("known variant"));
    let pre = &prepared.pretrained;
    Ok(match suite {
        Suite::Table2 => vec![
            row("no_adapt", no_adapt(prepared)?),
            row("2d_only", offline("2d_only", pre)?),
            row("3d_noncyclic", offline("3d_noncyclic", pre)?),
            row("full_cyclic", offline("full_cyclic", pre)?),
        ],
        Suite::Table4 => {
            vec![row("gaussian_filter", offline("gaussian_filter", pre)?), row("full_cyclic", offline("full_cyclic", pre)?)]
        }
        Suite::Pretraining => {
            vec![row("random_init", offline("random_init", &prepared.random)?), row("pretrained", offline("pretrained", pre)?)]
        }
        Suite::Online => {
            let ev = Evaluator::new(&prepared.body, &prepared.target);
            let inputs = AdaptInputs::from_video(&prepared.target);
            let online = online_adapt(&inputs, &prepared.body, pre.clone(), base, Some(&ev))?;
            vec![
                row("no_adapt", no_adapt(prepared)?),
                row("online", online.report.ok_or_else(|| Error::Invariant("online run was not scored".into()))?),
                row("offline", offline("offline", pre)?),
            ]
        }
        Suite::Table1 => table1(prepared, base)?.into_iter().map(|(v, r)| row(v, r)).collect(),
    })
}

/// Frozen regressor; the denoiser is scored on the regressor's outputs
/// before and after adapting it on them.
pub fn table1(prepared: &Prepared, base: &AdaptConfig) -> Result<Vec<(&'static str, MetricReport)>> {
    let ev = Evaluator::new(&prepared.body, &prepared.target);
    let inputs = AdaptInputs::from_video(&prepared.target);
    let hmr_out = prepared.pretrained.hmr.forward(inputs.features)?;
    let thetas: Vec<Vec<f64>> = hmr_out.iter().map(|o| o.theta.clone()).collect();
    let betas: Vec<Vec<f64>> = hmr_out.iter().map(|o| o.beta.clone()).collect();
    let hmr_report = ev.evaluate_poses(&thetas, &betas)?;
    let before = ev.evaluate_poses(&denoise_sequence(&prepared.pretrained.md, &thetas)?, &betas)?;
    let config = AdaptConfig { frozen_hmr: true, ..base.clone() };
    let adapted = cycle_adapt(&inputs, &prepared.body, prepared.pretrained.clone(), &config, None, &mut NoObserver)?;
    let after = ev.evaluate_poses(&denoise_sequence(&adapted.nets.md, &thetas)?, &betas)?;
    Ok(vec![("hmrnet_frozen", hmr_report), ("md_before", before), ("md_after", after)])
}
