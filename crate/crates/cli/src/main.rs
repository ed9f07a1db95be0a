//! `cycleadapt`: synthesize benchmark videos, pre-train, adapt, evaluate
//! and run the ablation suites.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use cycleadapt::adapt::{cycle_adapt, evaluate_hmr, online_adapt, AdaptInputs, Evaluator, MetricRow, Nets, Observer, Refiner, Source};
use cycleadapt::benchmark::{make_body, make_videos, pretrain_nets, prepare, random_nets, run_suite, BenchmarkConfig, Suite};
use cycleadapt::body::BodyModel;
use cycleadapt::hmr::HmrNet;
use cycleadapt::md::{denoise_sequence, MdNet};
use cycleadapt::report::{ablation_csv, metrics_csv, write_text};
use cycleadapt::synth::{read_video, write_video, SyntheticVideo};

const THREADS_VAR: &str = "CYCLEADAPT_THREADS";

#[derive(Parser)]
#[command(name = "cycleadapt", version, about = "Cyclic test-time adaptation on synthetic video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the source and target videos of one seed.
    Synth {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train both networks on the source videos.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        /// Directory written by `synth`; synthesized from the seed when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt on the target video, logging metrics and per-cycle checkpoints.
    Adapt(AdaptArgs),
    /// Score a regressor checkpoint on a video.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// `hmr.bin`, or a directory holding it.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        video: PathBuf,
        /// Also score the denoiser from this checkpoint on the regressor output.
        #[arg(long)]
        md: Option<PathBuf>,
        /// Output CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run ablation suites over seeds into one CSV.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// table1, table2, table4, pretraining, online or all.
        #[arg(long, value_delimiter = ',', required = true)]
        suite: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON run configuration; defaults are the standard benchmark.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone, Serialize)]
struct Flags {
    /// Keep the denoiser fixed (non-cyclic adaptation).
    #[arg(long)]
    frozen_md: bool,
    /// Train the regressor on the reprojection loss alone.
    #[arg(long)]
    no_3d_loss: bool,
    /// Start from random networks instead of pre-trained ones.
    #[arg(long)]
    random_init: bool,
    /// Single causal pass instead of cycles.
    #[arg(long)]
    online: bool,
    /// Ignore keypoint confidences in the reprojection loss.
    #[arg(long)]
    unweighted_2d: bool,
    /// Replace the denoiser with a Gaussian filter of this std (frames).
    #[arg(long)]
    gaussian_filter: Option<f64>,
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    flags: Flags,
    /// Directory written by `synth`; synthesized from the seed when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory written by `pretrain`; pre-trained from the seed when absent.
    #[arg(long)]
    nets: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct Echo<'a> {
    command: &'a str,
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    flags: Option<&'a Flags>,
    #[serde(skip_serializing_if = "Option::is_none")]
    suites: Option<&'a [String]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seeds: Option<&'a [u64]>,
    config: &'a BenchmarkConfig,
}

fn load_config(path: Option<&Path>) -> Result<BenchmarkConfig> {
    let config = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => BenchmarkConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

fn threads() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => bail!("{THREADS_VAR}: {e}"),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!("{THREADS_VAR} must be a positive integer, got {v:?}"),
        },
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_echo(dir: &Path, echo: &Echo) -> Result<()> {
    let text = serde_json::to_string_pretty(echo)? + "\n";
    write_text(&dir.join("config.json"), &text)?;
    Ok(())
}

fn source_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("source_{k:02}.jsonl"))
}

fn read_sources(dir: &Path, count: usize) -> Result<Vec<SyntheticVideo>> {
    (0..count).map(|k| Ok(read_video(&source_path(dir, k))?)).collect()
}

fn check_video(config: &BenchmarkConfig, video: &SyntheticVideo, path: &Path) -> Result<()> {
    let joints = video.keypoints.first().map_or(0, |k| k.0.len());
    if video.is_empty() || video.feature_dim() != config.hmr.feature_dim || joints != config.joints {
        bail!(
            "{}: video has F={} J={} with {} frames; config expects F={} J={}",
            path.display(),
            video.feature_dim(),
            joints,
            video.len(),
            config.hmr.feature_dim,
            config.joints
        );
    }
    Ok(())
}

fn load_nets(config: &BenchmarkConfig, dir: &Path) -> Result<Nets> {
    let hmr = HmrNet::load(&dir.join("hmr.bin"))?;
    if hmr.config() != &config.hmr {
        bail!("{}: regressor sizes differ from the config", dir.join("hmr.bin").display());
    }
    let md = MdNet::load_as(&dir.join("md.bin"), config.md)?;
    Ok(Nets { hmr, md })
}

fn save_nets(nets: &Nets, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    nets.hmr.save(&dir.join("hmr.bin"))?;
    nets.md.save(&dir.join("md.bin"))?;
    Ok(())
}

struct Checkpoints {
    dir: PathBuf,
}

impl Observer for Checkpoints {
    fn cycle_done(&mut self, cycle: usize, nets: &Nets) -> cycleadapt::Result<()> {
        let dir = self.dir.join(format!("cycle_{cycle:02}"));
        fs::create_dir_all(&dir).map_err(|source| cycleadapt::Error::Io { path: dir.clone(), source })?;
        nets.hmr.save(&dir.join("hmr.bin"))?;
        nets.md.save(&dir.join("md.bin"))
    }
}

fn synth(run: &RunArgs, out: &Path) -> Result<()> {
    let config = load_config(run.config.as_deref())?;
    let body = make_body(&config)?;
    let (sources, target) = make_videos(&config, &body, run.seed)?;
    create_dir(out)?;
    for (k, video) in sources.iter().enumerate() {
        write_video(&source_path(out, k), video)?;
    }
    write_video(&out.join("target.jsonl"), &target)?;
    write_echo(out, &Echo { command: "synth", seed: Some(run.seed), flags: None, suites: None, seeds: None, config: &config })
}

fn pretrain(run: &RunArgs, data: Option<&Path>, out: &Path) -> Result<()> {
    let config = load_config(run.config.as_deref())?;
    let body = make_body(&config)?;
    let sources = match data {
        Some(dir) => read_sources(dir, config.source_videos)?,
        None => make_videos(&config, &body, run.seed)?.0,
    };
    for (k, video) in sources.iter().enumerate() {
        check_video(&config, video, &source_path(data.unwrap_or(out), k))?;
    }
    let nets = pretrain_nets(&config, &body, &sources, run.seed)?;
    save_nets(&nets, out)?;
    write_echo(out, &Echo { command: "pretrain", seed: Some(run.seed), flags: None, suites: None, seeds: None, config: &config })
}

fn adapt(args: &AdaptArgs) -> Result<()> {
    let mut config = load_config(args.run.config.as_deref())?;
    let flags = &args.flags;
    let a = &mut config.adapt;
    a.frozen_md |= flags.frozen_md;
    a.no_3d_loss |= flags.no_3d_loss;
    a.weighted_2d &= !flags.unweighted_2d;
    if let Some(std_frames) = flags.gaussian_filter {
        a.refiner = Refiner::GaussianFilter { std_frames };
    }
    config.validate()?;

    let body = make_body(&config)?;
    let (sources, target) = match &args.data {
        Some(dir) => {
            let path = dir.join("target.jsonl");
            let target = read_video(&path)?;
            check_video(&config, &target, &path)?;
            let sources = if flags.random_init || args.nets.is_some() { Vec::new() } else { read_sources(dir, config.source_videos)? };
            (sources, target)
        }
        None => make_videos(&config, &body, args.run.seed)?,
    };
    let nets = if flags.random_init {
        random_nets(&config, args.run.seed)?
    } else if let Some(dir) = &args.nets {
        load_nets(&config, dir)?
    } else {
        pretrain_nets(&config, &body, &sources, args.run.seed)?
    };

    create_dir(&args.out)?;
    let ev = Evaluator::new(&body, &target);
    let inputs = AdaptInputs::from_video(&target);
    let rows = if flags.online {
        let before = evaluate_hmr(&nets.hmr, &inputs, &ev)?;
        let result = online_adapt(&inputs, &body, nets, &config.adapt, Some(&ev))?;
        save_nets(&result.nets, &args.out.join("checkpoints").join("final"))?;
        let after = result.report.context("online run was not scored")?;
        vec![MetricRow { cycle: 0, source: Source::Hmrnet, report: before }, MetricRow { cycle: 1, source: Source::Hmrnet, report: after }]
    } else {
        let mut observer = Checkpoints { dir: args.out.join("checkpoints") };
        cycle_adapt(&inputs, &body, nets, &config.adapt, Some(&ev), &mut observer)?.rows
    };
    write_text(&args.out.join("metrics.csv"), &metrics_csv(&rows))?;
    write_echo(&args.out, &Echo { command: "adapt", seed: Some(args.run.seed), flags: Some(flags), suites: None, seeds: None, config: &config })
}

fn eval(run: &RunArgs, checkpoint: &Path, video_path: &Path, md: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let config = load_config(run.config.as_deref())?;
    let body: BodyModel = make_body(&config)?;
    let video = read_video(video_path)?;
    let hmr_path = if checkpoint.is_dir() { checkpoint.join("hmr.bin") } else { checkpoint.to_path_buf() };
    let hmr = HmrNet::load(&hmr_path)?;
    let c = hmr.config();
    if c.feature_dim != video.feature_dim() || c.num_joints != body.num_joints() {
        bail!("{}: checkpoint expects F={} J={}, video and body have F={} J={}", hmr_path.display(), c.feature_dim, c.num_joints, video.feature_dim(), body.num_joints());
    }
    let ev = Evaluator::new(&body, &video);
    let mut rows = vec![MetricRow { cycle: 0, source: Source::Hmrnet, report: evaluate_hmr(&hmr, &AdaptInputs::from_video(&video), &ev)? }];
    if let Some(md_path) = md {
        let md_path = if md_path.is_dir() { md_path.join("md.bin") } else { md_path.to_path_buf() };
        let net = MdNet::load_as(&md_path, config.md)?;
        let outputs = hmr.forward(&video.features)?;
        let thetas: Vec<Vec<f64>> = outputs.iter().map(|o| o.theta.clone()).collect();
        let betas: Vec<Vec<f64>> = outputs.iter().map(|o| o.beta.clone()).collect();
        let report = ev.evaluate_poses(&denoise_sequence(&net, &thetas)?, &betas)?;
        rows.push(MetricRow { cycle: 0, source: Source::Store, report });
    }
    let text = metrics_csv(&rows);
    match out {
        Some(path) => write_text(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn parse_suites(names: &[String]) -> Result<Vec<Suite>> {
    let mut suites = Vec::new();
    for name in names {
        if name == "all" {
            suites.extend(Suite::ALL);
        } else {
            suites.push(Suite::parse(name).with_context(|| format!("unknown suite {name:?}"))?);
        }
    }
    Ok(suites)
}

fn ablate(config_path: Option<&Path>, names: &[String], seeds: &[u64], out: &Path) -> Result<()> {
    let config = load_config(config_path)?;
    let suites = parse_suites(names)?;
    let threads = threads()?;
    let run_seed = |seed: u64| -> cycleadapt::Result<Vec<_>> {
        let prepared = prepare(&config, seed)?;
        let mut rows = Vec::new();
        for &suite in &suites {
            rows.extend(run_suite(suite, &prepared, &config.adapt, seed)?);
        }
        Ok(rows)
    };
    // Seeds are independent; results are collected in seed order.
    let mut per_seed = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(threads) {
        let results: Vec<cycleadapt::Result<Vec<_>>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&seed| s.spawn(move || run_seed(seed))).collect();
            handles.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect()
        });
        for r in results {
            per_seed.push(r?);
        }
    }
    let rows: Vec<_> = per_seed.into_iter().flatten().collect();
    create_dir(out)?;
    write_text(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    write_echo(out, &Echo { command: "ablate", seed: None, flags: None, suites: Some(names), seeds: Some(seeds), config: &config })
}

fn run(cli: Cli) -> Result<()> {
    threads()?;
    match cli.command {
        Command::Synth { run, out } => synth(&run, &out),
        Command::Pretrain { run, data, out } => pretrain(&run, data.as_deref(), &out),
        Command::Adapt(args) => adapt(&args),
        Command::Eval { run, checkpoint, video, md, out } => eval(&run, &checkpoint, &video, md.as_deref(), out.as_deref()),
        Command::Ablate { config, suite, seeds, out } => ablate(config.as_deref(), &suite, &seeds, &out),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let internal = err.chain().any(|e| e.downcast_ref::<cycleadapt::Error>().is_some_and(cycleadapt::Error::is_internal));
    if internal {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
