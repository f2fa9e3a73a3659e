use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use posecal::ccnet::TrainConfig;
use posecal::io;
use posecal::pipeline::{
    cmd_eval, cmd_rescore, cmd_synth, cmd_train_calib, Aggregation, AreaSource, ConfidenceMode,
    RunConfig, SigmaSource,
};
use posecal::sim::{ScoreMode, SynthConfig};
use posecal::verify::{cmd_simulate, SimConfig};
use posecal::{Error, KeypointSpec};

const EXIT_OTHER: u8 = 1;
const EXIT_PARSE: u8 = 3;
const EXIT_ALIGNMENT: u8 = 4;
const EXIT_CONFIG: u8 = 5;
const EXIT_TOLERANCE: u8 = 6;
const EXIT_DIVERGED: u8 = 7;

#[derive(Parser)]
#[command(name = "posecal", version, about = "Keypoint confidence evaluation and calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate predictions: mAP, mAR, AUSE, Pearson and reliability.
    Eval(EvalArgs),
    /// Replace keypoint scores with expected-OKS rescoring.
    Rescore(RescoreArgs),
    /// Check every closed form against Monte Carlo.
    Simulate(SimulateArgs),
    /// Generate a synthetic benchmark (gt.json, pred.json).
    Synth(SynthArgs),
    /// Train the calibration head and report before/after metrics.
    TrainCalib(TrainArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML configuration; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Keypoint spec JSON (`{"falloff": [...], "names": [...]}`); COCO by default.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct Data {
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    pred: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    HeatmapMax,
    Rle,
    Constant,
    Rescored,
    Oracle,
    Ccnet,
}

impl From<ModeArg> for ConfidenceMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::HeatmapMax => ConfidenceMode::HeatmapMax,
            ModeArg::Rle => ConfidenceMode::Rle,
            ModeArg::Constant => ConfidenceMode::Constant,
            ModeArg::Rescored => ConfidenceMode::Rescored,
            ModeArg::Oracle => ConfidenceMode::Oracle,
            ModeArg::Ccnet => ConfidenceMode::Ccnet,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AggArg {
    Threshold,
    Soft,
}

#[derive(Clone, Copy, ValueEnum)]
enum AreaArg {
    Gt,
    Pred,
}

#[derive(Clone, Copy, ValueEnum)]
enum SigmaArg {
    Auto,
    Field,
    Maxval,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreArg {
    Heatmap,
    Regression,
}

#[derive(Args, Clone, Default)]
struct RunFlags {
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Comma-separated OKS thresholds.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    #[arg(long = "tau-s")]
    tau_s: Option<f64>,
    #[arg(long, value_enum)]
    aggregation: Option<AggArg>,
    #[arg(long = "area-source", value_enum)]
    area_source: Option<AreaArg>,
    #[arg(long = "sigma-source", value_enum)]
    sigma_source: Option<SigmaArg>,
    #[arg(long = "l-tilde")]
    l_tilde: Option<f64>,
    /// Comma-separated keypoint indices to evaluate.
    #[arg(long, value_delimiter = ',')]
    subset: Option<Vec<usize>>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: Data,
    #[command(flatten)]
    run: RunFlags,
    /// Head weights for `--mode ccnet`.
    #[arg(long)]
    head: Option<PathBuf>,
}

#[derive(Args)]
struct RescoreArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: Data,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long = "mc-samples")]
    mc_samples: Option<usize>,
    #[arg(long = "heatmap-samples")]
    heatmap_samples: Option<usize>,
    #[arg(long = "nll-samples")]
    nll_samples: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long = "score-mode", value_enum)]
    score_mode: Option<ScoreArg>,
    #[arg(long = "feature-noise")]
    feature_noise: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: Data,
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "lambda-vis")]
    lambda_vis: Option<f64>,
}

/// Layout of the `--config` TOML file.
#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    gt: Option<PathBuf>,
    pred: Option<PathBuf>,
    spec: Option<PathBuf>,
    out: Option<PathBuf>,
    head: Option<PathBuf>,
    seed: Option<u64>,
    run: RunConfig,
    train: TrainConfig,
    synth: SynthConfig,
    simulate: SimConfig,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig, Error> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

struct Resolved {
    file: FileConfig,
    spec: KeypointSpec,
    seed: Option<u64>,
    out: PathBuf,
}

fn resolve(common: &Common) -> Result<Resolved, Error> {
    let file = load_config(common.config.as_deref())?;
    let spec = match common.spec.clone().or_else(|| file.spec.clone()) {
        Some(p) => io::read_spec(&p)?,
        None => KeypointSpec::coco(),
    };
    let out = common
        .out
        .clone()
        .or_else(|| file.out.clone())
        .ok_or_else(|| Error::Config("--out is required".into()))?;
    Ok(Resolved {
        seed: common.seed.or(file.seed),
        file,
        spec,
        out,
    })
}

fn data_paths(data: &Data, file: &FileConfig) -> Result<(PathBuf, PathBuf), Error> {
    let gt = data.gt.clone().or_else(|| file.gt.clone());
    let pred = data.pred.clone().or_else(|| file.pred.clone());
    match (gt, pred) {
        (Some(g), Some(p)) => Ok((g, p)),
        _ => Err(Error::Config("--gt and --pred are required".into())),
    }
}

fn apply_run(mut run: RunConfig, flags: &RunFlags) -> RunConfig {
    if let Some(m) = flags.mode {
        run.mode = m.into();
    }
    if let Some(t) = &flags.thresholds {
        run.eval.thresholds = t.clone();
    }
    if let Some(t) = flags.tau_s {
        run.tau_s = t;
    }
    if let Some(a) = flags.aggregation {
        run.aggregation = match a {
            AggArg::Threshold => Aggregation::Threshold,
            AggArg::Soft => Aggregation::Soft,
        };
    }
    if let Some(a) = flags.area_source {
        run.area_source = match a {
            AreaArg::Gt => AreaSource::Gt,
            AreaArg::Pred => AreaSource::Pred,
        };
    }
    if let Some(s) = flags.sigma_source {
        run.sigma_source = match s {
            SigmaArg::Auto => SigmaSource::Auto,
            SigmaArg::Field => SigmaSource::Field,
            SigmaArg::Maxval => SigmaSource::Maxval,
        };
    }
    if let Some(l) = flags.l_tilde {
        run.l_tilde = l;
    }
    if let Some(s) = &flags.subset {
        run.subset = Some(s.clone());
    }
    run
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Eval(a) => {
            let r = resolve(&a.common)?;
            let (gt, pred) = data_paths(&a.data, &r.file)?;
            let run = apply_run(r.file.run.clone(), &a.run);
            let head = a.head.clone().or_else(|| r.file.head.clone());
            let rep = cmd_eval(&gt, &pred, &r.spec, &run, head.as_deref(), &r.out)?;
            println!("mode          {}", run.mode);
            println!("instances     {} (excluded {})", rep.n, rep.excluded);
            println!("mAP           {:.6}", rep.map);
            println!("mAR           {:.6}", rep.mar);
            println!("AUSE          {:.6}", rep.ause);
            println!("Pearson       {}", opt(rep.pearson));
            println!("reliability   {:.6}", rep.reliability_deviation);
            Ok(0)
        }
        Command::Rescore(a) => {
            let r = resolve(&a.common)?;
            let (gt, pred) = data_paths(&a.data, &r.file)?;
            let run = apply_run(r.file.run.clone(), &a.run);
            let n = cmd_rescore(&gt, &pred, &r.spec, &run, &r.out)?;
            println!("rescored {n} predictions -> {}", r.out.display());
            Ok(0)
        }
        Command::Simulate(a) => {
            let r = resolve(&a.common)?;
            let mut cfg = r.file.simulate.clone();
            if let Some(s) = r.seed {
                cfg.seed = s;
            }
            if let Some(n) = a.mc_samples {
                cfg.mc_samples = n;
            }
            if let Some(n) = a.heatmap_samples {
                cfg.heatmap_samples = n;
            }
            if let Some(n) = a.nll_samples {
                cfg.nll_samples = n;
            }
            let report = cmd_simulate(&cfg, &r.out)?;
            let mut groups: Vec<&str> = Vec::new();
            for c in &report.checks {
                if !groups.contains(&c.group.as_str()) {
                    groups.push(&c.group);
                }
            }
            for g in groups {
                let cs: Vec<_> = report.checks.iter().filter(|c| c.group == g).collect();
                let worst = cs.iter().map(|c| c.deviation).fold(0.0, f64::max);
                let ok = cs.iter().all(|c| c.pass);
                println!(
                    "{:<28} {:>3} checks  worst deviation {:<12.6} {}",
                    g,
                    cs.len(),
                    worst,
                    if ok { "pass" } else { "FAIL" }
                );
            }
            if report.passed() {
                Ok(0)
            } else {
                eprintln!("{} checks outside tolerance", report.failures());
                Ok(EXIT_TOLERANCE)
            }
        }
        Command::Synth(a) => {
            let r = resolve(&a.common)?;
            let mut cfg = r.file.synth.clone();
            if a.common.spec.is_some() || r.file.spec.is_some() {
                cfg.spec = r.spec.clone();
            }
            if let Some(n) = a.instances {
                cfg.instances = n;
            }
            if let Some(m) = a.score_mode {
                cfg.score_mode = match m {
                    ScoreArg::Heatmap => ScoreMode::Heatmap,
                    ScoreArg::Regression => ScoreMode::Regression,
                };
            }
            if let Some(f) = a.feature_noise {
                cfg.feature_noise = f;
            }
            let n = cmd_synth(&cfg, r.seed.unwrap_or(0), &r.out)?;
            println!("wrote {n} instances to {}", r.out.display());
            Ok(0)
        }
        Command::TrainCalib(a) => {
            let r = resolve(&a.common)?;
            let (gt, pred) = data_paths(&a.data, &r.file)?;
            let run = apply_run(r.file.run.clone(), &a.run);
            let mut cfg = r.file.train.clone();
            if let Some(s) = r.seed {
                cfg.seed = s;
            }
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            if let Some(l) = a.lambda_vis {
                cfg.lambda_vis = l;
            }
            let s = cmd_train_calib(&gt, &pred, &r.spec, &run, &cfg, &r.out)?;
            println!("held-out      {} instances (trained on {})", s.held_out_instances, s.train_instances);
            println!("              {:<12} ccnet", s.before_mode.name());
            println!("mAP           {:<12.6} {:.6}", s.map_before, s.map_after);
            println!("mAR           {:<12.6} {:.6}", s.mar_before, s.mar_after);
            println!("AUSE          {:<12.6} {:.6}", s.ause_before, s.ause_after);
            println!("Pearson       {:<12} {}", opt(s.pearson_before), opt(s.pearson_after));
            println!(
                "reliability   {:<12.6} {:.6}",
                s.reliability_deviation_before, s.reliability_deviation_after
            );
            Ok(0)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse { .. } => EXIT_PARSE,
        Error::Alignment(_) => EXIT_ALIGNMENT,
        Error::Config(_) => EXIT_CONFIG,
        Error::Tolerance(_) => EXIT_TOLERANCE,
        Error::Diverged { .. } => EXIT_DIVERGED,
        _ => EXIT_OTHER,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Diverged { last_good, .. } = &e {
                eprintln!(
                    "last good head: {} keypoints x {} features",
                    last_good.keypoints, last_good.feature_dim
                );
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
