use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use emednext::inference::TtaMode;
use emednext::model::{save_model, ModelConfig, ModelParams, PointwiseModel, StoredModel};
use emednext_cli::{ConfigError, Outcome, PipelineConfig, Runner, EXIT_CONFIG};

#[derive(Parser)]
#[command(name = "emednext", version, about = "Brain-tumor segmentation batch pipeline")]
struct Cli {
    /// JSON pipeline configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "EMEDNEXT_WORKERS")]
    workers: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    input_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Model directory; repeat for an ensemble. Replaces the configured list.
    #[arg(long = "model", global = true)]
    models: Vec<PathBuf>,
    #[arg(long, global = true, value_enum)]
    tta: Option<Tta>,
    /// Keep ET components of 30 voxels or more (applied before the flags below).
    #[arg(long, global = true)]
    final_submission: bool,
    #[arg(long, global = true)]
    tau_tc: Option<f64>,
    #[arg(long, global = true)]
    tau_wt: Option<f64>,
    #[arg(long, global = true)]
    tau_et: Option<f64>,
    #[arg(long, global = true)]
    gamma_tc: Option<usize>,
    #[arg(long, global = true)]
    gamma_wt: Option<usize>,
    #[arg(long, global = true)]
    gamma_et: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tta {
    None,
    Flips7,
    Flips8,
}

#[derive(Subcommand)]
enum Cmd {
    /// Clip, normalize, resample, crop/pad and stack every input case.
    Preprocess,
    /// Ensemble sliding-window inference with flip TTA; writes probability maps.
    Infer,
    /// Threshold, prune, enforce nesting and fuse; writes label maps in original space.
    Postprocess,
    /// Dice / NSD / lesion-wise metrics against the input ground truth.
    Evaluate,
    /// All of the above.
    Pipeline,
    /// Writes a randomly initialized (or pointwise) model directory.
    InitModel(InitArgs),
    /// Prints the effective configuration as JSON.
    ShowConfig,
}

#[derive(clap::Args)]
struct InitArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "mednext")]
    kind: Kind,
    #[arg(long, default_value_t = 5)]
    in_channels: usize,
    #[arg(long, default_value_t = 8)]
    base_channels: usize,
    #[arg(long, default_value_t = 4)]
    stages: usize,
    #[arg(long, default_value_t = 1)]
    blocks: usize,
    #[arg(long, default_value_t = 2)]
    expansion: usize,
    /// Pointwise models: logit_k = gain * input_k.
    #[arg(long, default_value_t = 1.0)]
    gain: f32,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Mednext,
    Pointwise,
}

fn build_config(cli: &Cli) -> Result<PipelineConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    for (flag, field) in [(&cli.input_dir, &mut cfg.input_dir), (&cli.work_dir, &mut cfg.work_dir), (&cli.output_dir, &mut cfg.output_dir)] {
        if let Some(p) = flag {
            *field = p.clone();
        }
    }
    if !cli.models.is_empty() {
        if cfg.ensemble.weights.as_ref().is_some_and(|w| w.len() != cli.models.len()) {
            cfg.ensemble.weights = None;
        }
        cfg.ensemble.models = cli.models.clone();
    }
    if let Some(t) = cli.tta {
        cfg.tta = match t {
            Tta::None => TtaMode::None,
            Tta::Flips7 => TtaMode::Flips7,
            Tta::Flips8 => TtaMode::Flips8,
        };
    }
    let pp = &mut cfg.postprocess;
    if cli.final_submission {
        pp.gamma_et = 30;
    }
    let taus = [(cli.tau_tc, &mut pp.tau_tc), (cli.tau_wt, &mut pp.tau_wt), (cli.tau_et, &mut pp.tau_et)];
    for (v, f) in taus {
        if let Some(v) = v {
            *f = v;
        }
    }
    let gammas = [(cli.gamma_tc, &mut pp.gamma_tc), (cli.gamma_wt, &mut pp.gamma_wt), (cli.gamma_et, &mut pp.gamma_et)];
    for (v, f) in gammas {
        if let Some(v) = v {
            *f = v;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_model(args: &InitArgs, seed: u64) -> Result<(), ConfigError> {
    let model = match args.kind {
        Kind::Pointwise => StoredModel::Pointwise(PointwiseModel::identity_gain(args.in_channels, 3, args.gain)),
        Kind::Mednext => {
            let config = ModelConfig::toy(args.in_channels, args.base_channels, args.stages, args.blocks, args.expansion);
            config.validate().map_err(|e| ConfigError(e.to_string()))?;
            let params = ModelParams::init(&config, seed);
            StoredModel::Mednext { config, params }
        }
    };
    save_model(&args.out, &model).map_err(|e| ConfigError(e.to_string()))
}

fn run(cli: &Cli) -> Result<Outcome, ConfigError> {
    let cfg = build_config(cli)?;
    match &cli.cmd {
        Cmd::InitModel(args) => init_model(args, cfg.seed).map(|_| Outcome::default()),
        Cmd::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg).map_err(|e| ConfigError(e.to_string()))?);
            Ok(Outcome::default())
        }
        Cmd::Preprocess => {
            let r = Runner::new(cfg)?;
            let cases = r.input_cases()?;
            Ok(r.preprocess(&cases))
        }
        Cmd::Infer => {
            let r = Runner::new(cfg)?;
            let cases = emednext_cli::discover_cases(&r.cfg.work_dir.join("preprocessed"))?;
            r.infer(&cases)
        }
        Cmd::Postprocess => {
            let r = Runner::new(cfg)?;
            let cases = r.prob_cases();
            Ok(r.postprocess(&cases))
        }
        Cmd::Evaluate => {
            let r = Runner::new(cfg)?;
            let cases = r.seg_cases();
            Ok(r.evaluate(&cases))
        }
        Cmd::Pipeline => Runner::new(cfg)?.pipeline(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            if !matches!(cli.cmd, Cmd::InitModel(_) | Cmd::ShowConfig) {
                eprintln!("{} case(s) ok, {} failed", out.ok.len(), out.failed.len());
            }
            ExitCode::from(out.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(EXIT_CONFIG as u8)
        }
    }
}
