use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::Device;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use ui2i::config::RunConfig;
use ui2i::data::{
    find_by_stem, generate_unmix_dataset, list_images, load_ground_truth, load_image, PatchDataset, SyntheticUnmixSpec,
    DEFAULT_TEST_PAIRS, DEFAULT_TRAIN_MIXED, DEFAULT_TRAIN_UNMIXED,
};
use ui2i::metrics::{mean_std, pair_scores, match_instances, segmentation_scores, InstanceLabeling};
use ui2i::models::{ClassMode, Direction};
use ui2i::trainer::{self, checkpoint_path, TrainState};

const SEED_ENV: &str = "UI2I_SEED";

#[derive(Parser)]
#[command(name = "ui2i", version, about = "Unpaired image-to-image translation with spectrally normalized generators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a translation model (or resume from a checkpoint).
    Train(TrainArgs),
    /// Translate every image of a directory with a trained checkpoint.
    Translate(TranslateArgs),
    /// Evaluate predictions against ground truth.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Write the synthetic unmixing dataset.
    Synth(SynthArgs),
    /// Reproduce the normalization toy example.
    Toy(ToyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    TwoClass,
    ThreeClass,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Ab,
    Ba,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    domain_a: Option<PathBuf>,
    #[arg(long)]
    domain_b: Option<PathBuf>,
    /// Total iterations to reach (overrides `train.iterations`).
    #[arg(long)]
    iters: Option<u64>,
    /// Output directory for checkpoints and the loss log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Seed; falls back to the config file, then to $UI2I_SEED, then to 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long, conflicts_with_all = ["config", "mode", "seed"])]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum)]
    direction: DirectionArg,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Instance-segmentation scores of label images matched by file stem.
    Seg(EvalArgs),
    /// Per-channel PSNR and SSIM of image pairs matched by file stem. The
    /// ground-truth directory may hold images directly or `ch1/`, `ch2/`, ...
    Pairs(EvalArgs),
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Seed; falls back to $UI2I_SEED, then to 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_TRAIN_MIXED)]
    n_mixed: usize,
    #[arg(long, default_value_t = DEFAULT_TRAIN_UNMIXED)]
    n_unmixed: usize,
    #[arg(long, default_value_t = DEFAULT_TEST_PAIRS)]
    n_test: usize,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(ui2i::Error),
}

impl From<ui2i::Error> for CliError {
    fn from(e: ui2i::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use ui2i::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                E::InvalidArgument(_) | E::InvalidConfiguration(_) | E::InvalidState(_) => 2,
                E::Numerical(_) | E::Tensor(_) => 3,
                E::Io(_) | E::Image(_) | E::Checkpoint(_) | E::Json(_) => 4,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn emit(v: &Value) {
    println!("{v}");
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| usage(format!("{SEED_ENV}=`{s}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Seed override for a fresh run: the flag wins, then a seed written in the
/// config file (already in place), then the environment.
fn resolve_seed(flag: Option<u64>, in_file: bool, env: Option<u64>) -> Option<u64> {
    match (flag, in_file) {
        (Some(s), _) => Some(s),
        (None, true) => None,
        (None, false) => env,
    }
}

fn require_dir(p: &Path, what: &str) -> CliResult<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} directory {} does not exist", p.display())))
    }
}

fn load_config(path: Option<&Path>) -> CliResult<(RunConfig, bool)> {
    let Some(path) = path else { return Ok((RunConfig::default(), false)) };
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let cfg = RunConfig::from_toml_str(&text)?;
    let table: toml::Table = text.parse().map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let seed_set = table.get("train").and_then(|t| t.get("seed")).is_some();
    Ok((cfg, seed_set))
}

fn load_domains(cfg: &RunConfig, a: Option<PathBuf>, b: Option<PathBuf>) -> CliResult<(PatchDataset, PatchDataset)> {
    let a = a.or_else(|| cfg.data.domain_a.clone()).ok_or_else(|| usage("--domain-a is required"))?;
    let b = b.or_else(|| cfg.data.domain_b.clone()).ok_or_else(|| usage("--domain-b is required"))?;
    require_dir(&a, "domain A")?;
    require_dir(&b, "domain B")?;
    let opts = cfg.patch_options();
    Ok((PatchDataset::load(&a, opts.clone(), cfg.train.seed)?, PatchDataset::load(&b, opts, cfg.train.seed)?))
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let device = Device::Cpu;
    let mut state = match &args.resume {
        Some(ck) => {
            let mut state = TrainState::load(ck, &device)?;
            if let Some(n) = args.iters {
                state.config.train.iterations = n;
            }
            state.config.validate()?;
            state
        }
        None => {
            let (mut cfg, seed_in_file) = load_config(args.config.as_deref())?;
            if let Some(mode) = args.mode {
                cfg.model.mode = match mode {
                    ModeArg::TwoClass => ClassMode::TwoClass,
                    ModeArg::ThreeClass => ClassMode::ThreeClass,
                };
                if let (ClassMode::TwoClass, Some(w)) = (cfg.model.mode, cfg.losses.as_mut()) {
                    w.id = 0.0;
                }
            }
            if let Some(n) = args.iters {
                cfg.train.iterations = n;
            }
            if let Some(s) = resolve_seed(args.seed, seed_in_file, env_seed()?) {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            let mut state = TrainState::new(cfg, &device)?;
            let (a, b) = load_domains(&state.config, args.domain_a.clone(), args.domain_b.clone())?;
            check_channels(&state, &a, &b)?;
            state.init_from_data(&a, &b)?;
            return finish_training(&mut state, &a, &b, &args.out);
        }
    };
    let (a, b) = load_domains(&state.config, args.domain_a.clone(), args.domain_b.clone())?;
    check_channels(&state, &a, &b)?;
    finish_training(&mut state, &a, &b, &args.out)
}

fn check_channels(state: &TrainState, a: &PatchDataset, b: &PatchDataset) -> CliResult<()> {
    let m = &state.config.model;
    if a.channels != m.channels_a || b.channels != m.channels_b {
        return Err(usage(format!(
            "data has {}/{} channels but the model expects {}/{} (model.channels_a / channels_b)",
            a.channels, b.channels, m.channels_a, m.channels_b
        )));
    }
    Ok(())
}

fn finish_training(state: &mut TrainState, a: &PatchDataset, b: &PatchDataset, out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(ui2i::Error::from)?;
    std::fs::write(out.join("config.toml"), state.config.to_toml_string()?).map_err(ui2i::Error::from)?;
    let reports = trainer::train_from(state, a, b, Some(out))?;
    emit(&json!({
        "event": "trained",
        "iteration": state.iteration,
        "checkpoint": checkpoint_path(out, state.iteration),
        "config_hash": state.config.hash(),
        "last": reports.last(),
    }));
    Ok(())
}

fn cmd_translate(args: TranslateArgs) -> CliResult<()> {
    require_dir(&args.input, "input")?;
    let state = TrainState::load(&args.checkpoint, &Device::Cpu)?;
    let dir = match args.direction {
        DirectionArg::Ab => Direction::Ab,
        DirectionArg::Ba => Direction::Ba,
    };
    let summary = trainer::translate_dir(&state.model, &args.input, &args.output, dir)?;
    emit(&json!({
        "event": "translated",
        "direction": summary.direction,
        "images": summary.images,
        "mean_cycle_l1": summary.mean_cycle_l1,
        "output": args.output,
    }));
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn summary_stats(values: &[f64]) -> Value {
    let (m, s) = mean_std(values);
    json!({ "mean": m, "std": s })
}

/// Shared per-image loop: `score` returns named metric values for one stem;
/// failures are reported and the image skipped.
fn eval_loop(pred: &Path, names: &[&str], mut score: impl FnMut(&Path, &str) -> ui2i::Result<Vec<f64>>) -> CliResult<()> {
    require_dir(pred, "prediction")?;
    let files = list_images(pred)?;
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    let mut skipped = 0usize;
    for f in &files {
        let s = stem(f);
        match score(f, &s) {
            Ok(values) => {
                let mut rec = serde_json::Map::new();
                rec.insert("image".into(), json!(s));
                for ((name, v), col) in names.iter().zip(&values).zip(columns.iter_mut()) {
                    rec.insert((*name).into(), json!(v));
                    col.push(*v);
                }
                emit(&Value::Object(rec));
            }
            Err(e) => {
                skipped += 1;
                emit(&json!({ "image": s, "skipped": true, "error": e.to_string() }));
            }
        }
    }
    let evaluated = files.len() - skipped;
    let mut summary = serde_json::Map::new();
    summary.insert("summary".into(), json!(true));
    summary.insert("images".into(), json!(evaluated));
    summary.insert("skipped".into(), json!(skipped));
    for (name, col) in names.iter().zip(&columns) {
        summary.insert((*name).into(), summary_stats(col));
    }
    emit(&Value::Object(summary));
    if evaluated == 0 {
        return Err(usage("no image could be evaluated"));
    }
    Ok(())
}

fn cmd_eval_seg(args: EvalArgs) -> CliResult<()> {
    require_dir(&args.gt, "ground-truth")?;
    let names = ["instance_precision", "instance_recall", "f1", "segm_quality", "panoptic_quality"];
    eval_loop(&args.pred, &names, |path, s| {
        let gt_path = find_by_stem(&args.gt, s)?
            .ok_or_else(|| ui2i::Error::InvalidArgument(format!("no ground truth named `{s}`")))?;
        let pred = InstanceLabeling::from_image(&load_image(path)?)?;
        let gt = InstanceLabeling::from_image(&load_image(&gt_path)?)?;
        let sc = segmentation_scores(&match_instances(&pred, &gt)?);
        Ok(vec![sc.precision, sc.recall, sc.f1, sc.seg_quality, sc.panoptic_quality])
    })
}

fn cmd_eval_pairs(args: EvalArgs) -> CliResult<()> {
    require_dir(&args.gt, "ground-truth")?;
    // channel count comes from the first readable prediction
    let channels = list_images(&args.pred)
        .ok()
        .and_then(|f| f.first().and_then(|p| load_image(p).ok()))
        .map(|i| i.channels)
        .unwrap_or(1);
    let mut names: Vec<String> = vec!["psnr".into(), "ssim".into()];
    for c in 1..=channels {
        names.push(format!("psnr_ch{c}"));
        names.push(format!("ssim_ch{c}"));
    }
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    eval_loop(&args.pred, &name_refs, |path, s| {
        let pred = load_image(path)?;
        let gt = load_ground_truth(&args.gt, s)?;
        if pred.channels != channels {
            return Err(ui2i::Error::InvalidArgument(format!("expected {channels} channels, got {}", pred.channels)));
        }
        let sc = pair_scores(&pred, &gt)?;
        let mut v = vec![sc.mean_psnr(), sc.mean_ssim()];
        for c in 0..channels {
            v.push(sc.psnr[c]);
            v.push(sc.ssim[c]);
        }
        Ok(v)
    })
}

fn cmd_synth(args: SynthArgs) -> CliResult<()> {
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let spec = SyntheticUnmixSpec::default();
    let summary = generate_unmix_dataset(&spec, args.n_mixed, args.n_unmixed, args.n_test, seed, &args.out)?;
    emit(&json!({ "event": "synth", "out": args.out, "summary": summary }));
    Ok(())
}

fn cmd_toy(args: ToyArgs) -> CliResult<()> {
    let report = ui2i::toy::toy_report(&args.out)?;
    emit(&json!({ "event": "toy", "out": args.out, "report": report }));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Translate(a) => cmd_translate(a),
        Command::Eval(EvalCommand::Seg(a)) => cmd_eval_seg(a),
        Command::Eval(EvalCommand::Pairs(a)) => cmd_eval_pairs(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Toy(a) => cmd_toy(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
