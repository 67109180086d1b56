//! The `modgrok` command line: train, analyze, ablate, progress and report
//! subcommands over run directories.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use modgrok::ablation::{write_ablation_csv, AblationMode, AblationResult, EvalSplit, SkipFill};
use modgrok::experiment::{
    ablation_suite, analyze, latest_checkpoint, load_run_checkpoint, run_ablation, LoadedCheckpoint, Report,
    ABLATIONS_CSV, ABLATIONS_JSON, PHASES_JSON, PROGRESS_CSV, PROGRESS_JSON,
};
use modgrok::export::write_json;
use modgrok::fourier::KeySubspace;
use modgrok::progress::{segment_phases, sweep, KeySource, PhasePoint};
use modgrok::training::{read_metrics, resume, train_run, RunDirectory};
use modgrok::ExperimentConfig;

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Debug, Parser)]
#[command(name = "modgrok", version, about = "Train and reverse-engineer modular-addition transformers")]
pub struct Cli {
    /// Experiment config (JSON); defaults apply to anything omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory of the subcommand.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model into a run directory.
    Train(TrainArgs),
    /// Fit the Fourier-multiplication circuit to one checkpoint.
    Analyze(AnalyzeArgs),
    /// Measure loss under ablations of one checkpoint.
    Ablate(AblateArgs),
    /// Progress measures over every checkpoint of a run, plus phase boundaries.
    Progress(ProgressArgs),
    /// Merge analysis, ablation and phase outputs into report.json / report.md.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Overrides the number of epochs.
    #[arg(long, conflicts_with = "resume")]
    pub epochs: Option<u64>,
    /// Continue an interrupted run from its newest checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct Source {
    /// A checkpoint directory (`<run>/checkpoints/epoch_<N>`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// A run directory; its newest checkpoint is used.
    #[arg(long, conflicts_with = "checkpoint")]
    pub run: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub source: Source,
    /// Report directory (same as --out).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeName {
    All,
    Restricted,
    Excluded,
    SingleFrequency,
    WlProjectKeep,
    WlProjectNull,
    NeuronPolyReplace,
    NeuronSumRestrict,
    SkipMlp,
    AttnHeadsZero,
    AttnSkipZero,
    AttnLinearize,
    EqSelfAttnZero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SubspaceArg {
    Sum,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FillArg {
    Zero,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long, value_enum, default_value = "all")]
    pub mode: ModeName,
    /// Key frequencies (default: detected from the checkpoint).
    #[arg(long, value_delimiter = ',')]
    pub keys: Option<Vec<usize>>,
    /// Frequency for single-frequency (default: every frequency).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum)]
    pub subspace: Option<SubspaceArg>,
    /// What replaces the MLP output for skip-mlp.
    #[arg(long, value_enum, default_value = "zero")]
    pub fill: FillArg,
    /// Evaluation split (default depends on the mode).
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KeySourceArg {
    Final,
    PerCheckpoint,
}

#[derive(Debug, Args)]
pub struct ProgressArgs {
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub key_source: Option<KeySourceArg>,
    #[arg(long, value_delimiter = ',')]
    pub keys: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory holding analysis / ablation / progress outputs (default: --out).
    #[arg(long)]
    pub dir: Option<PathBuf>,
}

/// Parses `argv` (including the program name), runs it and returns the
/// process exit code: 0 on success, 2 on usage errors, 1 on failures.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    init_logging(cli.quiet);
    let result = match cli.threads {
        Some(0) => Err(anyhow::anyhow!("--threads must be positive")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .context("building thread pool")
            .and_then(|pool| pool.install(|| execute(&cli))),
        None => execute(&cli),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn init_logging(quiet: bool) {
    let level = if quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_target(false)
        .try_init();
}

fn base_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_resolved(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<()> {
    create_dir(dir)?;
    write_json(&dir.join(RESOLVED_CONFIG), cfg)?;
    Ok(())
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    let cfg = base_config(cli)?;
    match &cli.command {
        Command::Train(args) => cmd_train(cli, cfg, args),
        Command::Analyze(args) => cmd_analyze(cli, cfg, args),
        Command::Ablate(args) => cmd_ablate(cli, cfg, args),
        Command::Progress(args) => cmd_progress(cli, cfg, args),
        Command::Report(args) => cmd_report(cli, cfg, args),
    }
}

fn cmd_train(cli: &Cli, mut cfg: ExperimentConfig, args: &TrainArgs) -> anyhow::Result<()> {
    let out = cli.out.clone().unwrap_or_else(|| cfg.outputs.run_dir.clone());
    cfg.outputs.run_dir = out.clone();
    let dir = RunDirectory::new(&out);
    let summary = if args.resume {
        let stored = dir.read_config()?;
        if cli.config.is_some() && stored != cfg.train {
            bail!(
                "the training section of {} differs from {}",
                cli.config.as_ref().unwrap().display(),
                dir.config().display()
            );
        }
        cfg.train = stored;
        write_resolved(&cfg, &out)?;
        resume(&out)?
    } else {
        if let Some(epochs) = args.epochs {
            cfg.train.epochs = epochs;
        }
        cfg.validate()?;
        if dir.config().exists() || dir.metrics().exists() {
            bail!("{} already contains a run; pass --resume to continue it", out.display());
        }
        write_resolved(&cfg, &out)?;
        train_run(&cfg.train, &out)?
    };
    let last = &summary.last;
    info!(
        "finished epoch {}: train loss {:.3e}, test loss {:.3e}, test accuracy {:.4}",
        summary.final_epoch, last.train_loss, last.test_loss, last.test_acc
    );
    Ok(())
}

fn load_source(source: &Source, cfg: &ExperimentConfig) -> anyhow::Result<LoadedCheckpoint> {
    let path = match (&source.checkpoint, &source.run) {
        (Some(ck), _) => ck.clone(),
        (None, Some(run)) => latest_checkpoint(run)?,
        (None, None) => latest_checkpoint(&cfg.outputs.run_dir)?,
    };
    let loaded = load_run_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
    info!("loaded {} (epoch {})", path.display(), loaded.epoch);
    Ok(loaded)
}

/// Adopts the run's training config and picks the output directory.
fn resolve_for_run(
    cli: &Cli,
    cfg: &mut ExperimentConfig,
    run_dir: &Path,
    train: modgrok::TrainConfig,
    explicit_out: Option<&PathBuf>,
) -> PathBuf {
    if cli.seed.is_some_and(|s| s != train.seed) {
        warn!("--seed is ignored; the run was trained with seed {}", train.seed);
    }
    cfg.train = train;
    cfg.outputs.run_dir = run_dir.to_path_buf();
    let out = explicit_out
        .or(cli.out.as_ref())
        .cloned()
        .unwrap_or_else(|| cfg.outputs.resolved_report_dir());
    cfg.outputs.report_dir = out.clone();
    out
}

fn cmd_analyze(cli: &Cli, mut cfg: ExperimentConfig, args: &AnalyzeArgs) -> anyhow::Result<()> {
    let ck = load_source(&args.source, &cfg)?;
    let out = resolve_for_run(cli, &mut cfg, &ck.run_dir, ck.config.clone(), args.report.as_ref());
    write_resolved(&cfg, &out)?;
    let (report, detail) = analyze(ck.epoch, &ck.params, &ck.split, &cfg.analysis)?;
    report.write(&detail, &out)?;
    info!(
        "keys {:?}, residual ratio {:.4}, logit fit FVE {:.3}, {} of {} neurons clustered; wrote {}",
        report.key_frequencies.keys,
        report.wl_residual_ratio,
        report.logit_fit.fve,
        report.neurons_clustered,
        detail.neurons.fits.len(),
        out.display()
    );
    Ok(())
}

fn subspace(arg: Option<SubspaceArg>, default: KeySubspace) -> KeySubspace {
    match arg {
        Some(SubspaceArg::Sum) => KeySubspace::SumDirections,
        Some(SubspaceArg::Full) => KeySubspace::FullBlock,
        None => default,
    }
}

/// The ablations one `ablate` invocation asks for.
pub fn requested_modes(args: &AblateArgs, keys: &[usize], p: usize, default_subspace: KeySubspace) -> Vec<AblationMode> {
    let keys = keys.to_vec();
    let subspace = subspace(args.subspace, default_subspace);
    let fill = match args.fill {
        FillArg::Zero => SkipFill::Zero,
        FillArg::Mean => SkipFill::Mean,
    };
    match args.mode {
        ModeName::All => ablation_suite(&keys, p, subspace),
        ModeName::Restricted => vec![AblationMode::Restricted { keys, subspace }],
        ModeName::Excluded => vec![AblationMode::Excluded { keys, subspace }],
        ModeName::SingleFrequency => match args.k {
            Some(k) => vec![AblationMode::SingleFrequency { k }],
            None => (1..=(p - 1) / 2).map(|k| AblationMode::SingleFrequency { k }).collect(),
        },
        ModeName::WlProjectKeep => vec![AblationMode::WlProjectKeep { keys }],
        ModeName::WlProjectNull => vec![AblationMode::WlProjectNull { keys }],
        ModeName::NeuronPolyReplace => vec![AblationMode::NeuronPolyReplace],
        ModeName::NeuronSumRestrict => vec![AblationMode::NeuronSumRestrict],
        ModeName::SkipMlp => vec![AblationMode::SkipMlp { fill }],
        ModeName::AttnHeadsZero => vec![AblationMode::AttnHeadsZero],
        ModeName::AttnSkipZero => vec![AblationMode::AttnSkipZero],
        ModeName::AttnLinearize => vec![AblationMode::AttnLinearize],
        ModeName::EqSelfAttnZero => vec![AblationMode::EqSelfAttnZero],
    }
}

/// Replaces results with the same mode, parameters and split; keeps the rest.
fn merge_results(mut existing: Vec<AblationResult>, new: Vec<AblationResult>) -> Vec<AblationResult> {
    for r in new {
        match existing
            .iter_mut()
            .find(|e| e.mode == r.mode && e.parameters == r.parameters && e.split == r.split)
        {
            Some(slot) => *slot = r,
            None => existing.push(r),
        }
    }
    existing
}

fn cmd_ablate(cli: &Cli, mut cfg: ExperimentConfig, args: &AblateArgs) -> anyhow::Result<()> {
    let ck = load_source(&args.source, &cfg)?;
    let out = resolve_for_run(cli, &mut cfg, &ck.run_dir, ck.config.clone(), None);
    write_resolved(&cfg, &out)?;
    let (report, detail) = analyze(ck.epoch, &ck.params, &ck.split, &cfg.analysis)?;
    let keys = args.keys.clone().unwrap_or_else(|| report.key_frequencies.keys.clone());
    let split = args.split.map(|s| match s {
        SplitArg::Train => EvalSplit::Train,
        SplitArg::Test => EvalSplit::Test,
    });
    let mut results = Vec::new();
    for mode in requested_modes(args, &keys, ck.config.model.p, cfg.analysis.subspace) {
        let r = run_ablation(&ck.params, &detail, &report, &ck.split, &mode, split)
            .with_context(|| format!("ablation {} ({})", mode.name(), mode.parameters()))?;
        info!(
            "{:<20} {:<24} loss {:.4e} (baseline {:.4e}), accuracy {:.4}",
            r.mode, r.parameters, r.loss, r.baseline_loss, r.accuracy
        );
        results.push(r);
    }
    let json = out.join(ABLATIONS_JSON);
    let existing: Vec<AblationResult> = if json.exists() {
        let text = std::fs::read_to_string(&json).with_context(|| format!("reading {}", json.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", json.display()))?
    } else {
        Vec::new()
    };
    let merged = merge_results(existing, results);
    write_json(&json, &merged)?;
    write_ablation_csv(&merged, &out.join(ABLATIONS_CSV))?;
    Ok(())
}

fn cmd_progress(cli: &Cli, mut cfg: ExperimentConfig, args: &ProgressArgs) -> anyhow::Result<()> {
    let run_dir = args.run.clone().unwrap_or_else(|| cfg.outputs.run_dir.clone());
    let train = RunDirectory::new(&run_dir).read_config()?;
    let out = resolve_for_run(cli, &mut cfg, &run_dir, train, None);
    if let Some(src) = args.key_source {
        cfg.progress.key_source = match src {
            KeySourceArg::Final => KeySource::FinalCheckpoint,
            KeySourceArg::PerCheckpoint => KeySource::PerCheckpoint,
        };
    }
    if let Some(keys) = &args.keys {
        cfg.progress.keys = Some(keys.clone());
    }
    write_resolved(&cfg, &out)?;
    let series = sweep(&run_dir, &cfg.progress)?;
    series.write_csv(&out.join(PROGRESS_CSV))?;
    write_json(&out.join(PROGRESS_JSON), &series)?;
    info!(
        "{} checkpoints measured, {} skipped, keys {:?}",
        series.rows.len(),
        series.skipped.len(),
        series.keys
    );
    let metrics = read_metrics(&RunDirectory::new(&run_dir).metrics())?;
    let points: Vec<PhasePoint> = metrics.iter().map(PhasePoint::from).collect();
    match segment_phases(&points, &cfg.phases) {
        Ok(phases) => {
            info!("phases: {:?}", phases.outcome);
            write_json(&out.join(PHASES_JSON), &phases)?;
        }
        Err(e) => warn!("phase segmentation skipped: {e}"),
    }
    Ok(())
}

fn cmd_report(cli: &Cli, mut cfg: ExperimentConfig, args: &ReportArgs) -> anyhow::Result<()> {
    let input = args
        .dir
        .clone()
        .or_else(|| cli.out.clone())
        .unwrap_or_else(|| cfg.outputs.resolved_report_dir());
    let out = cli.out.clone().unwrap_or_else(|| input.clone());
    cfg.outputs.report_dir = out.clone();
    let report = Report::gather(&input)?;
    for m in &report.missing {
        warn!("{} not found in {}", m, input.display());
    }
    write_resolved(&cfg, &out)?;
    report.write(&out)?;
    info!("wrote {}", out.join("report.md").display());
    Ok(())
}
