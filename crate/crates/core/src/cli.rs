//! Command-line front end. Exit codes: 0 success, 2 usage or configuration
//! error, 3 runtime abort.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use crate::checkpoint::Checkpoint;
use crate::config::{Ablation, TrainConfig};
use crate::dataio::{ingest, prepare, synthesize, InputFormat, SplitDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, export_embeddings, EmbeddingView, Stage};
use crate::reportgen::{ablation_table, append_record, read_records, RunRecord};
use crate::theory::{run_checks, sample_weights, scaling_distribution_check, write_outputs};
use crate::trainer::{restore, train};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "dcrec", version, about = "Debiased contrastive sequential recommender")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, metrics and loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint; prints metrics JSON.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic interaction log.
    Synthesize(SynthesizeArgs),
    /// Run the gradient-analysis checks and write curves and bands.
    TheoryCheck(TheoryArgs),
    /// Export an item embedding view as TSV.
    ExportEmbeddings(ExportArgs),
    /// Build ablation tables from run records.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` config file; may also set `data` and `out`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// One of t-cl, c-cl, cl, adaptive-cl.
    #[arg(long)]
    pub ablate: Option<String>,
    /// Override a config key, e.g. `--set tau=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Append a run record to this JSONL file.
    #[arg(long)]
    pub records: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// `test` or `valid`.
    #[arg(long, default_value = "test")]
    pub stage: String,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long, default_value_t = 2000)]
    pub users: usize,
    #[arg(long, default_value_t = 1000)]
    pub items: usize,
    #[arg(long = "mean-len", default_value_t = 12)]
    pub mean_len: usize,
    #[arg(long, default_value_t = 0.5)]
    pub conformity: f64,
    #[arg(long, default_value_t = 1.1)]
    pub zipf: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = crate::theory::FIGURE_TAU)]
    pub tau: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long = "mu-c", default_value_t = 0.5)]
    pub mu_c: f64,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    #[arg(long, default_value_t = 10000)]
    pub samples: usize,
    /// Exit with status 1 if any check fails.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// h_table, x, z or fused.
    #[arg(long)]
    pub view: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// A config file plus the run-level `data` and `out` keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFile {
    pub config: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn parse_run_file(text: &str, base: &Path) -> Result<RunFile> {
    let mut rest = String::new();
    let (mut data, mut out) = (None, None);
    for line in text.lines() {
        let body = line.split('#').next().unwrap_or("").trim();
        match body.split_once('=') {
            Some((k, v)) if k.trim() == "data" => data = Some(base.join(v.trim().trim_matches('"'))),
            Some((k, v)) if k.trim() == "out" => out = Some(base.join(v.trim().trim_matches('"'))),
            _ => {
                rest.push_str(line);
                rest.push('\n');
            }
        }
    }
    Ok(RunFile { config: TrainConfig::from_text(&rest)?, data, out })
}

fn load_split(data: &Path, config: &TrainConfig) -> Result<(SplitDataset, crate::dataio::IdMap)> {
    let log = ingest(data, InputFormat::Tsv)?;
    let split = prepare(&log, config.t_max, config.min_length)?;
    if !split.drop_report.dropped_users.is_empty() {
        info!("dropped {} users with too few interactions", split.drop_report.dropped_users.len());
    }
    Ok((split, log.id_map))
}

fn dataset_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| "dataset".to_string(), |s| s.to_string_lossy().into_owned())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut run = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            parse_run_file(&text, path.parent().unwrap_or(Path::new(".")))?
        }
        None => RunFile { config: TrainConfig::default(), data: None, out: None },
    };
    for kv in &args.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        run.config.set(k, v)?;
    }
    if let Some(seed) = args.seed {
        run.config.seed = seed;
    }
    if let Some(a) = &args.ablate {
        run.config.ablation = a.parse::<Ablation>()?;
    }
    run.config.validate()?;
    let data = args.data.or(run.data).ok_or_else(|| Error::Config("no dataset given (--data or `data =` in the config)".into()))?;
    let out = args.out.or(run.out).unwrap_or_else(|| PathBuf::from("dcrec_out"));
    let (split, ids) = load_split(&data, &run.config)?;
    let outcome = train(&run.config, &split, &ids, Some(&out))?;
    if let Some(records) = &args.records {
        let record = RunRecord::new(&run.config, &dataset_name(&data), outcome.test.clone(), outcome.wall_clock_secs);
        append_record(records, &record)?;
    }
    let summary = serde_json::json!({
        "out": out.display().to_string(),
        "best_epoch": outcome.best_epoch,
        "valid": outcome.valid,
        "test": outcome.test,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn load_for_checkpoint(checkpoint: &Path, data: &Path) -> Result<(Checkpoint, SplitDataset)> {
    let ck = Checkpoint::load(checkpoint)?;
    let (split, ids) = load_split(data, &ck.config)?;
    if ids != ck.id_map {
        return Err(Error::Checkpoint("dataset ids do not match the checkpoint's training data".into()));
    }
    Ok((ck, split))
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let stage = match args.stage.as_str() {
        "test" => Stage::Test,
        "valid" => Stage::Valid,
        other => return Err(Error::Config(format!("unknown stage {other:?}"))),
    };
    let (ck, split) = load_for_checkpoint(&args.checkpoint, &args.data)?;
    let snapshot = restore(&ck, &split)?;
    let report = evaluate(&snapshot, &split, stage)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_synthesize(args: SynthesizeArgs) -> Result<()> {
    let spec = SyntheticSpec {
        user_count: args.users,
        item_count: args.items,
        mean_length: args.mean_len,
        conformity_fraction: args.conformity,
        popularity_exponent: args.zipf,
        seed: args.seed,
    };
    let log = synthesize(&spec)?;
    log.write(&args.out)?;
    println!("wrote {} interactions to {}", log.log.interactions.len(), args.out.display());
    Ok(())
}

fn cmd_theory(args: TheoryArgs) -> Result<bool> {
    if !(args.tau > 0.0) {
        return Err(Error::InvalidArgument(format!("--tau must be > 0, got {}", args.tau)));
    }
    let summary = run_checks(args.tau, args.seed)?;
    let weights = sample_weights(args.samples, args.mu_c, args.sigma, args.seed)?;
    let scaling = scaling_distribution_check(&weights, args.mu_c, args.sigma, args.tau)?;
    write_outputs(&args.out, &summary, &scaling)?;
    for c in &summary.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let bands = scaling.all_within_f1_band && scaling.all_within_f2_band && scaling.mean_within_tolerance;
    println!("{} scaling_bands: mean ω·f2(0) = {:.5}", if bands { "PASS" } else { "FAIL" }, scaling.mean_scaled_f2_at_zero);
    Ok(summary.passed() && bands)
}

fn cmd_export(args: ExportArgs) -> Result<()> {
    let view: EmbeddingView = args.view.parse()?;
    let (ck, split) = load_for_checkpoint(&args.checkpoint, &args.data)?;
    let snapshot = restore(&ck, &split)?;
    let tsv = export_embeddings(&snapshot, view, &ck.id_map.items)?;
    std::fs::write(&args.out, tsv).map_err(|e| Error::io(&args.out, e))
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let records = read_records(&args.records)?;
    let table = ablation_table(&records)?;
    table.write(&args.out)?;
    print!("{}", table.to_markdown());
    Ok(())
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Synthesize(a) => cmd_synthesize(a),
        Command::TheoryCheck(a) => {
            let strict = a.strict;
            match cmd_theory(a) {
                Ok(false) if strict => return 1,
                other => other.map(|_| ()),
            }
        }
        Command::ExportEmbeddings(a) => cmd_export(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
