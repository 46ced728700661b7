//! `tgcl`: preprocess captures, synthesize data, train, evaluate and export
//! embeddings.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (missing or invalid
//! inputs), 3 runtime error.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use tgcl_core::eval::{reports_to_toml, Level, LevelSelection};
use tgcl_core::ingest::{preprocess_manifest, DatasetManifest, PreprocessOptions, PreprocessSummary, Split};
use tgcl_core::model::{load_checkpoint, save_checkpoint};
use tgcl_core::synth::{synth_dataset, write_corpus, SynthConfig};
use tgcl_core::{Dataset, Error, ErrorClass, Profile, TrainConfig, TrainState, Trainer};

#[derive(Parser)]
#[command(name = "tgcl", version, about = "Encrypted traffic classification with byte-level traffic graphs")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn labeled captures into a dataset file.
    Preprocess(PreprocessArgs),
    /// Generate a labeled synthetic dataset.
    Synth(SynthArgs),
    /// Train one model for both packet and flow classification.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Write flow or packet embeddings as tab-separated text.
    Export(ExportArgs),
    /// Print the training configuration of a profile.
    Config(ConfigArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Directory with one subdirectory of captures per category, or with a
    /// manifest.toml.
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    input: Option<PathBuf>,
    /// Manifest listing captures and labels; paths are relative to its directory.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "vpn")]
    profile: Profile,
    #[arg(long)]
    out: PathBuf,
    /// Seed of the train/test split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = tgcl_core::graphs::DEFAULT_PMI_WINDOW)]
    pmi_window: usize,
    /// Fraction of each category's flows put in the training split.
    #[arg(long, default_value_t = 0.9)]
    split_ratio: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    flows_per_class: usize,
    /// Dataset file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Preprocessing profile applied to the generated captures.
    #[arg(long, default_value = "vpn")]
    profile: Profile,
    /// Spread each flow's packets over this many seconds.
    #[arg(long)]
    span_seconds: Option<f64>,
    #[arg(long, default_value_t = 4)]
    min_packets: usize,
    #[arg(long, default_value_t = 10)]
    max_packets: usize,
    /// Also write the raw captures and a manifest into this directory.
    #[arg(long)]
    pcap_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Configuration file (`key = value` lines); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Write the full resumable training state here.
    #[arg(long)]
    state: Option<PathBuf>,
    /// Write one tab-separated line per optimizer step here.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from a saved training state.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    /// Stop after this many optimizer steps (the state can be resumed).
    #[arg(long)]
    max_steps: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "both")]
    level: LevelSelection,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Write the reports as TOML here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "flow")]
    level: Level,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long, default_value = "vpn")]
    profile: Profile,
}

/// Bad arguments that clap cannot detect on its own.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// `train` gets one flag per configuration key.
fn command() -> clap::Command {
    Cli::command().mut_subcommand("train", |mut cmd| {
        for key in TrainConfig::KEYS {
            let help = format!("Override the `{key}` configuration key");
            cmd = cmd.arg(
                Arg::new(key)
                    .long(flag_name(key))
                    .value_name("VALUE")
                    .help(help)
                    .conflicts_with("resume"),
            );
        }
        cmd
    })
}

fn main() -> ExitCode {
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let overrides = matches.subcommand_matches("train");
    match run(cli.command, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}

/// The error chain joined by `: `, skipping causes the message above
/// already spells out.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e.class() {
                ErrorClass::Data => 2,
                ErrorClass::Runtime => 3,
            };
        }
    }
    3
}

fn run(command: Command, train_matches: Option<&ArgMatches>) -> Result<()> {
    match command {
        Command::Preprocess(args) => preprocess(args),
        Command::Synth(args) => synth(args),
        Command::Train(args) => train(args, train_matches.expect("train subcommand")),
        Command::Evaluate(args) => evaluate(args),
        Command::Export(args) => export(args),
        Command::Config(args) => {
            print!("{}", TrainConfig::for_profile(args.profile).to_text());
            Ok(())
        }
    }
}

fn preprocess_options(profile: Profile, seed: u64, pmi_window: usize, split_ratio: f64) -> Result<PreprocessOptions> {
    if pmi_window < 2 || pmi_window > u16::MAX as usize {
        return Err(Usage(format!("--pmi-window must lie in [2, 65535], got {pmi_window}")).into());
    }
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(Usage(format!("--split-ratio must lie in (0, 1), got {split_ratio}")).into());
    }
    Ok(PreprocessOptions {
        pmi_window,
        split_ratio,
        ..PreprocessOptions::for_profile(profile, seed)
    })
}

fn save_dataset(dataset: &Dataset, summary: &PreprocessSummary, out: &Path) -> Result<()> {
    dataset
        .save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    print!("{summary}");
    println!("wrote {} flows to {}", dataset.flows.len(), out.display());
    Ok(())
}

fn preprocess(args: PreprocessArgs) -> Result<()> {
    let opts = preprocess_options(args.profile, args.seed, args.pmi_window, args.split_ratio)?;
    let (manifest, base) = match (&args.input, &args.manifest) {
        (Some(dir), _) => {
            if !dir.is_dir() {
                return Err(Error::Io {
                    path: dir.clone(),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
                }
                .into());
            }
            (DatasetManifest::discover(dir).map_err(Error::from)?, dir.clone())
        }
        (None, Some(file)) => {
            let base = file.parent().map(Path::to_path_buf).unwrap_or_default();
            (DatasetManifest::load(file).map_err(Error::from)?, base)
        }
        (None, None) => unreachable!("clap requires one input"),
    };
    let (dataset, summary) = preprocess_manifest(&manifest, &base, &opts).map_err(Error::from)?;
    save_dataset(&dataset, &summary, &args.out)
}

fn synth(args: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        classes: args.classes,
        flows_per_class: args.flows_per_class,
        seed: args.seed,
        min_packets: args.min_packets,
        max_packets: args.max_packets,
        span_seconds: args.span_seconds,
    };
    cfg.validate().map_err(Usage)?;
    let opts = PreprocessOptions::for_profile(args.profile, args.seed);
    if let Some(dir) = &args.pcap_dir {
        let manifest = write_corpus(&cfg, dir)?;
        println!("wrote captures and {}", manifest.display());
    }
    let (dataset, summary) = synth_dataset(&cfg, &opts).map_err(Error::from)?;
    save_dataset(&dataset, &summary, &args.out)
}

fn train_config(args: &TrainArgs, matches: &ArgMatches) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?;
            TrainConfig::from_text(&text)
                .map_err(|msg| Error::from(tgcl_core::TrainError::Config(format!("{}: {msg}", path.display()))))?
        }
        None => TrainConfig::default(),
    };
    // `profile` resets the other keys, so it goes first.
    let mut keys: Vec<&str> = TrainConfig::KEYS.to_vec();
    keys.sort_by_key(|k| *k != "profile");
    for key in keys {
        if let Some(value) = matches.get_one::<String>(key) {
            cfg.set(key, value)
                .map_err(|msg| Usage(format!("--{}: {msg}", flag_name(key))))?;
        }
    }
    cfg.validate().map_err(Usage)?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn train(args: TrainArgs, matches: &ArgMatches) -> Result<()> {
    let dataset = Dataset::load(&args.dataset)?;
    let mut trainer = match &args.resume {
        Some(path) => Trainer::resume(&dataset, TrainState::load(path)?).map_err(Error::from)?,
        None => Trainer::new(&dataset, train_config(&args, matches)?).map_err(Error::from)?,
    };

    let mut log = match &args.log {
        Some(path) if args.resume.is_some() => {
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .with_context(|| format!("opening {}", path.display()))?;
            Some(BufWriter::new(file))
        }
        Some(path) => Some(create(path)?),
        None => None,
    };
    if let Some(w) = log.as_mut() {
        if trainer.state().step == 0 {
            writeln!(w, "{}", tgcl_core::train::LOG_HEADER)?;
        }
    }
    let limit = args.max_steps.unwrap_or(u64::MAX);
    let mut taken = 0;
    let mut last = None;
    while taken < limit {
        let Some(record) = trainer.step().map_err(Error::from)? else {
            break;
        };
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", record.tsv())?;
        }
        last = Some(record);
        taken += 1;
    }
    if let Some(mut w) = log {
        w.flush()?;
    }

    let state = trainer.state();
    save_checkpoint(&state.params, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(path) = &args.state {
        state.save(path).with_context(|| format!("writing {}", path.display()))?;
    }
    println!(
        "step {}/{} (epoch {}/{})",
        state.step,
        trainer.total_steps(),
        state.epoch,
        trainer.config().epochs
    );
    if let Some(r) = last {
        println!("last step loss {:.6}", r.total);
    }
    if let Some(best) = state.best {
        println!("best epoch mean loss {:.6} at step {}", best.loss, best.step);
    }
    println!("wrote checkpoint {}", args.out.display());
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let params = load_checkpoint(&args.checkpoint)?;
    let dataset = Dataset::load(&args.dataset)?;
    let reports = tgcl_core::evaluate(&params, &dataset, args.split, args.level).map_err(Error::from)?;
    for (i, r) in reports.iter().enumerate() {
        if i > 0 {
            println!();
        }
        print!("{r}");
    }
    if let Some(path) = &args.report {
        std::fs::write(path, reports_to_toml(&reports)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn export(args: ExportArgs) -> Result<()> {
    let params = load_checkpoint(&args.checkpoint)?;
    let dataset = Dataset::load(&args.dataset)?;
    let mut out = create(&args.out)?;
    let rows = tgcl_core::export_embeddings(&params, &dataset, args.split, args.level, &mut out).map_err(Error::from)?;
    out.flush()?;
    println!("wrote {rows} {} embeddings to {}", args.level, args.out.display());
    Ok(())
}
