//! Operator surface: `prepare`, `train`, `eval`, `augment`, `sweep`
//! subcommands over a declarative TOML config, plus the hidden
//! `check-grads` diagnostic.
//!
//! Exit codes: 0 success, 1 user error (inputs, config), 2 internal error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cadirec_core::config::Config;
use cadirec_core::error::CadirecError;
use cadirec_core::Real;

mod commands;
mod manifest;

#[derive(Parser)]
#[command(name = "cadirec", version, about = "Sequential recommender with diffusion-generated contrastive views")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file; defaults apply for every key it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override single keys, e.g. --set train.alpha=0.4 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Ablation preset: wo-cg | wo-benc | wo-ld | wo-lcl (repeatable).
    #[arg(long = "ablate", value_name = "PRESET")]
    ablations: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest raw interactions (or synthesize a Markov corpus), filter,
    /// and persist a prepared corpus directory.
    Prepare {
        /// Raw interaction file: user,item,timestamp (csv or tsv).
        #[arg(long, conflicts_with = "synthetic")]
        input: Option<PathBuf>,
        /// Input format.
        #[arg(long, default_value = "csv")]
        format: String,
        /// Generate a synthetic corpus instead: markov | block | cycle.
        #[arg(long)]
        synthetic: Option<String>,
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 20)]
        vocab: usize,
        /// Interest blocks for the block corpus (must divide vocab).
        #[arg(long, default_value_t = 8)]
        blocks: usize,
        /// Cross-block jump probability for the block corpus.
        #[arg(long, default_value_t = 0.02)]
        jump: f64,
        #[arg(long, default_value_t = 10)]
        len_min: usize,
        #[arg(long, default_value_t = 30)]
        len_max: usize,
        /// Dirichlet concentration of the random transition rows.
        #[arg(long, default_value_t = 0.3)]
        concentration: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Skip 5-core filtering (synthetic corpora skip it by default).
        #[arg(long)]
        no_filter: bool,
        /// Output corpus directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a prepared corpus.
    Train {
        /// Prepared corpus directory (from `prepare`).
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Resume from an existing checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run directory for manifest, checkpoint, and logs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint with full-catalog leave-one-out ranking.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Which held-out target to rank: valid | test.
        #[arg(long, default_value = "test")]
        stage: String,
        /// Rank against the catalog minus the user's seen items.
        #[arg(long)]
        exclude_seen: bool,
        /// Sequence-length bucket upper bounds, e.g. 5,20.
        #[arg(long, value_delimiter = ',')]
        groups: Vec<usize>,
        /// Write the JSON report here (printed to stdout regardless).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate augmented view pairs and dump them as JSON lines.
    Augment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Substitution ratio; defaults to the checkpoint's train.rho.
        #[arg(long)]
        rho: Option<f64>,
        /// Number of users to dump (front of the split); all when omitted.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value_t = 99)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid sweep over alpha × beta × rho × seeds with a ranked results table.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        alpha: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        beta: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        rho: Vec<f64>,
        /// Seeds to repeat each cell with.
        #[arg(long, value_delimiter = ',', default_value = "42")]
        seeds: Vec<u64>,
        /// Parallel worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Keep each cell's checkpoint file.
        #[arg(long)]
        save_checkpoints: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytic gradients against central differences (diagnostic).
    #[command(hide = true, name = "check-grads")]
    CheckGrads {
        #[arg(long, default_value_t = 17)]
        seed: u64,
        /// Write the JSON reports here instead of stdout only.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// 0 = ok, 1 = user error, 2 = internal error.
fn exit_code_for(err: &CadirecError) -> u8 {
    match err {
        CadirecError::Parse { .. }
        | CadirecError::EmptyCorpus(_)
        | CadirecError::EmptyAfterFilter
        | CadirecError::Config(_)
        | CadirecError::Checkpoint(_)
        | CadirecError::Io(_) => 1,
        CadirecError::IdOutOfRange { .. }
        | CadirecError::Contract(_)
        | CadirecError::NonFiniteLoss { .. }
        | CadirecError::Serde(_) => 2,
    }
}

fn load_config(args: &ConfigArgs) -> Result<Config, CadirecError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            toml::from_str(&text)
                .map_err(|e| CadirecError::Config(format!("bad config file: {e}")))?
        }
        None => Config::default(),
    };
    for ov in &args.overrides {
        let (k, v) = ov.split_once('=').ok_or_else(|| {
            CadirecError::Config(format!("override {ov:?} is not KEY=VALUE"))
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    for preset in &args.ablations {
        cfg.apply_ablation(preset)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_format(s: &str) -> Result<cadirec_core::corpus::InputFormat, CadirecError> {
    match s {
        "csv" => Ok(cadirec_core::corpus::InputFormat::Csv),
        "tsv" => Ok(cadirec_core::corpus::InputFormat::Tsv),
        other => Err(CadirecError::Config(format!(
            "unknown format {other:?} (csv|tsv)"
        ))),
    }
}

fn run(cli: Cli) -> Result<(), CadirecError> {
    match cli.command {
        Command::Prepare {
            input,
            format,
            synthetic,
            users,
            vocab,
            blocks,
            jump,
            len_min,
            len_max,
            concentration,
            seed,
            no_filter,
            out,
        } => commands::prepare(commands::PrepareArgs {
            input,
            format: parse_format(&format)?,
            synthetic,
            users,
            vocab,
            blocks,
            jump,
            len_range: (len_min, len_max),
            concentration,
            seed,
            no_filter,
            out,
        }),
        Command::Train {
            data,
            config,
            resume,
            out,
        } => {
            let cfg = load_config(&config)?;
            commands::train::<Real>(&data, cfg, resume.as_deref(), &out)
        }
        Command::Eval {
            checkpoint,
            data,
            stage,
            exclude_seen,
            groups,
            out,
        } => commands::eval::<Real>(&checkpoint, &data, &stage, exclude_seen, &groups, out.as_deref()),
        Command::Augment {
            checkpoint,
            data,
            rho,
            count,
            seed,
            out,
        } => commands::augment::<Real>(&checkpoint, &data, rho, count, seed, &out),
        Command::Sweep {
            data,
            config,
            alpha,
            beta,
            rho,
            seeds,
            jobs,
            save_checkpoints,
            out,
        } => {
            let cfg = load_config(&config)?;
            commands::sweep::<Real>(commands::SweepArgs {
                data,
                base: cfg,
                alpha,
                beta,
                rho,
                seeds,
                jobs: jobs.max(1),
                save_checkpoints,
                out,
            })
        }
        Command::CheckGrads { seed, out } => commands::check_grads(seed, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// Shared path helpers used by the command implementations.
pub(crate) fn ensure_dir(p: &Path) -> Result<(), CadirecError> {
    std::fs::create_dir_all(p)?;
    Ok(())
}
