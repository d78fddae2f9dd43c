//! Command-line front end: argument parsing, configuration resolution and
//! the pipeline subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod run;
pub mod store;

use std::ffi::OsString;
use std::path::PathBuf;

use clamp_core::models::Profile;
use clamp_core::Embodiment;
use clap::{Args, Parser, Subcommand};

use config::{Overrides, PipelineConfig, Resolved};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "clamp", version, about = "Haptic material perception pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config and every per-stage seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_profile)]
    pub profile: Option<Profile>,
    #[arg(long, global = true, value_parser = parse_embodiment)]
    pub embodiment: Option<Embodiment>,
    /// Root under which default input and output directories live.
    #[arg(long, global = true, env = "CLAMP_DATA_ROOT")]
    pub data_root: Option<PathBuf>,
    /// Replace existing output directories.
    #[arg(long, global = true)]
    pub overwrite: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: clamp_core::ClampError| e.to_string())
}

fn parse_embodiment(s: &str) -> Result<Embodiment, String> {
    s.parse().map_err(|e: clamp_core::ClampError| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic recording sessions, one directory per object.
    Synth {
        /// Number of objects (cycling through the materials); defaults to
        /// materials × objects_per_material.
        #[arg(long)]
        objects: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Load sessions and write the streams aligned onto the 50 Hz grid.
    Ingest {
        #[arg(long, visible_alias = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the contact-window feature store from sessions.
    Featurize {
        #[arg(long, visible_alias = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply the exclusion rules; writes exclusion.csv and the retained store.
    Filter {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the haptic encoder.
    TrainHaptic {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the decision-forest baseline on summary statistics.
    TrainForest {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Query visual priors and train the fusion network on a frozen encoder.
    TrainFusion {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapt encoder and fusion jointly to a (new-embodiment) feature store.
    Finetune {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        fusion: Option<PathBuf>,
        /// Fraction of the training pool to use, e.g. 0.07.
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions: either a model on a feature store, or existing
    /// prediction and label CSV files.
    Eval(EvalArgs),
    /// Classify one feature tensor.
    Predict {
        #[arg(long)]
        tensor: PathBuf,
        /// Encoder checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fusion checkpoint; needs --prior.
        #[arg(long, requires = "prior")]
        fusion: Option<PathBuf>,
        /// JSON file with a visual prior (`{"probs": [...]}`).
        #[arg(long)]
        prior: Option<PathBuf>,
        /// `eval`, `sorting` or explicit `p1,p2`.
        #[arg(long, default_value = "eval")]
        uncertainty: String,
    },
    /// Train a soft/hard head on the frozen encoder.
    ComplianceHead {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, requires = "labels", conflicts_with_all = ["features", "encoder", "fusion"])]
    pub preds: Option<PathBuf>,
    #[arg(long, requires = "preds")]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Fusion run directory (fusion.ckpt and priors.json); haptic-only
    /// when omitted.
    #[arg(long)]
    pub fusion: Option<PathBuf>,
    /// Which part of the split to score.
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test", "all"])]
    pub part: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides { seed: self.seed, profile: self.profile, embodiment: self.embodiment }
    }

    pub fn resolve(&self) -> CliResult<Resolved> {
        let cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        Resolved::new(&cfg, &self.overrides())
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

/// Runs the CLI and returns the process exit code: 0 on success, 1 for bad
/// arguments, configuration or input, 2 for runtime failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    init_logging(cli.global.verbose);
    match commands::dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
