//! The `ejection` command-line tool.
//!
//! Exit codes: 0 success, 1 a check failed, 2 bad input, 3 checkpoint or
//! configuration mismatch.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::data::Split;
use crate::error::Error;
use crate::gradcheck::Block;
pub use config::{DatasetKind, FileConfig, Overrides, Preset, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_STATE: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "ejection",
    version,
    about = "Ejection-fraction regression from echocardiography clips"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Model size: tiny, small or full.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset split for eval and predict (TRAIN, VAL or TEST).
    #[arg(long, global = true)]
    pub split: Option<Split>,
    #[arg(long, global = true)]
    pub disable_e2cbd: bool,
    #[arg(long, global = true)]
    pub disable_e2fa: bool,
    /// Generate phantom clips instead of reading a dataset directory.
    #[arg(long, global = true)]
    pub synthetic: bool,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub weight_decay: Option<f64>,
    #[arg(long, global = true)]
    pub f_sel: Option<usize>,
    #[arg(long, global = true)]
    pub stride: Option<usize>,
    /// Always start training windows at frame 0.
    #[arg(long, global = true)]
    pub fixed_start: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write logs and checkpoints.
    Train,
    /// Score a checkpoint on a labelled split.
    Eval,
    /// Predict EF (and chords) for a split or a single raw clip.
    Predict {
        /// A raw `.e3clip` file to predict instead of a dataset split.
        #[arg(long)]
        clip: Option<PathBuf>,
    },
    /// Disk geometry and EF for every study in a tracing file.
    Geo { file: PathBuf },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        /// Random chord configurations for the geometry block.
        #[arg(long, default_value_t = 100)]
        configs: usize,
        /// Use predicted chords equal to the references.
        #[arg(long)]
        zero_loss: bool,
        #[arg(long, hide = true, value_parser = parse_block)]
        corrupt: Option<Block>,
    },
    /// Time forward passes at batch size 1.
    Bench,
}

fn parse_block(s: &str) -> Result<Block, String> {
    match s {
        "geometry" => Ok(Block::Geometry),
        "params" => Ok(Block::ModelParams),
        "input" => Ok(Block::ModelInput),
        _ => Err(format!("unknown block {s:?}")),
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Predict { .. } => "predict",
            Command::Geo { .. } => "geo",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Bench => "bench",
        }
    }
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            preset: self.preset,
            data_dir: self.data_dir.clone(),
            checkpoint: self.checkpoint.clone(),
            out: self.out.clone(),
            split: self.split,
            synthetic: self.synthetic,
            disable_e2cbd: self.disable_e2cbd,
            disable_e2fa: self.disable_e2fa,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            f_sel: self.f_sel,
            stride: self.stride,
            fixed_start: self.fixed_start,
        }
    }
}

/// A command failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn input(e: Error) -> Self {
        Self::new(EXIT_INPUT, e.to_string())
    }

    pub fn state(e: Error) -> Self {
        Self::new(EXIT_STATE, e.to_string())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidState(_) => EXIT_STATE,
            _ => EXIT_INPUT,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new(EXIT_INPUT, e.to_string())
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Reports go to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = if code == EXIT_OK {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32, Failure> {
    let file = match &cli.common.config {
        Some(p) => FileConfig::load(p).map_err(Failure::input)?,
        None => FileConfig::default(),
    };
    let cfg = RunConfig::resolve(cli.command.name(), &file, &cli.common.overrides())
        .map_err(Failure::input)?;
    match &cli.command {
        Command::Train => commands::train(cfg, out),
        Command::Eval => commands::eval(cfg, out),
        Command::Predict { clip } => commands::predict(cfg, clip.as_deref(), out),
        Command::Geo { file } => commands::geo(file, out),
        Command::Gradcheck {
            configs,
            zero_loss,
            corrupt,
        } => commands::gradcheck(cfg, *configs, *zero_loss, *corrupt, out),
        Command::Bench => commands::bench(cfg, out),
    }
}
