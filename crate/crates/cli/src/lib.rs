//! Command-line driver: synthesize data, train, evaluate, embed, check
//! gradients and sweep ablations.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/config/IO error, 3 numeric failure.

mod commands;
pub mod dataset;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use modality_lens::config::RunConfig;
use modality_lens::Error;

pub const THREADS_ENV: &str = "MODALITY_LENS_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "modality-lens",
    version,
    about = "Point-cloud lens into a frozen ViT"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; unspecified fields take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed (also seeds lens init and synthetic data).
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output path; its meaning depends on the subcommand.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Config override `dotted.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "K=V")]
    pub overrides: Vec<String>,
    /// Print the content hash of the ViT weights.
    #[arg(long, global = true)]
    pub dump_vit_hash: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic train/test dataset to --out (a directory).
    Synth,
    /// Train the lens; --out is the run directory.
    Train {
        /// Dataset written by `synth`; synthesized in memory when omitted.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Zero-shot evaluation of a checkpoint; --out receives the JSON report.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Dataset written by `synth` (its test split); synthesized when omitted.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Also write a `method,top1,top3,top5` table here.
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
    /// Embed one point cloud (`.xyz` text or `.pclb`) with a checkpoint.
    Embed {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
    },
    /// Autodiff vs central differences on a tiny pipeline; exit 0 iff error < 1e-4.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        batch: usize,
        /// Coordinates probed per tensor.
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
    /// Sweep Perceiver/ViT settings and write a CSV with one row per setting.
    Ablate {
        #[arg(long, value_delimiter = ',', default_values_t = vec![2, 4, 6, 8])]
        depths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![false, true])]
        shares: Vec<bool>,
        /// Latent counts; defaults to the configured value.
        #[arg(long, value_delimiter = ',')]
        latents: Vec<usize>,
        /// Position-embedding settings; defaults to the configured value.
        #[arg(long, value_delimiter = ',')]
        use_pos: Vec<bool>,
        /// Pipeline variants; defaults to the configured value.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        /// Train and evaluate every row, filling the `top1` column.
        #[arg(long)]
        train: bool,
    },
}

/// Failure of a subcommand, mapped onto an exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(Error::Numeric(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

/// Reads `--config`, then applies `--seed` and the `--set` overrides.
pub fn resolve_config(global: &GlobalArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &global.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            RunConfig::from_json(&text, &path.display().to_string())?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg.with_overrides(&global.overrides)?)
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize =
        raw.parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
            Error::Config(format!("{THREADS_ENV}={raw} is not a positive integer"))
        })?;
    // A second call in the same process (tests) finds the pool already built.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    eprint!("{e}");
                    1
                }
                _ => {
                    let rendered = e.to_string();
                    let first = rendered.lines().next().unwrap_or("invalid arguments");
                    eprintln!("{first} (see --help)");
                    1
                }
            };
        }
    };
    match configure_threads().and_then(|_| commands::run(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
