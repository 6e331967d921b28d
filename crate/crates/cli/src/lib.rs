//! Command-line driver: dataset simulation, dictionary pre-training,
//! training of the threshold-map source, reconstruction and evaluation.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod png;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use error::{CliError, CliResult};

pub const THREADS_VAR: &str = "CONVSYNTH_THREADS";

#[derive(Debug, Parser)]
#[command(name = "convsynth", version, about = "Convolutional synthesis reconstruction with adaptive threshold maps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/val/test phantoms and acquisitions.
    Simulate(CommonArgs),
    /// Learn a filter bank from high-passed training targets.
    PretrainDict(CommonArgs),
    /// Train the threshold-map source through the unrolled solver.
    Train(CommonArgs),
    /// Reconstruct samples and export maps, codes and objective traces.
    Reconstruct(CommonArgs),
    /// Masked PSNR/SSIM of every method over a split.
    Evaluate(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed of the stage being run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to the matching entry of `paths`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    fn args(&self) -> &CommonArgs {
        match self {
            Command::Simulate(a) | Command::PretrainDict(a) | Command::Train(a) | Command::Reconstruct(a) | Command::Evaluate(a) => a,
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var(THREADS_VAR) else { return Ok(()) };
    let n: usize = v.parse().map_err(|_| error::config_error(format!("{THREADS_VAR}={v:?} is not a thread count")))?;
    // A pool that already exists (repeated calls in one process) is kept.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cmd: &Command) -> CliResult<String> {
    configure_threads()?;
    let a = cmd.args();
    let loaded = config::load(&a.config)?;
    let paths = &loaded.config.paths;
    let default = match cmd {
        Command::Simulate(_) => &paths.dataset,
        Command::PretrainDict(_) => &paths.dictionary,
        Command::Train(_) => &paths.checkpoint,
        Command::Reconstruct(_) => &paths.reconstruction,
        Command::Evaluate(_) => &paths.evaluation,
    };
    let out = a.out.clone().unwrap_or_else(|| loaded.resolve(default));
    match cmd {
        Command::Simulate(_) => commands::simulate(&loaded, a.seed, &out),
        Command::PretrainDict(_) => commands::pretrain_dict(&loaded, a.seed, &out),
        Command::Train(_) => commands::train(&loaded, a.seed, &out),
        Command::Reconstruct(_) => commands::reconstruct(&loaded, a.seed, &out),
        Command::Evaluate(_) => commands::evaluate(&loaded, a.seed, &out),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { error::EXIT_CONFIG } else { 0 };
        }
    };
    match run(&cli.command) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
