//! `phm` command-line front end. Every subcommand is a plain function so
//! tests can drive it without spawning a process.

pub mod allocate;
pub mod bench;
pub mod project;
pub mod report;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use phm_core::error::PhmError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "phm", version, about = "Progressive PHM compression of dense linear layers")]
pub struct Cli {
    /// Overrides the seed of the command's configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Rendering of tabular output.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Project a dense weight tensor onto B PHM cores.
    Project(project::ProjectArgs),
    /// Build an allocation plan from a layer manifest.
    Allocate(allocate::AllocateArgs),
    /// Pretrain, swap, adapt, collapse and fine-tune the toy model.
    Train(train::TrainArgs),
    /// Time dense against PHM application and count FLOPs.
    Bench(bench::BenchArgs),
    /// Summarize a finished run directory.
    Report(report::ReportArgs),
}

/// Options shared by all subcommands.
#[derive(Debug, Clone, Default)]
pub struct Globals {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub format: Format,
    /// Value of `PHM_THREADS`. Kernels are single threaded, so any value
    /// caps parallelism at one thread.
    pub threads: usize,
}

/// Parses `PHM_THREADS`; unset means 1.
pub fn threads_from_env(value: Option<&str>) -> Result<usize> {
    match value {
        None => Ok(1),
        Some(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(PhmError::Config(format!("PHM_THREADS must be a positive integer, got {s:?}")).into()),
        },
    }
}

pub fn run(cli: Cli, threads: usize) -> Result<()> {
    let globals = Globals { seed: cli.seed, out: cli.out, format: cli.format, threads };
    match cli.command {
        Command::Project(a) => project::run(&a, &globals),
        Command::Allocate(a) => allocate::run(&a, &globals),
        Command::Train(a) => train::run(&a, &globals),
        Command::Bench(a) => bench::run(&a, &globals),
        Command::Report(a) => report::run(&a, &globals),
    }
}

/// Process exit code for an error returned by [`run`].
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<PhmError>() {
        Some(PhmError::Infeasible(_)) => EXIT_INFEASIBLE,
        Some(PhmError::Divergence { .. }) => EXIT_DIVERGENCE,
        _ => EXIT_INPUT,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(PhmError::from)
        .with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Writes `text` to `out`, or to stdout without one.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Fresh sibling directory for assembling `dest`, which must not exist yet
/// unless it is an empty directory.
fn staging_dir(dest: &Path) -> Result<PathBuf> {
    if dest.exists() {
        let empty = dest.is_dir() && fs::read_dir(dest)?.next().is_none();
        if !empty {
            return Err(PhmError::Config(format!("output {} already exists", dest.display())).into());
        }
    }
    let tmp = phm_core::model::checkpoint::staging_path(dest);
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    Ok(tmp)
}

/// Moves a finished staging directory into place.
fn publish(tmp: &Path, dest: &Path) -> Result<()> {
    if dest.is_dir() {
        fs::remove_dir(dest)?;
    }
    fs::rename(tmp, dest).with_context(|| format!("moving results to {}", dest.display()))
}

fn require_out<'a>(g: &'a Globals, what: &str) -> Result<&'a Path> {
    match g.out.as_deref() {
        Some(p) => Ok(p),
        None => bail!(PhmError::Config(format!("{what} needs --out"))),
    }
}
