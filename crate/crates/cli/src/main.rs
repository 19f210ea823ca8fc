use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gridgp::{convert_units, replay, Error, Experiment, Manifest, Overrides, SignalFrame, Stage, UnitSystem};
use rayon::prelude::*;

/// Gaussian-process inference of grid dynamics from synchrophasor data.
#[derive(Parser)]
#[command(name = "gridgp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the scenario and write truth and measured frames.
    Simulate(RunArgs),
    /// Filter the measured data and fit the eigeninput covariance.
    EstimateAlpha(RunArgs),
    /// Posterior of the query channels plus result and summary tables.
    Infer(RunArgs),
    /// Rank buses by filtered posterior injection energy around the event.
    Locate(RunArgs),
    /// Fill the configured gaps of one metered channel.
    Impute(RunArgs),
    /// Speed from a metered angle channel.
    Differentiate(RunArgs),
    /// Recompute summary metrics from the stored result table.
    Report(RunArgs),
    /// Run several stages in order (all applicable stages by default).
    Run {
        #[command(flatten)]
        args: RunArgs,
        /// Stage to run; repeat for several.
        #[arg(long = "stage")]
        stages: Vec<String>,
    },
    /// Run independent configs concurrently, each into its own output directory.
    Batch {
        configs: Vec<PathBuf>,
    },
    /// Re-run a recorded manifest and compare artifact hashes.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a frame's channels to another unit family.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum)]
        to: Units,
        #[arg(long, default_value_t = 60.0)]
        base_freq_hz: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Units {
    /// rad, rad/s, rad/s².
    Internal,
    /// deg, Hz, Hz/s.
    Display,
    /// rad, per-unit speed.
    PerUnit,
}

fn load(args: &RunArgs) -> gridgp::Result<Experiment> {
    Experiment::load(
        &args.config,
        &Overrides {
            seed: args.seed,
            out: args.out.clone(),
        },
    )
}

fn single(args: &RunArgs, stage: Stage) -> gridgp::Result<()> {
    let exp = load(args)?;
    exp.run(&[stage])?;
    println!("{stage}: wrote {}", exp.out.display());
    Ok(())
}

fn run_all(args: &RunArgs, names: &[String]) -> gridgp::Result<Manifest> {
    let exp = load(args)?;
    let stages = if names.is_empty() {
        exp.default_stages()
    } else {
        names.iter().map(|s| s.parse()).collect::<gridgp::Result<Vec<Stage>>>()?
    };
    exp.run(&stages)
}

fn batch(configs: &[PathBuf]) -> gridgp::Result<()> {
    let results: Vec<(PathBuf, gridgp::Result<()>)> = configs
        .par_iter()
        .map(|c| {
            let args = RunArgs {
                config: c.clone(),
                out: None,
                seed: None,
            };
            (c.clone(), run_all(&args, &[]).map(|_| ()))
        })
        .collect();
    let mut first = None;
    for (c, r) in results {
        match r {
            Ok(()) => println!("{}: ok", c.display()),
            Err(e) => {
                eprintln!("{}: {e}", c.display());
                first.get_or_insert(e);
            }
        }
    }
    first.map_or(Ok(()), Err)
}

fn convert(input: &Path, output: &Path, to: Units, base_freq_hz: f64) -> gridgp::Result<()> {
    let frame = SignalFrame::read(input)?;
    let system = match to {
        Units::Internal => UnitSystem::Internal,
        Units::Display => UnitSystem::Display,
        Units::PerUnit => UnitSystem::PerUnit,
    };
    convert_units(&frame, system, base_freq_hz)?.write(output)
}

fn execute(cli: Cli) -> gridgp::Result<()> {
    match cli.command {
        Command::Simulate(a) => single(&a, Stage::Simulate),
        Command::EstimateAlpha(a) => single(&a, Stage::EstimateAlpha),
        Command::Infer(a) => single(&a, Stage::Infer),
        Command::Locate(a) => single(&a, Stage::Locate),
        Command::Impute(a) => single(&a, Stage::Impute),
        Command::Differentiate(a) => single(&a, Stage::Differentiate),
        Command::Report(a) => single(&a, Stage::Report),
        Command::Run { args, stages } => {
            let manifest = run_all(&args, &stages)?;
            for (name, hash) in &manifest.artifacts {
                println!("{name} {hash}");
            }
            Ok(())
        }
        Command::Batch { configs } => batch(&configs),
        Command::Replay { manifest, out } => {
            let report = replay(&manifest, &out)?;
            if report.identical() {
                println!("replay identical: {} artifacts", report.manifest.artifacts.len());
                Ok(())
            } else {
                Err(Error::Invalid(format!("replay differs in {}", report.mismatched.join(", "))))
            }
        }
        Command::Convert {
            input,
            output,
            to,
            base_freq_hz,
        } => convert(&input, &output, to, base_freq_hz),
    }
}

fn exit_code(e: &Error) -> u8 {
    let mut inner = e;
    while let Error::Stage { source, .. } = inner {
        inner = source;
    }
    if e.is_validation() || matches!(inner, Error::Io(_) | Error::Json(_)) {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = std::env::var("GRIDGP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("cannot size the worker pool: {e}");
        }
    }
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
