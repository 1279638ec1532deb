use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use piconet_cli::{execute, parse_config, replay, CliError, Command, RunRequest};

#[derive(Parser)]
#[command(name = "piconet", version, about = "Minimum-energy bounds and energy-delay scheduling for a body-area piconet")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `[output] dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed; overrides `[run] seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Sub {
    /// Per-mode success probability and goodput over an SNR grid.
    PhyCurves(Common),
    /// Lower, optimized upper and unoptimized upper minimum-energy bounds over a rate list.
    Bounds(Common),
    /// Bounds at the configured sensors' arrival rates.
    MinEnergy(Common),
    /// One episode per policy curve and V.
    Simulate(Common),
    /// Replicated energy-delay tradeoff per policy curve.
    Sweep(Common),
    /// Rerun a manifest and compare output hashes.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn set_jobs(jobs: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Other(e.to_string()))?;
    }
    Ok(())
}

fn run_common(command: Command, c: Common) -> Result<(), CliError> {
    set_jobs(c.jobs)?;
    let mut config = parse_config(&c.config)?;
    let config_text = std::fs::read_to_string(&c.config)?;
    if let Some(seed) = c.seed {
        config.run.seed = seed;
    }
    let out_dir = c.out.or_else(|| config.output.dir.clone().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("."));
    let config_file = c.config.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let report = execute(&RunRequest { command, config, config_text, config_file, out_dir })?;
    for o in &report.manifest.outputs {
        log::info!("wrote {}", o.file);
    }
    log::info!("manifest {}", report.manifest_path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Sub::PhyCurves(c) => run_common(Command::PhyCurves, c),
        Sub::Bounds(c) => run_common(Command::Bounds, c),
        Sub::MinEnergy(c) => run_common(Command::MinEnergy, c),
        Sub::Simulate(c) => run_common(Command::Simulate, c),
        Sub::Sweep(c) => run_common(Command::Sweep, c),
        Sub::Replay { manifest, out, seed, jobs } => set_jobs(jobs).and_then(|_| replay(&manifest, &out, seed)).and_then(|changed| {
            if changed.is_empty() {
                log::info!("all outputs reproduced");
                Ok(())
            } else {
                Err(CliError::Other(format!("outputs differ from the manifest: {}", changed.join(", "))))
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("piconet: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
