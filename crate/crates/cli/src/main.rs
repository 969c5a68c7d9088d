//! `studyctl`: run studies, export their metrics, simulate schedules.
//!
//! `server` and `runner` are the roles the launcher spawns; they are not
//! meant to be typed by hand.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use ensda::checkpoint::ServerCheckpoint;
use ensda::config::StudyConfig;
use ensda::launcher::{self, EXIT_CONFIG};
use ensda::metrics::read_metrics;
use ensda::models::sample_varcost_durations;
use ensda::runner::{run_runner, RunnerExit, RunnerOptions};
use ensda::scheduler::simulate_schedule;
use ensda::server::{self, read_endpoint_file, ServerOptions};
use ensda::{report, Error};

const EXIT_FAILURE: u8 = 2;
const EXIT_RESTART_BUDGET: u8 = 4;

#[derive(Parser)]
#[command(name = "studyctl", version, about = "Elastic ensemble data assimilation studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a study under the launcher until it completes.
    #[command(alias = "launch")]
    Run {
        config: PathBuf,
        /// Override the configured work directory.
        #[arg(long)]
        work_dir: Option<PathBuf>,
    },
    /// Export a table computed from a metrics log as CSV.
    Report {
        kind: ReportKind,
        metrics: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Metrics of a single-runner run of the same study (efficiency only).
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// List-schedule member durations on R runners without running anything.
    Simulate {
        #[arg(long)]
        runners: usize,
        /// Comma separated durations.
        #[arg(long, value_delimiter = ',', conflicts_with = "sample")]
        durations: Vec<f64>,
        /// Draw this many durations from the varcost law instead.
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long, default_value_t = 150.0)]
        base_ms: f64,
        #[arg(long, default_value_t = 100.0)]
        spread_ms: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Update walltime added to the cycle when computing the idle fraction.
        #[arg(long, default_value_t = 0.0)]
        update_time: f64,
        /// Print the per-member timeline as CSV.
        #[arg(long)]
        trace: bool,
    },
    /// Print the ensemble hash of a checkpoint or final-ensemble file.
    Hash { artifact: PathBuf },
    #[command(hide = true)]
    Server {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        launcher: Option<SocketAddr>,
        #[arg(long)]
        restore: bool,
    },
    #[command(hide = true)]
    Runner {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        runner_id: u32,
        /// Registry endpoint; read from the work directory when absent.
        #[arg(long)]
        endpoint: Option<SocketAddr>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportKind {
    PropHist,
    UpdateScaling,
    Efficiency,
    Trace,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, work_dir } => run(&config, work_dir),
        Command::Report {
            kind,
            metrics,
            bins,
            baseline,
            output,
        } => exit(report_cmd(kind, &metrics, bins, baseline.as_deref(), output.as_deref())),
        Command::Simulate {
            runners,
            durations,
            sample,
            base_ms,
            spread_ms,
            seed,
            update_time,
            trace,
        } => {
            let durations = match sample {
                Some(n) => sample_varcost_durations(n, base_ms, spread_ms, seed),
                None => durations,
            };
            exit(simulate(&durations, runners, update_time, trace))
        }
        Command::Hash { artifact } => exit(ServerCheckpoint::read(&artifact).map(|c| println!("{}", c.ensemble_hash()))),
        Command::Server {
            config,
            launcher,
            restore,
        } => serve(&config, launcher, restore),
        Command::Runner {
            config,
            runner_id,
            endpoint,
        } => runner(&config, runner_id, endpoint),
    }
}

fn exit(result: ensda::Result<()>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Metrics { .. } => EXIT_CONFIG as u8,
        Error::RestartBudget(_) => EXIT_RESTART_BUDGET,
        _ => EXIT_FAILURE,
    }
}

fn run(config: &Path, work_dir: Option<PathBuf>) -> ExitCode {
    let result = StudyConfig::load(config).and_then(|mut cfg| {
        if let Some(dir) = work_dir {
            cfg.work_dir = dir;
        }
        let exe = std::env::current_exe()?;
        let outcome = launcher::launch(&cfg, &exe)?;
        println!("ensemble hash {}", outcome.ensemble_hash);
        println!("final ensemble {}", outcome.final_ensemble.display());
        println!("metrics {}", cfg.metrics_path().display());
        println!("restarts {} (server {})", outcome.restarts, outcome.server_restarts);
        Ok(())
    });
    exit(result)
}

fn report_cmd(
    kind: ReportKind,
    metrics: &Path,
    bins: usize,
    baseline: Option<&Path>,
    output: Option<&Path>,
) -> ensda::Result<()> {
    let records = read_metrics(metrics)?;
    let csv = match kind {
        ReportKind::PropHist => report::prop_hist_csv(&records, bins),
        ReportKind::UpdateScaling => report::update_scaling_csv(&records),
        ReportKind::Efficiency => {
            let base = baseline.map(read_metrics).transpose()?;
            report::efficiency_csv(&records, base.as_deref())
        }
        ReportKind::Trace => report::trace_csv(&records),
    };
    match output {
        Some(path) => fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn simulate(durations: &[f64], runners: usize, update_time: f64, trace: bool) -> ensda::Result<()> {
    if runners == 0 {
        return Err(Error::Config("simulate needs at least one runner".into()));
    }
    if let Some(d) = durations.iter().find(|d| !(**d >= 0.0)) {
        return Err(Error::Config(format!("duration {d} is not a non-negative number")));
    }
    let sim = simulate_schedule(durations, runners);
    println!("makespan {}", sim.makespan);
    println!("efficiency {:.4}", sim.efficiency());
    println!("idle_fraction {:.4}", sim.idle_fraction(update_time));
    if trace {
        print!("{}", report::simulation_csv(&sim));
    }
    Ok(())
}

fn serve(config: &Path, launcher: Option<SocketAddr>, restore: bool) -> ExitCode {
    let result = StudyConfig::load(config).and_then(|cfg| {
        let handle = server::start(cfg, ServerOptions { launcher, restore })?;
        log::info!("server listening, registry {}", handle.registry);
        let done = handle.join()?;
        log::info!("final ensemble hash {}", done.ensemble_hash());
        Ok(())
    });
    exit(result)
}

fn runner(config: &Path, runner_id: u32, endpoint: Option<SocketAddr>) -> ExitCode {
    let setup = StudyConfig::load(config).and_then(|cfg| {
        let registry = match endpoint {
            Some(e) => e,
            None => read_endpoint_file(&cfg)?,
        };
        let model: Arc<dyn ensda::models::Model> = Arc::from(cfg.model_spec().build()?);
        Ok((model, RunnerOptions::from_config(&cfg, registry, runner_id)))
    });
    match setup {
        Ok((model, opts)) => ExitCode::from(run_runner(model, &opts).code() as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(RunnerExit::Config.code() as u8)
        }
    }
}
