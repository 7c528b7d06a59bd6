//! Command-line front end.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::StudyConfig;
use crate::error::{Error, Result};
use crate::estimators::{run_estimator, true_eta, EstimatorConfig, EstimatorKind};
use crate::intensity::World;
use crate::io::{infer_horizon, read_dataset, write_atomic, write_dataset};
use crate::rng::derive_seed;
use crate::simulator::{empirical_moments, simulate_dataset};
use crate::study::{run_study, write_report};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
    Trace,
    /// Warnings on stderr and errors as a JSON object.
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "ctmsm", version, about = "Continuous-time marginal structural models with an unmeasured binary confounder")]
pub struct Cli {
    /// Master seed; overrides the configuration file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (falls back to CTMSM_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value = "warn")]
    pub log_level: LogLevel,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_estimator(s: &str) -> std::result::Result<EstimatorKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_world(s: &str) -> std::result::Result<World, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset from a scenario.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// `jo` (observational) or `je` (experimental).
        #[arg(long, value_parser = parse_world)]
        world: World,
        #[arg(long)]
        out: PathBuf,
        /// Number of subjects; defaults to the scenario's `n`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Run one estimator on a dataset and write its estimate as JSON.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_estimator)]
        estimator: EstimatorKind,
        #[arg(long)]
        out: PathBuf,
        /// Configuration file supplying estimator settings and the study horizon.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Bootstrap resamples or posterior draws.
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Approximate the true MSM parameters by experimental-world simulation.
    TrueEta {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        m: usize,
    },
    /// Run a replication study and write the metrics CSV and summary JSON.
    Study {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Check every record of a dataset.
    Validate {
        #[arg(long)]
        data: PathBuf,
        /// Configuration file whose scenario fixes the study horizon.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    kind: &'a str,
    message: String,
    exit_code: i32,
}

fn init_logging(level: LogLevel) {
    let filter = match level {
        LogLevel::Error => log::LevelFilter::Error,
        LogLevel::Warn | LogLevel::Json => log::LevelFilter::Warn,
        LogLevel::Info => log::LevelFilter::Info,
        LogLevel::Debug => log::LevelFilter::Debug,
        LogLevel::Trace => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new().filter_level(filter).format_timestamp(None).try_init();
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if let Some(t) = flag {
        return Ok(Some(t));
    }
    match std::env::var("CTMSM_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("CTMSM_THREADS must be a positive integer, got '{v}'"))),
        _ => Ok(None),
    }
}

fn to_json_file<T: Serialize>(path: &std::path::Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

fn execute(cli: &Cli) -> Result<()> {
    if let Some(t) = thread_count(cli.threads)? {
        if t == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match &cli.command {
        Command::Simulate { config, world, out, n } => {
            let cfg = StudyConfig::load(config)?;
            let scenario = cfg.scenario()?;
            let seed = cli.seed.unwrap_or(scenario.seed);
            let data = simulate_dataset(&scenario, *world, n.unwrap_or(scenario.n), seed)?;
            write_dataset(out, &data)?;
            log::info!("wrote {} subjects to {}: {:?}", data.len(), out.display(), empirical_moments(&data)?);
        }
        Command::Fit { data, estimator, out, config, replicates } => {
            let (mut est_cfg, horizon) = match config {
                Some(p) => {
                    let c = StudyConfig::load(p)?;
                    (c.estimator_config(c.master_seed), Some(c.scenario()?.t_r))
                }
                None => (EstimatorConfig::default(), None),
            };
            if let Some(r) = replicates {
                est_cfg.replicate_count = *r;
            }
            if let Some(s) = cli.seed {
                est_cfg.seed = s;
            }
            let dataset = read_dataset(data, horizon)?;
            let est = run_estimator(*estimator, &dataset, &est_cfg)?;
            if let Some(d) = &est.sampler_diagnostics {
                log::info!("sampler diagnostics: {}", serde_json::to_string(d)?);
                for b in d.blocks.iter().filter(|b| !b.on_target) {
                    log::warn!("block {:?} acceptance rate {:.3} outside the target band", b.block, b.acceptance_rate);
                }
            }
            to_json_file(out, &est)?;
        }
        Command::TrueEta { config, m } => {
            let cfg = StudyConfig::load(config)?;
            let scenario = cfg.scenario()?;
            let seed = derive_seed(cli.seed.unwrap_or(cfg.master_seed), &[3]);
            let eta = true_eta(&scenario.exp_params, &scenario, *m, seed)?;
            println!("{}", serde_json::to_string(&eta)?);
        }
        Command::Study { config, out_dir } => {
            let mut cfg = StudyConfig::load(config)?;
            if let Some(s) = cli.seed {
                cfg.master_seed = s;
            }
            let report = run_study(&cfg)?;
            write_report(&report, &cfg, out_dir)?;
        }
        Command::Validate { data, config } => {
            let horizon = match config {
                Some(p) => Some(StudyConfig::load(p)?.scenario()?.t_r),
                None => None,
            };
            let dataset = read_dataset(data, horizon)?;
            let t_r = horizon.or_else(|| infer_horizon(&dataset)).unwrap_or(f64::NAN);
            println!("{} records valid (t_R = {t_r})", dataset.len());
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the exit code.
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
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => {
                    eprintln!("{}", Cli::command().render_usage());
                    EXIT_USAGE
                }
            };
        }
    };
    init_logging(cli.log_level);
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = e.exit_code();
            if cli.log_level == LogLevel::Json {
                let report = ErrorReport { kind: e.kind(), message: e.to_string(), exit_code: code };
                eprintln!("{}", serde_json::json!({ "error": report }));
            } else {
                eprintln!("error: {e}");
            }
            code
        }
    }
}
