//! The `etlsim` command line.
//!
//! Exit codes: 0 on success, 1 on invalid input (scenario, data or flags),
//! 2 on I/O failure. Diagnostics go to stderr; results go to stdout or to
//! the paths named by flags.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::calibration::{self, CurveFamily, FittedDistribution};
use crate::control::server::{self, ServerConfig};
use crate::control::{write_transcript, ControlCore, DEFAULT_TICKS_PER_SECOND};
use crate::scenario::{
    load_scenario, read_samples_csv, read_throughput_csv, write_metrics, MetricsFormat,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_IO: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "etlsim", version, about = "ETL process-chain simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FamilyArg {
    Exponential,
    Rational,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DistArg {
    Gamma,
    Lognormal,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario for a fixed number of ticks and write window metrics.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        ticks: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        window: u64,
        #[arg(long)]
        metrics_out: PathBuf,
        #[arg(long, default_value = "jsonl")]
        format: MetricsFormat,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a throughput curve to an `a,throughput` CSV.
    FitCurve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        family: FamilyArg,
    },
    /// Fit a processing-time distribution to a `seconds` CSV.
    FitDist {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        dist: DistArg,
    },
    /// Serve the control protocol for a scenario.
    Serve {
        #[arg(long)]
        scenario: PathBuf,
        /// TCP address for line-protocol clients.
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        /// Also accept WebSocket clients (e.g. a browser) on this address.
        #[arg(long)]
        ws_bind: Option<String>,
        /// Talk to a single client over stdin/stdout instead of TCP. The
        /// server stops once input ends and the current run finishes.
        #[arg(long)]
        stdio: bool,
        #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
        window: u64,
        #[arg(long, default_value_t = DEFAULT_TICKS_PER_SECOND, value_parser = clap::value_parser!(u64).range(1..))]
        ticks_per_second: u64,
        /// Write the command transcript here when the server stops.
        #[arg(long)]
        record: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Invalid(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Invalid(_) => EXIT_INVALID,
            Failure::Io(_) => EXIT_IO,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Invalid(m) | Failure::Io(m) => m,
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(stderr, "{e}");
                return EXIT_INVALID;
            }
            let _ = write!(stdout, "{e}");
            return EXIT_OK;
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(stderr, "etlsim: {}", f.message());
            f.code()
        }
    }
}

fn execute(command: Command, stdout: &mut dyn Write) -> Result<(), Failure> {
    match command {
        Command::Simulate {
            scenario,
            ticks,
            window,
            metrics_out,
            format,
            seed,
        } => {
            let text = read(&scenario)?;
            let sc = load_scenario(&text).map_err(|e| Failure::Invalid(e.to_string()))?;
            let mut sim = sc
                .simulation(seed)
                .map_err(|e| Failure::Invalid(e.to_string()))?;
            let metrics = sim
                .run(&sc.schedule, ticks, window)
                .map_err(|e| Failure::Invalid(e.to_string()))?;
            write(&metrics_out, &write_metrics(&metrics, format))
        }
        Command::FitCurve { data, family } => {
            let obs = read_throughput_csv(&read(&data)?)
                .map_err(|e| Failure::Invalid(format!("{}: {e}", data.display())))?;
            let family = match family {
                FamilyArg::Exponential => CurveFamily::Exponential,
                FamilyArg::Rational => CurveFamily::Rational,
            };
            let fit = calibration::fit_curve(&obs, family)
                .map_err(|e| Failure::Invalid(e.to_string()))?;
            let mut params = serde_json::to_value(fit.curve).expect("curve serializes");
            let family = params
                .as_object_mut()
                .and_then(|o| o.remove("family"))
                .unwrap_or_default();
            let out = json!({
                "family": family,
                "parameters": params,
                "rss": fit.rss,
                "converged": fit.converged,
                "iterations": fit.iterations,
                "gradient_norm": fit.gradient_norm,
            });
            print_json(stdout, &out)
        }
        Command::FitDist { data, dist } => {
            let samples = read_samples_csv(&read(&data)?)
                .map_err(|e| Failure::Invalid(format!("{}: {e}", data.display())))?;
            let fitted = match dist {
                DistArg::Gamma => calibration::fit_gamma(&samples),
                DistArg::Lognormal => calibration::fit_lognormal(&samples),
            }
            .map_err(|e| Failure::Invalid(e.to_string()))?;
            let gof = calibration::goodness_of_fit(&samples, &fitted)
                .map_err(|e| Failure::Invalid(e.to_string()))?;
            let (name, params) = match fitted {
                FittedDistribution::Gamma { shape, scale } => {
                    ("gamma", json!({"shape": shape, "scale": scale}))
                }
                FittedDistribution::Lognormal { mu, sigma } => {
                    ("lognormal", json!({"mu": mu, "sigma": sigma}))
                }
            };
            let out = json!({
                "dist": name,
                "parameters": params,
                "n": samples.len(),
                "mean": fitted.mean(),
                "log_likelihood": finite_or_null(gof.log_likelihood),
                "ks_statistic": gof.ks_statistic,
            });
            print_json(stdout, &out)
        }
        Command::Serve {
            scenario,
            bind,
            ws_bind,
            stdio,
            window,
            ticks_per_second,
            record,
        } => {
            let text = read(&scenario)?;
            let sc = load_scenario(&text).map_err(|e| Failure::Invalid(e.to_string()))?;
            let mut core =
                ControlCore::new(sc, window).map_err(|e| Failure::Invalid(e.to_string()))?;
            core.handle(crate::control::ControlMessage::SetPace { ticks_per_second });
            serve(core, &bind, ws_bind.as_deref(), stdio, record.as_deref())
        }
    }
}

fn serve(
    core: ControlCore,
    bind: &str,
    ws_bind: Option<&str>,
    stdio: bool,
    record: Option<&Path>,
) -> Result<(), Failure> {
    let bind_err = |addr: &str, e: io::Error| Failure::Io(format!("cannot bind {addr}: {e}"));
    let tcp = if stdio {
        None
    } else {
        Some(TcpListener::bind(bind).map_err(|e| bind_err(bind, e))?)
    };
    let ws = match ws_bind {
        Some(addr) => Some(TcpListener::bind(addr).map_err(|e| bind_err(addr, e))?),
        None => None,
    };

    let mut handle = server::start(core, ServerConfig::default());
    if let Some(l) = tcp {
        eprintln!(
            "etlsim: listening on {}",
            l.local_addr().map_err(io_failure)?
        );
        handle.serve_tcp(l).map_err(io_failure)?;
    }
    if let Some(l) = ws {
        eprintln!(
            "etlsim: websocket bridge on {}",
            l.local_addr().map_err(io_failure)?
        );
        handle.serve_websocket(l).map_err(io_failure)?;
    }
    let writer = if stdio {
        Some(handle.attach(BufReader::new(io::stdin()), io::stdout(), true))
    } else {
        None
    };
    let transcript = handle.wait();
    if let Some(w) = writer {
        let _ = w.join();
    }
    if let Some(path) = record {
        write(path, &write_transcript(&transcript))?;
    }
    Ok(())
}

fn io_failure(e: io::Error) -> Failure {
    Failure::Io(e.to_string())
}

fn finite_or_null(x: f64) -> serde_json::Value {
    if x.is_finite() {
        json!(x)
    } else {
        serde_json::Value::Null
    }
}

fn print_json(stdout: &mut dyn Write, value: &serde_json::Value) -> Result<(), Failure> {
    writeln!(stdout, "{value}").map_err(io_failure)
}
