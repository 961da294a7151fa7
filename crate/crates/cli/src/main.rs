//! `gepnet` command line. Runs the engine in-process, or forwards every
//! request to a running service when `--server URL` is given.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gepnet_client::{Client, ClientError};
use gepnet_core::channel::{Constellation, ConstellationJson};
use gepnet_core::complexity::ReadoutSizes;
use gepnet_core::detectors::EpConfig;
use gepnet_core::ep::FallbackMode;
use gepnet_core::service::{self, ComplexityRequest, LoadedWeights, Modulation, SimulateRequest};
use gepnet_core::sweep::{DetectorKind, SweepConfig};
use gepnet_core::weights::constellation_csv;

#[derive(Parser)]
#[command(name = "gepnet", version, about = "MU-MIMO detector simulation")]
struct Cli {
    /// Forward requests to a running service instead of computing locally.
    #[arg(long, global = true, value_name = "URL")]
    server: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo SER sweep, written as CSV.
    Simulate(SimulateArgs),
    /// Multiplication counts for readout, estimation and exhaustive ML.
    Complexity(ComplexityArgs),
    /// Write the constellation stored in a weight bundle as JSON and CSV.
    ExportConstellation(ExportArgs),
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    nt: usize,
    #[arg(long)]
    nr: usize,
    /// qam4, qam16, ..., json:PATH, or bundle (the weights' constellation).
    /// Defaults to qam16, or bundle for the gepnet detector.
    #[arg(long = "mod", value_name = "SPEC")]
    modulation: Option<String>,
    #[arg(long, value_parser = parse_detector)]
    detector: DetectorKind,
    /// GEPW weight bundle (gepnet only).
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    snr_start: f64,
    #[arg(long, allow_negative_numbers = true)]
    snr_stop: f64,
    #[arg(long)]
    snr_step: f64,
    #[arg(long, default_value_t = 10_000)]
    min_trials: u64,
    #[arg(long, default_value_t = 100)]
    min_errors: u64,
    /// Per-point cap on trials when errors stay below --min-errors.
    #[arg(long, default_value_t = 2_000_000)]
    max_trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Trials per worker per round.
    #[arg(long, default_value_t = 250)]
    batch: u64,
    /// EP iterations (classical EP only).
    #[arg(long, default_value_t = 10)]
    ep_iterations: usize,
    #[arg(long, default_value_t = 0.7)]
    ep_damping: f64,
    /// Revert every component when any precision turns non-positive.
    #[arg(long)]
    whole_vector_fallback: bool,
    /// CSV destination; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ComplexityArgs {
    #[arg(long)]
    m: u64,
    #[arg(long)]
    k: u64,
    #[arg(long)]
    n: u64,
    #[arg(long, default_value_t = 8)]
    su: u64,
    #[arg(long, default_value_t = 128)]
    nr1: u64,
    #[arg(long, default_value_t = 64)]
    nr2: u64,
    /// Print JSON instead of CSV.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Destination of the `label,re,im` rows; defaults to OUT with a .csv
    /// extension.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn parse_detector(s: &str) -> Result<DetectorKind, String> {
    s.parse().map_err(|e: gepnet_core::Error| e.to_string())
}

struct Failure {
    message: String,
    code: u8,
}

impl From<gepnet_core::Error> for Failure {
    fn from(e: gepnet_core::Error) -> Self {
        Self {
            message: e.to_string(),
            code: e.exit_code() as u8,
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        Self {
            message: e.to_string(),
            code: e.exit_code() as u8,
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        message: format!("{}: {e}", path.display()),
        code: 3,
    }
}

fn config_failure(message: String) -> Failure {
    Failure { message, code: 2 }
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| io_failure(path, e))
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn parse_modulation(spec: &str) -> Result<Modulation, Failure> {
    if spec == "bundle" {
        return Ok(Modulation::Bundle);
    }
    if let Some(path) = spec.strip_prefix("json:") {
        let path = Path::new(path);
        let text = String::from_utf8(read(path)?)
            .map_err(|_| io_failure(path, std::io::ErrorKind::InvalidData.into()))?;
        let constellation = Constellation::from_json(&text)?;
        return Ok(Modulation::Points {
            constellation: ConstellationJson::from(&constellation),
        });
    }
    match spec.strip_prefix("qam").map(str::parse::<usize>) {
        Some(Ok(order)) => Ok(Modulation::Qam { order }),
        _ => Err(config_failure(format!(
            "unknown modulation {spec:?}; expected qamN, json:PATH or bundle"
        ))),
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Runtime::new().map_err(|e| Failure {
        message: format!("cannot start async runtime: {e}"),
        code: 3,
    })
}

fn simulate(args: SimulateArgs, server: Option<&str>) -> Result<(), Failure> {
    let modulation = match (&args.modulation, args.detector) {
        (Some(spec), _) => parse_modulation(spec)?,
        (None, DetectorKind::Gepnet) => Modulation::Bundle,
        (None, _) => Modulation::Qam { order: 16 },
    };
    let config = SweepConfig {
        nt: args.nt,
        nr: args.nr,
        detector: args.detector,
        snr_start: args.snr_start,
        snr_stop: args.snr_stop,
        snr_step: args.snr_step,
        min_trials: args.min_trials,
        min_errors: args.min_errors,
        max_trials: args.max_trials,
        seed: args.seed,
        workers: args.workers,
        batch: args.batch,
        ep: EpConfig {
            iterations: args.ep_iterations,
            eta: args.ep_damping,
            fallback: if args.whole_vector_fallback {
                FallbackMode::WholeVector
            } else {
                FallbackMode::PerElement
            },
        },
    };
    let bytes = args.weights.as_deref().map(read).transpose()?;
    let mut req = SimulateRequest {
        config,
        modulation,
        weights: None,
    };
    let result = match server {
        Some(url) => runtime()?.block_on(async {
            let client = Client::new(url);
            if let Some(bytes) = bytes {
                req.weights = Some(client.upload_weights(bytes).await?.id);
            }
            client.simulate(&req).await
        })?,
        None => {
            let loaded = bytes.map(|b| LoadedWeights::from_bytes(&b)).transpose()?;
            service::simulate(&req, loaded.as_ref().map(|l| &l.weights))?
        }
    };
    match &args.out {
        Some(path) => write(path, &result.csv)?,
        None => print!("{}", result.csv),
    }
    for p in &result.points {
        eprintln!(
            "{} dB: ser {} over {} trials ({} errors)",
            p.snr_db, p.ser, p.trials, p.symbol_errors
        );
    }
    Ok(())
}

fn complexity(args: ComplexityArgs, server: Option<&str>) -> Result<(), Failure> {
    let req = ComplexityRequest {
        m: args.m,
        k: args.k,
        n: args.n,
        sizes: ReadoutSizes {
            su: args.su,
            nr1: args.nr1,
            nr2: args.nr2,
        },
    };
    let report = match server {
        Some(url) => runtime()?.block_on(Client::new(url).complexity(&req))?,
        None => service::complexity(&req)?,
    };
    if args.json {
        let text = serde_json::to_string_pretty(&report).map_err(gepnet_core::Error::from)?;
        println!("{text}");
    } else {
        print!("{}", report.to_csv());
    }
    Ok(())
}

fn export_constellation(args: ExportArgs, server: Option<&str>) -> Result<(), Failure> {
    let bytes = read(&args.weights)?;
    let json = match server {
        Some(url) => runtime()?.block_on(async {
            let client = Client::new(url);
            let id = client.upload_weights(bytes).await?.id;
            client.constellation(&id).await
        })?,
        None => ConstellationJson::from(&LoadedWeights::from_bytes(&bytes)?.weights.constellation),
    };
    let constellation = Constellation::try_from(json)?;
    let csv = args.csv.clone().unwrap_or_else(|| {
        let derived = args.out.with_extension("csv");
        if derived == args.out {
            args.out.with_extension("csv.csv")
        } else {
            derived
        }
    });
    write(&args.out, &constellation.to_json()?)?;
    write(&csv, &constellation_csv(&constellation))?;
    Ok(())
}

fn serve(bind: SocketAddr) -> Result<(), Failure> {
    gepnet_server::init_tracing();
    runtime()?.block_on(async {
        let (listener, local) = gepnet_server::bind(bind)
            .await
            .map_err(|e| Failure {
                message: format!("cannot bind {bind}: {e}"),
                code: 3,
            })?;
        eprintln!("listening on http://{local}");
        gepnet_server::serve(listener).await.map_err(|e| Failure {
            message: format!("server error: {e}"),
            code: 3,
        })
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let server = cli.server.as_deref();
    let outcome = match cli.command {
        Command::Simulate(args) => simulate(args, server),
        Command::Complexity(args) => complexity(args, server),
        Command::ExportConstellation(args) => export_constellation(args, server),
        Command::Serve { bind } => serve(bind),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
