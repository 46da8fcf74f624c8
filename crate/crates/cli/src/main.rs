mod plot;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde_json::json;
use teleop_core::calibration::{
    register_point_pairs, CalibrationError, CalibrationFile, PairsFile,
};
use teleop_core::config::ServerConfig;
use teleop_core::metrics::{read_csv, write_csv, MetricsError};
use teleop_core::server::{ServeOptions, Server, ServerError};
use teleop_core::session::{Session, SessionError};
use teleop_core::tasks::{gen_task, replay, ReplayOptions, TaskError, TaskScript};

#[derive(Parser)]
#[command(
    name = "teleop",
    version,
    about = "Camera-arm teleoperation server and tooling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the teleoperation server.
    Serve {
        #[arg(long, default_value = "0.0.0.0:7450")]
        listen: SocketAddr,
        /// WebSocket bridge address (path `/ws`).
        #[arg(long, default_value = "0.0.0.0:7451")]
        ws_listen: SocketAddr,
        #[arg(long)]
        no_ws: bool,
        /// Server configuration; built-in defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "calibration.json")]
        calibration: PathBuf,
        /// Append every message to this JSONL file.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Write a deterministic task script.
    GenTask {
        #[arg(long)]
        task: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a task script through the session and simulator in simulated time.
    Replay {
        script: PathBuf,
        /// Report path; stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Aligned hand and tip trajectories.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Register operator and robot marker pairs.
    Calibrate {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an aligned trajectory CSV as an SVG chart.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A failure reported as one JSON line on stderr.
struct Failure {
    kind: &'static str,
    message: String,
    code: u8,
}

const RUNTIME: u8 = 1;
const BAD_INPUT: u8 = 2;

impl Failure {
    fn new(kind: &'static str, code: u8, message: impl ToString) -> Self {
        Self {
            kind,
            message: message.to_string(),
            code,
        }
    }
}

impl From<TaskError> for Failure {
    fn from(e: TaskError) -> Self {
        let (kind, code) = match &e {
            TaskError::UnknownTask(_) => ("UnknownTask", BAD_INPUT),
            TaskError::ScriptViolation { .. } => ("ScriptViolation", BAD_INPUT),
            TaskError::Json { .. } => ("BadInput", BAD_INPUT),
            TaskError::Io { .. } => ("Io", RUNTIME),
            TaskError::Stalled(_) => ("Stalled", RUNTIME),
            TaskError::Session(SessionError::Config(_)) => ("BadConfig", BAD_INPUT),
            TaskError::Session(_) => ("Session", RUNTIME),
        };
        Self::new(kind, code, e)
    }
}

impl From<CalibrationError> for Failure {
    fn from(e: CalibrationError) -> Self {
        let (kind, code) = match &e {
            CalibrationError::TooFewPairs(_) => ("TooFewPairs", BAD_INPUT),
            CalibrationError::DegenerateGeometry => ("DegenerateGeometry", BAD_INPUT),
            CalibrationError::NonFinite => ("NonFinite", BAD_INPUT),
            CalibrationError::Json { .. } => ("BadInput", BAD_INPUT),
            CalibrationError::Io { .. } => ("Io", RUNTIME),
            CalibrationError::Kinematics(_) => ("Kinematics", RUNTIME),
        };
        Self::new(kind, code, e)
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        let code = match e {
            MetricsError::Csv(_) => BAD_INPUT,
            _ => RUNTIME,
        };
        Self::new("Metrics", code, e)
    }
}

impl From<ServerError> for Failure {
    fn from(e: ServerError) -> Self {
        let kind = match e {
            ServerError::BindFailure { .. } => "BindFailure",
            ServerError::Record { .. } => "Record",
            ServerError::Io(_) => "Io",
        };
        Self::new(kind, RUNTIME, e)
    }
}

fn bad_config(e: impl ToString) -> Failure {
    Failure::new("BadConfig", BAD_INPUT, e)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or_default();
            return report(Failure::new("Usage", BAD_INPUT, first));
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    eprintln!("{}", json!({ "error": f.kind, "message": f.message }));
    ExitCode::from(f.code)
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Serve {
            listen,
            ws_listen,
            no_ws,
            config,
            calibration,
            record,
        } => serve(
            listen,
            (!no_ws).then_some(ws_listen),
            config.as_deref(),
            &calibration,
            record,
        ),
        Command::GenTask { task, seed, out } => {
            let script = gen_task(task, seed)?;
            script.save(&out)?;
            Ok(())
        }
        Command::Replay {
            script,
            report,
            csv,
        } => {
            let script = TaskScript::load(&script)?;
            let out = replay(&script, ReplayOptions::default())?;
            let text = out.report.to_json();
            match report {
                Some(path) => write_file(&path, &text)?,
                None => print!("{text}"),
            }
            if let Some(path) = csv {
                write_csv(&path, &out.aligned)?;
            }
            Ok(())
        }
        Command::Calibrate { pairs, out } => {
            let set = PairsFile::load(&pairs)?.to_set();
            let reg = register_point_pairs(&set)?;
            let timestamp = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            let file = CalibrationFile::from_registration(&reg, timestamp);
            file.save(&out)?;
            println!(
                "{}",
                json!({
                    "n_pairs": file.n_pairs,
                    "residual_rms_mm": file.residual_rms_mm,
                    "residual_max_mm": file.residual_max_mm,
                })
            );
            Ok(())
        }
        Command::Plot { csv, out } => {
            let rows = read_csv(&csv)?;
            write_file(&out, &plot::render(&rows))
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text)
        .map_err(|e| Failure::new("Io", RUNTIME, format!("{}: {e}", path.display())))
}

fn serve(
    listen: SocketAddr,
    ws_listen: Option<SocketAddr>,
    config: Option<&Path>,
    calibration: &Path,
    record: Option<PathBuf>,
) -> Result<(), Failure> {
    let cfg = match config {
        Some(path) => ServerConfig::load(path).map_err(bad_config)?,
        None => ServerConfig::default(),
    };
    let cal = CalibrationFile::load(calibration).map_err(bad_config)?;
    let session = Session::new(&cfg, cal.transform()).map_err(bad_config)?;

    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();

    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::new("Io", RUNTIME, e))?;
    rt.block_on(async move {
        let mut opts = ServeOptions::new(listen);
        opts.ws_listen = ws_listen;
        opts.record = record;
        let server = Server::bind(session, &opts).await?;
        let tcp = server.local_addr().map_err(ServerError::Io)?;
        println!(
            "{}",
            json!({
                "listening": tcp.to_string(),
                "ws": server.ws_addr().map(|a| format!("ws://{a}/ws")),
            })
        );
        server
            .run(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok::<_, Failure>(())
    })?;
    // Give the runtime a moment to flush connection writers.
    rt.shutdown_timeout(Duration::from_millis(200));
    Ok(())
}
