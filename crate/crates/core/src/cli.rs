//! `sunrise` command-line front-end.
//!
//! Exit codes: 0 success, 1 API or workflow failure, 2 connection or usage
//! error, 3 wait timeout.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::bench::{parse_metric_spec, run_bench, BenchError, BenchOptions};
use crate::client::{Client, ClientError, WaitOutcome, DEFAULT_ENDPOINT};
use crate::config::ServiceConfig;
use crate::experiment::{ExperimentId, ExperimentState};
use crate::manager::{CreateRequest, RunRequest};
use crate::sysdef::{ParamKind, SysDef, SystemRef};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_WAIT_TIMEOUT: u8 = 3;

/// Interval between status polls for `--wait`.
pub const WAIT_POLL: Duration = Duration::from_millis(500);

#[derive(Debug, Parser)]
#[command(name = "sunrise", version, about = "Runtime manager and client for containerized simulation systems")]
pub struct Cli {
    /// Base URL of the runtime manager.
    #[arg(long, global = true, env = "SUNRISE_ENDPOINT", default_value = DEFAULT_ENDPOINT)]
    pub endpoint: String,
    /// Creator name sent with every request.
    #[arg(long, global = true, env = "SUNRISE_USER")]
    pub user: Option<String>,
    #[arg(long, global = true, env = "SUNRISE_AUTH_TOKEN", hide_env_values = true, hide = true)]
    pub token: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct WaitArgs {
    /// Poll until the job settles.
    #[arg(long)]
    pub wait: bool,
    /// Give up waiting after this many seconds (exit 3).
    #[arg(long, value_name = "SECONDS", requires = "wait")]
    pub wait_timeout: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the runtime manager service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        catalog_dir: Option<PathBuf>,
        #[arg(long)]
        backends: Option<PathBuf>,
    },
    /// List catalog systems.
    Systems {
        #[arg(long)]
        json: bool,
    },
    /// Print a system definition.
    System { name: String, version: String },
    /// Create an experiment; prints its id.
    Create {
        system: String,
        version: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        description: Option<String>,
    },
    /// List experiments.
    List {
        #[arg(long)]
        creator: Option<String>,
        #[arg(long)]
        status: Option<ExperimentState>,
    },
    /// Override parameters of an experiment.
    Set {
        id: ExperimentId,
        #[arg(value_name = "KEY=VALUE", required = true)]
        assignments: Vec<String>,
    },
    /// Upload a file parameter.
    Upload { id: ExperimentId, name: String, file: PathBuf },
    /// Build the system.
    Build {
        id: ExperimentId,
        #[arg(long, value_name = "SECONDS")]
        timeout: Option<f64>,
        #[command(flatten)]
        wait: WaitArgs,
    },
    /// Run the system.
    Run {
        id: ExperimentId,
        #[arg(long, value_name = "SECONDS")]
        timeout: Option<f64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[command(flatten)]
        wait: WaitArgs,
    },
    /// Show the experiment status.
    Status {
        id: ExperimentId,
        #[command(flatten)]
        wait: WaitArgs,
    },
    /// Download a result file.
    Result {
        id: ExperimentId,
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the combined job log.
    Log { id: ExperimentId },
    /// Archive the experiment and optionally download the bundle.
    Archive {
        id: ExperimentId,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Delete a non-archived experiment.
    Delete { id: ExperimentId },
    /// Run one experiment per app binary and aggregate a score.
    Bench {
        system: String,
        version: String,
        /// Directory of app binaries, one experiment each.
        #[arg(long)]
        apps: PathBuf,
        /// File parameter that receives each app.
        #[arg(long)]
        param: String,
        /// Metric location as RESULT:/json/pointer.
        #[arg(long)]
        metric: String,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long, value_name = "SECONDS")]
        timeout: Option<f64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

/// Failure surfaced to the user, carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub exit: u8,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError { exit: EXIT_USAGE, message: message.into() }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        let exit = match e {
            ClientError::Connection { .. } => EXIT_USAGE,
            _ => EXIT_FAILED,
        };
        CliError { exit, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError { exit: EXIT_FAILED, message: e.to_string() }
    }
}

/// Splits `KEY=VALUE` and converts the value according to the parameter
/// kind. File parameters take an in-image path.
pub fn parse_assignments(def: &SysDef, items: &[String]) -> Result<BTreeMap<String, Value>, String> {
    let mut out = BTreeMap::new();
    for item in items {
        let (key, raw) = item.split_once('=').ok_or_else(|| format!("`{item}` is not KEY=VALUE"))?;
        let spec = def.param(key).ok_or_else(|| format!("unknown parameter `{key}`"))?;
        let value = match spec.default.kind() {
            ParamKind::Text => json!(raw),
            ParamKind::Number => {
                let n: f64 = raw.parse().map_err(|_| format!("`{key}` expects a number, got `{raw}`"))?;
                if !n.is_finite() {
                    return Err(format!("`{key}` expects a finite number"));
                }
                if n.fract() == 0.0 && n.abs() < 9.007_199_254_740_992e15 {
                    json!(n as i64)
                } else {
                    json!(n)
                }
            }
            ParamKind::Flag => match raw {
                "true" | "1" | "yes" | "on" => json!(true),
                "false" | "0" | "no" | "off" => json!(false),
                _ => return Err(format!("`{key}` expects true or false, got `{raw}`")),
            },
            ParamKind::File => json!({ "value": raw, "is_file": true }),
        };
        out.insert(key.to_string(), value);
    }
    Ok(out)
}

fn print_json(value: &impl serde::Serialize) {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    println!("{text}");
}

fn wait_exit(outcome: &WaitOutcome) -> u8 {
    match outcome {
        WaitOutcome::TimedOut(_) => EXIT_WAIT_TIMEOUT,
        WaitOutcome::Settled(st) => match st.status {
            ExperimentState::BuildFailed | ExperimentState::RunFailed => EXIT_FAILED,
            _ => EXIT_OK,
        },
    }
}

async fn wait_and_report(client: &Client, id: ExperimentId, args: &WaitArgs) -> Result<u8, CliError> {
    let limit = match args.wait_timeout {
        Some(t) if t.is_finite() && t >= 0.0 => Some(Duration::from_secs_f64(t)),
        Some(_) => return Err(CliError::usage("--wait-timeout must be a non-negative number")),
        None => None,
    };
    let outcome = client.wait(id, WAIT_POLL, limit).await?;
    let st = match &outcome {
        WaitOutcome::Settled(st) | WaitOutcome::TimedOut(st) => st,
    };
    print_json(st);
    if let WaitOutcome::TimedOut(_) = outcome {
        eprintln!("error: timeout: still {} after waiting", st.status);
    }
    Ok(wait_exit(&outcome))
}

async fn serve(
    config: Option<PathBuf>,
    listen: Option<String>,
    data_dir: Option<PathBuf>,
    catalog_dir: Option<PathBuf>,
    backends: Option<PathBuf>,
) -> Result<u8, CliError> {
    let mut cfg = ServiceConfig::load(config.as_deref()).map_err(CliError::usage)?;
    if let Some(v) = listen {
        cfg.listen = v;
    }
    if let Some(v) = data_dir {
        cfg.data_dir = v;
    }
    if let Some(v) = catalog_dir {
        cfg.catalog_dir = v;
    }
    if let Some(v) = backends {
        cfg.backends_file = Some(v);
    }
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(cfg.log_level.clone().unwrap_or_else(|| "info".into())));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();

    let shutdown = async {
        let ctrl_c = tokio::signal::ctrl_c();
        let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()).expect("signal handler");
        tokio::select! {
            _ = ctrl_c => {}
            _ = term.recv() => {}
        }
    };
    crate::evalapi::serve(
        cfg,
        |addr| {
            println!("listening on http://{addr}");
            let _ = std::io::stdout().flush();
        },
        shutdown,
    )
    .await
    .map_err(|e| CliError { exit: EXIT_FAILED, message: e })?;
    Ok(EXIT_OK)
}

pub async fn execute(cli: Cli) -> Result<u8, CliError> {
    let client = || -> Result<Client, CliError> {
        Ok(Client::new(&cli.endpoint)?.with_token(cli.token.clone()).with_user(cli.user.clone()))
    };
    match cli.command {
        Command::Serve { config, listen, data_dir, catalog_dir, backends } => {
            serve(config, listen, data_dir, catalog_dir, backends).await
        }
        Command::Systems { json } => {
            let systems = client()?.systems().await?;
            if json {
                print_json(&systems);
            } else {
                let nw = systems.iter().map(|s| s.name.len()).max().unwrap_or(0).max(4);
                let vw = systems.iter().map(|s| s.version.len()).max().unwrap_or(0).max(7);
                println!("{:<nw$}  {:<vw$}  SUMMARY", "NAME", "VERSION");
                for s in systems {
                    println!("{:<nw$}  {:<vw$}  {}", s.name, s.version, s.summary);
                }
            }
            Ok(EXIT_OK)
        }
        Command::System { name, version } => {
            let def = client()?.system(&SystemRef { name, version }).await?;
            print!("{}", def.to_canonical_string());
            Ok(EXIT_OK)
        }
        Command::Create { system, version, set, description } => {
            let c = client()?;
            let system = SystemRef { name: system, version };
            let def = c.system(&system).await?;
            let values = parse_assignments(&def, &set).map_err(CliError::usage)?;
            let mut req = CreateRequest { system, description, ..Default::default() };
            for (k, v) in values {
                match def.param(&k).map(|p| p.phase) {
                    Some(crate::sysdef::Phase::Build) => req.build_parameters.insert(k, v),
                    _ => req.run_parameters.insert(k, v),
                };
            }
            println!("{}", c.create(&req).await?);
            Ok(EXIT_OK)
        }
        Command::List { creator, status } => {
            print_json(&client()?.list(creator.as_deref(), status).await?);
            Ok(EXIT_OK)
        }
        Command::Set { id, assignments } => {
            let c = client()?;
            let exp = c.experiment(id).await?;
            let def = c.system(&exp.system).await?;
            let values = parse_assignments(&def, &assignments).map_err(CliError::usage)?;
            print_json(&c.set_parameters(id, &values).await?);
            Ok(EXIT_OK)
        }
        Command::Upload { id, name, file } => {
            if !file.is_file() {
                return Err(CliError::usage(format!("{} is not a readable file", file.display())));
            }
            client()?.upload(id, &name, &file).await?;
            Ok(EXIT_OK)
        }
        Command::Build { id, timeout, wait } => {
            let c = client()?;
            let state = c.build(id, timeout).await?;
            if wait.wait {
                wait_and_report(&c, id, &wait).await
            } else {
                println!("{state}");
                Ok(EXIT_OK)
            }
        }
        Command::Run { id, timeout, set, wait } => {
            let c = client()?;
            let run_parameters = if set.is_empty() {
                BTreeMap::new()
            } else {
                let exp = c.experiment(id).await?;
                let def = c.system(&exp.system).await?;
                parse_assignments(&def, &set).map_err(CliError::usage)?
            };
            c.run(id, &RunRequest { timeout_s: timeout, run_parameters }).await?;
            if wait.wait {
                wait_and_report(&c, id, &wait).await
            } else {
                println!("{}", ExperimentState::Running);
                Ok(EXIT_OK)
            }
        }
        Command::Status { id, wait } => {
            let c = client()?;
            if wait.wait {
                wait_and_report(&c, id, &wait).await
            } else {
                print_json(&c.status(id).await?);
                Ok(EXIT_OK)
            }
        }
        Command::Result { id, name, out } => {
            let c = client()?;
            match out {
                Some(path) => {
                    c.result_to_file(id, &name, &path).await?;
                }
                None => {
                    let bytes = c.result(id, &name).await?;
                    std::io::stdout().write_all(&bytes)?;
                }
            }
            Ok(EXIT_OK)
        }
        Command::Log { id } => {
            print!("{}", client()?.log(id).await?);
            Ok(EXIT_OK)
        }
        Command::Archive { id, out } => {
            let c = client()?;
            let resp = c.archive(id).await?;
            if let Some(path) = out {
                c.archive_to_file(id, &path).await?;
            }
            print_json(&resp);
            Ok(EXIT_OK)
        }
        Command::Delete { id } => {
            client()?.delete(id).await?;
            Ok(EXIT_OK)
        }
        Command::Bench { system, version, apps, param, metric, parallel, timeout, set } => {
            let c = client()?;
            let system = SystemRef { name: system, version };
            let (metric_result, pointer) = parse_metric_spec(&metric).map_err(CliError::usage)?;
            let overrides = if set.is_empty() {
                BTreeMap::new()
            } else {
                let def = c.system(&system).await?;
                parse_assignments(&def, &set).map_err(CliError::usage)?
            };
            let opts = BenchOptions {
                system,
                apps_dir: apps,
                param,
                metric_result,
                pointer,
                parallel,
                timeout_s: timeout,
                overrides,
                poll: WAIT_POLL,
            };
            let report = run_bench(&c, &opts).await.map_err(|e| match e {
                BenchError::Usage(m) => CliError::usage(m),
                BenchError::Client(c) => c.into(),
            })?;
            eprint!("{}", report.table());
            print_json(&report);
            Ok(if report.failed == 0 { EXIT_OK } else { EXIT_FAILED })
        }
    }
}

/// Entry point for the `sunrise` binary.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(EXIT_FAILED);
        }
    };
    match runtime.block_on(execute(cli)) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.exit)
        }
    }
}
