use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use edgetier::control::{ActionOutcome, Placement, TaskAction, TaskFilter};
use edgetier::domain::{AgentId, AttributeConstraint, AttributeValue, TaskState};
use edgetier::scheduler::{LogNotifier, Notifier};
use edgetier::simnet::{run_scenario, Scenario, Sim};
use edgetier_cli::api::{self, ServeOptions};
use edgetier_cli::client::Client;
use edgetier_cli::notify::WebhookNotifier;
use edgetier_cli::{demo_scenario, render};

#[derive(Parser)]
#[command(name = "edgetier", version, about = "Deploy and inspect tasks on an edge cluster")]
struct Cli {
    /// Control-plane address.
    #[arg(long, global = true, env = "EDGETIER_MASTER_ADDR", default_value = "127.0.0.1:7070")]
    master_addr: String,
    /// Bearer token for mutations.
    #[arg(long, global = true, env = "EDGETIER_TOKEN")]
    token: Option<String>,
    #[arg(long, global = true, value_enum, default_value_t = Output::Table)]
    output: Output,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Output {
    Table,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// Submit a deployment manifest, optionally with a task archive.
    Deploy {
        manifest: PathBuf,
        #[arg(long)]
        archive: Option<PathBuf>,
        /// Pin to these agents instead of letting offers decide. Repeatable.
        #[arg(long = "agent")]
        agents: Vec<String>,
        #[arg(long)]
        request_id: Option<String>,
    },
    /// List tasks, newest first.
    Ps {
        #[arg(long)]
        agent: Option<String>,
        #[arg(long)]
        status: Option<String>,
    },
    Kill {
        task: String,
        #[arg(long)]
        request_id: Option<String>,
    },
    /// Requeue a failed or lost task. Killed tasks stay killed.
    Restart {
        task: String,
        #[arg(long)]
        request_id: Option<String>,
    },
    Logs {
        task: String,
    },
    Agents,
    /// Attribute names and values across agents.
    Attrs {
        /// Only agents with `name=value`. Repeatable.
        #[arg(long = "where")]
        filters: Vec<String>,
    },
    /// Run a scenario file offline; exits nonzero if any assertion fails.
    Simulate {
        scenario: PathBuf,
        /// Write the trace here as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Serve the control plane over a simulated cluster.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: String,
        /// Cluster to simulate; a small demo cluster by default.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        tick_ms: u64,
        /// POST administrator notifications here.
        #[arg(long)]
        webhook: Option<String>,
    },
}

type Failure = Box<dyn std::error::Error>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Writes to stdout; a closed pipe (`edgetier ps | head`) is not an error.
fn emit(text: &str) -> Result<(), Failure> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print<T: Serialize>(output: Output, value: &T, table: impl FnOnce(&T) -> String) -> Result<(), Failure> {
    match output {
        Output::Json => emit(&(serde_json::to_string_pretty(value)? + "\n")),
        Output::Table => emit(&table(value)),
    }
}

fn parse_state(s: &str) -> Result<TaskState, Failure> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase())).map_err(|_| format!("unknown status `{s}`").into())
}

fn run(cli: Cli) -> Result<ExitCode, Failure> {
    let client = || Client::new(&cli.master_addr, cli.token.clone());
    let out = cli.output;
    match cli.cmd {
        Cmd::Deploy {
            manifest,
            archive,
            agents,
            request_id,
        } => {
            let text = std::fs::read_to_string(&manifest)?;
            let archive = archive.map(std::fs::read).transpose()?;
            let placement = if agents.is_empty() {
                Placement::Auto
            } else {
                Placement::Manual {
                    agents: agents.into_iter().map(AgentId::from).collect(),
                }
            };
            let ids = client().deploy(&text, archive, &placement, request_id.as_deref())?;
            print(out, &ids, |ids| ids.iter().map(|i| format!("{i}\n")).collect())?;
        }
        Cmd::Ps { agent, status } => {
            let filter = TaskFilter {
                agent: agent.map(AgentId::from),
                status: status.as_deref().map(parse_state).transpose()?,
            };
            print(out, &client().tasks(&filter)?, |r| render::tasks(r))?;
        }
        Cmd::Kill { task, request_id } => {
            let o = client().action(&task.into(), TaskAction::Kill, request_id.as_deref())?;
            print(out, &o, accepted)?;
        }
        Cmd::Restart { task, request_id } => {
            let o = client().action(&task.into(), TaskAction::Restart, request_id.as_deref())?;
            print(out, &o, accepted)?;
        }
        Cmd::Logs { task } => {
            let logs = client().logs(&task.into())?;
            match out {
                Output::Json => emit(&(serde_json::to_string_pretty(&logs)? + "\n"))?,
                Output::Table => {
                    emit(&logs.stdout)?;
                    eprint!("{}", logs.stderr);
                }
            }
        }
        Cmd::Agents => print(out, &client().agents()?, |a| render::agents(a))?,
        Cmd::Attrs { filters } => {
            let filter = filters
                .iter()
                .map(|f| {
                    let (k, v) = f.split_once('=').ok_or_else(|| format!("expected name=value, got `{f}`"))?;
                    Ok(AttributeConstraint::equals(k, AttributeValue::text(v)))
                })
                .collect::<Result<Vec<_>, Failure>>()?;
            print(out, &client().attributes(&filter)?, render::attributes)?;
        }
        Cmd::Simulate { scenario, trace } => {
            let scenario = Scenario::parse(&std::fs::read_to_string(&scenario)?)?;
            let report = run_scenario(&scenario)?;
            if let Some(path) = trace {
                std::fs::write(path, report.trace.to_jsonl())?;
            }
            match out {
                Output::Json => emit(
                    &(serde_json::to_string_pretty(&serde_json::json!({
                        "name": report.name,
                        "passed": report.passed(),
                        "assertions": report.assertions.iter().map(|a| serde_json::json!({
                            "name": a.name, "passed": a.passed, "detail": a.detail,
                        })).collect::<Vec<_>>(),
                        "violations": report.violations,
                    }))? + "\n"),
                )?,
                Output::Table => emit(&render::report(&report))?,
            }
            if !report.passed() || !report.violations.is_empty() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::Serve {
            listen,
            scenario,
            tick_ms,
            webhook,
        } => {
            let scenario = match scenario {
                Some(p) => Scenario::parse(&std::fs::read_to_string(p)?)?,
                None => demo_scenario(),
            };
            let sim = Arc::new(Mutex::new(Sim::new(scenario)?));
            let mut notifiers: Vec<Box<dyn Notifier>> = vec![Box::new(LogNotifier)];
            if let Some(url) = webhook {
                notifiers.push(Box::new(WebhookNotifier::new(url)));
            }
            let opts = ServeOptions {
                token: cli.token.clone(),
                tick: Duration::from_millis(tick_ms.max(1)),
                notifiers,
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&listen).await?;
                log::info!("control plane listening on http://{}", listener.local_addr()?);
                api::serve(listener, sim, opts).await
            })?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn accepted(o: &ActionOutcome) -> String {
    match o {
        ActionOutcome::Accepted { task_id, action } => format!("{action:?} accepted for {task_id}\n").to_lowercase(),
        ActionOutcome::Logs { task_id, .. } => format!("logs for {task_id}\n"),
    }
}
