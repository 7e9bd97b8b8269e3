//! `medas` command-line client.
//!
//! Exit codes: 0 ok, 1 validation, 2 execution failure, 3 transport or
//! auth, 4 unsatisfiable resources. Machine-readable results go to stdout,
//! prose and logs to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use medas::client::{Client, ClientError};
use medas::engine::{Engine, EngineError, RunOptions};
use medas::logging::{LogSink, TerminalSink};
use medas::service::{self, ServiceConfig};
use medas::study::{run_config, PipelineSource, StudyConfig, StudyRecord};
use medas::tools::Registry;
use medas_core::graph::PipelineGraph;
use medas_core::scheduler::ResourceRequest;

const OK: u8 = 0;
const VALIDATION: u8 = 1;
const EXECUTION: u8 = 2;
const TRANSPORT: u8 = 3;
const UNSATISFIABLE: u8 = 4;

#[derive(Parser)]
#[command(name = "medas", version, about = "Typed dataflow pipelines for image analysis")]
struct Cli {
    /// Service URL for remote commands.
    #[arg(long, global = true, env = "MEDAS_SERVER")]
    server: Option<String>,
    /// API token for remote commands.
    #[arg(long, global = true, env = "MEDAS_TOKEN", hide_env_values = true)]
    token: Option<String>,
    /// Data directory for local commands.
    #[arg(long, global = true, env = "MEDAS_DATA_DIR", default_value = ".medas")]
    data_dir: PathBuf,
    /// Directory of external tool specs (`*.json`).
    #[arg(long, global = true, env = "MEDAS_TOOLS_DIR")]
    tools_dir: Option<PathBuf>,
    /// Suppress log lines on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect the tool registry.
    Tools {
        #[command(subcommand)]
        command: ToolsCommand,
    },
    /// Statically check a pipeline.
    Validate {
        #[arg(short, long)]
        pipeline: PathBuf,
    },
    /// Execute a pipeline locally.
    Run {
        #[arg(short, long)]
        pipeline: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_cache: bool,
        #[arg(long)]
        workdir: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        /// Print `node<TAB>state<TAB>cache_key` per node.
        #[arg(long)]
        explain: bool,
        /// Print the full run record as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Submit a pipeline to the service; prints the task id.
    Submit {
        #[arg(short, long)]
        pipeline: PathBuf,
        #[arg(long, default_value_t = 0)]
        gpus: u32,
        #[arg(long, default_value_t = 1)]
        cpus: u32,
        #[arg(long, default_value_t = 512)]
        mem: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        idempotency_key: Option<String>,
    },
    /// Inspect or control a submitted task.
    Task {
        #[command(subcommand)]
        command: TaskCommand,
    },
    /// Hyper-parameter studies.
    Study {
        #[command(subcommand)]
        command: StudyCommand,
    },
    /// Run the HTTP service (configured by MEDAS_* variables).
    Serve {
        #[arg(long, env = "MEDAS_BIND_ADDR", default_value = service::DEFAULT_BIND_ADDR)]
        bind: String,
    },
    /// Quarantine unreadable metadata files so the service can start.
    Repair,
}

#[derive(Subcommand)]
enum ToolsCommand {
    List {
        #[arg(long)]
        json: bool,
    },
    Describe { id: String },
}

#[derive(Subcommand)]
enum TaskCommand {
    Status { id: String },
    Logs {
        id: String,
        #[arg(long)]
        follow: bool,
    },
    Kill { id: String },
}

#[derive(Subcommand)]
enum StudyCommand {
    /// Run a study (locally, or on the service when --server is set).
    Run {
        #[arg(short, long)]
        study: PathBuf,
    },
    /// Show a study summary as JSON.
    Show { id: String },
    /// Print the trials table.
    Trials {
        id: String,
        #[arg(long)]
        csv: bool,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Failure {
        let code = match e.status() {
            None | Some(401) | Some(403) => TRANSPORT,
            Some(400) => VALIDATION,
            Some(422) => UNSATISFIABLE,
            Some(_) => EXECUTION,
        };
        fail(code, e.to_string())
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Failure {
        let code = match e {
            EngineError::Invalid(_) | EngineError::Graph(_) => VALIDATION,
            _ => EXECUTION,
        };
        fail(code, e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::from(OK),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn registry(cli: &Cli) -> Result<Registry, Failure> {
    let mut r = Registry::builtin();
    if let Some(dir) = &cli.tools_dir {
        r.load_dir(dir).map_err(|e| fail(VALIDATION, format!("tools dir: {e:#}")))?;
    }
    Ok(r)
}

fn engine(cli: &Cli) -> Result<Engine, Failure> {
    Ok(Engine::open(&cli.data_dir, registry(cli)?)?)
}

fn client(cli: &Cli) -> Result<Client, Failure> {
    let server = cli.server.as_deref().ok_or_else(|| fail(TRANSPORT, "--server or MEDAS_SERVER is required"))?;
    let token = cli.token.as_deref().ok_or_else(|| fail(TRANSPORT, "--token or MEDAS_TOKEN is required"))?;
    Ok(Client::new(server, token))
}

fn read_pipeline(path: &Path) -> Result<(String, PipelineGraph), Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| fail(VALIDATION, format!("{}: {e}", path.display())))?;
    let g = PipelineGraph::from_json(&text).map_err(|e| fail(VALIDATION, format!("{}: {e}", path.display())))?;
    Ok((text, g))
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("value serializes"));
}

fn dispatch(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Tools { command } => tools(cli, command),
        Command::Validate { pipeline } => {
            let (_, g) = read_pipeline(pipeline)?;
            let report = engine(cli)?.validate(&g);
            for d in &report.diagnostics {
                eprintln!("{:?} {}: {}", d.code, d.subject, d.message);
            }
            if report.is_ok() {
                eprintln!("{}: ok", pipeline.display());
                Ok(())
            } else {
                Err(fail(VALIDATION, format!("{} diagnostics", report.diagnostics.len())))
            }
        }
        Command::Run {
            pipeline,
            seed,
            no_cache,
            workdir,
            workers,
            explain,
            json,
        } => {
            let (_, g) = read_pipeline(pipeline)?;
            let engine = engine(cli)?;
            let mut opts = RunOptions {
                cache: !no_cache,
                seed: *seed,
                workdir: workdir.clone(),
                ..RunOptions::default()
            };
            if let Some(w) = workers {
                opts.max_workers = (*w).max(1);
            }
            if !cli.quiet {
                opts.sinks.push(Arc::new(TerminalSink) as Arc<dyn LogSink>);
            }
            let record = engine.execute(&g, &opts)?;
            if *json {
                print_json(&record);
            } else if *explain {
                print!("{}", record.explain());
            } else {
                println!("{}", record.run_id);
            }
            eprintln!("run {} {:?}, {} tool executions", record.run_id, record.status, record.executions);
            if record.is_success() {
                Ok(())
            } else {
                Err(fail(EXECUTION, format!("run {} did not succeed", record.run_id)))
            }
        }
        Command::Submit {
            pipeline,
            gpus,
            cpus,
            mem,
            seed,
            idempotency_key,
        } => {
            let (text, _) = read_pipeline(pipeline)?;
            let c = client(cli)?;
            let pid = c.create_pipeline(&text)?;
            let v = c.submit(&pid, ResourceRequest::new(*cpus, *gpus, *mem), *seed, idempotency_key.as_deref())?;
            println!("{}", v["task"]["task_id"]);
            eprintln!("pipeline {pid}, state {}", v["task"]["state"]["state"]);
            Ok(())
        }
        Command::Task { command } => {
            let c = client(cli)?;
            match command {
                TaskCommand::Status { id } => print_json(&c.task(id)?),
                TaskCommand::Logs { id, follow } => c.logs(id, *follow, |line| println!("{line}"))?,
                TaskCommand::Kill { id } => print_json(&c.kill(id)?),
            }
            Ok(())
        }
        Command::Study { command } => study(cli, command),
        Command::Serve { bind } => {
            let mut config = ServiceConfig::from_env().map_err(|e| fail(VALIDATION, e.to_string()))?;
            config.data_dir = cli.data_dir.clone();
            config.bind_addr = bind.clone();
            if cli.tools_dir.is_some() {
                config.tools_dir = cli.tools_dir.clone();
            }
            let rt = tokio::runtime::Runtime::new().map_err(|e| fail(EXECUTION, e.to_string()))?;
            rt.block_on(service::serve(config)).map_err(|e| fail(EXECUTION, format!("{e:#}")))
        }
        Command::Repair => {
            let moved = service::repair(&cli.data_dir).map_err(|e| fail(EXECUTION, e.to_string()))?;
            for p in &moved {
                println!("{}", p.display());
            }
            eprintln!("{} file(s) quarantined", moved.len());
            Ok(())
        }
    }
}

fn tools(cli: &Cli, command: &ToolsCommand) -> CliResult {
    let registry = registry(cli)?;
    match command {
        ToolsCommand::List { json } => {
            if *json {
                print_json(&registry.catalog().iter().collect::<Vec<_>>());
            } else {
                for t in registry.catalog().iter() {
                    println!("{}\t{:?}\t{}", t.qualified_id(), t.category, t.description);
                }
            }
            Ok(())
        }
        ToolsCommand::Describe { id } => {
            let spec = registry
                .catalog()
                .resolve(id)
                .or_else(|| registry.catalog().iter().filter(|t| t.tool_id == *id).last())
                .ok_or_else(|| fail(VALIDATION, format!("unknown tool {id}")))?;
            print_json(spec);
            Ok(())
        }
    }
}

fn study(cli: &Cli, command: &StudyCommand) -> CliResult {
    let remote = cli.server.is_some();
    match command {
        StudyCommand::Run { study } => {
            let config = StudyConfig::load(study).map_err(|e| fail(VALIDATION, e.to_string()))?;
            if remote {
                let mut config = config;
                let template = config.template().map_err(|e| fail(VALIDATION, e.to_string()))?;
                config.pipeline = PipelineSource::Inline(
                    serde_json::from_str(&template.to_canonical_json()).expect("canonical JSON parses"),
                );
                let v = serde_json::to_value(&config).expect("config serializes");
                println!("{}", client(cli)?.create_study(&v)?);
                return Ok(());
            }
            let engine = engine(cli)?;
            config.check(&engine).map_err(|e| fail(VALIDATION, e.to_string()))?;
            let record = run_config(&engine, config, &RunOptions::default()).map_err(|e| fail(EXECUTION, e.to_string()))?;
            println!("{}", record.study_id);
            match record.study.best() {
                Some(b) => eprintln!("best trial {} y={:?} x={:?}", b.trial_id, b.y, b.x),
                None => eprintln!("no trial completed"),
            }
            Ok(())
        }
        StudyCommand::Show { id } => {
            if remote {
                print_json(&client(cli)?.study(id)?);
            } else {
                let rec = StudyRecord::load(&cli.data_dir, id).map_err(|e| fail(EXECUTION, e.to_string()))?;
                print_json(&rec);
            }
            Ok(())
        }
        StudyCommand::Trials { id, csv } => {
            let text = if remote {
                client(cli)?.study_trials_csv(id)?
            } else {
                StudyRecord::load(&cli.data_dir, id).map_err(|e| fail(EXECUTION, e.to_string()))?.trials_csv()
            };
            if *csv {
                print!("{text}");
            } else {
                for line in text.lines() {
                    println!("{}", line.replace(',', "\t"));
                }
            }
            Ok(())
        }
    }
}
