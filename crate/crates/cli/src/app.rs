//! Flag parsing and run setup for the `pentrail` binary.

use std::ffi::OsString;
use std::io::{self, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{CommandFactory, Parser};
use pentrail_core::aci::ToolRegistry;
use pentrail_core::events::EventLog;
use pentrail_core::llm::{Gateway, ScriptedTranscript};
use pentrail_core::operator::{Mailbox, NonInteractive, OperatorChannel, TerminalPrompt, DEFAULT_DECISION_WINDOW};
use pentrail_core::orchestrator::{run, Ablation, Pipeline, RunConfig, RunError, RunOutcome};
use pentrail_core::rag::{ingest_corpus, load_corpus_dir, AttackHostProfile, VectorIndex};
use pentrail_core::sim::{run_fake_tool, FakeToolArgs, PackError, Scenario, ScenarioPack};
use serde_json::json;
use thiserror::Error;

use crate::config::FileConfig;
use crate::service::{self, ServiceState};

/// Hidden first argument that turns the binary into a scenario fake tool.
pub const FAKE_TOOL_COMMAND: &str = "fake-tool";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "pentrail", version, about = "Tree-guided penetration testing agent")]
pub struct Cli {
    /// Target address or host name. Repeat or separate with commas.
    #[arg(long, value_delimiter = ',')]
    pub target: Vec<String>,
    /// TOML file with backend, host and run settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of .md and .txt knowledge documents.
    #[arg(long)]
    pub kb: Option<PathBuf>,
    /// Tool registry TOML.
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long)]
    pub max_iterations: Option<u32>,
    /// Never wait for the operator; repetitions continue.
    #[arg(long)]
    pub non_interactive: bool,
    /// Record commands instead of running them.
    #[arg(long)]
    pub dry_run: bool,
    /// Enabled components, e.g. `R,L` or `B*,R,L,V`. `base` turns all off.
    #[arg(long, value_parser = parse_ablation)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub report_out: Option<PathBuf>,
    #[arg(long)]
    pub log_out: Option<PathBuf>,
    /// Directory for the log, report, task tree and scenario tool stubs.
    #[arg(long, default_value = "pentrail-run")]
    pub out_dir: PathBuf,
    /// Scenario pack name or directory.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Serve the operator API on this loopback address.
    #[arg(long)]
    pub serve: Option<SocketAddr>,
    /// Scripted model transcript. Relative names are also looked up in the
    /// scenario pack.
    #[arg(long)]
    pub mock_llm: Option<PathBuf>,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse()
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(m) => CliError::Config(m),
            RunError::Log(e) => CliError::Io(e.to_string()),
            RunError::Report(e) => CliError::Io(e.to_string()),
        }
    }
}

impl From<PackError> for CliError {
    fn from(e: PackError) -> Self {
        match e {
            PackError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

/// Everything a run needs, owned.
pub struct Prepared {
    pub cfg: RunConfig,
    pub gateway: Gateway,
    pub registry: ToolRegistry,
    pub index: Option<VectorIndex>,
    pub profile: AttackHostProfile,
    pub decision_window: Duration,
}

impl Prepared {
    pub fn pipeline<'a>(&'a self, operator: &'a dyn OperatorChannel, events: &'a EventLog) -> Pipeline<'a> {
        Pipeline {
            gateway: &self.gateway,
            registry: &self.registry,
            index: self.index.as_ref(),
            profile: &self.profile,
            operator,
            events,
        }
    }
}

fn build_index(dir: &Path, gateway: &Gateway) -> Result<VectorIndex, CliError> {
    let docs = load_corpus_dir(dir).map_err(|e| CliError::Config(format!("knowledge base: {e}")))?;
    ingest_corpus(&docs, gateway).map_err(|e| CliError::Config(format!("knowledge base {}: {e}", dir.display())))
}

fn load_transcript(path: &Path) -> Result<ScriptedTranscript, CliError> {
    ScriptedTranscript::load(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// This binary's own fake tool mode.
pub fn self_launcher() -> Result<Vec<String>, CliError> {
    let exe = std::env::current_exe().map_err(|e| CliError::Io(format!("current executable: {e}")))?;
    Ok(vec![exe.display().to_string(), FAKE_TOOL_COMMAND.to_string()])
}

/// Resolves flags, the config file and the scenario pack into a run.
/// Scenario tool stubs exec `launcher`.
pub fn prepare(cli: &Cli, launcher: &[String]) -> Result<Prepared, CliError> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p).map_err(CliError::Config)?,
        None => FileConfig::default(),
    };
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| CliError::Io(format!("{}: {e}", cli.out_dir.display())))?;
    let out_dir = std::fs::canonicalize(&cli.out_dir).map_err(|e| CliError::Io(format!("{}: {e}", cli.out_dir.display())))?;

    let (mut cfg, gateway, registry, mut index, profile) = match &cli.scenario {
        Some(name) => {
            let pack = ScenarioPack::resolve(name)?;
            let transcript = match &cli.mock_llm {
                Some(p) if p.exists() => Some(load_transcript(p)?),
                Some(p) => Some(load_transcript(&pack.dir.join(p))?),
                None => None,
            };
            let sc = Scenario::prepare(pack, &out_dir, launcher, transcript)?;
            if !cli.target.is_empty() && cli.target != [sc.pack.manifest.target.clone()] {
                tracing::warn!("--target ignored; scenario {} targets {}", sc.pack.name(), sc.pack.manifest.target);
            }
            let cfg = sc.config(Ablation::FULL);
            (cfg, sc.gateway, sc.registry, sc.index, sc.profile)
        }
        None => {
            let targets = if cli.target.is_empty() { file.targets.clone() } else { cli.target.clone() };
            if targets.iter().all(|t| t.trim().is_empty()) {
                return Err(CliError::Config(format!(
                    "no target given; use --target or --scenario\n\n{}",
                    Cli::command().render_usage()
                )));
            }
            let gateway = match &cli.mock_llm {
                Some(p) => Gateway::scripted(load_transcript(p)?).0,
                None => Gateway::from_config(&file.backend, None).map_err(|e| CliError::Config(e.to_string()))?,
            };
            let reg_path = cli
                .registry
                .clone()
                .or(file.registry.clone())
                .ok_or_else(|| CliError::Config("no tool registry given; use --registry".into()))?;
            let registry = ToolRegistry::load(&reg_path).map_err(|e| CliError::Config(e.to_string()))?;
            let index = match &file.kb {
                Some(dir) if cli.kb.is_none() => Some(build_index(dir, &gateway)?),
                _ => None,
            };
            let local_ip = file.host.local_ip.clone().unwrap_or_else(|| {
                tracing::warn!("no [host] local_ip configured; using 127.0.0.1");
                "127.0.0.1".into()
            });
            let profile = AttackHostProfile {
                local_ip,
                wordlist_paths: file.host.wordlists.clone(),
                workspace_dir: file.host.workspace_dir.clone().unwrap_or_else(|| out_dir.clone()),
            };
            profile.validate().map_err(|e| CliError::Config(e.to_string()))?;
            let cfg = RunConfig::new(targets, &out_dir);
            (cfg, gateway, registry, index, profile)
        }
    };
    if let Some(dir) = &cli.kb {
        index = Some(build_index(dir, &gateway)?);
    }

    let r = &file.run;
    if let Some(n) = cli.max_iterations.or(r.max_iterations) {
        cfg.max_iterations = n;
    }
    if let Some(n) = r.max_retries {
        cfg.max_retries = n;
    }
    if let Some(n) = r.max_replans {
        cfg.max_replans = n;
    }
    if let Some(t) = r.repetition_threshold {
        cfg.repetition_threshold = t;
    }
    if let Some(k) = r.top_k {
        cfg.top_k = k;
    }
    cfg.ablation = cli.ablation.unwrap_or(Ablation::FULL);
    cfg.interactive = !cli.non_interactive;
    cfg.dry_run = cli.dry_run;
    if let Some(p) = &cli.log_out {
        cfg.log_path = p.clone();
    }
    if let Some(p) = &cli.report_out {
        cfg.report_path = p.clone();
    }
    cfg.validate()?;
    Ok(Prepared {
        cfg,
        gateway,
        registry,
        index,
        profile,
        decision_window: r.decision_window_secs.map(Duration::from_secs).unwrap_or(DEFAULT_DECISION_WINDOW),
    })
}

fn summary_line(out: &RunOutcome) -> String {
    json!({
        "stop": out.stop,
        "iterations": out.records.len(),
        "log": out.log_path,
        "report": out.report_path,
        "report_rows": out.report.rows.len(),
        "metrics": out.metrics,
    })
    .to_string()
}

/// Runs with the terminal as the operator channel, or with the HTTP service
/// when `--serve` is given.
pub fn execute(cli: &Cli, prepared: &Prepared, stdout: &mut dyn Write) -> Result<RunOutcome, CliError> {
    let events = Arc::new(EventLog::new());
    let outcome = match cli.serve {
        None => {
            let operator: Box<dyn OperatorChannel> = if cli.non_interactive {
                Box::new(NonInteractive)
            } else {
                Box::new(TerminalPrompt {
                    window: prepared.decision_window,
                })
            };
            run(&prepared.cfg, prepared.pipeline(operator.as_ref(), &events))?
        }
        Some(addr) => {
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Io(format!("runtime: {e}")))?;
            let mailbox = Arc::new(Mailbox::new(prepared.decision_window));
            let state = ServiceState::new(events.clone(), mailbox.clone(), prepared.cfg.report_path.clone());
            let (bound, server) = rt.block_on(service::bind(addr, state)).map_err(|e| match e.kind() {
                io::ErrorKind::InvalidInput => CliError::Config(format!("--serve: {e}")),
                _ => CliError::Io(format!("--serve {addr}: {e}")),
            })?;
            eprintln!("operator service on http://{bound}");
            let outcome = run(&prepared.cfg, prepared.pipeline(mailbox.as_ref(), &events))?;
            let _ = writeln!(stdout, "{}", summary_line(&outcome));
            eprintln!("run finished; still serving on http://{bound}, interrupt to quit");
            rt.block_on(async {
                let _ = tokio::signal::ctrl_c().await;
            });
            server.abort();
            return Ok(outcome);
        }
    };
    let _ = writeln!(stdout, "{}", summary_line(&outcome));
    Ok(outcome)
}

fn fake_tool_main(args: Vec<String>) -> i32 {
    match FakeToolArgs::parse(args) {
        Ok(a) => {
            let mut input = BufReader::new(io::stdin());
            run_fake_tool(&a, &mut input, &mut io::stdout())
        }
        Err(e) => {
            eprintln!("pentrail {FAKE_TOOL_COMMAND}: {e}");
            EXIT_CONFIG
        }
    }
}

/// The whole binary. Returns the process exit code.
pub fn main_with_args(args: Vec<OsString>) -> i32 {
    if args.get(1).is_some_and(|a| a == FAKE_TOOL_COMMAND) {
        return fake_tool_main(args.into_iter().skip(2).map(|a| a.to_string_lossy().into_owned()).collect());
    }
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = self_launcher().and_then(|l| prepare(&cli, &l)).and_then(|p| execute(&cli, &p, &mut io::stdout()));
    match result {
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("pentrail: {e}");
            e.exit_code()
        }
    }
}

