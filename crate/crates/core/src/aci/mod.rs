//! Tool interface: the registry, structured command extraction, execution of
//! static and interactive tools, and the scope check that precedes every run.

mod exec;
mod extract;
mod pty;
pub mod scope;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::llm::duration_secs;

pub use exec::{execute, execute_interactive, execute_static, ExecOptions};
pub use extract::extract_commands;
pub use scope::{scope_guard, ScopeViolation};

/// Per-step cap for interactive settling, whatever the quiet period.
pub const INTERACTIVE_STEP_CAP: Duration = Duration::from_secs(120);
pub const DEFAULT_QUIET_PERIOD: Duration = Duration::from_secs(5);
pub const DEFAULT_MAX_OUTPUT: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum AciError {
    #[error("tool registry is empty")]
    EmptyRegistry,
    #[error("duplicate tool {0:?} in registry")]
    DuplicateTool(String),
    #[error("tool {name}: {message}")]
    InvalidTool { name: String, message: String },
    #[error("registry {path}: {message}")]
    RegistryFile { path: PathBuf, message: String },
    #[error("binary {0} not found")]
    BinaryMissing(PathBuf),
    #[error("command for {tool} does not match its {mode} mode")]
    ModeMismatch { tool: String, mode: ToolMode },
    #[error("command for {0} is empty")]
    EmptyCommand(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToolMode {
    Static,
    Interactive,
}

impl fmt::Display for ToolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToolMode::Static => "static",
            ToolMode::Interactive => "interactive",
        })
    }
}

fn default_timeout() -> Duration {
    Duration::from_secs(300)
}

fn default_quiet() -> Duration {
    DEFAULT_QUIET_PERIOD
}

fn default_max_output() -> usize {
    DEFAULT_MAX_OUTPUT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub mode: ToolMode,
    #[serde(rename = "binary")]
    pub binary_path: PathBuf,
    /// Arguments placed before the extracted argv.
    #[serde(default)]
    pub base_args: Vec<String>,
    #[serde(with = "duration_secs", default = "default_timeout", rename = "timeout_secs")]
    pub default_timeout: Duration,
    #[serde(with = "duration_secs", default = "default_quiet", rename = "quiet_period_secs")]
    pub quiet_period: Duration,
    #[serde(default = "default_max_output")]
    pub max_output: usize,
}

impl ToolSpec {
    pub fn validate(&self) -> Result<(), AciError> {
        let bad = |message: &str| AciError::InvalidTool {
            name: self.name.clone(),
            message: message.into(),
        };
        if self.name.trim().is_empty() {
            return Err(bad("name is empty"));
        }
        if self.default_timeout.is_zero() {
            return Err(bad("timeout must be positive"));
        }
        if self.mode == ToolMode::Interactive && self.quiet_period.is_zero() {
            return Err(bad("quiet period must be positive"));
        }
        if self.max_output == 0 {
            return Err(bad("max_output must be positive"));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct RegistryFile {
    #[serde(rename = "tool", default)]
    tools: Vec<ToolSpec>,
}

/// Immutable set of tools keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolRegistry {
    tools: BTreeMap<String, ToolSpec>,
}

impl ToolRegistry {
    pub fn new(tools: Vec<ToolSpec>) -> Result<Self, AciError> {
        if tools.is_empty() {
            return Err(AciError::EmptyRegistry);
        }
        let mut map = BTreeMap::new();
        for t in tools {
            t.validate()?;
            let key = t.name.to_ascii_lowercase();
            if map.contains_key(&key) {
                return Err(AciError::DuplicateTool(t.name));
            }
            map.insert(key, t);
        }
        Ok(Self { tools: map })
    }

    /// `[[tool]]` tables; relative binary paths resolve against the file's
    /// directory when they contain a separator.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self, AciError> {
        let file: RegistryFile = toml::from_str(text).map_err(|e| AciError::RegistryFile {
            path: base_dir.map(Path::to_path_buf).unwrap_or_default(),
            message: e.to_string(),
        })?;
        let tools = file
            .tools
            .into_iter()
            .map(|mut t| {
                if let Some(dir) = base_dir {
                    if t.binary_path.is_relative() && t.binary_path.components().count() > 1 {
                        t.binary_path = dir.join(&t.binary_path);
                    }
                }
                t
            })
            .collect();
        Self::new(tools)
    }

    pub fn load(path: &Path) -> Result<Self, AciError> {
        let text = std::fs::read_to_string(path).map_err(|e| AciError::RegistryFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::parse(&text, path.parent())
    }

    pub fn get(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.get(&name.to_ascii_lowercase())
    }

    pub fn tools(&self) -> impl Iterator<Item = &ToolSpec> {
        self.tools.values()
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub send: String,
    #[serde(rename = "await", default, skip_serializing_if = "Option::is_none")]
    pub await_pattern: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "body")]
pub enum CommandBody {
    Argv(Vec<String>),
    Script(Vec<ScriptStep>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedCommand {
    pub tool: String,
    #[serde(flatten)]
    pub body: CommandBody,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_override_secs: Option<f64>,
}

impl ExtractedCommand {
    pub fn argv(tool: &str, args: &[&str]) -> Self {
        Self {
            tool: tool.into(),
            body: CommandBody::Argv(args.iter().map(|s| s.to_string()).collect()),
            timeout_override_secs: None,
        }
    }

    pub fn script(tool: &str, steps: &[(&str, Option<&str>)]) -> Self {
        Self {
            tool: tool.into(),
            body: CommandBody::Script(
                steps
                    .iter()
                    .map(|(s, a)| ScriptStep {
                        send: s.to_string(),
                        await_pattern: a.map(str::to_string),
                    })
                    .collect(),
            ),
            timeout_override_secs: None,
        }
    }

    pub fn mode(&self) -> ToolMode {
        match self.body {
            CommandBody::Argv(_) => ToolMode::Static,
            CommandBody::Script(_) => ToolMode::Interactive,
        }
    }

    /// Every string that reaches the tool.
    pub fn texts(&self) -> Vec<&str> {
        match &self.body {
            CommandBody::Argv(a) => a.iter().map(String::as_str).collect(),
            CommandBody::Script(s) => s.iter().map(|st| st.send.as_str()).collect(),
        }
    }

    /// Shell-like rendering for logs.
    pub fn display(&self) -> String {
        match &self.body {
            CommandBody::Argv(a) => {
                let mut parts = vec![self.tool.clone()];
                parts.extend(a.iter().map(|s| quote_arg(s)));
                parts.join(" ")
            }
            CommandBody::Script(steps) => {
                let sends: Vec<_> = steps.iter().map(|s| s.send.as_str()).collect();
                format!("{} <<< {}", self.tool, sends.join(" ; "))
            }
        }
    }

    pub fn check_against(&self, spec: &ToolSpec) -> Result<(), AciError> {
        if self.mode() != spec.mode {
            return Err(AciError::ModeMismatch {
                tool: self.tool.clone(),
                mode: spec.mode,
            });
        }
        let empty = match &self.body {
            CommandBody::Argv(a) => a.is_empty(),
            CommandBody::Script(s) => s.is_empty(),
        };
        if empty {
            return Err(AciError::EmptyCommand(self.tool.clone()));
        }
        Ok(())
    }

    fn timeout(&self, spec: &ToolSpec) -> Duration {
        self.timeout_override_secs
            .filter(|s| s.is_finite() && *s > 0.0)
            .map(Duration::from_secs_f64)
            .unwrap_or(spec.default_timeout)
    }
}

fn quote_arg(s: &str) -> String {
    if !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || "-_./:=,@%+".contains(c)) {
        s.to_string()
    } else {
        format!("'{}'", s.replace('\'', "'\\''"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Code(i32),
    Timeout,
    Killed,
    /// Stopped by the scope guard before execution.
    Blocked,
    /// Recorded but not executed.
    DryRun,
}

impl ExitCode {
    pub fn label(&self) -> String {
        match self {
            ExitCode::Code(c) => c.to_string(),
            ExitCode::Timeout => "timeout".into(),
            ExitCode::Killed => "killed".into(),
            ExitCode::Blocked => "blocked".into(),
            ExitCode::DryRun => "dry-run".into(),
        }
    }
}

impl fmt::Display for ExitCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl Serialize for ExitCode {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ExitCode::Code(c) => s.serialize_i32(*c),
            other => s.serialize_str(&other.label()),
        }
    }
}

impl<'de> Deserialize<'de> for ExitCode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Code(i32),
            Label(String),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::Code(c) => ExitCode::Code(c),
            Raw::Label(l) => match l.as_str() {
                "timeout" => ExitCode::Timeout,
                "killed" => ExitCode::Killed,
                "blocked" => ExitCode::Blocked,
                "dry-run" => ExitCode::DryRun,
                other => return Err(serde::de::Error::custom(format!("unknown exit code {other:?}"))),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub tool: String,
    pub command: String,
    pub transcript: String,
    pub exit_code: ExitCode,
    #[serde(with = "duration_secs")]
    pub duration: Duration,
    pub truncated: bool,
    /// Script steps whose awaited pattern never appeared.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pattern_timeouts: Vec<usize>,
}

impl ToolResult {
    pub fn blocked(cmd: &ExtractedCommand, violation: &ScopeViolation) -> Self {
        Self {
            tool: cmd.tool.clone(),
            command: cmd.display(),
            transcript: format!("blocked by scope guard: {violation}"),
            exit_code: ExitCode::Blocked,
            duration: Duration::ZERO,
            truncated: false,
            pattern_timeouts: Vec::new(),
        }
    }

    pub fn dry_run(cmd: &ExtractedCommand) -> Self {
        Self {
            tool: cmd.tool.clone(),
            command: cmd.display(),
            transcript: format!("dry run, not executed: {}", cmd.display()),
            exit_code: ExitCode::DryRun,
            duration: Duration::ZERO,
            truncated: false,
            pattern_timeouts: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const REGISTRY: &str = r#"
[[tool]]
name = "nmap"
mode = "static"
binary = "/usr/bin/nmap"
timeout_secs = 60

[[tool]]
name = "metasploit"
mode = "interactive"
binary = "bin/msfconsole"
quiet_period_secs = 0.5
"#;

    #[test]
    fn registry_parses_with_defaults() {
        let r = ToolRegistry::parse(REGISTRY, Some(Path::new("/opt/pack"))).unwrap();
        assert_eq!(r.len(), 2);
        let msf = r.get("Metasploit").unwrap();
        assert_eq!(msf.binary_path, PathBuf::from("/opt/pack/bin/msfconsole"));
        assert_eq!(msf.quiet_period, Duration::from_millis(500));
        assert_eq!(msf.default_timeout, Duration::from_secs(300));
        assert_eq!(r.get("nmap").unwrap().max_output, DEFAULT_MAX_OUTPUT);
    }

    #[test]
    fn duplicate_and_empty_rejected() {
        let dup = format!("{REGISTRY}\n[[tool]]\nname = \"NMAP\"\nmode = \"static\"\nbinary = \"x\"\n");
        assert!(matches!(ToolRegistry::parse(&dup, None), Err(AciError::DuplicateTool(_))));
        assert!(matches!(ToolRegistry::parse("", None), Err(AciError::EmptyRegistry)));
        let zero = "[[tool]]\nname = \"a\"\nmode = \"static\"\nbinary = \"a\"\ntimeout_secs = 0\n";
        assert!(matches!(ToolRegistry::parse(zero, None), Err(AciError::InvalidTool { .. })));
    }

    #[test]
    fn exit_code_serde() {
        for (code, json) in [
            (ExitCode::Code(0), "0"),
            (ExitCode::Code(-1), "-1"),
            (ExitCode::Timeout, "\"timeout\""),
            (ExitCode::Killed, "\"killed\""),
            (ExitCode::Blocked, "\"blocked\""),
            (ExitCode::DryRun, "\"dry-run\""),
        ] {
            assert_eq!(serde_json::to_string(&code).unwrap(), json);
            assert_eq!(serde_json::from_str::<ExitCode>(json).unwrap(), code);
        }
    }

    #[test]
    fn command_shape_checks() {
        let r = ToolRegistry::parse(REGISTRY, None).unwrap();
        let nmap = r.get("nmap").unwrap();
        assert!(ExtractedCommand::argv("nmap", &["-sV", "10.10.10.3"]).check_against(nmap).is_ok());
        assert!(matches!(
            ExtractedCommand::argv("nmap", &[]).check_against(nmap),
            Err(AciError::EmptyCommand(_))
        ));
        assert!(matches!(
            ExtractedCommand::script("nmap", &[("x", None)]).check_against(nmap),
            Err(AciError::ModeMismatch { .. })
        ));
    }

    #[test]
    fn command_serde_round_trip() {
        let c = ExtractedCommand::script("metasploit", &[("use exploit/x", Some("msf")), ("run", None)]);
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"await\":\"msf\""));
        assert_eq!(serde_json::from_str::<ExtractedCommand>(&json).unwrap(), c);
        assert_eq!(
            ExtractedCommand::argv("smbclient", &["-L", "//10.10.10.3/", "-N", "a b"]).display(),
            "smbclient -L //10.10.10.3/ -N 'a b'"
        );
    }
}
