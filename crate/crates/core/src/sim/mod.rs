//! Scenario packs: fake tools with canned transcripts, a scripted model
//! transcript and a checklist of subtasks, for runs without real targets.

mod fake;

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use fake::{run_fake_tool, FakeToolArgs};

use crate::aci::{ToolMode, ToolRegistry, ToolSpec};
use crate::events::{EventSink, NullSink};
use crate::llm::{AgentRole, Gateway, ScriptedBackend, ScriptedTranscript};
use crate::metrics::{ChecklistItem, SubtaskResult};
use crate::operator::{NonInteractive, OperatorChannel};
use crate::orchestrator::{run, Ablation, Pipeline, RunConfig, RunError, RunOutcome};
use crate::rag::{ingest_corpus, load_corpus_dir, AttackHostProfile, VectorIndex};
use crate::runlog::RunLog;

pub const PACK_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "pack.toml";
pub const UNMATCHED: &str = "UNMATCHED";
/// Packs shipped with the crate.
pub const BUNDLED_PACKS_DIR: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/packs");

#[derive(Debug, Error)]
pub enum PackError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("pack {pack}: {message}")]
    Invalid { pack: String, message: String },
    #[error("no scenario pack named {0:?}")]
    NotFound(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PackError + '_ {
    move |e| PackError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticCase {
    /// Regex over the space-joined argv.
    pub argv: String,
    #[serde(default)]
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_file: Option<String>,
    #[serde(default)]
    pub exit_code: i32,
    #[serde(default)]
    pub delay_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineCase {
    /// Regex over one input line.
    pub input: String,
    #[serde(default)]
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_file: Option<String>,
    /// Prompt shown from now on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default)]
    pub exit: bool,
    #[serde(default)]
    pub delay_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FakeTool {
    pub name: String,
    pub mode: ToolMode,
    #[serde(default, rename = "case")]
    pub cases: Vec<StaticCase>,
    #[serde(default)]
    pub banner: String,
    #[serde(default)]
    pub prompt: String,
    #[serde(default, rename = "line")]
    pub lines: Vec<LineCase>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_quiet")]
    pub quiet_period_secs: f64,
}

fn default_timeout() -> f64 {
    30.0
}

fn default_quiet() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedMetrics {
    pub steps: Option<u32>,
    pub loops: Option<u32>,
    pub incomplete: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackManifest {
    pub version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub target: String,
    #[serde(default = "default_local_ip")]
    pub local_ip: String,
    /// Defaults to `<name>.llm` next to the manifest.
    #[serde(default)]
    pub llm_transcript: Option<String>,
    /// Knowledge-base directory, relative to the pack.
    #[serde(default)]
    pub kb: Option<String>,
    #[serde(default)]
    pub max_iterations: Option<u32>,
    #[serde(default, rename = "tool")]
    pub tools: Vec<FakeTool>,
    #[serde(default)]
    pub checklist: Vec<ChecklistItem>,
    #[serde(default)]
    pub expected: Option<ExpectedMetrics>,
}

fn default_local_ip() -> String {
    "10.10.14.2".into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioPack {
    pub dir: PathBuf,
    pub manifest: PackManifest,
}

impl ScenarioPack {
    /// Loads and checks a pack directory.
    pub fn load(dir: &Path) -> Result<Self, PackError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: PackManifest = toml::from_str(&text).map_err(|e| PackError::Invalid {
            pack: dir.display().to_string(),
            message: e.to_string(),
        })?;
        let pack = Self {
            dir: dir.to_path_buf(),
            manifest,
        };
        pack.validate()?;
        Ok(pack)
    }

    /// A bundled pack name, or a path to a pack directory. A `.pack` suffix
    /// on a bundled name is ignored.
    pub fn resolve(name_or_path: &str) -> Result<Self, PackError> {
        let as_path = Path::new(name_or_path);
        if as_path.join(MANIFEST_FILE).is_file() {
            return Self::load(as_path);
        }
        let name = name_or_path.strip_suffix(".pack").unwrap_or(name_or_path);
        let bundled = Path::new(BUNDLED_PACKS_DIR).join(name);
        if bundled.join(MANIFEST_FILE).is_file() {
            return Self::load(&bundled);
        }
        Err(PackError::NotFound(name_or_path.to_string()))
    }

    pub fn bundled_names() -> Vec<String> {
        let mut names: Vec<String> = fs::read_dir(BUNDLED_PACKS_DIR)
            .into_iter()
            .flatten()
            .flatten()
            .filter(|e| e.path().join(MANIFEST_FILE).is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        names
    }

    pub fn name(&self) -> &str {
        &self.manifest.name
    }

    pub fn transcript_path(&self) -> PathBuf {
        let file = self
            .manifest
            .llm_transcript
            .clone()
            .unwrap_or_else(|| format!("{}.llm", self.manifest.name));
        self.dir.join(file)
    }

    pub fn kb_dir(&self) -> Option<PathBuf> {
        self.manifest.kb.as_ref().map(|k| self.dir.join(k))
    }

    pub fn tool(&self, name: &str) -> Option<&FakeTool> {
        self.manifest.tools.iter().find(|t| t.name.eq_ignore_ascii_case(name))
    }

    fn invalid(&self, message: String) -> PackError {
        PackError::Invalid {
            pack: self.manifest.name.clone(),
            message,
        }
    }

    fn validate(&self) -> Result<(), PackError> {
        let m = &self.manifest;
        if m.version != PACK_VERSION {
            return Err(self.invalid(format!("unsupported pack version {}", m.version)));
        }
        if m.target.trim().is_empty() {
            return Err(self.invalid("target is empty".into()));
        }
        let mut names = BTreeSet::new();
        for t in &m.tools {
            if !names.insert(t.name.to_ascii_lowercase()) {
                return Err(self.invalid(format!("tool {} is defined twice", t.name)));
            }
            if !(t.timeout_secs > 0.0 && t.quiet_period_secs > 0.0) {
                return Err(self.invalid(format!("tool {}: timeouts must be positive", t.name)));
            }
            let patterns = t
                .cases
                .iter()
                .map(|c| (&c.argv, &c.output_file))
                .chain(t.lines.iter().map(|l| (&l.input, &l.output_file)));
            for (pattern, file) in patterns {
                Regex::new(pattern).map_err(|e| self.invalid(format!("tool {}: {e}", t.name)))?;
                if let Some(f) = file {
                    if !self.dir.join(f).is_file() {
                        return Err(self.invalid(format!("tool {}: missing output file {f}", t.name)));
                    }
                }
            }
        }
        for item in &m.checklist {
            Regex::new(&item.pattern).map_err(|e| self.invalid(format!("checklist {}: {e}", item.name)))?;
        }
        let transcript = self.transcript()?;
        for tool in referenced_tools(&transcript) {
            if !names.contains(&tool) {
                return Err(self.invalid(format!("transcript uses tool {tool}, which the pack does not define")));
            }
        }
        Ok(())
    }

    pub fn transcript(&self) -> Result<ScriptedTranscript, PackError> {
        ScriptedTranscript::load(&self.transcript_path()).map_err(|e| self.invalid(e.to_string()))
    }

    /// Writes one executable stub per tool into `out_dir`, plus a
    /// `registry.toml` describing them. `launcher` is the program (and any
    /// leading arguments) that serves fake tool invocations.
    pub fn install(&self, out_dir: &Path, launcher: &[String]) -> Result<ToolRegistry, PackError> {
        if launcher.is_empty() {
            return Err(self.invalid("empty fake tool launcher".into()));
        }
        fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
        let pack_dir = fs::canonicalize(&self.dir).map_err(io_err(&self.dir))?;
        let mut specs = Vec::new();
        for t in &self.manifest.tools {
            let stub = out_dir.join(&t.name);
            let mut words: Vec<String> = launcher.iter().map(|w| shell_quote(w)).collect();
            words.extend([
                "--pack".into(),
                shell_quote(&pack_dir.display().to_string()),
                "--tool".into(),
                shell_quote(&t.name),
                "--".into(),
                "\"$@\"".into(),
            ]);
            let body = format!("#!/bin/sh\nexec {}\n", words.join(" "));
            fs::write(&stub, body).map_err(io_err(&stub))?;
            fs::set_permissions(&stub, fs::Permissions::from_mode(0o755)).map_err(io_err(&stub))?;
            specs.push(ToolSpec {
                name: t.name.clone(),
                mode: t.mode,
                binary_path: stub,
                base_args: Vec::new(),
                default_timeout: Duration::from_secs_f64(t.timeout_secs),
                quiet_period: Duration::from_secs_f64(t.quiet_period_secs),
                max_output: crate::aci::DEFAULT_MAX_OUTPUT,
            });
        }
        #[derive(Serialize)]
        struct RegistryOut<'a> {
            tool: &'a [ToolSpec],
        }
        let reg_path = out_dir.join("registry.toml");
        let text = toml::to_string(&RegistryOut { tool: &specs }).map_err(|e| self.invalid(e.to_string()))?;
        fs::write(&reg_path, text).map_err(io_err(&reg_path))?;
        ToolRegistry::new(specs).map_err(|e| self.invalid(e.to_string()))
    }
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', "'\\''"))
}

/// Tool names a transcript's generator and extractor replies mention.
pub fn referenced_tools(transcript: &ScriptedTranscript) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for e in &transcript.entries {
        match e.role {
            AgentRole::CommandExtractor => {
                if let Some(Value::Array(items)) = json_array(&e.reply) {
                    for item in items {
                        if let Some(t) = item.get("tool").and_then(Value::as_str) {
                            out.insert(t.to_ascii_lowercase());
                        }
                    }
                }
            }
            AgentRole::Generator | AgentRole::ResultsVerifier => {
                for line in e.reply.lines() {
                    if let Some(rest) = line.trim().strip_prefix("TOOL:") {
                        let t = rest.trim().to_ascii_lowercase();
                        if !t.is_empty() && t != crate::generator::NOOP_TOOL {
                            out.insert(t);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    out
}

fn json_array(text: &str) -> Option<Value> {
    let start = text.find('[')?;
    let end = text.rfind(']')?;
    serde_json::from_str(text.get(start..=end)?).ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecklistReport {
    pub results: Vec<SubtaskResult>,
    pub passed: usize,
    pub total: usize,
}

impl ChecklistReport {
    pub fn completion_percent(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.passed as f64 / self.total as f64
        }
    }
}

/// Evaluates the pack's checklist against a finished run's log.
pub fn assert_checklist(pack: &ScenarioPack, log: &RunLog) -> ChecklistReport {
    let text = log.render();
    let results: Vec<SubtaskResult> = pack
        .manifest
        .checklist
        .iter()
        .map(|item| SubtaskResult {
            name: item.name.clone(),
            completed: Regex::new(&item.pattern).is_ok_and(|re| re.is_match(&text)),
        })
        .collect();
    ChecklistReport {
        passed: results.iter().filter(|r| r.completed).count(),
        total: results.len(),
        results,
    }
}

/// The log with timestamps and durations removed, for comparing runs.
pub fn canonicalize_log(text: &str) -> String {
    fn strip(v: &mut Value) {
        match v {
            Value::Object(map) => {
                for key in ["started_ms", "finished_ms", "duration", "timestamp_ms"] {
                    map.remove(key);
                }
                map.values_mut().for_each(strip);
            }
            Value::Array(items) => items.iter_mut().for_each(strip),
            _ => {}
        }
    }
    text.lines()
        .map(|line| match serde_json::from_str::<Value>(line) {
            Ok(mut v) => {
                strip(&mut v);
                v.to_string()
            }
            Err(_) => line.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// A pack made ready to run: fake tools installed, knowledge indexed and a
/// scripted gateway loaded.
pub struct Scenario {
    pub pack: ScenarioPack,
    pub gateway: Gateway,
    pub backend: Arc<ScriptedBackend>,
    pub registry: ToolRegistry,
    pub index: Option<VectorIndex>,
    pub profile: AttackHostProfile,
    pub work_dir: PathBuf,
}

impl Scenario {
    /// Installs the pack under `work_dir`. `transcript` replaces the pack's
    /// own model transcript when given.
    pub fn prepare(
        pack: ScenarioPack,
        work_dir: &Path,
        launcher: &[String],
        transcript: Option<ScriptedTranscript>,
    ) -> Result<Self, PackError> {
        let registry = pack.install(&work_dir.join("bin"), launcher)?;
        let transcript = match transcript {
            Some(t) => t,
            None => pack.transcript()?,
        };
        let (gateway, backend) = Gateway::scripted(transcript);
        let index = match pack.kb_dir() {
            Some(dir) => {
                let docs = load_corpus_dir(&dir).map_err(|e| pack.invalid(e.to_string()))?;
                Some(ingest_corpus(&docs, &gateway).map_err(|e| pack.invalid(e.to_string()))?)
            }
            None => None,
        };
        let profile = AttackHostProfile {
            local_ip: pack.manifest.local_ip.clone(),
            wordlist_paths: Default::default(),
            workspace_dir: work_dir.to_path_buf(),
        };
        Ok(Self {
            pack,
            gateway,
            backend,
            registry,
            index,
            profile,
            work_dir: work_dir.to_path_buf(),
        })
    }

    /// Run settings for the pack, with outputs under the work directory.
    pub fn config(&self, ablation: Ablation) -> RunConfig {
        let mut cfg = RunConfig::new(vec![self.pack.manifest.target.clone()], &self.work_dir);
        cfg.ablation = ablation;
        cfg.checklist = self.pack.manifest.checklist.clone();
        if let Some(n) = self.pack.manifest.max_iterations {
            cfg.max_iterations = n;
        }
        cfg
    }

    pub fn pipeline<'a>(&'a self, operator: &'a dyn OperatorChannel, events: &'a dyn EventSink) -> Pipeline<'a> {
        Pipeline {
            gateway: &self.gateway,
            registry: &self.registry,
            index: self.index.as_ref(),
            profile: &self.profile,
            operator,
            events,
        }
    }

    /// Runs without an operator and without observers.
    pub fn run(&self, ablation: Ablation) -> Result<RunOutcome, RunError> {
        run(&self.config(ablation), self.pipeline(&NonInteractive, &NullSink))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_packs_load() {
        let names = ScenarioPack::bundled_names();
        for want in ["filtered-ports", "lame", "loop-bait", "vm-sweep"] {
            assert!(names.iter().any(|n| n == want), "missing pack {want}");
            let pack = ScenarioPack::resolve(want).unwrap();
            assert_eq!(pack.name(), want);
            assert!(!pack.manifest.checklist.is_empty());
        }
        assert_eq!(ScenarioPack::resolve("lame.pack").unwrap().name(), "lame");
        assert!(matches!(ScenarioPack::resolve("nope"), Err(PackError::NotFound(_))));
    }

    #[test]
    fn stubs_are_executable_and_quoted() {
        let pack = ScenarioPack::resolve("lame").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let reg = pack.install(dir.path(), &["/opt/it's here/fake".into()]).unwrap();
        let nmap = reg.get("nmap").unwrap();
        let body = fs::read_to_string(&nmap.binary_path).unwrap();
        assert!(body.starts_with("#!/bin/sh\nexec '/opt/it'\\''s here/fake' --pack '"));
        assert!(body.trim_end().ends_with("--tool 'nmap' -- \"$@\""));
        let mode = fs::metadata(&nmap.binary_path).unwrap().permissions().mode();
        assert_eq!(mode & 0o111, 0o111);
        let again = ToolRegistry::load(&dir.path().join("registry.toml")).unwrap();
        assert_eq!(again, reg);
    }

    #[test]
    fn unknown_transcript_tool_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            "version = 1\nname = \"x\"\ntarget = \"10.0.0.1\"\n[[tool]]\nname = \"nmap\"\nmode = \"static\"\n",
        )
        .unwrap();
        fs::write(
            dir.path().join("x.llm"),
            "[[entry]]\nrole = \"command_extractor\"\nreply = '[{\"tool\": \"hydra\", \"argv\": []}]'\n",
        )
        .unwrap();
        let err = ScenarioPack::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("hydra"), "{err}");
    }

    #[test]
    fn canonical_log_drops_times() {
        let a = r#"{"type":"iteration","index":1,"started_ms":5,"attempts":[{"results":[{"duration":0.1,"tool":"x"}]}]}"#;
        let b = r#"{"type":"iteration","index":1,"started_ms":9,"attempts":[{"results":[{"duration":0.7,"tool":"x"}]}]}"#;
        assert_eq!(canonicalize_log(a), canonicalize_log(b));
    }
}
