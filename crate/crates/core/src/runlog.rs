//! Append-only run log: one JSON record per line plus a human-readable
//! mirror.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aci::{ExtractedCommand, ToolResult};
use crate::generator::CommandPlan;
use crate::operator::{DecisionSource, OperatorDecision};
use crate::phase::Phase;
use crate::repetition::{RepetitionVerdict, StepDescriptor};
use crate::strategy::{StrategyDecision, UpdateOutcome};
use crate::verifier::Verdict;

pub const LOG_FORMAT: &str = "pentrail-runlog";
pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RunLogError {
    #[error("record index {got} does not follow {last}")]
    OutOfOrder { last: u32, got: u32 },
    #[error("run log already finished")]
    Finished,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub format: String,
    pub version: u32,
    pub targets: Vec<String>,
    pub ablation: Vec<String>,
    pub started_ms: u64,
}

impl RunHeader {
    pub fn new(targets: Vec<String>, ablation: Vec<String>) -> Self {
        Self {
            format: LOG_FORMAT.into(),
            version: LOG_VERSION,
            targets,
            ablation,
            started_ms: now_ms(),
        }
    }
}

/// One selection and what the loop check made of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionCheck {
    pub decision: StrategyDecision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor: Option<StepDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<RepetitionVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator: Option<OperatorDecision>,
}

impl SelectionCheck {
    pub fn flagged(&self) -> bool {
        self.verdict.as_ref().is_some_and(|v| v.is_repetition)
    }
}

/// A plan, what was extracted from it, and how it went.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub plan: CommandPlan,
    pub commands: Vec<ExtractedCommand>,
    pub results: Vec<ToolResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationEnd {
    /// Commands ran and the verifier (or its stand-in) accepted them.
    Verified,
    /// The operator supplied the step's result by hand.
    Feedback,
    /// The operator ended the run mid-iteration.
    Exit,
    /// The tree had nothing left to select; only the update ran.
    NoStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: u32,
    pub started_ms: u64,
    pub finished_ms: u64,
    /// Operator instructions that were put in front of the summarizer input.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub instructions: Vec<String>,
    pub summary: String,
    pub ptt_update: UpdateOutcome,
    pub ptt_revision: u64,
    pub ptt_text: String,
    pub checks: Vec<SelectionCheck>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub retrieved_chunks: Vec<u64>,
    pub attempts: Vec<Attempt>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<String>,
    /// Commands with unresolved placeholders in the plan the iteration ended with.
    pub incomplete_flags: u32,
    pub phases: Vec<Phase>,
    pub end: IterationEnd,
}

impl IterationRecord {
    pub fn completed(&self) -> bool {
        matches!(self.end, IterationEnd::Verified | IterationEnd::Feedback)
    }

    /// The selection that went on to execution or feedback.
    pub fn final_decision(&self) -> Option<&StrategyDecision> {
        self.checks.last().map(|c| &c.decision)
    }

    pub fn executed(&self) -> bool {
        !self.attempts.is_empty()
    }

    pub fn operator_decisions(&self) -> impl Iterator<Item = &OperatorDecision> {
        self.checks.iter().filter_map(|c| c.operator.as_ref())
    }

    pub fn operator_inputs(&self) -> usize {
        self.operator_decisions().filter(|d| d.source == DecisionSource::Operator).count()
    }

    pub fn retries(&self) -> usize {
        self.attempts.len().saturating_sub(1)
    }

    pub fn results(&self) -> impl Iterator<Item = &ToolResult> {
        self.attempts.iter().flat_map(|a| &a.results)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    OperatorExit,
    NoStepsRemaining,
    MaxIterations,
    /// The model backend stopped answering the strategy analyzer.
    BackendFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEnd {
    pub reason: StopReason,
    pub finished_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Header(RunHeader),
    Iteration(Box<IterationRecord>),
    End(RunEnd),
}

/// Mirror file next to `log`: `run.jsonl` becomes `run.log`.
pub fn mirror_path(log: &Path) -> PathBuf {
    if log.extension().is_some_and(|e| e == "log") {
        let mut s = log.as_os_str().to_owned();
        s.push(".txt");
        PathBuf::from(s)
    } else {
        log.with_extension("log")
    }
}

#[derive(Debug)]
pub struct RunLogWriter {
    path: PathBuf,
    mirror: PathBuf,
    file: File,
    mirror_file: File,
    last_index: u32,
    finished: bool,
}

impl RunLogWriter {
    /// Creates (truncating) the log and its mirror and writes the header.
    pub fn create(path: &Path, header: &RunHeader) -> Result<Self, RunLogError> {
        let mirror = mirror_path(path);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let open = |p: &Path| {
            OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(true)
                .open(p)
                .map_err(io_err(p))
        };
        let mut w = Self {
            file: open(path)?,
            mirror_file: open(&mirror)?,
            path: path.to_path_buf(),
            mirror,
            last_index: 0,
            finished: false,
        };
        w.write_line(&Line::Header(header.clone()))?;
        w.write_mirror(&format!(
            "pentrail run against {} (ablation: {})\n",
            header.targets.join(", "),
            header.ablation.join(",")
        ))?;
        Ok(w)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn mirror(&self) -> &Path {
        &self.mirror
    }

    pub fn last_index(&self) -> u32 {
        self.last_index
    }

    fn write_line(&mut self, line: &Line) -> Result<(), RunLogError> {
        let mut text = serde_json::to_string(line).map_err(|e| RunLogError::Format {
            path: self.path.clone(),
            line: self.last_index as usize + 1,
            message: e.to_string(),
        })?;
        text.push('\n');
        self.file.write_all(text.as_bytes()).map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))
    }

    fn write_mirror(&mut self, text: &str) -> Result<(), RunLogError> {
        self.mirror_file.write_all(text.as_bytes()).map_err(io_err(&self.mirror))?;
        self.mirror_file.flush().map_err(io_err(&self.mirror))
    }

    pub fn append_iteration(&mut self, record: &IterationRecord) -> Result<(), RunLogError> {
        if self.finished {
            return Err(RunLogError::Finished);
        }
        if record.index != self.last_index + 1 {
            return Err(RunLogError::OutOfOrder {
                last: self.last_index,
                got: record.index,
            });
        }
        self.write_line(&Line::Iteration(Box::new(record.clone())))?;
        self.last_index = record.index;
        self.write_mirror(&render_record(record))
    }

    pub fn finish(&mut self, end: &RunEnd) -> Result<(), RunLogError> {
        if self.finished {
            return Err(RunLogError::Finished);
        }
        self.write_line(&Line::End(end.clone()))?;
        self.finished = true;
        self.write_mirror(&format!("\n== run finished: {:?} ==\n", end.reason))?;
        self.file.sync_all().map_err(io_err(&self.path))
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunLogError + '_ {
    move |source| RunLogError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub header: RunHeader,
    pub records: Vec<IterationRecord>,
    pub end: Option<RunEnd>,
    pub warnings: Vec<String>,
}

impl RunLog {
    pub fn read(path: &Path) -> Result<Self, RunLogError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let text_ends_with_newline = bytes.last().is_none_or(|b| *b == b'\n');
        let raw: Vec<&[u8]> = bytes.split(|b| *b == b'\n').collect();
        let fmt_err = |line: usize, message: String| RunLogError::Format {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut header = None;
        let mut records: Vec<IterationRecord> = Vec::new();
        let mut end = None;
        let mut warnings = Vec::new();
        let n = raw.len();
        for (i, bytes) in raw.into_iter().enumerate() {
            let line_no = i + 1;
            if bytes.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            let parsed = std::str::from_utf8(bytes)
                .map_err(|e| e.to_string())
                .and_then(|s| serde_json::from_str::<Line>(s).map_err(|e| e.to_string()));
            let line = match parsed {
                Ok(l) => l,
                Err(e) if line_no == n && !text_ends_with_newline => {
                    let w = format!("skipping incomplete final line {line_no}: {e}");
                    tracing::warn!("{}: {w}", path.display());
                    warnings.push(w);
                    continue;
                }
                Err(e) => return Err(fmt_err(line_no, e)),
            };
            match line {
                Line::Header(h) if header.is_none() && line_no == 1 => {
                    if h.format != LOG_FORMAT || h.version != LOG_VERSION {
                        return Err(fmt_err(line_no, format!("unsupported log {} v{}", h.format, h.version)));
                    }
                    header = Some(h);
                }
                Line::Header(_) => return Err(fmt_err(line_no, "unexpected header".into())),
                Line::Iteration(r) => {
                    let expected = records.last().map_or(1, |l| l.index + 1);
                    if r.index != expected || end.is_some() {
                        return Err(fmt_err(line_no, format!("expected record {expected}, found {}", r.index)));
                    }
                    records.push(*r);
                }
                Line::End(e) => end = Some(e),
            }
        }
        let header = header.ok_or_else(|| fmt_err(1, "missing header".into()))?;
        Ok(Self {
            header,
            records,
            end,
            warnings,
        })
    }

    /// The mirror text for all records, used by checklist predicates.
    pub fn render(&self) -> String {
        self.records.iter().map(render_record).collect()
    }
}

/// Human-readable section for one iteration.
pub fn render_record(r: &IterationRecord) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "\n== iteration {} ({:?}) ==", r.index, r.end);
    for i in &r.instructions {
        let _ = writeln!(s, "operator instruction: {i}");
    }
    if !r.summary.is_empty() {
        let _ = writeln!(s, "summary:\n{}", indent(&r.summary));
    }
    let _ = writeln!(s, "task tree (revision {}, {:?}):\n{}", r.ptt_revision, r.ptt_update, indent(&r.ptt_text));
    for c in &r.checks {
        let _ = writeln!(s, "selected {}: {}", c.decision.selected_node_id, c.decision.step_statement);
        if let Some(d) = &c.descriptor {
            let _ = writeln!(s, "  descriptor: {}", d.canonical);
        }
        if let Some(v) = &c.verdict {
            let _ = writeln!(
                s,
                "  repetition: {} (distance {:.4}, nearest {:?})",
                v.is_repetition, v.distance, v.nearest_iteration
            );
        }
        if let Some(o) = &c.operator {
            let _ = writeln!(s, "  operator: {:?} {:?} {}", o.source, o.kind, o.payload);
        }
    }
    for (n, a) in r.attempts.iter().enumerate() {
        let _ = writeln!(s, "attempt {}:", n + 1);
        for item in &a.plan.items {
            let _ = writeln!(s, "  plan [{}] {}", item.tool, item.command_text.replace('\n', " ; "));
        }
        for res in &a.results {
            let _ = writeln!(s, "  $ {}  (exit {})\n{}", res.command, res.exit_code, indent(&res.transcript));
        }
        if let Some(v) = &a.verdict {
            let _ = writeln!(s, "  verdict: {:?}: {}", v.outcome, v.rationale);
        }
    }
    if let Some(f) = &r.feedback {
        let _ = writeln!(s, "operator feedback:\n{}", indent(f));
    }
    if r.incomplete_flags > 0 {
        let _ = writeln!(s, "incomplete commands: {}", r.incomplete_flags);
    }
    s
}

fn indent(text: &str) -> String {
    text.lines().map(|l| format!("    {l}")).collect::<Vec<_>>().join("\n")
}

#[cfg(test)]
pub(crate) mod tests {
    use std::time::Duration;

    use super::*;
    use crate::aci::ExitCode;
    use crate::generator::{PlanItem, StepRef};
    use crate::strategy::SelectionSource;

    pub(crate) fn record(index: u32, statement: &str) -> IterationRecord {
        let decision = StrategyDecision {
            reasoning: String::new(),
            selected_node_id: "1.1".parse().unwrap(),
            step_statement: statement.into(),
            raw_reply: String::new(),
            source: SelectionSource::Model,
        };
        IterationRecord {
            index,
            started_ms: 1,
            finished_ms: 2,
            instructions: vec![],
            summary: "21/ftp vsftpd 2.3.4".into(),
            ptt_update: UpdateOutcome::Applied,
            ptt_revision: index as u64,
            ptt_text: "1 Pentest 10.10.10.3 [IN-PROGRESS]\n".into(),
            checks: vec![SelectionCheck {
                decision,
                descriptor: None,
                verdict: None,
                operator: None,
            }],
            retrieved_chunks: vec![],
            attempts: vec![Attempt {
                plan: CommandPlan {
                    step_ref: StepRef {
                        iteration: index,
                        node_id: "1.1".parse().unwrap(),
                    },
                    items: vec![PlanItem::new("nmap", "nmap 10.10.10.3", "")],
                    raw_reply: String::new(),
                },
                commands: vec![ExtractedCommand::argv("nmap", &["10.10.10.3"])],
                results: vec![ToolResult {
                    tool: "nmap".into(),
                    command: "nmap 10.10.10.3".into(),
                    transcript: "21/tcp open ftp".into(),
                    exit_code: ExitCode::Code(0),
                    duration: Duration::from_millis(3),
                    truncated: false,
                    pattern_timeouts: vec![],
                }],
                verdict: None,
            }],
            feedback: None,
            incomplete_flags: 0,
            phases: vec![Phase::Summarize, Phase::Analyze, Phase::Generate, Phase::Execute, Phase::Verify],
            end: IterationEnd::Verified,
        }
    }

    fn header() -> RunHeader {
        RunHeader::new(vec!["10.10.10.3".into()], vec!["B*".into()])
    }

    #[test]
    fn append_and_read_back() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("run.jsonl");
        let mut w = RunLogWriter::create(&p, &header()).unwrap();
        w.append_iteration(&record(1, "scan")).unwrap();
        w.append_iteration(&record(2, "exploit")).unwrap();
        w.finish(&RunEnd {
            reason: StopReason::NoStepsRemaining,
            finished_ms: 3,
            report_path: None,
        })
        .unwrap();
        let log = RunLog::read(&p).unwrap();
        assert_eq!(log.records, vec![record(1, "scan"), record(2, "exploit")]);
        assert_eq!(log.end.unwrap().reason, StopReason::NoStepsRemaining);
        let mirror = fs::read_to_string(mirror_path(&p)).unwrap();
        assert!(mirror.contains("== iteration 2") && mirror.contains("21/tcp open ftp"));
    }

    #[test]
    fn first_record_is_one() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("run.jsonl");
        let mut w = RunLogWriter::create(&p, &header()).unwrap();
        assert!(matches!(
            w.append_iteration(&record(2, "x")),
            Err(RunLogError::OutOfOrder { last: 0, got: 2 })
        ));
        w.append_iteration(&record(1, "x")).unwrap();
        assert!(w.append_iteration(&record(1, "x")).is_err());
        assert_eq!(RunLog::read(&p).unwrap().records.len(), 1);
    }

    #[test]
    fn half_written_tail_is_skipped() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("run.jsonl");
        let mut w = RunLogWriter::create(&p, &header()).unwrap();
        w.append_iteration(&record(1, "x")).unwrap();
        drop(w);
        let mut f = OpenOptions::new().append(true).open(&p).unwrap();
        f.write_all(b"{\"type\":\"iteration\",\"index\":2,\"summ").unwrap();
        let log = RunLog::read(&p).unwrap();
        assert_eq!(log.records.len(), 1);
        assert_eq!(log.warnings.len(), 1);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("run.jsonl");
        let mut w = RunLogWriter::create(&p, &header()).unwrap();
        w.append_iteration(&record(1, "x")).unwrap();
        drop(w);
        let mut f = OpenOptions::new().append(true).open(&p).unwrap();
        f.write_all(b"garbage\n").unwrap();
        assert!(matches!(RunLog::read(&p), Err(RunLogError::Format { line: 3, .. })));
    }

    #[test]
    fn mirror_names() {
        assert_eq!(mirror_path(Path::new("out/run.jsonl")), PathBuf::from("out/run.log"));
        assert_eq!(mirror_path(Path::new("run.log")), PathBuf::from("run.log.txt"));
    }
}
