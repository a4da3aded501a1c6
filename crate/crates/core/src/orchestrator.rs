//! The iteration loop: summarize, analyze, check for repetition, generate,
//! execute and verify, until the operator exits, the tree runs out of open
//! steps or the iteration cap is reached.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::aci::{execute, extract_commands, ExecOptions, ExitCode, ExtractedCommand, ToolRegistry, ToolResult};
use crate::events::{EventKind, EventSink};
use crate::generator::{generate_commands, CommandPlan, StepRef};
use crate::llm::{AgentRole, ChatSession, Gateway};
use crate::metrics::{compute_metrics, ChecklistItem, MetricsReport};
use crate::operator::{DecisionKind, NonInteractive, OperatorChannel, RepetitionPrompt};
use crate::phase::Phase;
use crate::ptt::PentestTaskTree;
use crate::rag::{retrieve, AttackHostProfile, VectorIndex, DEFAULT_TOP_K};
use crate::repetition::{describe_step, handle_repetition, RepetitionGuard, RepetitionVerdict, DEFAULT_THRESHOLD};
use crate::report::{generate_report, write_report_file, ReportError, ReportOutcome};
use crate::runlog::{
    now_ms, render_record, Attempt, IterationEnd, IterationRecord, RunEnd, RunHeader, RunLogError, RunLogWriter,
    SelectionCheck, StopReason,
};
use crate::strategy::{
    apply_decision, seed_decision, select_next_step, update_ptt, AnalyzerMode, StrategyDecision, StrategyError,
    UpdateOutcome, REPETITION_HINT,
};
use crate::summarizer::{summarize, Summary};
use crate::verifier::{verify, Outcome, RetryBudget, Verdict, DEFAULT_MAX_RETRIES};

pub const DEFAULT_MAX_ITERATIONS: u32 = 25;
/// Re-plans allowed per iteration after a repetition is flagged.
pub const DEFAULT_MAX_REPLANS: u32 = 2;
/// Raw output kept as the summary when the summarizer fails.
const RAW_SUMMARY_CHARS: usize = 2000;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Log(#[from] RunLogError),
    #[error(transparent)]
    Report(ReportError),
}

/// Which pipeline components are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ablation {
    pub reasoning: bool,
    pub rag: bool,
    pub repetition: bool,
    pub verifier: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        reasoning: true,
        rag: true,
        repetition: true,
        verifier: true,
    };
    pub const BASE: Ablation = Ablation {
        reasoning: false,
        rag: false,
        repetition: false,
        verifier: false,
    };

    pub fn labels(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (on, label) in [(self.reasoning, "B*"), (self.rag, "R"), (self.repetition, "L"), (self.verifier, "V")] {
            if on {
                out.push(label.to_string());
            }
        }
        out
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let labels = self.labels();
        if labels.is_empty() {
            f.write_str("base")
        } else {
            f.write_str(&labels.join(","))
        }
    }
}

/// `R,L` means B*, R and L; `base` drops the reasoning analyzer.
impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut a = Ablation::BASE;
        let (mut base, mut reasoning, mut any) = (false, false, false);
        for token in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            any = true;
            match token.to_ascii_uppercase().as_str() {
                "BASE" | "B" => base = true,
                "B*" => reasoning = true,
                "R" => a.rag = true,
                "L" => a.repetition = true,
                "V" => a.verifier = true,
                _ => return Err(format!("unknown component {token:?}; expected a subset of B*,R,L,V or base")),
            }
        }
        if !any {
            return Err("empty ablation set".into());
        }
        a.reasoning = reasoning || !base;
        Ok(a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub targets: Vec<String>,
    pub max_iterations: u32,
    /// Without it repetition prompts are answered with continue at once.
    pub interactive: bool,
    pub dry_run: bool,
    pub ablation: Ablation,
    pub log_path: PathBuf,
    pub report_path: PathBuf,
    pub ptt_path: PathBuf,
    pub max_retries: u32,
    pub max_replans: u32,
    pub repetition_threshold: f64,
    pub top_k: usize,
    pub checklist: Vec<ChecklistItem>,
}

impl RunConfig {
    /// Defaults with all outputs under `out_dir`.
    pub fn new(targets: Vec<String>, out_dir: &std::path::Path) -> Self {
        Self {
            targets,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            interactive: false,
            dry_run: false,
            ablation: Ablation::FULL,
            log_path: out_dir.join("run.jsonl"),
            report_path: out_dir.join("report.csv"),
            ptt_path: out_dir.join("ptt.txt"),
            max_retries: DEFAULT_MAX_RETRIES,
            max_replans: DEFAULT_MAX_REPLANS,
            repetition_threshold: DEFAULT_THRESHOLD,
            top_k: DEFAULT_TOP_K,
            checklist: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if self.targets.iter().all(|t| t.trim().is_empty()) {
            return Err(RunError::Config("no target given".into()));
        }
        if self.max_iterations == 0 {
            return Err(RunError::Config("max_iterations must be at least 1".into()));
        }
        if self.top_k == 0 {
            return Err(RunError::Config("top_k must be at least 1".into()));
        }
        if !(self.repetition_threshold > 0.0 && self.repetition_threshold < 2.0) {
            return Err(RunError::Config(format!(
                "repetition threshold {} outside (0, 2)",
                self.repetition_threshold
            )));
        }
        Ok(())
    }
}

/// Everything a run talks to.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub gateway: &'a Gateway,
    pub registry: &'a ToolRegistry,
    pub index: Option<&'a VectorIndex>,
    pub profile: &'a AttackHostProfile,
    pub operator: &'a dyn OperatorChannel,
    pub events: &'a dyn EventSink,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub stop: StopReason,
    pub log_path: PathBuf,
    pub report_path: PathBuf,
    pub report: ReportOutcome,
    pub metrics: MetricsReport,
    pub records: Vec<IterationRecord>,
}

/// A run in progress. Each [`Run::step`] performs one phase.
pub struct Run<'a> {
    cfg: &'a RunConfig,
    env: Pipeline<'a>,
    phase: Phase,
    iteration: u32,
    ptt: PentestTaskTree,
    analyzer: ChatSession,
    guard: Option<RepetitionGuard>,
    writer: RunLogWriter,
    records: Vec<IterationRecord>,
    record: Option<IterationRecord>,
    /// Tool output or operator observation still to be summarized.
    pending_output: String,
    pending_instruction: Option<String>,
    seeded: bool,
    hint: bool,
    replans: u32,
    prompt_seq: u64,
    verdict: Option<RepetitionVerdict>,
    plan: Option<CommandPlan>,
    budget: RetryBudget,
    stop: Option<StopReason>,
    outcome: Option<RunOutcome>,
}

impl<'a> Run<'a> {
    pub fn start(cfg: &'a RunConfig, env: Pipeline<'a>) -> Result<Self, RunError> {
        cfg.validate()?;
        let guard = if cfg.ablation.repetition {
            Some(RepetitionGuard::new(cfg.repetition_threshold).map_err(|e| RunError::Config(e.to_string()))?)
        } else {
            None
        };
        let header = RunHeader::new(cfg.targets.clone(), cfg.ablation.labels());
        let writer = RunLogWriter::create(&cfg.log_path, &header)?;
        let ptt = PentestTaskTree::seed(&cfg.targets.join(", "));
        let run = Self {
            cfg,
            env,
            phase: Phase::START,
            iteration: 1,
            ptt,
            analyzer: env.gateway.open_role_session(AgentRole::StrategyAnalyzer),
            guard,
            writer,
            records: Vec::new(),
            record: None,
            pending_output: String::new(),
            pending_instruction: None,
            seeded: false,
            hint: false,
            replans: 0,
            prompt_seq: 0,
            verdict: None,
            plan: None,
            budget: RetryBudget::new(cfg.max_retries),
            stop: None,
            outcome: None,
        };
        run.save_ptt();
        run.env.events.emit(
            EventKind::PhaseChange,
            json!({ "phase": Phase::START, "iteration": 1 }),
        );
        Ok(run)
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    pub fn ptt(&self) -> &PentestTaskTree {
        &self.ptt
    }

    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    /// Performs the current phase and moves to the next one.
    pub fn step(&mut self) -> Result<Phase, RunError> {
        match self.phase {
            Phase::Summarize => self.summarize_phase()?,
            Phase::Analyze => self.analyze_phase()?,
            Phase::RepetitionCheck => self.repetition_phase()?,
            Phase::AwaitOperator => self.operator_phase()?,
            Phase::Generate => self.generate_phase()?,
            Phase::Execute => self.execute_phase()?,
            Phase::Verify => self.verify_phase()?,
            Phase::Reporting => self.reporting_phase()?,
            Phase::Done => return Ok(Phase::Done),
        }
        Ok(self.phase)
    }

    pub fn finish(mut self) -> Result<RunOutcome, RunError> {
        while self.phase != Phase::Done {
            self.step()?;
        }
        Ok(self.outcome.take().expect("outcome is set when the run is done"))
    }

    fn go(&mut self, next: Phase) {
        debug_assert!(self.phase.can_go_to(next), "illegal transition {} -> {next}", self.phase);
        self.phase = next;
        if let Some(r) = self.record.as_mut() {
            r.phases.push(next);
        }
        self.env
            .events
            .emit(EventKind::PhaseChange, json!({ "phase": next, "iteration": self.iteration }));
    }

    fn record(&mut self) -> &mut IterationRecord {
        let index = self.iteration;
        self.record.get_or_insert_with(|| IterationRecord {
            index,
            started_ms: now_ms(),
            finished_ms: 0,
            instructions: Vec::new(),
            summary: String::new(),
            ptt_update: UpdateOutcome::NoOp,
            ptt_revision: 0,
            ptt_text: String::new(),
            checks: Vec::new(),
            retrieved_chunks: Vec::new(),
            attempts: Vec::new(),
            feedback: None,
            incomplete_flags: 0,
            phases: vec![Phase::Summarize],
            end: IterationEnd::Verified,
        })
    }

    fn save_ptt(&self) {
        if let Err(e) = self.ptt.write_atomic(&self.cfg.ptt_path) {
            tracing::warn!("could not write {}: {e}", self.cfg.ptt_path.display());
        }
    }

    fn summarize_phase(&mut self) -> Result<(), RunError> {
        self.record();
        let output = std::mem::take(&mut self.pending_output);
        let mut summary = if output.trim().is_empty() {
            Summary::empty()
        } else {
            summarize(&output, self.env.gateway).unwrap_or_else(|e| {
                tracing::warn!("summarizer failed, keeping raw output: {e}");
                Summary {
                    text: output.chars().take(RAW_SUMMARY_CHARS).collect(),
                    source_len: output.chars().count(),
                    chunk_count: 0,
                }
            })
        };
        if let Some(instruction) = self.pending_instruction.take() {
            summary.text = format!("Operator instruction: {instruction}\n{}", summary.text);
        }
        let (tree, outcome) = update_ptt(&self.ptt, &summary, &mut self.analyzer, self.env.gateway);
        self.ptt = tree;
        self.save_ptt();
        let text = self.ptt.serialize();
        let revision = self.ptt.revision;
        let r = self.record();
        if !summary.text.is_empty() {
            if !r.summary.is_empty() {
                r.summary.push('\n');
            }
            r.summary.push_str(summary.text.trim_end());
        }
        r.ptt_update = outcome;
        self.env.events.emit(
            EventKind::PttUpdated,
            json!({ "iteration": self.iteration, "revision": revision, "outcome": outcome, "ptt": text }),
        );
        self.go(Phase::Analyze);
        Ok(())
    }

    fn analyze_phase(&mut self) -> Result<(), RunError> {
        let decision = if !self.seeded {
            self.seeded = true;
            Ok(seed_decision(&self.ptt, &self.cfg.targets.join(", ")))
        } else {
            let mode = if self.cfg.ablation.reasoning {
                AnalyzerMode::Reasoning
            } else {
                AnalyzerMode::Plain
            };
            let hint = std::mem::take(&mut self.hint).then_some(REPETITION_HINT);
            select_next_step(&self.ptt, &mut self.analyzer, self.env.gateway, mode, hint)
        };
        let decision = match decision {
            Ok(d) => d,
            Err(e) => {
                let reason = match e {
                    StrategyError::NoStepsRemaining => StopReason::NoStepsRemaining,
                    StrategyError::Llm(err) => {
                        tracing::error!("strategy analyzer unavailable, stopping: {err}");
                        StopReason::BackendFailure
                    }
                };
                self.stop = Some(reason);
                self.close_iteration(IterationEnd::NoStep)?;
                self.go(Phase::Reporting);
                return Ok(());
            }
        };
        apply_decision(&mut self.ptt, &decision);
        self.save_ptt();
        self.env.events.emit(
            EventKind::StepSelected,
            json!({
                "iteration": self.iteration,
                "node_id": decision.selected_node_id.to_string(),
                "step_statement": decision.step_statement,
                "source": decision.source,
            }),
        );
        self.record().checks.push(SelectionCheck {
            decision,
            descriptor: None,
            verdict: None,
            operator: None,
        });
        self.go(if self.guard.is_some() { Phase::RepetitionCheck } else { Phase::Generate });
        Ok(())
    }

    fn current_decision(&self) -> StrategyDecision {
        self.record
            .as_ref()
            .and_then(|r| r.final_decision())
            .cloned()
            .expect("a step is selected before this phase")
    }

    fn repetition_phase(&mut self) -> Result<(), RunError> {
        let decision = self.current_decision();
        let descriptor = describe_step(&decision, self.env.gateway);
        let iteration = self.iteration;
        let guard = self.guard.as_mut().expect("repetition check runs only with a guard");
        let verdict = guard.check(&descriptor, iteration, self.env.gateway).unwrap_or_else(|e| {
            tracing::warn!("repetition check failed, treating the step as new: {e}");
            RepetitionVerdict::none()
        });
        let flagged = verdict.is_repetition;
        if let Some(check) = self.record().checks.last_mut() {
            check.descriptor = Some(descriptor);
            check.verdict = Some(verdict.clone());
        }
        self.verdict = Some(verdict);
        self.go(if flagged { Phase::AwaitOperator } else { Phase::Generate });
        Ok(())
    }

    fn operator_phase(&mut self) -> Result<(), RunError> {
        let decision = self.current_decision();
        let verdict = self.verdict.clone().unwrap_or_else(RepetitionVerdict::none);
        self.prompt_seq += 1;
        let descriptor = self
            .record
            .as_ref()
            .and_then(|r| r.checks.last())
            .and_then(|c| c.descriptor.as_ref())
            .map(|d| d.canonical.clone())
            .unwrap_or_default();
        let prompt = RepetitionPrompt {
            prompt_id: self.prompt_seq,
            iteration: self.iteration,
            step_statement: decision.step_statement.clone(),
            descriptor,
            nearest_iteration: verdict.nearest_iteration,
            distance: verdict.distance,
        };
        self.env.events.emit(
            EventKind::RepetitionPrompt,
            serde_json::to_value(&prompt).unwrap_or_default(),
        );
        let channel: &dyn OperatorChannel = if self.cfg.interactive {
            self.env.operator
        } else {
            &NonInteractive
        };
        let answer = handle_repetition(&verdict, &prompt, channel);
        if let Some(check) = self.record().checks.last_mut() {
            check.operator = Some(answer.clone());
        }
        match answer.kind {
            DecisionKind::Continue if self.replans < self.cfg.max_replans => {
                self.replans += 1;
                self.hint = true;
                self.go(Phase::Analyze);
            }
            DecisionKind::Continue => {
                tracing::info!("re-plan limit reached, keeping the repeated step");
                self.go(Phase::Generate);
            }
            DecisionKind::Exit => {
                self.stop = Some(StopReason::OperatorExit);
                self.close_iteration(IterationEnd::Exit)?;
                self.go(Phase::Reporting);
            }
            DecisionKind::Interactive => {
                self.record().feedback = Some(answer.payload.clone());
                self.pending_output = format!("Operator observation: {}", answer.payload);
                self.close_iteration(IterationEnd::Feedback)?;
                self.next_iteration();
            }
            DecisionKind::General => {
                self.record().instructions.push(answer.payload.clone());
                self.pending_instruction = Some(answer.payload);
                self.go(Phase::Summarize);
            }
        }
        Ok(())
    }

    fn generate_phase(&mut self) -> Result<(), RunError> {
        let decision = self.current_decision();
        let step_ref = StepRef {
            iteration: self.iteration,
            node_id: decision.selected_node_id.clone(),
        };
        let target = self.cfg.targets.join(", ");
        let retrieved = match (self.cfg.ablation.rag, self.env.index) {
            (true, Some(index)) => retrieve(index, &decision.step_statement, self.cfg.top_k, self.env.gateway)
                .unwrap_or_else(|e| {
                    tracing::warn!("retrieval failed, generating without excerpts: {e}");
                    Vec::new()
                }),
            _ => Vec::new(),
        };
        let ids: Vec<u64> = retrieved.iter().map(|s| s.chunk.chunk_id).collect();
        let plan = generate_commands(&decision, step_ref, &retrieved, self.env.profile, &target, self.env.gateway);
        let r = self.record();
        r.retrieved_chunks = ids;
        r.incomplete_flags = plan.incomplete_count() as u32;
        self.plan = Some(plan);
        self.budget = RetryBudget::new(self.cfg.max_retries);
        self.go(Phase::Execute);
        Ok(())
    }

    fn execute_phase(&mut self) -> Result<(), RunError> {
        let plan = self.plan.clone().expect("a plan exists before execution");
        let commands = extract_commands(&plan, self.env.registry, self.env.gateway);
        let opts = ExecOptions {
            scoped_targets: self.cfg.targets.clone(),
            local_ip: Some(self.env.profile.local_ip.clone()),
            dry_run: self.cfg.dry_run,
        };
        let mut results = Vec::with_capacity(commands.len());
        for cmd in &commands {
            self.env.events.emit(
                EventKind::ToolStarted,
                json!({ "iteration": self.iteration, "tool": cmd.tool, "command": cmd.display() }),
            );
            let result = execute(cmd, self.env.registry, &opts).unwrap_or_else(|e| failed_result(cmd, &e.to_string()));
            self.env.events.emit(
                EventKind::ToolOutputChunk,
                json!({
                    "iteration": self.iteration,
                    "tool": result.tool,
                    "text": result.transcript,
                    "exit_code": result.exit_code,
                }),
            );
            results.push(result);
        }
        self.record().attempts.push(Attempt {
            plan,
            commands,
            results,
            verdict: None,
        });
        self.go(Phase::Verify);
        Ok(())
    }

    fn verify_phase(&mut self) -> Result<(), RunError> {
        let plan = self.plan.clone().expect("a plan exists before verification");
        let results = self
            .record
            .as_ref()
            .and_then(|r| r.attempts.last())
            .map(|a| a.results.clone())
            .unwrap_or_default();
        let verdict = if !self.cfg.ablation.verifier {
            accepted("verifier disabled")
        } else if results.is_empty() && plan.incomplete_count() == 0 {
            accepted("no commands were executed")
        } else {
            verify(&plan, &results, &mut self.budget, self.env.gateway)
        };
        self.env.events.emit(
            EventKind::Verdict,
            json!({ "iteration": self.iteration, "outcome": verdict.outcome, "rationale": verdict.rationale }),
        );
        let revised = match (&verdict.outcome, &verdict.revised_plan) {
            (Outcome::Retry, Some(p)) => Some(p.clone()),
            _ => None,
        };
        let r = self.record();
        if let Some(a) = r.attempts.last_mut() {
            a.verdict = Some(verdict);
        }
        if let Some(revised) = revised {
            r.incomplete_flags = revised.incomplete_count() as u32;
            self.plan = Some(revised);
            self.go(Phase::Execute);
            return Ok(());
        }
        self.pending_output = self
            .record
            .as_ref()
            .map(|r| r.results().map(result_text).collect::<Vec<_>>().join("\n"))
            .unwrap_or_default();
        self.close_iteration(IterationEnd::Verified)?;
        self.next_iteration();
        Ok(())
    }

    /// Log write failures abort the run.
    fn close_iteration(&mut self, end: IterationEnd) -> Result<(), RunError> {
        let mut r = self.record.take().expect("an iteration is open");
        r.end = end;
        r.finished_ms = now_ms();
        r.ptt_text = self.ptt.serialize();
        r.ptt_revision = self.ptt.revision;
        self.writer.append_iteration(&r)?;
        self.records.push(r);
        self.plan = None;
        self.verdict = None;
        self.replans = 0;
        self.hint = false;
        Ok(())
    }

    fn next_iteration(&mut self) {
        self.iteration += 1;
        if self.stop.is_none() && self.iteration > self.cfg.max_iterations {
            self.stop = Some(StopReason::MaxIterations);
        }
        if self.stop.is_some() {
            self.iteration -= 1;
            self.go(Phase::Reporting);
        } else {
            self.go(Phase::Summarize);
        }
    }

    fn reporting_phase(&mut self) -> Result<(), RunError> {
        let report = match generate_report(&self.records, &self.cfg.targets, self.env.gateway, &self.cfg.report_path) {
            Ok(r) => r,
            Err(ReportError::Llm(e)) => {
                tracing::warn!("report generator unavailable, writing an empty report: {e}");
                write_report_file(&self.cfg.report_path, &[]).map_err(RunError::Report)?;
                ReportOutcome {
                    rows: Vec::new(),
                    dropped: vec![format!("report generator unavailable: {e}")],
                    derived_risk: 0,
                }
            }
            Err(e) => return Err(RunError::Report(e)),
        };
        self.env.events.emit(
            EventKind::ReportReady,
            json!({ "path": self.cfg.report_path.display().to_string(), "rows": report.rows.len() }),
        );
        let stop = self.stop.unwrap_or(StopReason::NoStepsRemaining);
        self.writer.finish(&RunEnd {
            reason: stop,
            finished_ms: now_ms(),
            report_path: Some(self.cfg.report_path.display().to_string()),
        })?;
        let text: String = self.records.iter().map(render_record).collect();
        let checklist = (!self.cfg.checklist.is_empty()).then_some((self.cfg.checklist.as_slice(), text.as_str()));
        let metrics = compute_metrics(&self.records, checklist);
        self.go(Phase::Done);
        self.env.events.emit(EventKind::RunDone, json!({ "reason": stop, "metrics": metrics }));
        self.outcome = Some(RunOutcome {
            stop,
            log_path: self.cfg.log_path.clone(),
            report_path: self.cfg.report_path.clone(),
            report,
            metrics,
            records: std::mem::take(&mut self.records),
        });
        Ok(())
    }
}

/// Runs to completion.
pub fn run(cfg: &RunConfig, env: Pipeline<'_>) -> Result<RunOutcome, RunError> {
    Run::start(cfg, env)?.finish()
}

fn accepted(rationale: &str) -> Verdict {
    Verdict {
        outcome: Outcome::Valid,
        revised_plan: None,
        rationale: rationale.into(),
        fail_open: false,
    }
}

fn failed_result(cmd: &ExtractedCommand, message: &str) -> ToolResult {
    ToolResult {
        tool: cmd.tool.clone(),
        command: cmd.display(),
        transcript: format!("[execution failed: {message}]"),
        exit_code: ExitCode::Code(-1),
        duration: std::time::Duration::ZERO,
        truncated: false,
        pattern_timeouts: Vec::new(),
    }
}

fn result_text(r: &ToolResult) -> String {
    format!("$ {} (exit {})\n{}\n", r.command, r.exit_code, r.transcript.trim_end())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::aci::{ToolMode, ToolSpec};
    use crate::events::EventLog;
    use crate::llm::ScriptedTranscript;
    use crate::operator::{DecisionSource, OperatorDecision, ScriptedOperator};
    use crate::phase::first_illegal;
    use crate::runlog::RunLog;

    fn registry() -> ToolRegistry {
        ToolRegistry::new(vec![ToolSpec {
            name: "nmap".into(),
            mode: ToolMode::Static,
            binary_path: "/bin/echo".into(),
            base_args: vec![],
            default_timeout: std::time::Duration::from_secs(10),
            quiet_period: std::time::Duration::from_millis(200),
            max_output: 1 << 16,
        }])
        .unwrap()
    }

    fn profile(dir: &std::path::Path) -> AttackHostProfile {
        AttackHostProfile {
            local_ip: "10.10.14.2".into(),
            wordlist_paths: BTreeMap::new(),
            workspace_dir: dir.to_path_buf(),
        }
    }

    const SCAN: &str = r#"
[[entry]]
role = "generator"
reply = "TOOL: nmap\nINSTRUCTIONS: scan\n```\nnmap -sV 10.10.10.3\n```"

[[entry]]
role = "command_extractor"
reply = '[{"tool": "nmap", "argv": ["-sV", "10.10.10.3"]}]'
"#;

    const REPORT: &str = r#"
[[entry]]
role = "report_generator"
reply = "[]"
"#;

    fn phases(records: &[IterationRecord]) -> Vec<Phase> {
        let mut all: Vec<Phase> = records.iter().flat_map(|r| r.phases.clone()).collect();
        all.extend([Phase::Reporting, Phase::Done]);
        all
    }

    #[test]
    fn ablation_flags() {
        assert_eq!("R,L".parse::<Ablation>().unwrap().labels(), vec!["B*", "R", "L"]);
        assert_eq!("base".parse::<Ablation>().unwrap(), Ablation::BASE);
        assert_eq!("B*,R,L,V".parse::<Ablation>().unwrap(), Ablation::FULL);
        assert_eq!("base,V".parse::<Ablation>().unwrap().labels(), vec!["V"]);
        assert!("R,X".parse::<Ablation>().is_err());
        assert!("".parse::<Ablation>().is_err());
    }

    #[test]
    fn one_iteration_cap() {
        let dir = tempfile::tempdir().unwrap();
        let gw = Gateway::scripted(ScriptedTranscript::parse(&format!("{SCAN}{REPORT}")).unwrap()).0;
        let mut cfg = RunConfig::new(vec!["10.10.10.3".into()], dir.path());
        cfg.max_iterations = 1;
        cfg.ablation = Ablation::BASE;
        let reg = registry();
        let prof = profile(dir.path());
        let events = EventLog::new();
        let env = Pipeline {
            gateway: &gw,
            registry: &reg,
            index: None,
            profile: &prof,
            operator: &NonInteractive,
            events: &events,
        };
        let out = run(&cfg, env).unwrap();
        assert_eq!(out.stop, StopReason::MaxIterations);
        assert_eq!(out.records.len(), 1);
        let r = &out.records[0];
        assert_eq!(r.results().next().unwrap().transcript.trim(), "-sV 10.10.10.3");
        assert_eq!(out.metrics.steps, 1);
        assert_eq!(first_illegal(&phases(&out.records)), None);
        assert!(cfg.report_path.exists());
        let log = RunLog::read(&cfg.log_path).unwrap();
        assert_eq!(log.records, out.records);
        assert_eq!(log.end.unwrap().reason, StopReason::MaxIterations);
        assert!(events.snapshot().done);
    }

    #[test]
    fn exit_at_first_repetition() {
        let dir = tempfile::tempdir().unwrap();
        let script = format!(
            r#"
[[entry]]
role = "strategy_analyzer"
reply = "SERVICE: tcp\nTECHNIQUE: port scan\nTOOL: nmap"
{SCAN}
[[entry]]
role = "results_verifier"
reply = "VERDICT: VALID\nRATIONALE: ports listed"

[[entry]]
role = "summarizer"
reply = "Port 21 is open."

[[entry]]
role = "strategy_analyzer"
reply = "```ptt\n1 Pentest 10.10.10.3 [TODO]\n  1.1 Reconnaissance [DONE]\n    - 21/ftp open\n  1.2 Full port scan [TODO]\n```"

[[entry]]
role = "strategy_analyzer"
reply = "SELECTED: 1.2 | STEP: Scan all ports of 10.10.10.3 again"

[[entry]]
role = "strategy_analyzer"
reply = "SERVICE: tcp\nTECHNIQUE: port scan\nTOOL: nmap"
{REPORT}"#
        );
        let gw = Gateway::scripted(ScriptedTranscript::parse(&script).unwrap()).0;
        let mut cfg = RunConfig::new(vec!["10.10.10.3".into()], dir.path());
        cfg.interactive = true;
        let reg = registry();
        let prof = profile(dir.path());
        let operator = ScriptedOperator::new([Some(
            OperatorDecision::new(DecisionKind::Exit, "", DecisionSource::Operator).unwrap(),
        )]);
        let env = Pipeline {
            gateway: &gw,
            registry: &reg,
            index: None,
            profile: &prof,
            operator: &operator,
            events: &crate::events::NullSink,
        };
        let out = run(&cfg, env).unwrap();
        assert_eq!(out.stop, StopReason::OperatorExit);
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.records[1].end, IterationEnd::Exit);
        assert_eq!(operator.prompts()[0].nearest_iteration, Some(1));
        assert_eq!((out.metrics.steps, out.metrics.human_interactions), (1, 1));
        assert_eq!(first_illegal(&phases(&out.records)), None);
        assert!(cfg.report_path.exists());
        assert!(std::fs::read_to_string(&cfg.ptt_path).unwrap().contains("21/ftp open"));
    }
}
