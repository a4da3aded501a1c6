//! Operator decisions at repetition events and the channels that deliver
//! them: headless default, a one-slot mailbox for the HTTP console, the
//! terminal, and a scripted queue for tests.

use std::collections::VecDeque;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Condvar, Mutex, OnceLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default time the operator has to answer in interactive mode.
pub const DEFAULT_DECISION_WINDOW: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    Continue,
    Exit,
    Interactive,
    General,
}

impl FromStr for DecisionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "continue" => Ok(DecisionKind::Continue),
            "exit" => Ok(DecisionKind::Exit),
            "interactive" => Ok(DecisionKind::Interactive),
            "general" => Ok(DecisionKind::General),
            other => Err(format!("unknown decision kind `{other}`")),
        }
    }
}

/// Whether a decision came from a person or from the no-input default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionSource {
    Operator,
    Default,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorDecision {
    pub kind: DecisionKind,
    pub payload: String,
    pub source: DecisionSource,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MailboxError {
    #[error("no repetition prompt is pending")]
    NoPending,
    #[error("prompt id {got} does not match pending prompt {expected}")]
    PromptMismatch { expected: u64, got: u64 },
    #[error("invalid decision: {0}")]
    Invalid(String),
}

impl OperatorDecision {
    /// Payload must be non-empty exactly for interactive and general.
    pub fn new(kind: DecisionKind, payload: &str, source: DecisionSource) -> Result<Self, MailboxError> {
        let payload = payload.trim();
        let needs = matches!(kind, DecisionKind::Interactive | DecisionKind::General);
        if needs && payload.is_empty() {
            return Err(MailboxError::Invalid(format!("{kind:?} requires a non-empty payload")));
        }
        Ok(Self {
            kind,
            payload: if needs { payload.to_string() } else { String::new() },
            source,
        })
    }

    pub fn default_continue() -> Self {
        Self {
            kind: DecisionKind::Continue,
            payload: String::new(),
            source: DecisionSource::Default,
        }
    }
}

/// What the operator is shown when a repetition is detected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionPrompt {
    pub prompt_id: u64,
    pub iteration: u32,
    pub step_statement: String,
    pub descriptor: String,
    pub nearest_iteration: Option<u32>,
    pub distance: f64,
}

pub trait OperatorChannel: Send + Sync {
    /// Blocks until a decision arrives or the channel's window elapses;
    /// `None` means no input.
    fn ask(&self, prompt: &RepetitionPrompt) -> Option<OperatorDecision>;
}

/// Headless mode: never waits, always continues.
#[derive(Debug, Default, Clone, Copy)]
pub struct NonInteractive;

impl OperatorChannel for NonInteractive {
    fn ask(&self, _prompt: &RepetitionPrompt) -> Option<OperatorDecision> {
        None
    }
}

/// Pre-recorded answers, consumed one per prompt. `None` entries simulate
/// silence.
#[derive(Debug, Default)]
pub struct ScriptedOperator {
    answers: Mutex<VecDeque<Option<OperatorDecision>>>,
    asked: Mutex<Vec<RepetitionPrompt>>,
}

impl ScriptedOperator {
    pub fn new(answers: impl IntoIterator<Item = Option<OperatorDecision>>) -> Self {
        Self {
            answers: Mutex::new(answers.into_iter().collect()),
            asked: Mutex::new(Vec::new()),
        }
    }

    pub fn prompts(&self) -> Vec<RepetitionPrompt> {
        self.asked.lock().unwrap().clone()
    }
}

impl OperatorChannel for ScriptedOperator {
    fn ask(&self, prompt: &RepetitionPrompt) -> Option<OperatorDecision> {
        self.asked.lock().unwrap().push(prompt.clone());
        self.answers.lock().unwrap().pop_front().flatten()
    }
}

#[derive(Debug, Default)]
struct MailboxState {
    pending: Option<RepetitionPrompt>,
    answer: Option<OperatorDecision>,
}

/// One-slot mailbox: at most one pending prompt, and exactly one decision
/// accepted per prompt.
#[derive(Debug)]
pub struct Mailbox {
    state: Mutex<MailboxState>,
    cv: Condvar,
    window: Duration,
}

impl Mailbox {
    pub fn new(window: Duration) -> Self {
        Self {
            state: Mutex::new(MailboxState::default()),
            cv: Condvar::new(),
            window,
        }
    }

    pub fn pending(&self) -> Option<RepetitionPrompt> {
        self.state.lock().unwrap().pending.clone()
    }

    pub fn submit(&self, prompt_id: u64, kind: DecisionKind, payload: &str) -> Result<(), MailboxError> {
        let mut st = self.state.lock().unwrap();
        let expected = st.pending.as_ref().ok_or(MailboxError::NoPending)?.prompt_id;
        if expected != prompt_id {
            return Err(MailboxError::PromptMismatch {
                expected,
                got: prompt_id,
            });
        }
        let decision = OperatorDecision::new(kind, payload, DecisionSource::Operator)?;
        st.pending = None;
        st.answer = Some(decision);
        self.cv.notify_all();
        Ok(())
    }

    /// Interactive-mode observation: answers the pending prompt as
    /// `interactive` with `text` as the step result.
    pub fn submit_feedback(&self, text: &str) -> Result<(), MailboxError> {
        let id = self
            .state
            .lock()
            .unwrap()
            .pending
            .as_ref()
            .ok_or(MailboxError::NoPending)?
            .prompt_id;
        self.submit(id, DecisionKind::Interactive, text)
    }
}

impl OperatorChannel for Mailbox {
    fn ask(&self, prompt: &RepetitionPrompt) -> Option<OperatorDecision> {
        let deadline = Instant::now() + self.window;
        let mut st = self.state.lock().unwrap();
        st.pending = Some(prompt.clone());
        st.answer = None;
        loop {
            if let Some(answer) = st.answer.take() {
                return Some(answer);
            }
            let now = Instant::now();
            if now >= deadline {
                st.pending = None;
                return None;
            }
            st = self.cv.wait_timeout(st, deadline - now).unwrap().0;
        }
    }
}

/// Parses a terminal answer such as `2`, `exit`, `4 focus on port 8443`.
/// An empty line means no input.
pub fn parse_terminal_answer(line: &str) -> Result<Option<OperatorDecision>, MailboxError> {
    let line = line.trim();
    if line.is_empty() {
        return Ok(None);
    }
    let (head, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
    let kind = match head.to_ascii_lowercase().as_str() {
        "1" | "c" | "continue" => DecisionKind::Continue,
        "2" | "e" | "exit" => DecisionKind::Exit,
        "3" | "i" | "interactive" => DecisionKind::Interactive,
        "4" | "g" | "general" => DecisionKind::General,
        other => return Err(MailboxError::Invalid(format!("unknown option `{other}`"))),
    };
    OperatorDecision::new(kind, rest, DecisionSource::Operator).map(Some)
}

fn stdin_lines() -> &'static Mutex<Receiver<String>> {
    static LINES: OnceLock<Mutex<Receiver<String>>> = OnceLock::new();
    LINES.get_or_init(|| {
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let stdin = std::io::stdin();
            for line in stdin.lock().lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Mutex::new(rx)
    })
}

/// Terminal fallback when no console is attached.
#[derive(Debug, Clone)]
pub struct TerminalPrompt {
    pub window: Duration,
}

impl OperatorChannel for TerminalPrompt {
    fn ask(&self, prompt: &RepetitionPrompt) -> Option<OperatorDecision> {
        let mut err = std::io::stderr().lock();
        let _ = writeln!(
            err,
            "\nRepetition detected at iteration {} (distance {:.3} to iteration {}):\n  {}\n\
             Options (answer within {}s, no input continues):\n  \
             1) continue   2) exit   3) interactive <observations>   4) general <instruction>",
            prompt.iteration,
            prompt.distance,
            prompt
                .nearest_iteration
                .map(|i| i.to_string())
                .unwrap_or_else(|| "-".into()),
            prompt.step_statement,
            self.window.as_secs()
        );
        let _ = err.flush();
        drop(err);
        let rx = stdin_lines().lock().unwrap();
        while rx.try_recv().is_ok() {}
        let deadline = Instant::now() + self.window;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match rx.recv_timeout(left) {
                Ok(line) => match parse_terminal_answer(&line) {
                    Ok(d) => return d,
                    Err(e) => eprintln!("{e}; try again"),
                },
                Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => return None,
            }
        }
    }
}
