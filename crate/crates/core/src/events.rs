//! Run events for observers, with replay from any sequence number.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::phase::Phase;
use crate::runlog::now_ms;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    PhaseChange,
    PttUpdated,
    StepSelected,
    RepetitionPrompt,
    ToolStarted,
    ToolOutputChunk,
    Verdict,
    ReportReady,
    RunDone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub kind: EventKind,
    pub payload: Value,
    pub timestamp_ms: u64,
}

pub trait EventSink: Send + Sync {
    fn emit(&self, kind: EventKind, payload: Value);
}

/// Drops everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl EventSink for NullSink {
    fn emit(&self, _kind: EventKind, _payload: Value) {}
}

type Listener = Box<dyn Fn(&Event) + Send + Sync>;

/// Append-only in-memory log. Sequence numbers start at 1.
#[derive(Default)]
pub struct EventLog {
    inner: Mutex<Inner>,
}

#[derive(Default)]
struct Inner {
    events: Vec<Event>,
    listeners: Vec<Listener>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// `listener` sees every later event, in order.
    pub fn subscribe(&self, listener: impl Fn(&Event) + Send + Sync + 'static) {
        self.inner.lock().unwrap().listeners.push(Box::new(listener));
    }

    pub fn push(&self, kind: EventKind, payload: Value) -> u64 {
        let mut inner = self.inner.lock().unwrap();
        let event = Event {
            seq: inner.events.len() as u64 + 1,
            kind,
            payload,
            timestamp_ms: now_ms(),
        };
        for l in &inner.listeners {
            l(&event);
        }
        let seq = event.seq;
        inner.events.push(event);
        seq
    }

    /// Every event with `seq > after`.
    pub fn since(&self, after: u64) -> Vec<Event> {
        let inner = self.inner.lock().unwrap();
        let start = (after as usize).min(inner.events.len());
        inner.events[start..].to_vec()
    }

    pub fn last_seq(&self) -> u64 {
        self.inner.lock().unwrap().events.len() as u64
    }

    pub fn snapshot(&self) -> RunSnapshot {
        RunSnapshot::from_events(&self.inner.lock().unwrap().events)
    }
}

impl EventSink for EventLog {
    fn emit(&self, kind: EventKind, payload: Value) {
        self.push(kind, payload);
    }
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventLog").field("last_seq", &self.last_seq()).finish()
    }
}

/// Run state as seen by observers, folded from the events.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub phase: Option<Phase>,
    pub iteration: u32,
    pub ptt: String,
    pub step: Option<String>,
    pub pending_prompt: Option<Value>,
    pub report_ready: bool,
    pub done: bool,
    pub last_seq: u64,
}

impl RunSnapshot {
    pub fn from_events(events: &[Event]) -> Self {
        let mut s = RunSnapshot::default();
        for e in events {
            s.apply(e);
        }
        s
    }

    pub fn apply(&mut self, e: &Event) {
        self.last_seq = e.seq;
        let text = |key: &str| e.payload.get(key).and_then(Value::as_str).map(str::to_string);
        match e.kind {
            EventKind::PhaseChange => {
                self.phase = e.payload.get("phase").and_then(|p| serde_json::from_value(p.clone()).ok());
                if let Some(i) = e.payload.get("iteration").and_then(Value::as_u64) {
                    self.iteration = i as u32;
                }
                if self.phase != Some(Phase::AwaitOperator) {
                    self.pending_prompt = None;
                }
            }
            EventKind::PttUpdated => self.ptt = text("ptt").unwrap_or_default(),
            EventKind::StepSelected => self.step = text("step_statement"),
            EventKind::RepetitionPrompt => self.pending_prompt = Some(e.payload.clone()),
            EventKind::ReportReady => self.report_ready = true,
            EventKind::RunDone => self.done = true,
            EventKind::ToolStarted | EventKind::ToolOutputChunk | EventKind::Verdict => {}
        }
    }
}
