//! Loopback HTTP service for the operator console: run state, a replayable
//! event stream and the decision mailbox.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use pentrail_core::events::{Event, EventKind, EventLog};
use pentrail_core::operator::{DecisionKind, Mailbox, MailboxError};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::watch;

/// Shared between the run thread and the handlers.
#[derive(Clone)]
pub struct ServiceState {
    pub events: Arc<EventLog>,
    pub mailbox: Arc<Mailbox>,
    pub report_path: PathBuf,
    latest: watch::Receiver<u64>,
}

impl ServiceState {
    /// Hooks a watch channel onto `events` so streams wake on new events.
    pub fn new(events: Arc<EventLog>, mailbox: Arc<Mailbox>, report_path: PathBuf) -> Self {
        let (tx, rx) = watch::channel(events.last_seq());
        events.subscribe(move |e| {
            tx.send_replace(e.seq);
        });
        Self {
            events,
            mailbox,
            report_path,
            latest: rx,
        }
    }
}

pub fn router(state: ServiceState) -> Router {
    Router::new()
        .route("/api/state", get(get_state))
        .route("/api/events", get(get_events))
        .route("/api/decision", post(post_decision))
        .route("/api/feedback", post(post_feedback))
        .route("/api/report", get(get_report))
        .with_state(state)
}

/// Binds `addr` and serves until the returned task is dropped or aborted.
/// Non-loopback addresses are refused.
pub async fn bind(addr: SocketAddr, state: ServiceState) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
    if !addr.ip().is_loopback() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            format!("{addr} is not a loopback address"),
        ));
    }
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let app = router(state);
    let task = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            tracing::error!("service stopped: {e}");
        }
    });
    Ok((local, task))
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn mailbox_error(e: MailboxError) -> Response {
    match e {
        MailboxError::Invalid(_) => error(StatusCode::BAD_REQUEST, e.to_string()),
        MailboxError::NoPending | MailboxError::PromptMismatch { .. } => error(StatusCode::CONFLICT, e.to_string()),
    }
}

async fn get_state(State(st): State<ServiceState>) -> Response {
    let mut snap = st.events.snapshot();
    // The mailbox knows about answered and expired prompts before the
    // event log does.
    snap.pending_prompt = st.mailbox.pending().and_then(|p| serde_json::to_value(p).ok());
    Json(snap).into_response()
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    from: Option<u64>,
}

async fn get_events(State(st): State<ServiceState>, headers: HeaderMap, Query(q): Query<EventsQuery>) -> Response {
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok());
    let from = q.from.or(resume).unwrap_or(0);
    Sse::new(event_stream(st, from))
        .keep_alive(KeepAlive::new().interval(Duration::from_secs(15)))
        .into_response()
}

/// Every event after `from`, then live events. Ends after `run_done`.
fn event_stream(st: ServiceState, from: u64) -> impl Stream<Item = Result<SseEvent, Infallible>> {
    struct Cursor {
        st: ServiceState,
        after: u64,
        backlog: std::collections::VecDeque<Event>,
        finished: bool,
    }
    let start = Cursor {
        after: from,
        backlog: Default::default(),
        finished: false,
        st,
    };
    stream::unfold(start, |mut c| async move {
        loop {
            if let Some(e) = c.backlog.pop_front() {
                c.after = e.seq;
                if e.kind == EventKind::RunDone {
                    c.finished = true;
                }
                return Some((Ok(to_sse(&e)), c));
            }
            if c.finished {
                return None;
            }
            let mut rx = c.st.latest.clone();
            let fresh = c.st.events.since(c.after);
            if fresh.is_empty() {
                if rx.wait_for(|seq| *seq > c.after).await.is_err() {
                    return None;
                }
                continue;
            }
            c.backlog.extend(fresh);
        }
    })
}

fn to_sse(e: &Event) -> SseEvent {
    let kind = serde_json::to_value(e.kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    SseEvent::default()
        .id(e.seq.to_string())
        .event(kind)
        .data(serde_json::to_string(e).unwrap_or_default())
}

fn parse_body(body: &Bytes) -> Result<Value, Response> {
    serde_json::from_slice::<Value>(body)
        .ok()
        .filter(Value::is_object)
        .ok_or_else(|| error(StatusCode::BAD_REQUEST, "body must be a JSON object"))
}

async fn post_decision(State(st): State<ServiceState>, body: Bytes) -> Response {
    let v = match parse_body(&body) {
        Ok(v) => v,
        Err(r) => return r,
    };
    let Some(prompt_id) = v.get("prompt_id").and_then(Value::as_u64) else {
        return error(StatusCode::BAD_REQUEST, "prompt_id must be a non-negative integer");
    };
    let kind = match v.get("kind").and_then(Value::as_str).map(str::parse::<DecisionKind>) {
        Some(Ok(k)) => k,
        Some(Err(e)) => return error(StatusCode::BAD_REQUEST, e),
        None => return error(StatusCode::BAD_REQUEST, "kind is required"),
    };
    let payload = match v.get("payload") {
        None | Some(Value::Null) => "",
        Some(Value::String(s)) => s.as_str(),
        Some(_) => return error(StatusCode::BAD_REQUEST, "payload must be a string"),
    };
    match st.mailbox.submit(prompt_id, kind, payload) {
        Ok(()) => Json(json!({ "accepted": true, "prompt_id": prompt_id })).into_response(),
        Err(e) => mailbox_error(e),
    }
}

async fn post_feedback(State(st): State<ServiceState>, body: Bytes) -> Response {
    let v = match parse_body(&body) {
        Ok(v) => v,
        Err(r) => return r,
    };
    let Some(text) = v.get("text").and_then(Value::as_str) else {
        return error(StatusCode::BAD_REQUEST, "text must be a string");
    };
    match st.mailbox.submit_feedback(text) {
        Ok(()) => Json(json!({ "accepted": true })).into_response(),
        Err(e) => mailbox_error(e),
    }
}

async fn get_report(State(st): State<ServiceState>) -> Response {
    if !st.events.snapshot().report_ready {
        return error(StatusCode::NOT_FOUND, "report not ready");
    }
    match tokio::fs::read(&st.report_path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], bytes).into_response(),
        Err(e) => error(StatusCode::NOT_FOUND, format!("report unavailable: {e}")),
    }
}
