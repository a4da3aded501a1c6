//! Overlapping-chunk summarization of long tool output.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{AgentRole, Gateway, LlmError};
use crate::text::escape_controls;

pub const CHUNK_SIZE: usize = 6000;
pub const CHUNK_OVERLAP: usize = 500;
/// Merge rounds before the combined summaries are truncated.
pub const MAX_MERGE_DEPTH: usize = 3;
pub const TRUNCATION_MARKER: &str = "\n[... truncated: combined summaries exceeded the merge limit ...]";

#[derive(Debug, Error)]
pub enum SummarizerError {
    #[error("chunk size {chunk_size} must be greater than overlap {overlap}")]
    InvalidConfig { chunk_size: usize, overlap: usize },
    #[error(transparent)]
    Llm(#[from] LlmError),
}

/// Half-open character span `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    pub spans: Vec<Span>,
    pub chunk_size: usize,
    pub overlap: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub text: String,
    pub source_len: usize,
    pub chunk_count: usize,
}

impl Summary {
    pub fn empty() -> Self {
        Self {
            text: String::new(),
            source_len: 0,
            chunk_count: 0,
        }
    }
}

/// Stride is `chunk_size - overlap`; the last span is clipped at `text_len`.
pub fn plan_chunks(
    text_len: usize,
    chunk_size: usize,
    overlap: usize,
) -> Result<ChunkPlan, SummarizerError> {
    if chunk_size <= overlap {
        return Err(SummarizerError::InvalidConfig { chunk_size, overlap });
    }
    let stride = chunk_size - overlap;
    let mut spans = Vec::new();
    let mut start = 0;
    while start < text_len {
        let end = (start + chunk_size).min(text_len);
        spans.push(Span { start, end });
        if end == text_len {
            break;
        }
        start += stride;
    }
    Ok(ChunkPlan {
        spans,
        chunk_size,
        overlap,
    })
}

fn slice_chars(chars: &[char], span: Span) -> String {
    chars[span.start..span.end].iter().collect()
}

/// Summarizes `tool_output` chunk by chunk and merges the partial summaries.
pub fn summarize(tool_output: &str, gateway: &Gateway) -> Result<Summary, SummarizerError> {
    let text = escape_controls(tool_output);
    let chars: Vec<char> = text.chars().collect();
    let plan = plan_chunks(chars.len(), CHUNK_SIZE, CHUNK_OVERLAP)?;
    if plan.spans.is_empty() {
        return Ok(Summary::empty());
    }
    let partials = summarize_chunks(&chars, &plan, gateway)?;
    let text = if partials.len() == 1 {
        partials.into_iter().next().unwrap_or_default()
    } else {
        merge(partials, gateway, 1)?
    };
    Ok(Summary {
        text,
        source_len: chars.len(),
        chunk_count: plan.spans.len(),
    })
}

fn summarize_chunks(
    chars: &[char],
    plan: &ChunkPlan,
    gateway: &Gateway,
) -> Result<Vec<String>, SummarizerError> {
    let n = plan.spans.len();
    plan.spans
        .iter()
        .enumerate()
        .map(|(i, span)| {
            let mut session = gateway.open_role_session(AgentRole::Summarizer);
            let prompt = format!(
                "Summarize the following tool output (chunk {} of {n}):\n\n{}",
                i + 1,
                slice_chars(chars, *span)
            );
            Ok(gateway.chat(&mut session, &prompt)?)
        })
        .collect()
}

fn join_partials(partials: &[String]) -> String {
    partials
        .iter()
        .enumerate()
        .map(|(i, s)| format!("[Part {}]\n{}", i + 1, s.trim()))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn merge(partials: Vec<String>, gateway: &Gateway, depth: usize) -> Result<String, SummarizerError> {
    let mut combined = join_partials(&partials);
    let len = combined.chars().count();
    if len > CHUNK_SIZE {
        if depth < MAX_MERGE_DEPTH {
            let chars: Vec<char> = combined.chars().collect();
            let plan = plan_chunks(chars.len(), CHUNK_SIZE, CHUNK_OVERLAP)?;
            let next = summarize_chunks(&chars, &plan, gateway)?;
            return merge(next, gateway, depth + 1);
        }
        let keep = CHUNK_SIZE - TRUNCATION_MARKER.chars().count();
        combined = combined.chars().take(keep).collect();
        combined.push_str(TRUNCATION_MARKER);
    }
    let mut session = gateway.open_role_session(AgentRole::Summarizer);
    let prompt = format!(
        "Merge the following partial summaries of one tool output into a single summary:\n\n{combined}"
    );
    Ok(gateway.chat(&mut session, &prompt)?)
}
