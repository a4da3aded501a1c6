//! Judges tool results against the plan and proposes refined commands
//! within a per-step retry budget.

use serde::{Deserialize, Serialize};

use crate::aci::ToolResult;
use crate::generator::{parse_plan_items, CommandPlan};
use crate::llm::{AgentRole, Gateway};

pub const DEFAULT_MAX_RETRIES: u32 = 2;
/// Per-result transcript budget inside the verifier prompt.
const PROMPT_TRANSCRIPT_CHARS: usize = 8000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Valid,
    Retry,
    GiveUp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revised_plan: Option<CommandPlan>,
    pub rationale: String,
    /// The reply could not be read and the results were accepted as is.
    #[serde(default)]
    pub fail_open: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryBudget {
    max_retries: u32,
    used: u32,
}

impl Default for RetryBudget {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_RETRIES)
    }
}

impl RetryBudget {
    pub fn new(max_retries: u32) -> Self {
        Self { max_retries, used: 0 }
    }

    pub fn used(&self) -> u32 {
        self.used
    }

    pub fn max_retries(&self) -> u32 {
        self.max_retries
    }

    pub fn exhausted(&self) -> bool {
        self.used >= self.max_retries
    }

    fn consume(&mut self) -> bool {
        if self.exhausted() {
            return false;
        }
        self.used += 1;
        true
    }
}

fn clip(text: &str, max: usize) -> String {
    if text.chars().count() <= max {
        return text.to_string();
    }
    let mut out: String = text.chars().take(max).collect();
    out.push_str("\n[... output clipped ...]");
    out
}

fn verifier_prompt(plan: &CommandPlan, results: &[ToolResult]) -> String {
    let mut p = format!("Executed commands:\n{}\n\nResults:\n", plan.render());
    for (i, r) in results.iter().enumerate() {
        p.push_str(&format!(
            "[{}] {} (exit {}{})\n{}\n\n",
            i + 1,
            r.command,
            r.exit_code,
            if r.truncated { ", output truncated" } else { "" },
            clip(&r.transcript, PROMPT_TRANSCRIPT_CHARS)
        ));
    }
    let held: Vec<&str> = plan
        .items
        .iter()
        .filter(|i| i.is_incomplete())
        .map(|i| i.command_text.as_str())
        .collect();
    if !held.is_empty() {
        p.push_str("Not executed because they contain unresolved placeholders:\n");
        for c in held {
            p.push_str(&format!("- {c}\n"));
        }
        p.push('\n');
    }
    p.push_str("Did these results fulfil the intent of the commands?");
    p
}

enum Parsed {
    Valid(String),
    Retry(String),
    GiveUp(String),
}

fn parse_verdict(reply: &str) -> Option<Parsed> {
    let mut verdict = None;
    let mut rationale = Vec::new();
    let mut in_rationale = false;
    for line in reply.lines() {
        let t = line.trim().trim_start_matches(['*', '#', ' ']);
        let upper = t.to_ascii_uppercase();
        if let Some(rest) = upper.strip_prefix("VERDICT") {
            let word = rest.trim_start_matches(['*', ':', ' ']).trim_end_matches(['*', '.', ' ']);
            verdict = match word.replace(['_', '-'], " ").as_str() {
                "VALID" => Some(0),
                "RETRY" => Some(1),
                "GIVE UP" => Some(2),
                _ => verdict,
            };
            in_rationale = false;
        } else if upper.starts_with("RATIONALE") {
            let rest = t["RATIONALE".len()..].trim_start_matches(['*', ':', ' ']);
            rationale.push(rest.to_string());
            in_rationale = true;
        } else if upper.starts_with("TOOL") || t.starts_with("```") {
            in_rationale = false;
        } else if in_rationale && !t.is_empty() {
            rationale.push(t.to_string());
        }
    }
    let rationale = rationale.join(" ").trim().to_string();
    Some(match verdict? {
        0 => Parsed::Valid(rationale),
        1 => Parsed::Retry(rationale),
        _ => Parsed::GiveUp(rationale),
    })
}

/// One verifier session per call. Unreadable replies accept the results.
pub fn verify(plan: &CommandPlan, results: &[ToolResult], budget: &mut RetryBudget, gateway: &Gateway) -> Verdict {
    let mut session = gateway.open_role_session(AgentRole::ResultsVerifier);
    let reply = match gateway.chat(&mut session, &verifier_prompt(plan, results)) {
        Ok(r) => r,
        Err(e) => {
            tracing::warn!("verifier unavailable, accepting results: {e}");
            return fail_open(format!("verifier unavailable: {e}"));
        }
    };
    let give_up = |rationale: String| Verdict {
        outcome: Outcome::GiveUp,
        revised_plan: None,
        rationale,
        fail_open: false,
    };
    match parse_verdict(&reply) {
        None => {
            tracing::warn!("verifier reply has no verdict, accepting results");
            fail_open("verifier reply had no verdict".into())
        }
        Some(Parsed::Valid(rationale)) => Verdict {
            outcome: Outcome::Valid,
            revised_plan: None,
            rationale,
            fail_open: false,
        },
        Some(Parsed::GiveUp(rationale)) => give_up(rationale),
        Some(Parsed::Retry(rationale)) => {
            let items = parse_plan_items(&reply);
            if items.is_empty() {
                tracing::warn!("verifier asked to retry without revised commands, accepting results");
                return fail_open(format!("retry without revised commands: {rationale}"));
            }
            if !budget.consume() {
                return give_up(format!("retry budget of {} exhausted: {rationale}", budget.max_retries));
            }
            Verdict {
                outcome: Outcome::Retry,
                revised_plan: Some(CommandPlan {
                    step_ref: plan.step_ref.clone(),
                    items,
                    raw_reply: reply,
                }),
                rationale,
                fail_open: false,
            }
        }
    }
}

fn fail_open(rationale: String) -> Verdict {
    Verdict {
        outcome: Outcome::Valid,
        revised_plan: None,
        rationale,
        fail_open: true,
    }
}
