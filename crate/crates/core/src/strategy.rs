//! Strategy analyzer: folds new results into the task tree and picks the
//! next step.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{ChatSession, Gateway, LlmError};
use crate::ptt::{parse_ptt, NodeId, PentestTaskTree, PttInvariantError};
use crate::summarizer::Summary;
use crate::text::{fenced_blocks, one_line};

/// Hint added to the selection prompt after a detected repetition.
pub const REPETITION_HINT: &str = "the previous approach was repeated; try a different path";

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("no steps remaining: every subtask is done or failed")]
    NoStepsRemaining,
    #[error(transparent)]
    Llm(#[from] LlmError),
}

/// Analyzer prompt variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalyzerMode {
    /// Findings-oriented chain-of-thought before choosing.
    Reasoning,
    /// Direct choice without explicit reasoning.
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionSource {
    Model,
    Repaired,
    Fallback,
    Seed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyDecision {
    pub reasoning: String,
    pub selected_node_id: NodeId,
    pub step_statement: String,
    pub raw_reply: String,
    pub source: SelectionSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOutcome {
    NoOp,
    Applied,
    Repaired,
    Fallback,
}

fn tree_block(ptt: &PentestTaskTree) -> String {
    format!("```ptt\n{}```", ptt.serialize())
}

/// Checks a revised tree against the previous one and carries old findings
/// forward so that findings never disappear.
fn reconcile(old: &PentestTaskTree, mut new: PentestTaskTree) -> Result<PentestTaskTree, String> {
    if new.root.id != old.root.id {
        return Err(PttInvariantError::RootChanged {
            old: old.root.id.to_string(),
            new: new.root.id.to_string(),
        }
        .to_string());
    }
    for old_node in old.nodes() {
        let node = new
            .find_mut(&old_node.id)
            .ok_or_else(|| PttInvariantError::MissingNode(old_node.id.to_string()).to_string())?;
        let mut merged = old_node.findings.clone();
        for f in node.findings.drain(..) {
            if !merged.contains(&f) {
                merged.push(f);
            }
        }
        node.findings = merged;
    }
    new.validate().map_err(|e| e.to_string())?;
    Ok(new)
}

fn parse_tree_reply(old: &PentestTaskTree, reply: &str) -> Result<PentestTaskTree, String> {
    let blocks = fenced_blocks(reply);
    let candidate = blocks
        .iter()
        .find(|(info, _)| info.eq_ignore_ascii_case("ptt"))
        .or_else(|| blocks.first())
        .map(|(_, body)| body.as_str())
        .ok_or_else(|| "reply has no fenced block".to_string())?;
    let parsed = parse_ptt(candidate).map_err(|e| e.to_string())?;
    reconcile(old, parsed)
}

/// Folds `summary` into the tree. Never fails: unusable replies fall back to
/// the previous tree with the summary recorded as a finding.
pub fn update_ptt(
    ptt: &PentestTaskTree,
    summary: &Summary,
    session: &mut ChatSession,
    gateway: &Gateway,
) -> (PentestTaskTree, UpdateOutcome) {
    let revision = ptt.revision + 1;
    if summary.text.trim().is_empty() {
        let mut same = ptt.clone();
        same.revision = revision;
        return (same, UpdateOutcome::NoOp);
    }
    let prompt = format!(
        "Update the pentest task tree with the latest results.\n\nCurrent PTT:\n{}\n\n\
         Latest results summary:\n{}\n\n\
         Record the key findings as `- ` lines under the subtask that produced them, update \
         the statuses, and add TODO subtasks for anything worth investigating. Keep every \
         existing node. Reply with the complete revised tree inside a ```ptt fenced block.",
        tree_block(ptt),
        summary.text.trim()
    );
    let mut outcome = UpdateOutcome::Applied;
    let mut message = prompt;
    for attempt in 0..2 {
        match gateway.chat(session, &message) {
            Ok(reply) => match parse_tree_reply(ptt, &reply) {
                Ok(mut tree) => {
                    tree.revision = revision;
                    return (tree, outcome);
                }
                Err(problem) => {
                    tracing::warn!(attempt, "unusable PTT update: {problem}");
                    message = format!(
                        "Your reply could not be used: {problem}. Reply again with the complete \
                         revised tree inside a ```ptt fenced block, keeping every existing node, \
                         one IN-PROGRESS node at most, and findings only on visited nodes."
                    );
                    outcome = UpdateOutcome::Repaired;
                }
            },
            Err(e) => {
                tracing::warn!("PTT update failed: {e}");
                break;
            }
        }
    }
    let mut kept = ptt.clone();
    let target = kept
        .in_progress()
        .map(|n| n.id.clone())
        .unwrap_or_else(|| kept.root.id.clone());
    kept.append_finding(&target, &one_line(&summary.text));
    kept.revision = revision;
    (kept, UpdateOutcome::Fallback)
}

fn parse_selection(reply: &str) -> Option<(String, NodeId, String)> {
    let lines: Vec<&str> = reply.lines().collect();
    for (i, line) in lines.iter().enumerate().rev() {
        let l = line.trim().trim_start_matches(['*', '`', '>', ' ']);
        let Some(rest) = l.strip_prefix("SELECTED:") else {
            continue;
        };
        let (id_part, step_part) = rest.split_once('|')?;
        let id: NodeId = id_part.trim().parse().ok()?;
        let step = step_part
            .trim()
            .strip_prefix("STEP:")?
            .trim()
            .trim_end_matches(['*', '`'])
            .trim();
        if step.is_empty() {
            return None;
        }
        let reasoning = lines[..i].join("\n").trim().to_string();
        return Some((reasoning, id, step.to_string()));
    }
    None
}

fn check_selection(ptt: &PentestTaskTree, reply: &str) -> Result<(String, NodeId, String), String> {
    let (reasoning, id, step) = parse_selection(reply)
        .ok_or_else(|| "no `SELECTED: <id> | STEP: <statement>` line".to_string())?;
    match ptt.find(&id) {
        None => Err(format!("node {id} does not exist")),
        Some(n) if !n.status.is_open() => Err(format!(
            "node {id} is already {}; choose a TODO node",
            n.status.label()
        )),
        Some(_) => Ok((reasoning, id, step)),
    }
}

fn open_nodes(ptt: &PentestTaskTree) -> String {
    ptt.nodes()
        .into_iter()
        .filter(|n| n.status.is_open())
        .map(|n| n.id.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Asks the analyzer for the next step. The full serialized tree is part of
/// every request.
pub fn select_next_step(
    ptt: &PentestTaskTree,
    session: &mut ChatSession,
    gateway: &Gateway,
    mode: AnalyzerMode,
    hint: Option<&str>,
) -> Result<StrategyDecision, StrategyError> {
    if !ptt.has_open_steps() {
        return Err(StrategyError::NoStepsRemaining);
    }
    let hint = hint
        .map(|h| format!("Note: {h}.\n\n"))
        .unwrap_or_default();
    let instructions = match mode {
        AnalyzerMode::Reasoning => {
            "Reason step by step about the findings recorded in the tree: check how they align \
             with your previous strategy and steps, derive the current attack strategy, and \
             decide the single next best step. Prefer an incremental step in the current \
             subtask; when it is complete, move to a subtask marked TODO. Finish your reply \
             with exactly one line:"
        }
        AnalyzerMode::Plain => "Choose the next step to perform. Finish your reply with exactly one line:",
    };
    let prompt = format!(
        "Current PTT:\n{}\n\n{hint}{instructions}\nSELECTED: <node id> | STEP: <one-sentence next action>",
        tree_block(ptt)
    );
    let reply = gateway.chat(session, &prompt)?;
    let problem = match check_selection(ptt, &reply) {
        Ok((reasoning, id, step)) => {
            return Ok(StrategyDecision {
                reasoning,
                selected_node_id: id,
                step_statement: step,
                raw_reply: reply,
                source: SelectionSource::Model,
            })
        }
        Err(p) => p,
    };
    tracing::warn!("unusable step selection: {problem}");
    let repair = format!(
        "Your selection could not be used: {problem}. Open nodes are: {}. Reply with exactly one \
         line: SELECTED: <node id> | STEP: <one-sentence next action>",
        open_nodes(ptt)
    );
    let second = gateway.chat(session, &repair)?;
    if let Ok((reasoning, id, step)) = check_selection(ptt, &second) {
        return Ok(StrategyDecision {
            reasoning: if reasoning.is_empty() { reply } else { reasoning },
            selected_node_id: id,
            step_statement: step,
            raw_reply: second,
            source: SelectionSource::Repaired,
        });
    }
    let node = ptt
        .first_open_leaf()
        .ok_or(StrategyError::NoStepsRemaining)?;
    Ok(StrategyDecision {
        reasoning: String::new(),
        selected_node_id: node.id.clone(),
        step_statement: format!("Work on subtask {}: {}", node.id, node.title),
        raw_reply: second,
        source: SelectionSource::Fallback,
    })
}

/// The synthesized first step: a port and service scan of the target.
pub fn seed_decision(ptt: &PentestTaskTree, target: &str) -> StrategyDecision {
    let recon = ptt
        .first_open_leaf()
        .map(|n| n.id.clone())
        .unwrap_or_else(|| ptt.root.id.clone());
    StrategyDecision {
        reasoning: "Every engagement starts with reconnaissance of the target.".to_string(),
        selected_node_id: recon,
        step_statement: format!(
            "Perform a full TCP port and service version scan of {target} with nmap"
        ),
        raw_reply: String::new(),
        source: SelectionSource::Seed,
    }
}

/// Applies a decision: the selected node becomes the single in-progress node.
pub fn apply_decision(ptt: &mut PentestTaskTree, decision: &StrategyDecision) {
    if ptt.activate(&decision.selected_node_id) {
        ptt.revision += 1;
    }
}
