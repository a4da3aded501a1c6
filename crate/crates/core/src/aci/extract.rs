use serde::Deserialize;

use super::{CommandBody, ExtractedCommand, ScriptStep, ToolRegistry};
use crate::generator::CommandPlan;
use crate::llm::{AgentRole, Gateway};
use crate::text::fenced_blocks;

#[derive(Debug, Deserialize)]
struct RawCommand {
    tool: String,
    #[serde(default)]
    argv: Option<Vec<String>>,
    #[serde(default)]
    script: Option<Vec<RawStep>>,
    #[serde(default)]
    timeout_secs: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct RawStep {
    send: String,
    #[serde(rename = "await", default)]
    await_pattern: Option<String>,
}

/// The json array in a reply: first fenced block that parses, else the
/// outermost brackets.
fn parse_reply(reply: &str) -> Option<Vec<RawCommand>> {
    for (_, body) in fenced_blocks(reply) {
        if let Ok(v) = serde_json::from_str(&body) {
            return Some(v);
        }
    }
    let start = reply.find('[')?;
    let end = reply.rfind(']')?;
    serde_json::from_str(reply.get(start..=end)?).ok()
}

enum Checked {
    Ok(ExtractedCommand),
    Unknown(String),
    Malformed(String),
}

fn check(raw: RawCommand, registry: &ToolRegistry) -> Checked {
    let Some(spec) = registry.get(&raw.tool) else {
        return Checked::Unknown(raw.tool);
    };
    let body = match (raw.argv, raw.script) {
        (Some(mut argv), None) => {
            // Drop a leading program name.
            let bin = spec.binary_path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if argv.first().is_some_and(|a| a.eq_ignore_ascii_case(&spec.name) || a == bin) {
                argv.remove(0);
            }
            CommandBody::Argv(argv)
        }
        (None, Some(steps)) => CommandBody::Script(
            steps
                .into_iter()
                .map(|s| ScriptStep {
                    send: s.send,
                    await_pattern: s.await_pattern.filter(|p| !p.is_empty()),
                })
                .collect(),
        ),
        _ => return Checked::Malformed(format!("{}: exactly one of argv or script is required", raw.tool)),
    };
    let cmd = ExtractedCommand {
        tool: spec.name.clone(),
        body,
        timeout_override_secs: raw.timeout_secs,
    };
    match cmd.check_against(spec) {
        Ok(()) => Checked::Ok(cmd),
        Err(e) => Checked::Malformed(e.to_string()),
    }
}

fn extract_prompt(plan: &CommandPlan, registry: &ToolRegistry) -> String {
    let tools: Vec<String> = registry.tools().map(|t| format!("{} ({})", t.name, t.mode)).collect();
    let rendered = CommandPlan {
        items: plan.executable_items().cloned().collect(),
        ..plan.clone()
    }
    .render();
    format!(
        "Registered tools: {}\n\nConvert these commands into structured invocations:\n\n{rendered}",
        tools.join(", ")
    )
}

/// Structures the plan's complete items through one extractor session.
/// Unknown tools and malformed entries get one repair request; whatever is
/// still invalid afterwards is dropped.
pub fn extract_commands(plan: &CommandPlan, registry: &ToolRegistry, gateway: &Gateway) -> Vec<ExtractedCommand> {
    if plan.executable_items().next().is_none() {
        return Vec::new();
    }
    let mut session = gateway.open_role_session(AgentRole::CommandExtractor);
    let mut message = extract_prompt(plan, registry);
    let mut kept = Vec::new();
    for attempt in 0..2 {
        let reply = match gateway.chat(&mut session, &message) {
            Ok(r) => r,
            Err(e) => {
                tracing::warn!("command extraction failed: {e}");
                break;
            }
        };
        let Some(raw) = parse_reply(&reply) else {
            tracing::warn!("extractor reply is not a json array");
            message = "Your reply was not a json array. Reply only with a fenced json array of \
                       {\"tool\", \"argv\"} or {\"tool\", \"script\"} objects."
                .into();
            continue;
        };
        let mut ok = Vec::new();
        let mut problems = Vec::new();
        for r in raw {
            match check(r, registry) {
                Checked::Ok(c) => ok.push(c),
                Checked::Unknown(t) => problems.push(format!("tool {t:?} is not registered")),
                Checked::Malformed(m) => problems.push(m),
            }
        }
        kept = ok;
        if problems.is_empty() {
            break;
        }
        if attempt == 1 {
            for p in &problems {
                tracing::warn!("dropped extracted command: {p}");
            }
            break;
        }
        let names: Vec<&str> = registry.tools().map(|t| t.name.as_str()).collect();
        message = format!(
            "{}. Use only these tools: {}. Reply with the complete corrected json array.",
            problems.join("; "),
            names.join(", ")
        );
    }
    kept
}
