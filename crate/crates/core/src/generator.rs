//! Command generation for a selected step, grounded by retrieved knowledge and
//! the attacking host's profile.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::llm::{AgentRole, Gateway};
use crate::ptt::NodeId;
use crate::rag::{AttackHostProfile, ScoredChunk};
use crate::strategy::StrategyDecision;

pub const NOOP_TOOL: &str = "noop";

/// Identifies the step a plan serves; revisions keep it unchanged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRef {
    pub iteration: u32,
    pub node_id: NodeId,
}

impl fmt::Display for StepRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.iteration, self.node_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanItem {
    pub tool: String,
    pub command_text: String,
    pub instructions: String,
    /// Unresolved placeholders found in `command_text`.
    #[serde(default)]
    pub placeholders: Vec<String>,
}

impl PlanItem {
    pub fn new(tool: &str, command_text: &str, instructions: &str) -> Self {
        Self {
            tool: tool.trim().to_string(),
            command_text: command_text.trim_end().to_string(),
            instructions: instructions.trim().to_string(),
            placeholders: find_placeholders(command_text),
        }
    }

    pub fn is_incomplete(&self) -> bool {
        self.tool == NOOP_TOOL || !self.placeholders.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandPlan {
    pub step_ref: StepRef,
    pub items: Vec<PlanItem>,
    pub raw_reply: String,
}

impl CommandPlan {
    pub fn noop(step_ref: StepRef, raw_reply: String) -> Self {
        Self {
            step_ref,
            items: vec![PlanItem::new(NOOP_TOOL, "", "no usable command could be generated")],
            raw_reply,
        }
    }

    pub fn is_noop(&self) -> bool {
        self.items.iter().all(|i| i.tool == NOOP_TOOL)
    }

    pub fn incomplete_count(&self) -> usize {
        self.items.iter().filter(|i| i.is_incomplete()).count()
    }

    /// Items that can be handed to extraction.
    pub fn executable_items(&self) -> impl Iterator<Item = &PlanItem> {
        self.items.iter().filter(|i| !i.is_incomplete())
    }

    /// Generator block format, used when showing a plan to another role.
    pub fn render(&self) -> String {
        self.items
            .iter()
            .map(|i| {
                format!(
                    "TOOL: {}\nINSTRUCTIONS: {}\n```\n{}\n```",
                    i.tool, i.instructions, i.command_text
                )
            })
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"<[^\s<>][^<>\n]*>|\$\{[^}\n]*\}|\$[A-Z_][A-Z0-9_]*|\{\{[^}\n]*\}\}")
            .expect("placeholder regex")
    })
}

/// Bracketed tokens like `<target-ip>`, `${VAR}`, `$VAR` and `{{var}}`.
pub fn find_placeholders(command: &str) -> Vec<String> {
    placeholder_re()
        .find_iter(command)
        .map(|m| m.as_str().to_string())
        .collect()
}

pub fn has_placeholder(command: &str) -> bool {
    placeholder_re().is_match(command)
}

/// Parses `TOOL:` / `INSTRUCTIONS:` headers each followed by a fenced
/// command. Blocks without a tool or with an empty command are skipped.
pub fn parse_plan_items(reply: &str) -> Vec<PlanItem> {
    let mut items = Vec::new();
    let mut tool: Option<String> = None;
    let mut instructions = String::new();
    let mut in_fence = false;
    let mut body: Vec<&str> = Vec::new();
    for line in reply.lines() {
        let trimmed = line.trim();
        if trimmed.starts_with("```") {
            if in_fence {
                in_fence = false;
                if let Some(t) = tool.take() {
                    let command = body.join("\n");
                    if !command.trim().is_empty() && !t.is_empty() {
                        items.push(PlanItem::new(&t, &command, &instructions));
                    }
                }
                instructions.clear();
            } else {
                in_fence = true;
                body.clear();
            }
            continue;
        }
        if in_fence {
            body.push(line);
            continue;
        }
        let stripped = trimmed.trim_start_matches(['*', '#', ' ']);
        if let Some(rest) = strip_key(stripped, "TOOL") {
            tool = Some(rest.trim_matches(['*', '`', ' ']).to_ascii_lowercase());
            instructions.clear();
        } else if let Some(rest) = strip_key(stripped, "INSTRUCTIONS") {
            instructions = rest.trim_matches('*').trim().to_string();
        }
    }
    items
}

fn strip_key<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let head = line.get(..key.len())?;
    if !head.eq_ignore_ascii_case(key) {
        return None;
    }
    let rest = line[key.len()..].trim_start_matches('*');
    rest.strip_prefix(':')
}

fn generator_prompt(
    step: &StrategyDecision,
    retrieved: &[ScoredChunk<'_>],
    profile: &AttackHostProfile,
    target: &str,
) -> String {
    let mut p = format!(
        "Selected step: {}\nTarget: {target}\n\nAttacking host:\n{}\n",
        step.step_statement,
        profile.facts()
    );
    if !retrieved.is_empty() {
        p.push_str("Knowledge excerpts:\n");
        for (i, hit) in retrieved.iter().enumerate() {
            p.push_str(&format!("[{}] ({}) {}\n", i + 1, hit.chunk.source_doc, hit.chunk.text.trim()));
        }
        p.push('\n');
    }
    p.push_str("Write the complete commands for this step.");
    p
}

/// One generator session per step. A reply without any usable block gets
/// one repair request; after that the plan is a single incomplete no-op.
pub fn generate_commands(
    step: &StrategyDecision,
    step_ref: StepRef,
    retrieved: &[ScoredChunk<'_>],
    profile: &AttackHostProfile,
    target: &str,
    gateway: &Gateway,
) -> CommandPlan {
    let mut session = gateway.open_role_session(AgentRole::Generator);
    let mut raw = String::new();
    let prompt = generator_prompt(step, retrieved, profile, target);
    let repair = "Your reply contained no usable command block. Reply with one or more blocks:\n\
                  TOOL: <tool name>\nINSTRUCTIONS: <text>\n```\n<command>\n```";
    for message in [prompt.as_str(), repair] {
        match gateway.chat(&mut session, message) {
            Ok(reply) => {
                let items = parse_plan_items(&reply);
                if !raw.is_empty() {
                    raw.push_str("\n\n");
                }
                raw.push_str(&reply);
                if !items.is_empty() {
                    return CommandPlan {
                        step_ref,
                        items,
                        raw_reply: raw,
                    };
                }
            }
            Err(e) => {
                tracing::warn!("command generation failed: {e}");
                break;
            }
        }
    }
    tracing::warn!("generator produced no usable commands for step {step_ref}");
    CommandPlan::noop(step_ref, raw)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;

    use super::*;
    use crate::llm::{ScriptedEntry, ScriptedTranscript};
    use crate::strategy::SelectionSource;

    fn step(text: &str) -> StrategyDecision {
        StrategyDecision {
            reasoning: String::new(),
            selected_node_id: "1.2".parse().unwrap(),
            step_statement: text.into(),
            raw_reply: String::new(),
            source: SelectionSource::Model,
        }
    }

    fn sref() -> StepRef {
        StepRef {
            iteration: 3,
            node_id: "1.2".parse().unwrap(),
        }
    }

    fn profile() -> AttackHostProfile {
        AttackHostProfile {
            local_ip: "10.10.14.2".into(),
            wordlist_paths: BTreeMap::new(),
            workspace_dir: "/tmp".into(),
        }
    }

    fn gw(replies: &[&str]) -> (Gateway, std::sync::Arc<crate::llm::ScriptedBackend>) {
        Gateway::scripted(ScriptedTranscript::new(
            replies
                .iter()
                .map(|r| ScriptedEntry {
                    role: AgentRole::Generator,
                    pattern: None,
                    reply: r.to_string(),
                })
                .collect(),
        ))
    }

    #[test]
    fn interactive_metasploit_plan() {
        let reply = "TOOL: metasploit\nINSTRUCTIONS: use the vsftpd backdoor module\n```\nuse exploit/unix/ftp/vsftpd_234_backdoor\nset RHOSTS 10.10.10.3\nrun\n```";
        let (g, backend) = gw(&[reply]);
        let plan = generate_commands(&step("exploit vsftpd 2.3.4 backdoor"), sref(), &[], &profile(), "10.10.10.3", &g);
        assert_eq!(plan.items.len(), 1);
        assert_eq!(plan.items[0].tool, "metasploit");
        assert_eq!(plan.items[0].command_text.lines().count(), 3);
        assert_eq!(plan.incomplete_count(), 0);
        let sent = &backend.calls()[0].message;
        assert!(sent.contains("Target: 10.10.10.3") && sent.contains("10.10.14.2"));
    }

    #[test]
    fn placeholder_marks_incomplete() {
        let reply = "TOOL: smbclient\nINSTRUCTIONS: list shares\n```\nsmbclient -L //<target-ip>/ -N\n```";
        let (g, _) = gw(&[reply]);
        let plan = generate_commands(&step("list smb shares"), sref(), &[], &profile(), "10.10.10.3", &g);
        assert_eq!(plan.incomplete_count(), 1);
        assert_eq!(plan.items[0].placeholders, vec!["<target-ip>"]);
        assert_eq!(plan.executable_items().count(), 0);
    }

    #[test]
    fn malformed_twice_gives_noop() {
        let (g, backend) = gw(&["I would scan the host.", "Still no block."]);
        let plan = generate_commands(&step("scan"), sref(), &[], &profile(), "10.10.10.3", &g);
        assert!(plan.is_noop());
        assert_eq!(plan.incomplete_count(), 1);
        assert_eq!(backend.calls().len(), 2);
        assert!(plan.raw_reply.contains("Still no block."));
    }

    #[test]
    fn repair_recovers() {
        let (g, _) = gw(&["hmm", "TOOL: nmap\n```\nnmap -sV 10.10.10.3\n```"]);
        let plan = generate_commands(&step("scan"), sref(), &[], &profile(), "10.10.10.3", &g);
        assert_eq!(plan.items[0].tool, "nmap");
        assert_eq!(plan.step_ref, sref());
    }

    #[test]
    fn parse_multiple_blocks_in_order() {
        let reply = "**TOOL:** Nmap\nINSTRUCTIONS: scan\n```bash\nnmap -p- 10.10.10.3\n```\ntext\nTOOL: curl\n```\ncurl http://10.10.10.3/\n```\nTOOL: nikto\n```\n\n```";
        let items = parse_plan_items(reply);
        let tools: Vec<_> = items.iter().map(|i| i.tool.as_str()).collect();
        assert_eq!(tools, vec!["nmap", "curl"]);
        assert_eq!(items[0].instructions, "scan");
        assert_eq!(items[1].instructions, "");
    }

    #[test]
    fn placeholder_examples() {
        for s in ["<target-ip>", "${RHOST}", "$LHOST", "{{port}}", "-w <wordlist>"] {
            assert!(has_placeholder(s), "{s}");
        }
        for s in ["nmap -sV 10.10.10.3", "cat < in > out", "echo $1", "a << EOF", "2>&1", "$lower"] {
            assert!(!has_placeholder(s), "{s}");
        }
    }

    /// Independent scanner for the same four placeholder shapes.
    fn scan(s: &str) -> bool {
        let b = s.as_bytes();
        for i in 0..b.len() {
            match b[i] {
                b'<' => {
                    let Some(&first) = b.get(i + 1) else { continue };
                    if first.is_ascii_whitespace() || first == b'<' || first == b'>' {
                        continue;
                    }
                    for &c in &b[i + 2..] {
                        if c == b'>' {
                            return true;
                        }
                        if c == b'<' || c == b'\n' {
                            break;
                        }
                    }
                }
                b'$' => match b.get(i + 1) {
                    Some(b'{') => {
                        if b[i + 2..].iter().take_while(|&&c| c != b'\n').any(|&c| c == b'}') {
                            return true;
                        }
                    }
                    Some(c) if c.is_ascii_uppercase() || *c == b'_' => return true,
                    _ => {}
                },
                b'{' if b.get(i + 1) == Some(&b'{') => {
                    let rest = &b[i + 2..];
                    let mut j = 0;
                    while j < rest.len() && rest[j] != b'}' && rest[j] != b'\n' {
                        j += 1;
                    }
                    if rest.get(j) == Some(&b'}') && rest.get(j + 1) == Some(&b'}') {
                        return true;
                    }
                }
                _ => {}
            }
        }
        false
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]
        #[test]
        fn detector_matches_scanner(s in "[a-zA-Z0-9 _<>${}\\-./:\n]{0,40}") {
            prop_assert_eq!(has_placeholder(&s), scan(&s), "{:?}", s);
        }
    }
}
