//! Run metrics computed from the log alone.

use std::collections::{BTreeSet, HashSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::ptt::parse_ptt;
use crate::runlog::IterationRecord;
use crate::text::normalize_ws_lower;

/// A machine-checkable subtask: done when `pattern` matches the log text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChecklistItem {
    pub name: String,
    pub pattern: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskResult {
    pub name: String,
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub steps: u32,
    pub loops: u32,
    pub human_interactions: u32,
    pub incomplete_commands: u32,
    pub services_covered: BTreeSet<String>,
    /// Present only when a checklist was supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtasks: Option<Vec<SubtaskResult>>,
}

impl MetricsReport {
    pub fn subtasks_completed(&self) -> Option<(usize, usize)> {
        self.subtasks
            .as_ref()
            .map(|s| (s.iter().filter(|t| t.completed).count(), s.len()))
    }
}

fn service_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b\d{1,5}/([a-z][\w.-]*)(?:[ \t]+(?:open[ \t]+)?([a-z][\w-]*))?").expect("service regex")
    })
}

/// Service names in text such as `21/ftp` or `445/tcp open microsoft-ds`.
pub fn parse_services(text: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for c in service_re().captures_iter(text) {
        let first = c[1].to_ascii_lowercase();
        let name = if first == "tcp" || first == "udp" {
            match c.get(2) {
                Some(m) if !m.as_str().eq_ignore_ascii_case("open") => m.as_str().to_ascii_lowercase(),
                _ => continue,
            }
        } else {
            first
        };
        out.insert(name.trim_end_matches(['.', '-']).to_string());
    }
    out
}

/// An iteration counts as a loop when the loop check flagged any of its
/// selections, or when the step it executed repeats one executed earlier.
pub fn is_loop(record: &IterationRecord, earlier_steps: &HashSet<String>) -> bool {
    record.checks.iter().any(|c| c.flagged())
        || (record.executed()
            && record
                .final_decision()
                .is_some_and(|d| earlier_steps.contains(&normalize_ws_lower(&d.step_statement))))
}

/// Pure function of the records (and the rendered log for the checklist).
pub fn compute_metrics(records: &[IterationRecord], checklist: Option<(&[ChecklistItem], &str)>) -> MetricsReport {
    let mut steps = 0;
    let mut loops = 0;
    let mut human = 0;
    let mut incomplete = 0;
    let mut services = BTreeSet::new();
    let mut executed_steps = HashSet::new();
    for r in records {
        human += r.operator_inputs() as u32;
        incomplete += r.incomplete_flags;
        if let Ok(tree) = parse_ptt(&r.ptt_text) {
            for finding in tree.all_findings() {
                services.extend(parse_services(finding));
            }
        }
        if !r.completed() {
            continue;
        }
        steps += 1;
        if is_loop(r, &executed_steps) {
            loops += 1;
        }
        if r.executed() {
            if let Some(d) = r.final_decision() {
                executed_steps.insert(normalize_ws_lower(&d.step_statement));
            }
        }
    }
    let subtasks = checklist.map(|(items, text)| {
        items
            .iter()
            .map(|item| SubtaskResult {
                name: item.name.clone(),
                completed: Regex::new(&item.pattern).is_ok_and(|re| re.is_match(text)),
            })
            .collect()
    });
    MetricsReport {
        steps,
        loops,
        human_interactions: human,
        incomplete_commands: incomplete,
        services_covered: services,
        subtasks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{DecisionKind, DecisionSource, OperatorDecision};
    use crate::repetition::RepetitionVerdict;
    use crate::runlog::tests::record;
    use crate::runlog::IterationEnd;

    #[test]
    fn empty_log_is_zero() {
        let m = compute_metrics(&[], None);
        assert_eq!((m.steps, m.loops, m.human_interactions, m.incomplete_commands), (0, 0, 0, 0));
        assert!(m.services_covered.is_empty());
        assert_eq!(m.subtasks_completed(), None);
    }

    #[test]
    fn services_from_findings() {
        let s = parse_services("21/ftp vsftpd 2.3.4, 22/ssh OpenSSH; 445/tcp open microsoft-ds and 3632/tcp distccd");
        let want: BTreeSet<String> = ["ftp", "ssh", "microsoft-ds", "distccd"].iter().map(|s| s.to_string()).collect();
        assert_eq!(s, want);
        assert!(parse_services("version 2.3.4 and 10/10 tries").is_empty());
    }

    /// Five iterations hand-built with one repetition flag, two operator
    /// inputs and no incomplete commands.
    #[test]
    fn hand_counted_fixture() {
        let mut rs: Vec<_> = ["scan ports", "enumerate smb", "search exploits", "run exploit", "read flag"]
            .iter()
            .enumerate()
            .map(|(i, s)| record(i as u32 + 1, s))
            .collect();
        rs[0].ptt_text = "1 Pentest 10.10.10.3 [IN-PROGRESS]\n  1.1 Reconnaissance [DONE]\n    - 21/ftp vsftpd 2.3.4\n    - 445/tcp open netbios-ssn\n".into();
        rs[2].checks[0].verdict = Some(RepetitionVerdict {
            is_repetition: true,
            nearest_iteration: Some(2),
            distance: 0.05,
        });
        rs[2].checks[0].operator = Some(OperatorDecision::new(DecisionKind::General, "try port 8443", DecisionSource::Operator).unwrap());
        rs[3].checks[0].operator = Some(OperatorDecision::default_continue());
        rs[4].checks[0].operator = Some(OperatorDecision::new(DecisionKind::Interactive, "got a shell", DecisionSource::Operator).unwrap());
        rs[4].attempts.clear();
        rs[4].feedback = Some("got a shell".into());
        rs[4].end = IterationEnd::Feedback;
        let m = compute_metrics(&rs, None);
        assert_eq!((m.steps, m.loops, m.human_interactions, m.incomplete_commands), (5, 1, 2, 0));
        assert_eq!(m.services_covered.len(), 2);
    }

    #[test]
    fn repeated_execution_counts_as_loop() {
        let rs = vec![record(1, "Scan  the host"), record(2, "scan the host"), record(3, "other")];
        assert_eq!(compute_metrics(&rs, None).loops, 1);
    }

    #[test]
    fn exit_records_are_not_steps() {
        let mut rs = vec![record(1, "a"), record(2, "a")];
        rs[1].end = IterationEnd::Exit;
        rs[1].attempts.clear();
        let m = compute_metrics(&rs, None);
        assert_eq!((m.steps, m.loops), (1, 0));
    }

    #[test]
    fn checklist_and_purity() {
        let rs = vec![record(1, "scan"), record(2, "exploit")];
        let items = vec![
            ChecklistItem {
                name: "port scan".into(),
                pattern: "21/tcp open ftp".into(),
            },
            ChecklistItem {
                name: "root".into(),
                pattern: r"uid=0\(root\)".into(),
            },
        ];
        let text = "21/tcp open ftp";
        let a = compute_metrics(&rs, Some((&items, text)));
        let b = compute_metrics(&rs, Some((&items, text)));
        assert_eq!(a, b);
        assert_eq!(a.subtasks_completed(), Some((1, 2)));
    }
}
