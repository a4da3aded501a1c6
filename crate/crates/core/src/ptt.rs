//! Pentest task tree: subtasks with status and discovered findings, and its
//! line-oriented text form.
//!
//! ```text
//! 1 Pentest 10.10.10.3 [IN-PROGRESS]
//!   1.1 Reconnaissance [DONE]
//!     - 21/ftp vsftpd 2.3.4
//!   1.2 Exploit vsftpd [TODO]
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct PttParseError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PttInvariantError {
    #[error("more than one node is in progress: {0:?}")]
    MultipleInProgress(Vec<String>),
    #[error("node {0} has findings but is still TODO")]
    FindingsOnTodo(String),
    #[error("node {0} is missing")]
    MissingNode(String),
    #[error("root id changed from {old} to {new}")]
    RootChanged { old: String, new: String },
}

/// Dotted path of positive integers, e.g. `1.2.2`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(Vec<u32>);

impl NodeId {
    pub fn root() -> Self {
        NodeId(vec![1])
    }

    pub fn components(&self) -> &[u32] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len() - 1
    }

    pub fn child(&self, n: u32) -> Self {
        let mut v = self.0.clone();
        v.push(n);
        NodeId(v)
    }

    pub fn parent(&self) -> Option<NodeId> {
        (self.0.len() > 1).then(|| NodeId(self.0[..self.0.len() - 1].to_vec()))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u32::to_string).collect();
        f.write_str(&parts.join("."))
    }
}

impl FromStr for NodeId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().trim_end_matches('.');
        if s.is_empty() {
            return Err("empty node id".into());
        }
        s.split('.')
            .map(|p| match p.parse::<u32>() {
                Ok(n) if n > 0 && !p.starts_with('+') => Ok(n),
                _ => Err(format!("invalid node id `{s}`")),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(NodeId)
    }
}

impl Serialize for NodeId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Todo,
    InProgress,
    Done,
    Failed,
}

impl NodeStatus {
    pub fn label(self) -> &'static str {
        match self {
            NodeStatus::Todo => "TODO",
            NodeStatus::InProgress => "IN-PROGRESS",
            NodeStatus::Done => "DONE",
            NodeStatus::Failed => "FAILED",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().replace(['_', ' '], "-").as_str() {
            "TODO" => Some(NodeStatus::Todo),
            "IN-PROGRESS" => Some(NodeStatus::InProgress),
            "DONE" => Some(NodeStatus::Done),
            "FAILED" => Some(NodeStatus::Failed),
            _ => None,
        }
    }

    pub fn is_open(self) -> bool {
        matches!(self, NodeStatus::Todo | NodeStatus::InProgress)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PttNode {
    pub id: NodeId,
    pub title: String,
    pub status: NodeStatus,
    pub findings: Vec<String>,
    pub children: Vec<PttNode>,
}

impl PttNode {
    pub fn new(id: NodeId, title: impl Into<String>, status: NodeStatus) -> Self {
        Self {
            id,
            title: title.into(),
            status,
            findings: Vec::new(),
            children: Vec::new(),
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PentestTaskTree {
    pub root: PttNode,
    pub revision: u64,
}

impl PentestTaskTree {
    /// Initial tree for a new engagement.
    pub fn seed(target: &str) -> Self {
        let mut root = PttNode::new(NodeId::root(), format!("Pentest {target}"), NodeStatus::Todo);
        root.children.push(PttNode::new(
            NodeId::root().child(1),
            "Reconnaissance",
            NodeStatus::Todo,
        ));
        Self { root, revision: 0 }
    }

    /// Nodes in depth-first pre-order.
    pub fn nodes(&self) -> Vec<&PttNode> {
        fn walk<'a>(n: &'a PttNode, out: &mut Vec<&'a PttNode>) {
            out.push(n);
            n.children.iter().for_each(|c| walk(c, out));
        }
        let mut out = Vec::new();
        walk(&self.root, &mut out);
        out
    }

    pub fn find(&self, id: &NodeId) -> Option<&PttNode> {
        self.nodes().into_iter().find(|n| &n.id == id)
    }

    pub fn find_mut(&mut self, id: &NodeId) -> Option<&mut PttNode> {
        fn walk<'a>(n: &'a mut PttNode, id: &NodeId) -> Option<&'a mut PttNode> {
            if &n.id == id {
                return Some(n);
            }
            n.children.iter_mut().find_map(|c| walk(c, id))
        }
        walk(&mut self.root, id)
    }

    pub fn in_progress(&self) -> Option<&PttNode> {
        self.nodes()
            .into_iter()
            .find(|n| n.status == NodeStatus::InProgress)
    }

    /// True while some leaf subtask is still TODO or IN-PROGRESS.
    pub fn has_open_steps(&self) -> bool {
        self.nodes()
            .into_iter()
            .any(|n| n.is_leaf() && n.status.is_open())
    }

    /// First TODO leaf in depth-first order, else the first open leaf.
    pub fn first_open_leaf(&self) -> Option<&PttNode> {
        let nodes = self.nodes();
        nodes
            .iter()
            .find(|n| n.is_leaf() && n.status == NodeStatus::Todo)
            .or_else(|| nodes.iter().find(|n| n.is_leaf() && n.status.is_open()))
            .copied()
    }

    pub fn node_count(&self) -> usize {
        self.nodes().len()
    }

    pub fn all_findings(&self) -> Vec<&str> {
        self.nodes()
            .into_iter()
            .flat_map(|n| n.findings.iter().map(String::as_str))
            .collect()
    }

    pub fn validate(&self) -> Result<(), PttInvariantError> {
        let nodes = self.nodes();
        let active: Vec<String> = nodes
            .iter()
            .filter(|n| n.status == NodeStatus::InProgress)
            .map(|n| n.id.to_string())
            .collect();
        if active.len() > 1 {
            return Err(PttInvariantError::MultipleInProgress(active));
        }
        if let Some(n) = nodes
            .iter()
            .find(|n| n.status == NodeStatus::Todo && !n.findings.is_empty())
        {
            return Err(PttInvariantError::FindingsOnTodo(n.id.to_string()));
        }
        Ok(())
    }

    /// Appends a finding; a TODO node that receives one becomes IN-PROGRESS
    /// when no other node is, otherwise DONE.
    pub fn append_finding(&mut self, id: &NodeId, finding: &str) -> bool {
        let busy = self.in_progress().map(|n| n.id.clone());
        match self.find_mut(id) {
            Some(node) => {
                node.findings.push(finding.to_string());
                if node.status == NodeStatus::Todo {
                    node.status = if busy.is_none() {
                        NodeStatus::InProgress
                    } else {
                        NodeStatus::Done
                    };
                }
                true
            }
            None => false,
        }
    }

    /// Marks `id` as the single in-progress node. The previously active node
    /// becomes DONE if it gathered findings, TODO otherwise.
    pub fn activate(&mut self, id: &NodeId) -> bool {
        if self.find(id).is_none() {
            return false;
        }
        if let Some(prev) = self.in_progress().map(|n| n.id.clone()) {
            if &prev != id {
                let node = self.find_mut(&prev).expect("in-progress node exists");
                node.status = if node.findings.is_empty() {
                    NodeStatus::Todo
                } else {
                    NodeStatus::Done
                };
            }
        }
        self.find_mut(id).expect("checked above").status = NodeStatus::InProgress;
        true
    }

    pub fn serialize(&self) -> String {
        serialize_ptt(self)
    }

    /// Rewrites `path` atomically (temp file + rename).
    pub fn write_atomic(&self, path: &Path) -> std::io::Result<()> {
        let tmp = path.with_extension("txt.tmp");
        std::fs::write(&tmp, self.serialize())?;
        std::fs::rename(&tmp, path)
    }
}

pub fn serialize_ptt(ptt: &PentestTaskTree) -> String {
    fn walk(n: &PttNode, out: &mut String) {
        let indent = "  ".repeat(n.id.depth());
        out.push_str(&format!("{indent}{} {} [{}]\n", n.id, n.title, n.status.label()));
        for f in &n.findings {
            out.push_str(&format!("{indent}  - {f}\n"));
        }
        n.children.iter().for_each(|c| walk(c, out));
    }
    let mut out = String::new();
    walk(&ptt.root, &mut out);
    out
}

fn err(line: usize, message: impl Into<String>) -> PttParseError {
    PttParseError {
        line,
        message: message.into(),
    }
}

/// Parses the text form. Revision of the result is 0.
pub fn parse_ptt(text: &str) -> Result<PentestTaskTree, PttParseError> {
    // Stack of nodes along the current root-to-leaf path.
    let mut stack: Vec<PttNode> = Vec::new();
    let mut root: Option<PttNode> = None;
    let mut seen = std::collections::HashSet::new();

    fn pop_into_parent(stack: &mut Vec<PttNode>, root: &mut Option<PttNode>) {
        let node = stack.pop().expect("non-empty stack");
        match stack.last_mut() {
            Some(parent) => parent.children.push(node),
            None => *root = Some(node),
        }
    }

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end();
        if line.trim().is_empty() {
            continue;
        }
        if line.contains('\t') {
            return Err(err(line_no, "tabs are not allowed; indent with spaces"));
        }
        let indent = line.len() - line.trim_start().len();
        if indent % 2 != 0 {
            return Err(err(line_no, "indentation must be a multiple of two spaces"));
        }
        let body = line.trim_start();

        if let Some(finding) = body.strip_prefix("- ").or_else(|| (body == "-").then_some("")) {
            let owner = stack
                .last_mut()
                .ok_or_else(|| err(line_no, "finding before any node"))?;
            if indent != owner.id.depth() * 2 + 2 {
                return Err(err(line_no, "finding must be indented two spaces under its node"));
            }
            let finding = finding.trim();
            if finding.is_empty() {
                return Err(err(line_no, "empty finding"));
            }
            owner.findings.push(finding.to_string());
            continue;
        }

        let (id_text, rest) = body
            .split_once(' ')
            .ok_or_else(|| err(line_no, "expected `<id> <title> [<STATUS>]`"))?;
        let id: NodeId = id_text.parse().map_err(|e: String| err(line_no, e))?;
        let rest = rest.trim();
        let open = rest
            .rfind('[')
            .filter(|_| rest.ends_with(']'))
            .ok_or_else(|| err(line_no, "missing `[STATUS]` suffix"))?;
        let status = NodeStatus::from_label(&rest[open + 1..rest.len() - 1])
            .ok_or_else(|| err(line_no, format!("unknown status `{}`", &rest[open..])))?;
        let title = rest[..open].trim();
        if title.is_empty() {
            return Err(err(line_no, "empty title"));
        }
        let depth = id.depth();
        if indent != depth * 2 {
            return Err(err(line_no, format!("node {id} must be indented {} spaces", depth * 2)));
        }
        if !seen.insert(id.clone()) {
            return Err(err(line_no, format!("duplicate node id {id}")));
        }
        if depth == 0 {
            if root.is_some() || !stack.is_empty() {
                return Err(err(line_no, "more than one root node"));
            }
        } else {
            while stack.len() > depth {
                pop_into_parent(&mut stack, &mut root);
            }
            if root.is_some() && stack.is_empty() {
                return Err(err(line_no, "node outside the root"));
            }
            let parent = stack
                .last()
                .ok_or_else(|| err(line_no, "first node must be the root"))?;
            if stack.len() != depth || id.parent().as_ref() != Some(&parent.id) {
                return Err(err(
                    line_no,
                    format!("node {id} is not a child of {}", parent.id),
                ));
            }
        }
        stack.push(PttNode::new(id, title, status));
    }
    while !stack.is_empty() {
        pop_into_parent(&mut stack, &mut root);
    }
    let root = root.ok_or_else(|| err(0, "empty tree"))?;
    Ok(PentestTaskTree { root, revision: 0 })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    const FIG2: &str = "\
1 Pentest 10.10.10.3 [IN-PROGRESS]
  1.1 Reconnaissance [DONE]
    1.1.1 Passive information gathering [DONE]
  1.2 Scanning [DONE]
    1.2.1 Ping sweep [DONE]
    1.2.2 Port and service scan with nmap [DONE]
      - 21/ftp vsftpd 2.3.4
      - 22/ssh OpenSSH 4.7p1
      - 139/445 netbios-ssn Samba smbd 3.X
  1.3 Exploitation [TODO]
    1.3.1 Exploit vsftpd 2.3.4 backdoor [TODO]
";

    #[test]
    fn seed_tree_golden_text() {
        let t = PentestTaskTree::seed("10.10.10.3");
        assert_eq!(
            t.serialize(),
            "1 Pentest 10.10.10.3 [TODO]\n  1.1 Reconnaissance [TODO]\n"
        );
    }

    #[test]
    fn single_root_golden_round_trip() {
        let text = "1 Pentest lame.htb [TODO]\n";
        let t = parse_ptt(text).unwrap();
        assert_eq!(t.node_count(), 1);
        assert_eq!(serialize_ptt(&t), text);
    }

    #[test]
    fn findings_tree_round_trips() {
        let t = parse_ptt(FIG2).unwrap();
        assert_eq!(serialize_ptt(&t), FIG2);
        let scan = t.find(&"1.2.2".parse().unwrap()).unwrap();
        assert_eq!(scan.findings.len(), 3);
        assert_eq!(scan.findings[0], "21/ftp vsftpd 2.3.4");
        t.validate().unwrap();
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let e = parse_ptt("1 Root [TODO]\n  1.1 A [TODO]\n  1.1 B [TODO]\n").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(e.message.contains("duplicate"));
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        assert_eq!(parse_ptt("1 Root [TODO]\n  1.1 A\n").unwrap_err().line, 2);
        assert_eq!(parse_ptt("1 Root [TODO]\n  1.2.1 A [TODO]\n").unwrap_err().line, 2);
        assert_eq!(parse_ptt("1 Root [TODO]\n  2.1 A [TODO]\n").unwrap_err().line, 2);
        assert_eq!(parse_ptt("1 Root [MAYBE]\n").unwrap_err().line, 1);
        assert_eq!(parse_ptt("1 Root [TODO]\n1 Again [TODO]\n").unwrap_err().line, 2);
        assert!(parse_ptt("").is_err());
    }

    #[test]
    fn titles_may_contain_brackets() {
        let t = parse_ptt("1 Root [x] thing [DONE]\n").unwrap();
        assert_eq!(t.root.title, "Root [x] thing");
    }

    #[test]
    fn activate_demotes_previous_node() {
        let mut t = parse_ptt(FIG2).unwrap();
        let id: NodeId = "1.3.1".parse().unwrap();
        assert!(t.activate(&id));
        assert_eq!(t.find(&NodeId::root()).unwrap().status, NodeStatus::Todo);
        assert_eq!(t.in_progress().unwrap().id, id);
        t.validate().unwrap();
    }

    #[test]
    fn first_open_leaf_is_depth_first() {
        let t = parse_ptt(FIG2).unwrap();
        assert_eq!(t.first_open_leaf().unwrap().id.to_string(), "1.3.1");
    }

    #[test]
    fn open_steps_ignore_internal_nodes() {
        let t = parse_ptt("1 Root [TODO]\n  1.1 A [DONE]\n  1.2 B [FAILED]\n").unwrap();
        assert!(!t.has_open_steps());
        assert!(parse_ptt("1 Root [TODO]\n").unwrap().has_open_steps());
    }

    fn arb_text() -> impl Strategy<Value = String> {
        "[A-Za-z0-9][A-Za-z0-9 ./:()\\[\\]-]{0,20}[A-Za-z0-9)\\]]?"
            .prop_map(|s| s.split_whitespace().collect::<Vec<_>>().join(" "))
    }

    fn arb_status() -> impl Strategy<Value = NodeStatus> {
        prop_oneof![
            Just(NodeStatus::Todo),
            Just(NodeStatus::Done),
            Just(NodeStatus::Failed),
        ]
    }

    fn arb_node(id: NodeId, depth_left: u32) -> BoxedStrategy<PttNode> {
        let kids = if depth_left == 0 { 0..1usize } else { 0..6usize };
        (arb_text(), arb_status(), proptest::collection::vec(arb_text(), 0..3), kids)
            .prop_flat_map(move |(title, status, findings, n)| {
                let id = id.clone();
                let children: Vec<_> = (0..n)
                    .map(|i| arb_node(id.child(i as u32 + 1), depth_left - 1))
                    .collect();
                children.prop_map(move |children| PttNode {
                    id: id.clone(),
                    title: title.clone(),
                    status,
                    findings: if status == NodeStatus::Todo { vec![] } else { findings.clone() },
                    children,
                })
            })
            .boxed()
    }

    pub(crate) fn arb_tree() -> impl Strategy<Value = PentestTaskTree> {
        // Depth of at most 4 levels below the root.
        arb_node(NodeId::root(), 3).prop_map(|root| PentestTaskTree { root, revision: 0 })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn serialize_parse_round_trip(t in arb_tree()) {
            let back = parse_ptt(&serialize_ptt(&t)).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
