//! Loop detection: every selected step is reduced to a short
//! "service | technique | tool" description, embedded, and compared with the
//! steps seen earlier in the run.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{AgentRole, EmbeddingVector, Gateway, LlmError};
use crate::operator::{OperatorChannel, OperatorDecision, RepetitionPrompt};
use crate::strategy::StrategyDecision;
use crate::text::normalize_ws_lower;

/// Cosine distance below which two steps count as the same step.
pub const DEFAULT_THRESHOLD: f64 = 0.15;
pub const UNKNOWN_FIELD: &str = "unknown";

#[derive(Debug, Error)]
pub enum RepetitionError {
    #[error("threshold must lie in (0, 2), got {0}")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepDescriptor {
    pub service: String,
    pub technique: String,
    pub tool: String,
    pub canonical: String,
}

impl StepDescriptor {
    /// Empty fields become `unknown`.
    pub fn new(service: &str, technique: &str, tool: &str) -> Self {
        let field = |s: &str| {
            let s = s.trim();
            if s.is_empty() {
                UNKNOWN_FIELD.to_string()
            } else {
                s.to_string()
            }
        };
        let (service, technique, tool) = (field(service), field(technique), field(tool));
        let canonical = normalize_ws_lower(&format!("{service} | {technique} | {tool}"));
        Self {
            service,
            technique,
            tool,
            canonical,
        }
    }
}

#[derive(Debug, Default)]
struct Fields {
    service: Option<String>,
    technique: Option<String>,
    tool: Option<String>,
}

impl Fields {
    fn parse(reply: &str) -> Self {
        let mut f = Fields::default();
        for line in reply.lines() {
            let line = line.trim().trim_start_matches(['-', '*', ' ']);
            let Some((key, value)) = line.split_once(':') else {
                continue;
            };
            let value = value.trim().trim_matches('*').trim();
            if value.is_empty() {
                continue;
            }
            let slot = match key.trim().trim_matches('*').to_ascii_lowercase().as_str() {
                "service" => &mut f.service,
                "technique" => &mut f.technique,
                "tool" => &mut f.tool,
                _ => continue,
            };
            slot.get_or_insert_with(|| value.to_string());
        }
        f
    }

    fn missing(&self) -> Vec<&'static str> {
        let mut m = Vec::new();
        if self.service.is_none() {
            m.push("SERVICE");
        }
        if self.technique.is_none() {
            m.push("TECHNIQUE");
        }
        if self.tool.is_none() {
            m.push("TOOL");
        }
        m
    }

    fn fill(&mut self, other: Fields) {
        self.service = self.service.take().or(other.service);
        self.technique = self.technique.take().or(other.technique);
        self.tool = self.tool.take().or(other.tool);
    }
}

/// Asks the model to structure the selected step. Missing fields survive one
/// repair round-trip as `unknown`.
pub fn describe_step(decision: &StrategyDecision, gateway: &Gateway) -> StepDescriptor {
    let mut session = gateway.open_role_session(AgentRole::StrategyAnalyzer);
    let prompt = format!(
        "Describe the selected step briefly for loop detection.\nSelected step: {}\n\n\
         Reply with exactly three lines:\nSERVICE: <what service will be exploited>\n\
         TECHNIQUE: <how it is done>\nTOOL: <what tool it uses>",
        decision.step_statement
    );
    let mut fields = match gateway.chat(&mut session, &prompt) {
        Ok(reply) => Fields::parse(&reply),
        Err(e) => {
            tracing::warn!("step description failed: {e}");
            return StepDescriptor::new("", "", "");
        }
    };
    let missing = fields.missing();
    if !missing.is_empty() {
        let repair = format!(
            "Your reply is missing {}. Reply with exactly three lines:\nSERVICE: <service>\n\
             TECHNIQUE: <technique>\nTOOL: <tool>",
            missing.join(", ")
        );
        match gateway.chat(&mut session, &repair) {
            Ok(reply) => fields.fill(Fields::parse(&reply)),
            Err(e) => tracing::warn!("step description repair failed: {e}"),
        }
    }
    StepDescriptor::new(
        fields.service.as_deref().unwrap_or(""),
        fields.technique.as_deref().unwrap_or(""),
        fields.tool.as_deref().unwrap_or(""),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredStep {
    pub descriptor: StepDescriptor,
    pub vector: EmbeddingVector,
    pub iteration: u32,
    /// Check number within the iteration (re-planned steps share an index).
    pub attempt: u32,
}

/// Append-only history of checked steps for one run.
#[derive(Debug, Clone, Default)]
pub struct StepEmbeddingStore {
    entries: Vec<StoredStep>,
}

impl StepEmbeddingStore {
    pub fn entries(&self) -> &[StoredStep] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, descriptor: StepDescriptor, vector: EmbeddingVector, iteration: u32) {
        let attempt = match self.entries.last() {
            Some(last) if last.iteration == iteration => last.attempt + 1,
            Some(last) => {
                debug_assert!(iteration > last.iteration, "iterations must not go backwards");
                0
            }
            None => 0,
        };
        self.entries.push(StoredStep {
            descriptor,
            vector,
            iteration,
            attempt,
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionVerdict {
    pub is_repetition: bool,
    pub nearest_iteration: Option<u32>,
    pub distance: f64,
}

impl RepetitionVerdict {
    pub fn none() -> Self {
        Self {
            is_repetition: false,
            nearest_iteration: None,
            distance: 2.0,
        }
    }
}

/// Nearest stored step by cosine distance; repetition iff strictly below
/// `threshold`.
pub fn nearest_verdict(vector: &EmbeddingVector, store: &StepEmbeddingStore, threshold: f64) -> RepetitionVerdict {
    let best = store
        .entries
        .iter()
        .map(|e| (vector.cosine_distance(&e.vector), e.iteration))
        .min_by(|a, b| a.0.total_cmp(&b.0));
    match best {
        Some((distance, iteration)) => RepetitionVerdict {
            is_repetition: distance < threshold,
            nearest_iteration: Some(iteration),
            distance,
        },
        None => RepetitionVerdict::none(),
    }
}

/// Threshold plus the run's step store.
#[derive(Debug, Clone)]
pub struct RepetitionGuard {
    threshold: f64,
    store: StepEmbeddingStore,
}

impl RepetitionGuard {
    pub fn new(threshold: f64) -> Result<Self, RepetitionError> {
        if !(threshold > 0.0 && threshold < 2.0) {
            return Err(RepetitionError::InvalidThreshold(threshold));
        }
        Ok(Self {
            threshold,
            store: StepEmbeddingStore::default(),
        })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn store(&self) -> &StepEmbeddingStore {
        &self.store
    }

    /// Compares `descriptor` with every stored step, then stores it.
    pub fn check(
        &mut self,
        descriptor: &StepDescriptor,
        iteration: u32,
        gateway: &Gateway,
    ) -> Result<RepetitionVerdict, RepetitionError> {
        let vector = gateway.embed(&descriptor.canonical)?;
        let verdict = nearest_verdict(&vector, &self.store, self.threshold);
        self.store.push(descriptor.clone(), vector, iteration);
        Ok(verdict)
    }
}

/// Presents the four options; silence continues.
pub fn handle_repetition(
    verdict: &RepetitionVerdict,
    prompt: &RepetitionPrompt,
    channel: &dyn OperatorChannel,
) -> OperatorDecision {
    debug_assert!(verdict.is_repetition);
    channel
        .ask(prompt)
        .unwrap_or_else(OperatorDecision::default_continue)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ScriptedEntry, ScriptedTranscript};
    use crate::operator::{DecisionKind, DecisionSource, NonInteractive, ScriptedOperator};
    use crate::strategy::SelectionSource;

    fn decision(step: &str) -> StrategyDecision {
        StrategyDecision {
            reasoning: String::new(),
            selected_node_id: "1.3.1".parse().unwrap(),
            step_statement: step.into(),
            raw_reply: String::new(),
            source: SelectionSource::Model,
        }
    }

    fn gateway(replies: &[&str]) -> Gateway {
        Gateway::scripted(ScriptedTranscript::new(
            replies
                .iter()
                .map(|r| ScriptedEntry {
                    role: AgentRole::StrategyAnalyzer,
                    pattern: None,
                    reply: r.to_string(),
                })
                .collect(),
        ))
        .0
    }

    #[test]
    fn describe_parses_three_fields() {
        let gw = gateway(&["SERVICE: ftp vsftpd 2.3.4\nTECHNIQUE: backdoor exploit\nTOOL: metasploit"]);
        let d = describe_step(&decision("exploit vsftpd 2.3.4 backdoor using Metasploit"), &gw);
        assert_eq!(d.service, "ftp vsftpd 2.3.4");
        assert_eq!(d.technique, "backdoor exploit");
        assert_eq!(d.tool, "metasploit");
        assert_eq!(d.canonical, "ftp vsftpd 2.3.4 | backdoor exploit | metasploit");
    }

    #[test]
    fn missing_tool_becomes_unknown() {
        let gw = gateway(&["SERVICE: ftp\nTECHNIQUE: backdoor", "SERVICE: ftp\nTECHNIQUE: backdoor"]);
        let d = describe_step(&decision("x"), &gw);
        assert_eq!(d.tool, UNKNOWN_FIELD);
        assert_eq!(d.service, "ftp");
    }

    #[test]
    fn equal_structurings_normalize_equally() {
        let gw = gateway(&[
            "SERVICE: FTP  vsftpd\nTECHNIQUE: Backdoor\nTOOL: Metasploit",
            "SERVICE: ftp vsftpd\nTECHNIQUE: backdoor\nTOOL: metasploit",
        ]);
        let a = describe_step(&decision("exploit the ftp backdoor"), &gw);
        let b = describe_step(&decision("use metasploit against vsftpd"), &gw);
        assert_eq!(a.canonical, b.canonical);
    }

    #[test]
    fn identical_step_is_repetition() {
        let gw = gateway(&[]);
        let mut g = RepetitionGuard::new(DEFAULT_THRESHOLD).unwrap();
        let d = StepDescriptor::new("ftp", "backdoor", "metasploit");
        assert!(!g.check(&d, 1, &gw).unwrap().is_repetition);
        let v = g.check(&d, 2, &gw).unwrap();
        assert!(v.is_repetition);
        assert_eq!(v.nearest_iteration, Some(1));
        assert!(v.distance.abs() < 1e-9);
        assert_eq!(g.store().len(), 2);
    }

    #[test]
    fn disjoint_descriptors_are_not_repetition() {
        // Tokens hash to disjoint coordinates (checked independently), so the
        // distance is exactly 1.
        let gw = gateway(&[]);
        let mut g = RepetitionGuard::new(DEFAULT_THRESHOLD).unwrap();
        g.check(&StepDescriptor::new("ftp vsftpd", "backdoor", "metasploit"), 1, &gw)
            .unwrap();
        let v = g
            .check(&StepDescriptor::new("http directory", "bruteforce", "dirbuster"), 2, &gw)
            .unwrap();
        assert!(!v.is_repetition);
        assert!((v.distance - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_store_is_vacuous() {
        let gw = gateway(&[]);
        let mut g = RepetitionGuard::new(DEFAULT_THRESHOLD).unwrap();
        let v = g.check(&StepDescriptor::new("a", "b", "c"), 1, &gw).unwrap();
        assert_eq!(v, RepetitionVerdict::none());
    }

    #[test]
    fn boundary_distance_is_not_repetition() {
        let mut store = StepEmbeddingStore::default();
        store.push(
            StepDescriptor::new("a", "b", "c"),
            EmbeddingVector::new(vec![1.0, 0.0]),
            1,
        );
        // cos = 0.85 exactly representable? Use a vector whose distance is
        // computed, then threshold at exactly that distance.
        let v = EmbeddingVector::new(vec![0.85, (1.0f64 - 0.85 * 0.85).sqrt()]);
        let d = nearest_verdict(&v, &store, 1.0).distance;
        assert!(!nearest_verdict(&v, &store, d).is_repetition);
        assert!(nearest_verdict(&v, &store, d + 1e-12).is_repetition);
    }

    #[test]
    fn threshold_range_checked() {
        assert!(RepetitionGuard::new(0.0).is_err());
        assert!(RepetitionGuard::new(2.0).is_err());
    }

    #[test]
    fn silence_continues() {
        let verdict = RepetitionVerdict {
            is_repetition: true,
            nearest_iteration: Some(1),
            distance: 0.0,
        };
        let prompt = RepetitionPrompt {
            prompt_id: 1,
            iteration: 2,
            step_statement: "x".into(),
            descriptor: "x".into(),
            nearest_iteration: Some(1),
            distance: 0.0,
        };
        let d = handle_repetition(&verdict, &prompt, &NonInteractive);
        assert_eq!(d.kind, DecisionKind::Continue);
        assert_eq!(d.source, DecisionSource::Default);
        let op = ScriptedOperator::new([Some(
            OperatorDecision::new(DecisionKind::General, "focus on port 8443", DecisionSource::Operator)
                .unwrap(),
        )]);
        let d = handle_repetition(&verdict, &prompt, &op);
        assert_eq!(d.kind, DecisionKind::General);
        assert_eq!(op.prompts().len(), 1);
    }
}
