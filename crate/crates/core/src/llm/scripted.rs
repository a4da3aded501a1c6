use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{AgentRole, LlmBackend, LlmError, Message, Speaker};

/// Dimension of the hash embedder used by the scripted backend.
pub const HASH_EMBEDDING_DIM: usize = 256;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME)
    })
}

/// Bag-of-tokens embedding: lowercase alphanumeric tokens, each hashed
/// (FNV-1a, 64 bit) onto one of 256 coordinates with weight 1, then
/// L2-normalized. Text without any alphanumeric token is hashed whole so
/// the result never has zero norm.
pub fn hash_embed(text: &str) -> Vec<f64> {
    let mut v = vec![0.0f64; HASH_EMBEDDING_DIM];
    let lower = text.to_lowercase();
    let mut any = false;
    for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        v[(fnv1a(token.as_bytes()) % HASH_EMBEDDING_DIM as u64) as usize] += 1.0;
        any = true;
    }
    if !any {
        v[(fnv1a(lower.trim().as_bytes()) % HASH_EMBEDDING_DIM as u64) as usize] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedEntry {
    pub role: AgentRole,
    /// Substring that must occur in the user message for this entry to apply.
    #[serde(default, rename = "match", skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    pub reply: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedTranscript {
    #[serde(default = "one")]
    pub version: u32,
    #[serde(default, rename = "entry")]
    pub entries: Vec<ScriptedEntry>,
}

fn one() -> u32 {
    1
}

impl ScriptedTranscript {
    pub fn new(entries: Vec<ScriptedEntry>) -> Self {
        Self { version: 1, entries }
    }

    pub fn parse(text: &str) -> Result<Self, LlmError> {
        let t: Self = toml::from_str(text)
            .map_err(|e| LlmError::Config(format!("scripted transcript: {e}")))?;
        if t.version != 1 {
            return Err(LlmError::Config(format!(
                "unsupported scripted transcript version {}",
                t.version
            )));
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

/// A request observed by the scripted backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedCall {
    pub role: AgentRole,
    pub message: String,
    pub reply: Option<String>,
}

#[derive(Debug)]
struct ScriptState {
    consumed: Vec<bool>,
    calls: Vec<ScriptedCall>,
}

/// Deterministic backend replaying a [`ScriptedTranscript`].
///
/// For each request the first unconsumed entry of the same role whose
/// pattern (if any) occurs in the user message is consumed and replied.
#[derive(Debug)]
pub struct ScriptedBackend {
    transcript: ScriptedTranscript,
    state: Mutex<ScriptState>,
}

impl ScriptedBackend {
    pub fn new(transcript: ScriptedTranscript) -> Self {
        let n = transcript.entries.len();
        Self {
            transcript,
            state: Mutex::new(ScriptState {
                consumed: vec![false; n],
                calls: Vec::new(),
            }),
        }
    }

    pub fn calls(&self) -> Vec<ScriptedCall> {
        self.state.lock().unwrap().calls.clone()
    }

    pub fn calls_for(&self, role: AgentRole) -> Vec<ScriptedCall> {
        self.calls().into_iter().filter(|c| c.role == role).collect()
    }

    pub fn remaining(&self) -> usize {
        self.state.lock().unwrap().consumed.iter().filter(|c| !**c).count()
    }
}

impl LlmBackend for ScriptedBackend {
    fn complete(&self, role: AgentRole, messages: &[Message]) -> Result<String, LlmError> {
        let message = messages
            .iter()
            .rev()
            .find(|m| m.speaker == Speaker::User)
            .map(|m| m.text.as_str())
            .unwrap_or("");
        let mut state = self.state.lock().unwrap();
        let hit = self.transcript.entries.iter().enumerate().find(|(i, e)| {
            !state.consumed[*i]
                && e.role == role
                && e.pattern.as_deref().is_none_or(|p| message.contains(p))
        });
        match hit {
            Some((i, entry)) => {
                state.consumed[i] = true;
                state.calls.push(ScriptedCall {
                    role,
                    message: message.to_string(),
                    reply: Some(entry.reply.clone()),
                });
                Ok(entry.reply.clone())
            }
            None => {
                state.calls.push(ScriptedCall {
                    role,
                    message: message.to_string(),
                    reply: None,
                });
                let excerpt: String = message.chars().take(120).collect();
                Err(LlmError::ScriptedExhausted { role, excerpt })
            }
        }
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, LlmError> {
        Ok(hash_embed(text))
    }

    fn model_id(&self) -> &str {
        "scripted"
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::llm::EmbeddingVector;

    /// Independent re-derivation of the hash embedder: token counts first,
    /// then projection.
    fn oracle_embed(text: &str) -> Vec<f64> {
        let mut counts: HashMap<String, f64> = HashMap::new();
        let mut token = String::new();
        for c in text.chars().chain(std::iter::once(' ')) {
            if c.is_alphanumeric() {
                token.extend(c.to_lowercase());
            } else if !token.is_empty() {
                *counts.entry(std::mem::take(&mut token)).or_default() += 1.0;
            }
        }
        let mut v = vec![0.0; 256];
        for (tok, n) in counts {
            let mut h: u64 = 14695981039346656037;
            for b in tok.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(1099511628211);
            }
            v[(h % 256) as usize] += n;
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }

    #[test]
    fn hash_embed_matches_oracle() {
        for text in ["nmap -sV 10.10.10.3", "Exploit vsftpd 2.3.4 BACKDOOR", "a a a b"] {
            let got = hash_embed(text);
            let want = oracle_embed(text);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_texts_have_unit_similarity() {
        let a = EmbeddingVector::new(hash_embed("ftp vsftpd | backdoor | metasploit"));
        assert!((a.cosine(&a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_texts_are_nearly_orthogonal() {
        // Frozen from the oracle above: the two token sets land on disjoint
        // coordinates, so the cosine is exactly 0.
        let a = EmbeddingVector::new(hash_embed("ftp vsftpd backdoor metasploit"));
        let b = EmbeddingVector::new(hash_embed("http directory bruteforce dirbuster"));
        let oracle = {
            let (x, y) = (
                oracle_embed("ftp vsftpd backdoor metasploit"),
                oracle_embed("http directory bruteforce dirbuster"),
            );
            x.iter().zip(&y).map(|(p, q)| p * q).sum::<f64>()
        };
        assert!(oracle < 0.05);
        assert!((a.cosine(&b) - oracle).abs() < 1e-12);
        assert!(a.cosine(&b) < 0.05);
    }

    #[test]
    fn punctuation_only_text_has_nonzero_norm() {
        let v = EmbeddingVector::new(hash_embed("!!!"));
        assert!((v.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pattern_entries_skip_until_match() {
        let t = ScriptedTranscript::new(vec![
            ScriptedEntry {
                role: AgentRole::StrategyAnalyzer,
                pattern: Some("try a different path".into()),
                reply: "hinted".into(),
            },
            ScriptedEntry {
                role: AgentRole::StrategyAnalyzer,
                pattern: None,
                reply: "plain".into(),
            },
        ]);
        let b = ScriptedBackend::new(t);
        let msg = |t: &str| {
            vec![Message {
                speaker: Speaker::User,
                text: t.into(),
            }]
        };
        assert_eq!(b.complete(AgentRole::StrategyAnalyzer, &msg("go")).unwrap(), "plain");
        assert_eq!(
            b.complete(AgentRole::StrategyAnalyzer, &msg("please try a different path"))
                .unwrap(),
            "hinted"
        );
        assert_eq!(b.remaining(), 0);
    }

    #[test]
    fn transcript_toml_round_trip() {
        let text = r#"
version = 1
[[entry]]
role = "summarizer"
reply = "Ports 21,22 open"

[[entry]]
role = "generator"
match = "vsftpd"
reply = """
TOOL: metasploit
"""
"#;
        let t = ScriptedTranscript::parse(text).unwrap();
        assert_eq!(t.entries.len(), 2);
        assert_eq!(t.entries[1].pattern.as_deref(), Some("vsftpd"));
        let again = ScriptedTranscript::parse(&toml::to_string(&t).unwrap()).unwrap();
        assert_eq!(t, again);
    }
}
