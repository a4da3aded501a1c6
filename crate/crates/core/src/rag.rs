//! Knowledge base: fixed 500-character chunks, an exact cosine index and the
//! attacking host's profile.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::IpAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{EmbeddingVector, Gateway, LlmError};

pub const RAG_CHUNK_SIZE: usize = 500;
pub const DEFAULT_TOP_K: usize = 10;
pub const INDEX_FORMAT: &str = "pentrail-index";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RagError {
    #[error("no documents to ingest")]
    EmptyCorpus,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("duplicate chunk id {0}")]
    DuplicateChunk(u64),
    #[error("chunk {chunk_id} has dimension {got}, index has {expected}")]
    DimensionMismatch { chunk_id: u64, expected: usize, got: usize },
    #[error("chunk {0} exceeds {RAG_CHUNK_SIZE} characters")]
    ChunkTooLong(u64),
    #[error("index file {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Llm(#[from] LlmError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RagError + '_ {
    move |source| RagError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeChunk {
    pub chunk_id: u64,
    pub source_doc: String,
    /// Character offsets `[start, end)` in the source document.
    pub span: (usize, usize),
    pub text: String,
    pub vector: EmbeddingVector,
}

/// Consecutive, non-overlapping character spans; the last may be shorter.
pub fn chunk_spans(text_len: usize) -> Vec<(usize, usize)> {
    (0..text_len)
        .step_by(RAG_CHUNK_SIZE)
        .map(|s| (s, (s + RAG_CHUNK_SIZE).min(text_len)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VectorIndex {
    chunks: Vec<KnowledgeChunk>,
    dimension: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexHeader {
    format: String,
    version: u32,
    dimension: usize,
    chunks: usize,
}

impl VectorIndex {
    pub fn from_chunks(chunks: Vec<KnowledgeChunk>) -> Result<Self, RagError> {
        let dimension = chunks.first().map_or(0, |c| c.vector.dimension());
        let mut seen = HashSet::new();
        for c in &chunks {
            if !seen.insert(c.chunk_id) {
                return Err(RagError::DuplicateChunk(c.chunk_id));
            }
            if c.vector.dimension() != dimension {
                return Err(RagError::DimensionMismatch {
                    chunk_id: c.chunk_id,
                    expected: dimension,
                    got: c.vector.dimension(),
                });
            }
            if c.text.chars().count() > RAG_CHUNK_SIZE {
                return Err(RagError::ChunkTooLong(c.chunk_id));
            }
        }
        Ok(Self { chunks, dimension })
    }

    pub fn chunks(&self) -> &[KnowledgeChunk] {
        &self.chunks
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// Writes a header line and one JSON record per chunk, via a temporary
    /// file renamed into place.
    pub fn save(&self, path: &Path) -> Result<(), RagError> {
        let tmp = path.with_extension("tmp");
        let result = (|| {
            let file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
            let mut w = BufWriter::new(file);
            let header = IndexHeader {
                format: INDEX_FORMAT.into(),
                version: INDEX_VERSION,
                dimension: self.dimension,
                chunks: self.chunks.len(),
            };
            write_json_line(&mut w, &header, &tmp)?;
            for c in &self.chunks {
                write_json_line(&mut w, c, &tmp)?;
            }
            let file = w.into_inner().map_err(|e| RagError::Io {
                path: tmp.clone(),
                source: e.into_error(),
            })?;
            file.sync_all().map_err(io_err(&tmp))?;
            fs::rename(&tmp, path).map_err(io_err(path))
        })();
        if result.is_err() {
            let _ = fs::remove_file(&tmp);
        }
        result
    }

    pub fn load(path: &Path) -> Result<Self, RagError> {
        let format_err = |message: String| RagError::Format {
            path: path.to_path_buf(),
            message,
        };
        let file = fs::File::open(path).map_err(io_err(path))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| format_err("empty file".into()))?
            .map_err(io_err(path))?;
        let header: IndexHeader =
            serde_json::from_str(&header_line).map_err(|e| format_err(format!("header: {e}")))?;
        if header.format != INDEX_FORMAT || header.version != INDEX_VERSION {
            return Err(format_err(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let mut chunks = Vec::with_capacity(header.chunks);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let chunk: KnowledgeChunk = serde_json::from_str(&line)
                .map_err(|e| format_err(format!("record {}: {e}", i + 1)))?;
            chunks.push(chunk);
        }
        if chunks.len() != header.chunks {
            return Err(format_err(format!(
                "header declares {} chunks, found {}",
                header.chunks,
                chunks.len()
            )));
        }
        let index = Self::from_chunks(chunks)?;
        if !index.is_empty() && index.dimension != header.dimension {
            return Err(format_err("dimension differs from header".into()));
        }
        Ok(index)
    }
}

fn write_json_line<W: Write, T: Serialize>(w: &mut W, value: &T, path: &Path) -> Result<(), RagError> {
    let line = serde_json::to_string(value).map_err(|e| RagError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    writeln!(w, "{line}").map_err(io_err(path))
}

/// Splits and embeds every document. Nothing is kept if any embedding fails.
pub fn ingest_corpus(docs: &[(String, String)], gateway: &Gateway) -> Result<VectorIndex, RagError> {
    if docs.is_empty() {
        return Err(RagError::EmptyCorpus);
    }
    let mut pending = Vec::new();
    for (doc_id, text) in docs {
        let chars: Vec<char> = text.chars().collect();
        for span in chunk_spans(chars.len()) {
            let chunk_text: String = chars[span.0..span.1].iter().collect();
            pending.push((doc_id.clone(), span, chunk_text));
        }
    }
    let mut vectors = Vec::with_capacity(pending.len());
    for (_, _, text) in &pending {
        vectors.push(if text.trim().is_empty() {
            None
        } else {
            Some(gateway.embed(text)?)
        });
    }
    // Whitespace-only chunks keep their place with a zero vector.
    let dimension = vectors.iter().flatten().map(EmbeddingVector::dimension).next().unwrap_or(0);
    let chunks = pending
        .into_iter()
        .zip(vectors)
        .enumerate()
        .map(|(i, ((source_doc, span, text), vector))| KnowledgeChunk {
            chunk_id: i as u64,
            source_doc,
            span,
            text,
            vector: vector.unwrap_or_else(|| EmbeddingVector::new(vec![0.0; dimension])),
        })
        .collect();
    VectorIndex::from_chunks(chunks)
}

/// Reads every regular `.txt` or `.md` file in `dir`, sorted by file name.
pub fn load_corpus_dir(dir: &Path) -> Result<Vec<(String, String)>, RagError> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if path.is_file() && matches!(ext, "txt" | "md") {
            paths.push(path);
        }
    }
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p).map_err(io_err(&p))?;
            let id = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((id, text))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredChunk<'a> {
    pub chunk: &'a KnowledgeChunk,
    pub similarity: f64,
}

/// Exact top-k by cosine similarity to `query_vector`; ties go to the lower
/// chunk id.
pub fn top_k<'a>(index: &'a VectorIndex, query_vector: &EmbeddingVector, k: usize) -> Result<Vec<ScoredChunk<'a>>, RagError> {
    if k == 0 {
        return Err(RagError::InvalidK);
    }
    let mut scored: Vec<ScoredChunk<'a>> = index
        .chunks
        .iter()
        .map(|chunk| ScoredChunk {
            similarity: query_vector.cosine(&chunk.vector),
            chunk,
        })
        .collect();
    scored.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then(a.chunk.chunk_id.cmp(&b.chunk.chunk_id))
    });
    scored.truncate(k);
    Ok(scored)
}

pub fn retrieve<'a>(
    index: &'a VectorIndex,
    query: &str,
    k: usize,
    gateway: &Gateway,
) -> Result<Vec<ScoredChunk<'a>>, RagError> {
    if k == 0 {
        return Err(RagError::InvalidK);
    }
    let q = gateway.embed(query)?;
    top_k(index, &q, k)
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("invalid local ip {0:?}")]
    InvalidIp(String),
    #[error("{what} {path} does not exist")]
    MissingPath { what: String, path: PathBuf },
}

/// Facts about the attacking machine handed to the command generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackHostProfile {
    pub local_ip: String,
    #[serde(default)]
    pub wordlist_paths: BTreeMap<String, PathBuf>,
    pub workspace_dir: PathBuf,
}

impl AttackHostProfile {
    pub fn ip(&self) -> Result<IpAddr, ProfileError> {
        self.local_ip
            .parse()
            .map_err(|_| ProfileError::InvalidIp(self.local_ip.clone()))
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        self.ip()?;
        if !self.workspace_dir.is_dir() {
            return Err(ProfileError::MissingPath {
                what: "workspace".into(),
                path: self.workspace_dir.clone(),
            });
        }
        for (name, path) in &self.wordlist_paths {
            if !path.exists() {
                return Err(ProfileError::MissingPath {
                    what: format!("wordlist {name}"),
                    path: path.clone(),
                });
            }
        }
        Ok(())
    }

    /// Lines given to the generator.
    pub fn facts(&self) -> String {
        let mut out = format!("Local IP address: {}\nWorkspace directory: {}\n", self.local_ip, self.workspace_dir.display());
        for (name, path) in &self.wordlist_paths {
            out.push_str(&format!("Wordlist {name}: {}\n", path.display()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ScriptedTranscript;

    fn gw() -> Gateway {
        Gateway::scripted(ScriptedTranscript::default()).0
    }

    #[test]
    fn spans_for_1234() {
        assert_eq!(chunk_spans(1234), vec![(0, 500), (500, 1000), (1000, 1234)]);
        assert!(chunk_spans(0).is_empty());
    }

    #[test]
    fn chunks_concatenate_to_doc() {
        let doc: String = (0..1234).map(|i| char::from(b'a' + (i % 26) as u8)).collect();
        let idx = ingest_corpus(&[("d".into(), doc.clone())], &gw()).unwrap();
        assert_eq!(idx.len(), 3);
        let joined: String = idx.chunks().iter().map(|c| c.text.as_str()).collect();
        assert_eq!(joined, doc);
        assert_eq!(idx.chunks()[2].span, (1000, 1234));
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(ingest_corpus(&[], &gw()), Err(RagError::EmptyCorpus)));
    }

    #[test]
    fn blank_chunk_gets_zero_vector() {
        let doc = format!("{}{}", "nmap ".repeat(100), " ".repeat(300));
        let idx = ingest_corpus(&[("d".into(), doc)], &gw()).unwrap();
        assert_eq!(idx.chunks()[1].vector.norm(), 0.0);
        assert_eq!(idx.chunks()[1].vector.dimension(), idx.dimension());
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.index");
        let idx = ingest_corpus(
            &[
                ("a".into(), "smbclient lists shares ".repeat(40)),
                ("b".into(), "hydra brute forces ssh logins".into()),
            ],
            &gw(),
        )
        .unwrap();
        idx.save(&path).unwrap();
        let back = VectorIndex::load(&path).unwrap();
        assert_eq!(back, idx);
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn bad_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.index");
        fs::write(&path, "{\"format\":\"other\",\"version\":1,\"dimension\":0,\"chunks\":0}\n").unwrap();
        assert!(matches!(VectorIndex::load(&path), Err(RagError::Format { .. })));
    }

    #[test]
    fn self_match_ranks_first() {
        let g = gw();
        let docs: Vec<_> = ["nmap service scan", "metasploit console exploit", "nikto web scanner"]
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("d{i}"), t.to_string()))
            .collect();
        let idx = ingest_corpus(&docs, &g).unwrap();
        let hits = retrieve(&idx, "metasploit console exploit", 10, &g).unwrap();
        assert_eq!(hits.len(), 3);
        assert_eq!(hits[0].chunk.text, "metasploit console exploit");
        assert!((hits[0].similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_break_on_chunk_id() {
        let v = EmbeddingVector::new(vec![1.0, 0.0]);
        let chunks = (0..4)
            .rev()
            .map(|i| KnowledgeChunk {
                chunk_id: i,
                source_doc: "d".into(),
                span: (0, 1),
                text: "x".into(),
                vector: v.clone(),
            })
            .collect();
        let idx = VectorIndex::from_chunks(chunks).unwrap();
        let ids: Vec<_> = top_k(&idx, &v, 3).unwrap().iter().map(|s| s.chunk.chunk_id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert!(matches!(top_k(&idx, &v, 0), Err(RagError::InvalidK)));
    }

    #[test]
    fn profile_validation() {
        let dir = tempfile::tempdir().unwrap();
        let words = dir.path().join("users.txt");
        fs::write(&words, "root\n").unwrap();
        let mut p = AttackHostProfile {
            local_ip: "10.10.14.2".into(),
            wordlist_paths: BTreeMap::from([("usernames".into(), words)]),
            workspace_dir: dir.path().into(),
        };
        p.validate().unwrap();
        assert!(p.facts().contains("Local IP address: 10.10.14.2"));
        p.local_ip = "10.10.14".into();
        assert!(matches!(p.validate(), Err(ProfileError::InvalidIp(_))));
        p.local_ip = "::1".into();
        p.wordlist_paths.insert("missing".into(), dir.path().join("nope"));
        assert!(matches!(p.validate(), Err(ProfileError::MissingPath { .. })));
    }
}
