//! The `--config` file: model backend, attacking host and run limits.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pentrail_core::llm::BackendConfig;
use serde::Deserialize;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub targets: Vec<String>,
    pub kb: Option<PathBuf>,
    pub registry: Option<PathBuf>,
    pub backend: BackendConfig,
    pub host: HostSection,
    pub run: RunSection,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HostSection {
    pub local_ip: Option<String>,
    pub workspace_dir: Option<PathBuf>,
    pub wordlists: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub max_iterations: Option<u32>,
    pub max_retries: Option<u32>,
    pub max_replans: Option<u32>,
    pub repetition_threshold: Option<f64>,
    pub top_k: Option<usize>,
    /// Seconds the operator has to answer a repetition prompt.
    pub decision_window_secs: Option<u64>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Relative paths in the file are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg = Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.kb.as_mut().map(rebase);
        cfg.registry.as_mut().map(rebase);
        cfg.host.workspace_dir.as_mut().map(rebase);
        cfg.host.wordlists.values_mut().for_each(rebase);
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pentrail_core::llm::BackendKind;

    #[test]
    fn full_file() {
        let cfg = FileConfig::parse(
            r#"
targets = ["10.10.10.3"]
kb = "kb"

[backend]
kind = "remote"
endpoint = "http://127.0.0.1:8000/v1"
model_id = "gpt-4o"

[host]
local_ip = "10.10.14.2"
wordlists = { rockyou = "/usr/share/wordlists/rockyou.txt" }

[run]
max_iterations = 12
decision_window_secs = 10
"#,
        )
        .unwrap();
        assert_eq!(cfg.backend.kind, BackendKind::Remote);
        assert_eq!(cfg.run.max_iterations, Some(12));
        assert_eq!(cfg.host.wordlists.len(), 1);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(FileConfig::parse("[run]\nmax_iteration = 3\n").is_err());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.toml");
        std::fs::write(&path, "kb = \"kb\"\nregistry = \"/abs/reg.toml\"\n").unwrap();
        let cfg = FileConfig::load(&path).unwrap();
        assert_eq!(cfg.kb.unwrap(), dir.path().join("kb"));
        assert_eq!(cfg.registry.unwrap(), PathBuf::from("/abs/reg.toml"));
    }
}
