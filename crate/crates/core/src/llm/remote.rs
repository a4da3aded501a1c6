use std::thread;
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{AgentRole, BackendConfig, LlmBackend, LlmError, Message, Speaker};

/// Chat-completion backend speaking the common `/chat/completions` and
/// `/embeddings` JSON contract.
pub struct RemoteBackend {
    agent: ureq::Agent,
    endpoint: String,
    model_id: String,
    embedding_model_id: String,
    temperature: f64,
    max_retries: u32,
    api_key: Option<String>,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // api_key deliberately omitted
        f.debug_struct("RemoteBackend")
            .field("endpoint", &self.endpoint)
            .field("model_id", &self.model_id)
            .finish()
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

enum Attempt<T> {
    Done(T),
    Transient(String),
}

impl RemoteBackend {
    pub fn from_config(config: &BackendConfig) -> Result<Self, LlmError> {
        let endpoint = config
            .endpoint
            .clone()
            .ok_or_else(|| LlmError::Config("remote backend requires an endpoint".into()))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.request_timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model_id: config.model_id.clone(),
            embedding_model_id: config.embedding_model_id.clone(),
            temperature: config.temperature,
            max_retries: config.max_retries,
            api_key: std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty()),
        })
    }

    fn post(&self, path: &str, body: serde_json::Value) -> Result<Attempt<serde_json::Value>, LlmError> {
        let url = format!("{}{path}", self.endpoint);
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(&body) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                if status == 429 || status >= 500 {
                    return Ok(Attempt::Transient(format!("HTTP {status} from {url}")));
                }
                if status >= 400 {
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    return Err(LlmError::InvalidResponse(format!(
                        "HTTP {status} from {url}: {}",
                        text.chars().take(300).collect::<String>()
                    )));
                }
                resp.body_mut()
                    .read_json::<serde_json::Value>()
                    .map(Attempt::Done)
                    .map_err(|e| LlmError::InvalidResponse(e.to_string()))
            }
            Err(e) => Ok(Attempt::Transient(format!("{url}: {e}"))),
        }
    }

    fn post_with_retries(&self, path: &str, body: serde_json::Value) -> Result<serde_json::Value, LlmError> {
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                thread::sleep(Duration::from_millis(200 * (1 << attempt.min(5))));
            }
            match self.post(path, body.clone())? {
                Attempt::Done(v) => return Ok(v),
                Attempt::Transient(msg) => {
                    tracing::warn!(attempt, "transient backend failure: {msg}");
                    last = msg;
                }
            }
        }
        Err(LlmError::BackendUnreachable(last))
    }
}

impl LlmBackend for RemoteBackend {
    fn complete(&self, _role: AgentRole, messages: &[Message]) -> Result<String, LlmError> {
        let msgs: Vec<_> = messages
            .iter()
            .map(|m| {
                let role = match m.speaker {
                    Speaker::System => "system",
                    Speaker::User => "user",
                    Speaker::Assistant => "assistant",
                };
                json!({"role": role, "content": m.text})
            })
            .collect();
        let body = json!({
            "model": self.model_id,
            "temperature": self.temperature,
            "messages": msgs,
        });
        let value = self.post_with_retries("/chat/completions", body)?;
        let resp: ChatResponse = serde_json::from_value(value)
            .map_err(|e| LlmError::InvalidResponse(e.to_string()))?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::InvalidResponse("no choices in completion".into()))
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, LlmError> {
        let body = json!({"model": self.embedding_model_id, "input": text});
        let value = self.post_with_retries("/embeddings", body)?;
        let resp: EmbeddingResponse = serde_json::from_value(value)
            .map_err(|e| LlmError::InvalidResponse(e.to_string()))?;
        let v = resp
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| LlmError::InvalidResponse("no embedding in response".into()))?;
        if v.is_empty() {
            return Err(LlmError::InvalidResponse("empty embedding".into()));
        }
        Ok(v)
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }
}

#[cfg(test)]
mod tests {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    use super::*;
    use crate::llm::{BackendKind, Gateway};

    fn serve_once(body: &'static str) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut buf = vec![0u8; len];
            reader.read_exact(&mut buf).unwrap();
            let req: serde_json::Value = serde_json::from_slice(&buf).unwrap();
            assert_eq!(req["temperature"], 0.0);
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                body.len(),
                body
            )
            .unwrap();
        });
        format!("http://{addr}/v1")
    }

    fn config(endpoint: String) -> BackendConfig {
        BackendConfig {
            kind: BackendKind::Remote,
            endpoint: Some(endpoint),
            model_id: "test-model".into(),
            max_retries: 1,
            request_timeout: Duration::from_secs(5),
            ..BackendConfig::default()
        }
    }

    #[test]
    fn chat_round_trip_against_local_server() {
        let endpoint = serve_once(r#"{"choices":[{"message":{"role":"assistant","content":"hello"}}]}"#);
        let gw = Gateway::from_config(&config(endpoint), None).unwrap();
        let mut s = gw.open_role_session(AgentRole::Summarizer);
        assert_eq!(gw.chat(&mut s, "hi").unwrap(), "hello");
        assert_eq!(s.history().len(), 3);
    }

    #[test]
    fn unreachable_backend_reports_after_retries() {
        let port = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().port()
        };
        let gw = Gateway::from_config(&config(format!("http://127.0.0.1:{port}/v1")), None).unwrap();
        let mut s = gw.open_role_session(AgentRole::Summarizer);
        assert!(matches!(
            gw.chat(&mut s, "hi"),
            Err(LlmError::BackendUnreachable(_))
        ));
    }
}
