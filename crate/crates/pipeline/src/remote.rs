//! Chat-completion generator over HTTP with bounded retries and an audit log
//! that never contains the credential.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result};
use crate::instruct::{GenRequest, GeneratorBackend};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    /// Full chat-completions URL.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
    /// Extra attempts after the first, for transport errors, 429 and 5xx.
    pub max_retries: usize,
    pub retry_backoff_ms: u64,
    pub temperature: f64,
    pub max_tokens: usize,
    pub audit_log: Option<PathBuf>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            api_key_env: "TRUSTVL_API_KEY".into(),
            timeout_secs: 60,
            max_retries: 3,
            retry_backoff_ms: 500,
            temperature: 0.0,
            max_tokens: 1024,
            audit_log: None,
        }
    }
}

pub struct RemoteBackend {
    cfg: RemoteConfig,
    agent: ureq::Agent,
    key: Option<String>,
    audit: Option<Mutex<std::fs::File>>,
}

#[derive(Serialize)]
struct AuditEntry<'a> {
    id: &'a str,
    round: usize,
    attempt: usize,
    prompt_sha256: String,
    status: Option<u16>,
    outcome: &'a str,
    detail: String,
}

enum Attempt {
    Done(String),
    Retry(Option<u16>, String),
    Fatal(Option<u16>, String),
}

impl RemoteBackend {
    /// Reads the key from the configured environment variable; a missing key
    /// sends unauthenticated requests.
    pub fn new(cfg: RemoteConfig) -> Result<Self> {
        let key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        Self::with_key(cfg, key)
    }

    pub fn with_key(cfg: RemoteConfig, key: Option<String>) -> Result<Self> {
        if cfg.endpoint.is_empty() || cfg.model.is_empty() {
            return Err(PipelineError::Config("remote endpoint and model are required".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .new_agent();
        let audit = match &cfg.audit_log {
            Some(p) => Some(Mutex::new(
                std::fs::OpenOptions::new().create(true).append(true).open(p).map_err(|e| PipelineError::io(p, e))?,
            )),
            None => None,
        };
        Ok(Self { cfg, agent, key, audit })
    }

    fn redact(&self, s: &str) -> String {
        match &self.key {
            Some(k) => s.replace(k.as_str(), "[REDACTED]"),
            None => s.to_string(),
        }
    }

    fn log(&self, e: AuditEntry<'_>) {
        if let Some(f) = &self.audit {
            let mut line = serde_json::to_string(&e).unwrap_or_default();
            line = self.redact(&line);
            line.push('\n');
            if let Ok(mut f) = f.lock() {
                let _ = f.write_all(line.as_bytes());
            }
        }
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let mut req = self.agent.post(&self.cfg.endpoint).header("Content-Type", "application/json");
        if let Some(k) = &self.key {
            req = req.header("Authorization", format!("Bearer {k}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(None, e.to_string()),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(Some(status), e.to_string()),
        };
        if status == 429 || status >= 500 {
            return Attempt::Retry(Some(status), text);
        }
        if !(200..300).contains(&status) {
            return Attempt::Fatal(Some(status), text);
        }
        let parsed: Value = match serde_json::from_str(&text) {
            Ok(v) => v,
            Err(e) => return Attempt::Fatal(Some(status), format!("bad JSON: {e}")),
        };
        match parsed.pointer("/choices/0/message/content").and_then(Value::as_str) {
            Some(c) => Attempt::Done(c.to_string()),
            None => Attempt::Fatal(Some(status), "response has no choices[0].message.content".into()),
        }
    }
}

impl GeneratorBackend for RemoteBackend {
    fn generate(&self, req: &GenRequest) -> Result<String> {
        let body = json!({
            "model": self.cfg.model,
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_tokens,
            "messages": [{ "role": "user", "content": req.prompt }],
        });
        let prompt_sha256 = hex::encode(Sha256::digest(req.prompt.as_bytes()));
        let mut last = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.cfg.retry_backoff_ms << (attempt - 1).min(6)));
            }
            let entry = |status, outcome, detail: &str| AuditEntry {
                id: &req.id,
                round: req.round,
                attempt: attempt + 1,
                prompt_sha256: prompt_sha256.clone(),
                status,
                outcome,
                detail: detail.chars().take(2000).collect(),
            };
            match self.attempt(&body) {
                Attempt::Done(text) => {
                    self.log(entry(Some(200), "ok", &text));
                    return Ok(text);
                }
                Attempt::Retry(status, e) => {
                    self.log(entry(status, "retry", &e));
                    last = e;
                }
                Attempt::Fatal(status, e) => {
                    self.log(entry(status, "fatal", &e));
                    return Err(PipelineError::Transport(self.redact(&format!("{}: {e}", req.id))));
                }
            }
        }
        Err(PipelineError::Transport(self.redact(&format!(
            "{}: gave up after {} attempts: {last}",
            req.id,
            self.cfg.max_retries + 1
        ))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read};
    use std::net::TcpListener;
    use trustvl_core::DistortionType;

    /// Serves the given `(status, body)` responses in order, one per
    /// connection, and returns the raw requests.
    fn mock(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let h = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut r = BufReader::new(stream.try_clone().unwrap());
                let mut head = String::new();
                let mut len = 0;
                loop {
                    let mut l = String::new();
                    r.read_line(&mut l).unwrap();
                    if let Some(v) = l.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    head.push_str(&l);
                    if l == "\r\n" || l.is_empty() {
                        break;
                    }
                }
                let mut buf = vec![0; len];
                r.read_exact(&mut buf).unwrap();
                head.push_str(&String::from_utf8_lossy(&buf));
                seen.push(head);
                let mut w = stream;
                write!(w, "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len()).unwrap();
            }
            seen
        });
        (url, h)
    }

    fn req() -> GenRequest {
        GenRequest {
            id: "r1".into(),
            distortion: DistortionType::Textual,
            prompt: "hello".into(),
            round: 1,
            hint: None,
        }
    }

    fn cfg(url: String, audit: Option<PathBuf>) -> RemoteConfig {
        RemoteConfig {
            endpoint: url,
            model: "m".into(),
            retry_backoff_ms: 1,
            max_retries: 2,
            audit_log: audit,
            ..RemoteConfig::default()
        }
    }

    #[test]
    fn retries_then_succeeds_and_redacts() {
        let ok = json!({"choices":[{"message":{"content":"Step 1 - a: b"}}]}).to_string();
        let (url, h) = mock(vec![(503, "busy sk-secret".into()), (200, ok)]);
        let dir = tempfile::tempdir().unwrap();
        let audit = dir.path().join("audit.jsonl");
        let b = RemoteBackend::with_key(cfg(url, Some(audit.clone())), Some("sk-secret".into())).unwrap();
        assert_eq!(b.generate(&req()).unwrap(), "Step 1 - a: b");
        let seen = h.join().unwrap();
        assert_eq!(seen.len(), 2);
        assert!(seen[0].contains("Bearer sk-secret"));
        let body: Value = serde_json::from_str(seen[0].split("\r\n\r\n").nth(1).unwrap()).unwrap();
        assert_eq!(body["messages"][0]["content"], "hello");
        let log = std::fs::read_to_string(audit).unwrap();
        assert_eq!(log.lines().count(), 2);
        assert!(!log.contains("sk-secret"));
        assert!(log.contains("[REDACTED]"));
    }

    #[test]
    fn gives_up_after_bounded_retries() {
        let (url, h) = mock(vec![(500, "{}".into()); 3]);
        let b = RemoteBackend::with_key(cfg(url, None), None).unwrap();
        let e = b.generate(&req()).unwrap_err();
        assert!(e.to_string().contains("3 attempts"), "{e}");
        assert_eq!(h.join().unwrap().len(), 3);
    }

    #[test]
    fn client_error_is_not_retried() {
        let (url, h) = mock(vec![(401, "{\"error\":\"bad key\"}".into())]);
        let b = RemoteBackend::with_key(cfg(url, None), Some("k".into())).unwrap();
        assert!(b.generate(&req()).is_err());
        assert_eq!(h.join().unwrap().len(), 1);
    }
}
