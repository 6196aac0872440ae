//! Chat transports: a chat-completions HTTP client and a fixture replayer.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const ENV_API_URL: &str = "AUTOMIA_API_URL";
pub const ENV_API_KEY: &str = "AUTOMIA_API_KEY";
pub const DEFAULT_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, other: Self) {
        self.input_tokens += other.input_tokens;
        self.output_tokens += other.output_tokens;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Generation,
    Guidance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub role: Role,
    pub model: String,
    pub temperature: f64,
    pub system: String,
    pub user: String,
}

impl ChatRequest {
    pub fn body(&self) -> Value {
        json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [
                {"role": "system", "content": self.system},
                {"role": "user", "content": self.user},
            ],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransportError {
    #[error("transport configuration: {0}")]
    Config(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("replay fixture: {0}")]
    Fixture(String),
}

pub trait ChatTransport: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError>;
}

impl<T: ChatTransport + ?Sized> ChatTransport for Box<T> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        (**self).complete(request)
    }
}

/// The raw HTTP exchange, separated out so retries can be tested without a
/// server.
pub trait HttpSend: Send + Sync {
    /// Returns (status, body), or a network error message.
    fn post_json(&self, url: &str, api_key: &str, body: &Value) -> Result<(u16, String), String>;
}

pub struct UreqSend {
    agent: ureq::Agent,
}

impl UreqSend {
    pub fn new(timeout: Duration) -> Self {
        Self {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl HttpSend for UreqSend {
    fn post_json(&self, url: &str, api_key: &str, body: &Value) -> Result<(u16, String), String> {
        let result = self
            .agent
            .post(url)
            .set("Authorization", &format!("Bearer {api_key}"))
            .set("Content-Type", "application/json")
            .send_json(body.clone());
        match result {
            Ok(resp) => {
                let status = resp.status();
                resp.into_string()
                    .map(|text| (status, text))
                    .map_err(|e| e.to_string())
            }
            Err(ureq::Error::Status(status, resp)) => {
                Ok((status, resp.into_string().unwrap_or_default()))
            }
            Err(ureq::Error::Transport(t)) => Err(t.to_string()),
        }
    }
}

/// Chat-completions client with exponential backoff on 429, 5xx and
/// network failures.
pub struct HttpTransport {
    url: String,
    api_key: String,
    attempts: u32,
    base_delay: Duration,
    sender: Box<dyn HttpSend>,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>, api_key: impl Into<String>) -> Result<Self, TransportError> {
        let (url, api_key) = (url.into(), api_key.into());
        if url.trim().is_empty() {
            return Err(TransportError::Config(format!("{ENV_API_URL} is empty")));
        }
        if api_key.trim().is_empty() {
            return Err(TransportError::Config(format!("{ENV_API_KEY} is empty")));
        }
        Ok(Self {
            url,
            api_key,
            attempts: DEFAULT_ATTEMPTS,
            base_delay: Duration::from_millis(500),
            sender: Box::new(UreqSend::new(Duration::from_secs(120))),
        })
    }

    /// Reads the endpoint and key from the environment.
    pub fn from_env() -> Result<Self, TransportError> {
        let url = std::env::var(ENV_API_URL)
            .map_err(|_| TransportError::Config(format!("{ENV_API_URL} is not set")))?;
        let key = std::env::var(ENV_API_KEY)
            .map_err(|_| TransportError::Config(format!("{ENV_API_KEY} is not set")))?;
        Self::new(url, key)
    }

    pub fn with_sender(mut self, sender: Box<dyn HttpSend>) -> Self {
        self.sender = sender;
        self
    }

    pub fn with_backoff(mut self, attempts: u32, base_delay: Duration) -> Self {
        self.attempts = attempts.max(1);
        self.base_delay = base_delay;
        self
    }
}

fn retryable(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

/// Pulls the message text and token counts out of a chat-completions body.
pub fn parse_completion(body: &str) -> Result<ChatResponse, TransportError> {
    let v: Value =
        serde_json::from_str(body).map_err(|e| TransportError::Malformed(e.to_string()))?;
    let text = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| TransportError::Malformed("no choices[0].message.content".into()))?
        .to_string();
    let count = |keys: &[&str]| {
        keys.iter()
            .find_map(|k| {
                v.get("usage")
                    .and_then(|u| u.get(*k))
                    .and_then(Value::as_u64)
            })
            .unwrap_or(0)
    };
    Ok(ChatResponse {
        text,
        usage: Usage {
            input_tokens: count(&["prompt_tokens", "input_tokens"]),
            output_tokens: count(&["completion_tokens", "output_tokens"]),
        },
    })
}

impl ChatTransport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let body = request.body();
        let mut last = String::new();
        for attempt in 0..self.attempts {
            if attempt > 0 {
                let delay = self.base_delay * 2u32.pow(attempt - 1);
                info!(
                    "retrying chat request (attempt {}) after {delay:?}: {last}",
                    attempt + 1
                );
                thread::sleep(delay);
            }
            match self.sender.post_json(&self.url, &self.api_key, &body) {
                Ok((status, text)) if (200..300).contains(&status) => {
                    return parse_completion(&text)
                }
                Ok((status, text)) if retryable(status) => {
                    last = format!("HTTP {status}");
                    warn!("chat endpoint returned {status}: {}", truncate(&text, 200));
                }
                Ok((status, text)) => {
                    return Err(TransportError::Status {
                        status,
                        body: truncate(&text, 500),
                    })
                }
                Err(e) => {
                    last = e;
                    warn!("chat request failed: {last}");
                }
            }
        }
        Err(TransportError::Exhausted {
            attempts: self.attempts,
            last,
        })
    }
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

/// One canned response line in a fixture file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureLine {
    pub text: String,
    #[serde(default)]
    pub usage: Usage,
}

/// Serves canned responses in order, one queue per role. A fixture
/// directory holds `generation.jsonl` and optionally `guidance.jsonl`.
pub struct ReplayTransport {
    queues: Mutex<[(Vec<FixtureLine>, usize); 2]>,
    source: PathBuf,
}

impl ReplayTransport {
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, TransportError> {
        let dir = dir.as_ref();
        let load = |name: &str, required: bool| -> Result<Vec<FixtureLine>, TransportError> {
            let path = dir.join(name);
            if !path.exists() {
                return if required {
                    Err(TransportError::Config(format!(
                        "missing fixture {}",
                        path.display()
                    )))
                } else {
                    Ok(Vec::new())
                };
            }
            let text = fs::read_to_string(&path)
                .map_err(|e| TransportError::Config(format!("{}: {e}", path.display())))?;
            text.lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| {
                    serde_json::from_str(l).map_err(|e| {
                        TransportError::Config(format!("{} line {}: {e}", path.display(), i + 1))
                    })
                })
                .collect()
        };
        Ok(Self::new(
            load("generation.jsonl", true)?,
            load("guidance.jsonl", false)?,
        )
        .with_source(dir))
    }

    pub fn new(generation: Vec<FixtureLine>, guidance: Vec<FixtureLine>) -> Self {
        Self {
            queues: Mutex::new([(generation, 0), (guidance, 0)]),
            source: PathBuf::from("<memory>"),
        }
    }

    fn with_source(mut self, dir: &Path) -> Self {
        self.source = dir.to_path_buf();
        self
    }
}

impl ChatTransport for ReplayTransport {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let mut queues = self.queues.lock().expect("replay queue lock");
        let (lines, next) = &mut queues[match request.role {
            Role::Generation => 0,
            Role::Guidance => 1,
        }];
        let line = lines.get(*next).ok_or_else(|| {
            TransportError::Fixture(format!(
                "no {:?} response left in {} after {} used",
                request.role,
                self.source.display(),
                next
            ))
        })?;
        *next += 1;
        Ok(ChatResponse {
            text: line.text.clone(),
            usage: line.usage,
        })
    }
}

/// Wraps a transport and totals the usage it reports.
pub struct MeteredTransport<T> {
    inner: T,
    total: Mutex<Usage>,
}

impl<T: ChatTransport> MeteredTransport<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            total: Mutex::new(Usage::default()),
        }
    }

    pub fn total(&self) -> Usage {
        *self.total.lock().expect("usage lock")
    }
}

impl<T: ChatTransport> ChatTransport for MeteredTransport<T> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let resp = self.inner.complete(request)?;
        *self.total.lock().expect("usage lock") += resp.usage;
        Ok(resp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    struct Scripted {
        replies: Vec<Result<(u16, String), String>>,
        calls: AtomicUsize,
    }

    impl HttpSend for Scripted {
        fn post_json(&self, _: &str, _: &str, body: &Value) -> Result<(u16, String), String> {
            assert_eq!(body["temperature"], 0.6);
            assert_eq!(body["messages"][0]["role"], "system");
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            self.replies[i.min(self.replies.len() - 1)].clone()
        }
    }

    fn ok_body() -> String {
        r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}],"usage":{"prompt_tokens":12,"completion_tokens":3}}"#.into()
    }

    fn request() -> ChatRequest {
        ChatRequest {
            role: Role::Generation,
            model: "m".into(),
            temperature: 0.6,
            system: "s".into(),
            user: "u".into(),
        }
    }

    struct Shared(Arc<Scripted>);

    impl HttpSend for Shared {
        fn post_json(&self, u: &str, k: &str, b: &Value) -> Result<(u16, String), String> {
            self.0.post_json(u, k, b)
        }
    }

    fn transport(replies: Vec<Result<(u16, String), String>>) -> (HttpTransport, Arc<Scripted>) {
        let sender = Arc::new(Scripted {
            replies,
            calls: AtomicUsize::new(0),
        });
        let t = HttpTransport::new("http://x", "k")
            .unwrap()
            .with_sender(Box::new(Shared(sender.clone())))
            .with_backoff(3, Duration::ZERO);
        (t, sender)
    }

    #[test]
    fn retries_once_after_429() {
        let (t, s) = transport(vec![Ok((429, "slow down".into())), Ok((200, ok_body()))]);
        let resp = t.complete(&request()).unwrap();
        assert_eq!(resp.text, "hi");
        assert_eq!(
            resp.usage,
            Usage {
                input_tokens: 12,
                output_tokens: 3
            }
        );
        assert_eq!(s.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn gives_up_after_three_attempts() {
        let (t, s) = transport(vec![Err("connection refused".into())]);
        assert!(matches!(
            t.complete(&request()),
            Err(TransportError::Exhausted { attempts: 3, .. })
        ));
        assert_eq!(s.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (t, s) = transport(vec![Ok((401, "bad key".into()))]);
        assert!(matches!(
            t.complete(&request()),
            Err(TransportError::Status { status: 401, .. })
        ));
        assert_eq!(s.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn empty_key_is_a_config_error() {
        assert!(matches!(
            HttpTransport::new("http://x", ""),
            Err(TransportError::Config(_))
        ));
    }

    #[test]
    fn replay_serves_each_role_in_order() {
        let line = |t: &str, n| FixtureLine {
            text: t.into(),
            usage: Usage {
                input_tokens: n,
                output_tokens: 1,
            },
        };
        let r = MeteredTransport::new(ReplayTransport::new(
            vec![line("g1", 10), line("g2", 20)],
            vec![line("h1", 5)],
        ));
        let mut req = request();
        assert_eq!(r.complete(&req).unwrap().text, "g1");
        req.role = Role::Guidance;
        assert_eq!(r.complete(&req).unwrap().text, "h1");
        assert!(matches!(r.complete(&req), Err(TransportError::Fixture(_))));
        req.role = Role::Generation;
        assert_eq!(r.complete(&req).unwrap().usage.input_tokens, 20);
        assert_eq!(
            r.total(),
            Usage {
                input_tokens: 35,
                output_tokens: 3
            }
        );
    }
}
