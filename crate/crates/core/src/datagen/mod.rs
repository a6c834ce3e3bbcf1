//! LLM-driven data generation behind a pluggable chat client: safety dataset
//! construction, corpus annotation and textbook-rewrite selection.

pub mod annotate;
pub mod http;
pub mod mock;
pub mod safety;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpClient;
pub use mock::MockClient;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
}

impl ChatRequest {
    /// Concatenated message contents; what mock rules match against.
    pub fn prompt(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ClientError {
    #[error("request timed out")]
    Timeout,
    #[error("transport: {0}")]
    Transport(String),
    #[error("HTTP status {0}")]
    Status(u16),
    #[error("malformed response: {0}")]
    Response(String),
    #[error("environment variable {0} is not set")]
    MissingKey(String),
    #[error("{0}")]
    Scripted(String),
}

impl ClientError {
    pub fn retryable(&self) -> bool {
        match self {
            ClientError::Timeout | ClientError::Transport(_) => true,
            ClientError::Status(s) => *s == 429 || *s >= 500,
            _ => false,
        }
    }
}

/// Anything that can answer a chat request. Implementations must be safe to
/// call from several threads at once.
pub trait AnnotationClient: Sync {
    fn complete(&self, request_id: &str, req: &ChatRequest) -> Result<String, ClientError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            initial_backoff_ms: 500,
            multiplier: 2.0,
            max_backoff_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_wait(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            initial_backoff_ms: 0,
            ..RetryPolicy::default()
        }
    }

    /// Delay before attempt `attempt + 1` (attempts count from 1).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self.initial_backoff_ms as f64 * self.multiplier.powi(attempt.saturating_sub(1) as i32);
        Duration::from_millis(ms.min(self.max_backoff_ms as f64) as u64)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DatagenError {
    #[error("{request_id}: gave up after {attempts} attempts: {last}")]
    Exhausted {
        request_id: String,
        attempts: u32,
        last: ClientError,
    },
    #[error("subtopics for {topic:?}: {source}")]
    Subtopics {
        topic: String,
        #[source]
        source: Box<DatagenError>,
    },
    #[error("{0}: model returned nothing usable")]
    EmptyOutput(String),
    #[error("no integer in [{lo}, {hi}] in reply {reply:?}")]
    Unparseable { reply: String, lo: i64, hi: i64 },
    #[error("score {0} outside [1, 10]")]
    ScoreRange(i64),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("template {0:?} not found")]
    Template(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub request_id: String,
    pub template: String,
    pub attempt: u32,
    pub latency_ms: u64,
    pub ok: bool,
    /// Reply (or error) cut to 200 characters.
    pub reply: String,
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotatorConfig {
    pub model: String,
    pub temperature: f64,
    pub retry: RetryPolicy,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        AnnotatorConfig {
            model: "annotator".into(),
            temperature: 0.0,
            retry: RetryPolicy::default(),
        }
    }
}

/// A client plus retry policy and an audit trail of every attempt.
pub struct Annotator<'c> {
    client: &'c dyn AnnotationClient,
    pub config: AnnotatorConfig,
    pub templates: Templates,
    audit: Mutex<Vec<AuditRecord>>,
}

impl<'c> Annotator<'c> {
    pub fn new(client: &'c dyn AnnotationClient, config: AnnotatorConfig) -> Self {
        Annotator {
            client,
            config,
            templates: Templates::builtin(),
            audit: Mutex::new(Vec::new()),
        }
    }

    pub fn with_templates(mut self, templates: Templates) -> Self {
        self.templates = templates;
        self
    }

    /// Renders `template` with `vars` and sends it, retrying transient errors.
    pub fn call(&self, template: &str, request_id: &str, vars: &[(&str, &str)]) -> Result<String, DatagenError> {
        let prompt = self.templates.render(template, vars)?;
        let req = ChatRequest {
            model: self.config.model.clone(),
            messages: vec![Message::user(prompt)],
            temperature: self.config.temperature,
        };
        let max = self.config.retry.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            let started = Instant::now();
            let result = self.client.complete(request_id, &req);
            let latency_ms = started.elapsed().as_millis() as u64;
            let (ok, reply) = match &result {
                Ok(r) => (true, truncate(r, 200)),
                Err(e) => (false, truncate(&e.to_string(), 200)),
            };
            log::debug!("{request_id} attempt {attempt}: ok={ok} {latency_ms}ms");
            self.audit.lock().expect("audit lock").push(AuditRecord {
                request_id: request_id.to_string(),
                template: self.templates.id(template),
                attempt,
                latency_ms,
                ok,
                reply,
            });
            match result {
                Ok(r) => return Ok(r),
                Err(e) if e.retryable() && attempt < max => {
                    std::thread::sleep(self.config.retry.backoff(attempt));
                    attempt += 1;
                }
                Err(e) => {
                    return Err(DatagenError::Exhausted {
                        request_id: request_id.to_string(),
                        attempts: attempt,
                        last: e,
                    })
                }
            }
        }
    }

    /// Audit records ordered by request id then attempt, independent of
    /// scheduling.
    pub fn audit(&self) -> Vec<AuditRecord> {
        let mut out = self.audit.lock().expect("audit lock").clone();
        out.sort_by(|a, b| a.request_id.cmp(&b.request_id).then(a.attempt.cmp(&b.attempt)));
        out
    }
}

const BUILTIN: &[(&str, &str)] = &[
    ("subtopics.v1", include_str!("../../templates/subtopics.v1.txt")),
    ("text.v1", include_str!("../../templates/text.v1.txt")),
    ("harm.v1", include_str!("../../templates/harm.v1.txt")),
    ("translate.v1", include_str!("../../templates/translate.v1.txt")),
    ("annotate.v1", include_str!("../../templates/annotate.v1.txt")),
    ("textbook.v1", include_str!("../../templates/textbook.v1.txt")),
];

/// Prompt templates keyed by `name.vN`. A bare name resolves to the highest
/// version present.
#[derive(Debug, Clone, PartialEq)]
pub struct Templates {
    by_id: BTreeMap<String, String>,
}

fn split_id(id: &str) -> (&str, u32) {
    match id.rsplit_once(".v") {
        Some((name, v)) => match v.parse() {
            Ok(n) => (name, n),
            Err(_) => (id, 0),
        },
        None => (id, 0),
    }
}

impl Templates {
    pub fn builtin() -> Self {
        Templates {
            by_id: BUILTIN.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    /// Builtins overlaid with every `*.txt` in `dir` (file stem is the id).
    pub fn with_overrides(dir: &Path) -> Result<Self, DatagenError> {
        let mut t = Self::builtin();
        let entries = fs::read_dir(dir).map_err(|e| DatagenError::Io(format!("{}: {e}", dir.display())))?;
        for entry in entries {
            let path = entry.map_err(|e| DatagenError::Io(e.to_string()))?.path();
            if path.extension().is_some_and(|e| e == "txt") {
                let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                let text = fs::read_to_string(&path).map_err(|e| DatagenError::Io(format!("{}: {e}", path.display())))?;
                t.by_id.insert(id, text);
            }
        }
        Ok(t)
    }

    /// Full versioned id for `name` (or `name` itself when already versioned).
    pub fn id(&self, name: &str) -> String {
        if self.by_id.contains_key(name) {
            return name.to_string();
        }
        self.by_id
            .keys()
            .filter(|k| split_id(k).0 == name)
            .max_by_key(|k| split_id(k).1)
            .cloned()
            .unwrap_or_else(|| name.to_string())
    }

    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> Result<String, DatagenError> {
        let id = self.id(name);
        let mut text = self.by_id.get(&id).ok_or_else(|| DatagenError::Template(name.to_string()))?.clone();
        for (k, v) in vars {
            text = text.replace(&format!("{{{k}}}"), v);
        }
        Ok(text)
    }
}

/// Every integer appearing in `reply`, in order (a leading `-` counts).
fn integers(reply: &str) -> impl Iterator<Item = i64> + '_ {
    let bytes = reply.as_bytes();
    let mut i = 0;
    std::iter::from_fn(move || {
        while i < bytes.len() {
            if bytes[i].is_ascii_digit() {
                let start = if i > 0 && bytes[i - 1] == b'-' { i - 1 } else { i };
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if let Ok(v) = reply[start..i].parse() {
                    return Some(v);
                }
            } else {
                i += 1;
            }
        }
        None
    })
}

/// First integer in `[lo, hi]` found in the reply.
pub fn parse_score(reply: &str, lo: i64, hi: i64) -> Result<i64, DatagenError> {
    integers(reply).find(|v| (lo..=hi).contains(v)).ok_or(DatagenError::Unparseable {
        reply: truncate(reply, 200),
        lo,
        hi,
    })
}

/// First integer in the reply, whatever its value.
pub fn first_integer(reply: &str) -> Option<i64> {
    integers(reply).next()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Flaky {
        fails: Mutex<u32>,
    }

    impl AnnotationClient for Flaky {
        fn complete(&self, _: &str, req: &ChatRequest) -> Result<String, ClientError> {
            let mut f = self.fails.lock().unwrap();
            if *f > 0 {
                *f -= 1;
                return Err(ClientError::Status(503));
            }
            Ok(format!("len={}", req.prompt().len()))
        }
    }

    #[test]
    fn score_parsing() {
        assert_eq!(parse_score("7", 1, 10), Ok(7));
        assert_eq!(parse_score("score: 3/10", 1, 10), Ok(3));
        assert_eq!(parse_score("Rating 15, no wait, 8", 1, 10), Ok(8));
        assert!(matches!(parse_score("harmless", 1, 10), Err(DatagenError::Unparseable { .. })));
        assert_eq!(first_integer("label -2"), Some(-2));
        assert_eq!(first_integer("none"), None);
    }

    #[test]
    fn retries_then_succeeds_and_audits() {
        let client = Flaky { fails: Mutex::new(2) };
        let a = Annotator::new(
            &client,
            AnnotatorConfig {
                retry: RetryPolicy::no_wait(3),
                ..AnnotatorConfig::default()
            },
        );
        assert!(a.call("harm", "harm-0001", &[("text", "hi")]).is_ok());
        let audit = a.audit();
        assert_eq!(audit.len(), 3);
        assert_eq!(audit.iter().filter(|r| r.ok).count(), 1);
        assert_eq!(audit[0].template, "harm.v1");
    }

    #[test]
    fn gives_up_after_max_attempts() {
        let client = Flaky { fails: Mutex::new(10) };
        let a = Annotator::new(
            &client,
            AnnotatorConfig {
                retry: RetryPolicy::no_wait(3),
                ..AnnotatorConfig::default()
            },
        );
        let err = a.call("harm", "harm-0001", &[("text", "hi")]).unwrap_err();
        assert!(matches!(err, DatagenError::Exhausted { attempts: 3, .. }));
    }

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy {
            max_attempts: 10,
            initial_backoff_ms: 100,
            multiplier: 2.0,
            max_backoff_ms: 500,
        };
        assert_eq!(p.backoff(1), Duration::from_millis(100));
        assert_eq!(p.backoff(3), Duration::from_millis(400));
        assert_eq!(p.backoff(6), Duration::from_millis(500));
    }

    #[test]
    fn templates_render_and_override() {
        let t = Templates::builtin();
        assert_eq!(t.id("text"), "text.v1");
        let p = t.render("text", &[("subtopic", "temple etiquette"), ("topic", "religion"), ("index", "1"), ("n", "3")]).unwrap();
        assert!(p.contains("temple etiquette"));
        assert!(!p.contains("{subtopic}"));
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("text.v2.txt"), "v2 {subtopic}").unwrap();
        let t = Templates::with_overrides(dir.path()).unwrap();
        assert_eq!(t.id("text"), "text.v2");
        assert_eq!(t.render("text", &[("subtopic", "x")]).unwrap(), "v2 x");
        assert_eq!(t.render("text.v1", &[]).unwrap(), Templates::builtin().render("text", &[]).unwrap());
        assert!(matches!(t.render("nope", &[]), Err(DatagenError::Template(_))));
    }
}
