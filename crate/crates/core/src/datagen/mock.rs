//! Scripted stand-in for a chat endpoint.
//!
//! A script is JSON:
//!
//! ```json
//! {
//!   "rules": [
//!     {"match": "subtopics", "reply": "etiquette\nfestivals"},
//!     {"match": "passage 3 of", "error": "timeout"},
//!     {"match": "harm rating", "score": [1, 10]},
//!     {"match": "into natural, fluent Thai", "reply": "แปล: {input}"},
//!     {"match": "flaky", "fail_first": 2, "reply": "ok"}
//!   ],
//!   "default": "fallback reply"
//! }
//! ```
//!
//! The first rule whose `match` is a substring of the prompt answers. Replies
//! may use `{input}` (the prompt text after its last `---` line), `{prompt}`
//! and `{hash}`. `replies` picks one entry by prompt hash; `score` yields an
//! integer in the range derived from the prompt hash. `error` is `timeout`,
//! `status:<code>`, or any other text for a non-retryable failure.
//! Everything depends only on the prompt, so concurrent use stays
//! deterministic.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{AnnotationClient, ChatRequest, ClientError, DatagenError};
use crate::hashing::hash_str;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    #[serde(rename = "match")]
    pub pattern: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub replies: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<(i64, i64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Fail this many times per distinct prompt (with a timeout) before
    /// answering normally.
    #[serde(default)]
    pub fail_first: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
}

pub struct MockClient {
    script: MockScript,
    failures: Mutex<HashMap<String, u32>>,
    calls: Mutex<u64>,
}

fn payload(prompt: &str) -> &str {
    prompt.rsplit_once("\n---\n").map_or(prompt, |(_, p)| p).trim()
}

fn fill(template: &str, prompt: &str) -> String {
    template
        .replace("{input}", payload(prompt))
        .replace("{prompt}", prompt)
        .replace("{hash}", &hash_str(prompt, 0).to_string())
}

impl MockClient {
    pub fn new(script: MockScript) -> Self {
        MockClient {
            script,
            failures: Mutex::new(HashMap::new()),
            calls: Mutex::new(0),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, DatagenError> {
        serde_json::from_str(text)
            .map(Self::new)
            .map_err(|e| DatagenError::Invalid(format!("mock script: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self, DatagenError> {
        let text = std::fs::read_to_string(path).map_err(|e| DatagenError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Number of requests answered so far, failures included.
    pub fn calls(&self) -> u64 {
        *self.calls.lock().expect("calls lock")
    }

    fn answer(rule: &MockRule, prompt: &str) -> Result<String, ClientError> {
        if let Some(e) = &rule.error {
            return Err(match e.as_str() {
                "timeout" => ClientError::Timeout,
                s => match s.strip_prefix("status:").and_then(|c| c.parse().ok()) {
                    Some(code) => ClientError::Status(code),
                    None => ClientError::Scripted(s.to_string()),
                },
            });
        }
        let h = hash_str(prompt, 0);
        if let Some((lo, hi)) = rule.score {
            let span = (hi - lo + 1).max(1) as u64;
            return Ok((lo + (h % span) as i64).to_string());
        }
        if !rule.replies.is_empty() {
            return Ok(fill(&rule.replies[(h % rule.replies.len() as u64) as usize], prompt));
        }
        Ok(fill(rule.reply.as_deref().unwrap_or(""), prompt))
    }
}

impl AnnotationClient for MockClient {
    fn complete(&self, _request_id: &str, req: &ChatRequest) -> Result<String, ClientError> {
        *self.calls.lock().expect("calls lock") += 1;
        let prompt = req.prompt();
        let Some(rule) = self.script.rules.iter().find(|r| prompt.contains(&r.pattern)) else {
            return match &self.script.default {
                Some(d) => Ok(fill(d, &prompt)),
                None => Err(ClientError::Scripted("no mock rule matched".into())),
            };
        };
        if rule.fail_first > 0 {
            let mut f = self.failures.lock().expect("failure lock");
            let seen = f.entry(prompt.clone()).or_default();
            if *seen < rule.fail_first {
                *seen += 1;
                return Err(ClientError::Timeout);
            }
        }
        Self::answer(rule, &prompt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Message;

    fn req(p: &str) -> ChatRequest {
        ChatRequest {
            model: "m".into(),
            messages: vec![Message::user(p)],
            temperature: 0.0,
        }
    }

    #[test]
    fn rules_in_order() {
        let m = MockClient::from_json(
            r#"{"rules":[
                {"match":"alpha","reply":"A: {input}"},
                {"match":"score","score":[1,5]},
                {"match":"boom","error":"status:500"},
                {"match":"bad","error":"refused"}
            ]}"#,
        )
        .unwrap();
        assert_eq!(m.complete("r", &req("alpha\n---\nbody")).unwrap(), "A: body");
        let s: i64 = m.complete("r", &req("score me")).unwrap().parse().unwrap();
        assert!((1..=5).contains(&s));
        assert_eq!(m.complete("r", &req("score me")).unwrap(), s.to_string());
        assert_eq!(m.complete("r", &req("boom")), Err(ClientError::Status(500)));
        assert_eq!(m.complete("r", &req("bad")), Err(ClientError::Scripted("refused".into())));
        assert!(m.complete("r", &req("unmatched")).is_err());
        assert_eq!(m.calls(), 6);
    }

    #[test]
    fn fail_first_is_per_prompt() {
        let m = MockClient::from_json(r#"{"rules":[{"match":"x","fail_first":1,"reply":"ok"}]}"#).unwrap();
        assert_eq!(m.complete("r", &req("x1")), Err(ClientError::Timeout));
        assert_eq!(m.complete("r", &req("x2")), Err(ClientError::Timeout));
        assert_eq!(m.complete("r", &req("x1")).unwrap(), "ok");
    }

    #[test]
    fn rejects_unknown_fields() {
        assert!(MockClient::from_json(r#"{"rules":[{"match":"x","replyy":"ok"}]}"#).is_err());
    }
}
