//! Scripted backend for tests and offline dry runs.
//!
//! A script is a list of rules. A rule matches a call by request index, by
//! substrings of the rendered prompt, or both; the first matching rule answers.
//! Each rule walks through its replies one per call it serves and then keeps
//! repeating the last one. Calls that match no rule use `default`.
//!
//! ```json
//! {
//!   "delay_ms": 0,
//!   "rules": [
//!     {"contains": ["\"inst_03\"", "Husky"], "replies": [{"status": 503}, {"text": "{\"inst_03\": 2}"}]},
//!     {"index": 7, "replies": ["timeout"]}
//!   ],
//!   "default": [{"text": "I cannot tell."}]
//! }
//! ```

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{AttemptError, Backend, BackendReply, CallContext, GatewayError, VlmRequest};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockReply {
    Text(String),
    Status(u16),
    NetworkError(String),
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<u64>,
    /// Every listed substring must occur in the prompt text.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    pub replies: Vec<MockReply>,
}

impl MockRule {
    pub fn containing(needle: &str, replies: Vec<MockReply>) -> Self {
        MockRule {
            index: None,
            contains: vec![needle.to_string()],
            replies,
        }
    }

    pub fn at_index(index: u64, replies: Vec<MockReply>) -> Self {
        MockRule {
            index: Some(index),
            contains: Vec::new(),
            replies,
        }
    }

    fn matches(&self, prompt_text: &str, request_index: u64) -> bool {
        self.index.is_none_or(|i| i == request_index)
            && self.contains.iter().all(|c| prompt_text.contains(c.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub default: Vec<MockReply>,
    /// Simulated service time per call.
    #[serde(default)]
    pub delay_ms: u64,
}

impl MockScript {
    pub fn always(reply: MockReply) -> Self {
        Self::always_seq(vec![reply])
    }

    pub fn always_seq(replies: Vec<MockReply>) -> Self {
        MockScript {
            rules: Vec::new(),
            default: replies,
            delay_ms: 0,
        }
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MockStats {
    pub attempts: usize,
    pub max_in_flight: usize,
}

pub struct MockBackend {
    script: MockScript,
    /// Calls served so far by each rule; the last slot is the default.
    served: Mutex<Vec<usize>>,
    attempts: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        let slots = script.rules.len() + 1;
        MockBackend {
            script,
            served: Mutex::new(vec![0; slots]),
            attempts: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
        }
    }

    pub fn stats(&self) -> MockStats {
        MockStats {
            attempts: self.attempts.load(Ordering::SeqCst),
            max_in_flight: self.max_in_flight.load(Ordering::SeqCst),
        }
    }

    fn pick(&self, prompt_text: &str, request_index: u64) -> Option<MockReply> {
        let rule = self
            .script
            .rules
            .iter()
            .position(|r| r.matches(prompt_text, request_index));
        let (slot, replies) = match rule {
            Some(i) => (i, &self.script.rules[i].replies),
            None => (self.script.rules.len(), &self.script.default),
        };
        let n = {
            let mut served = self.served.lock().unwrap_or_else(|e| e.into_inner());
            let n = served[slot];
            served[slot] += 1;
            n
        };
        replies.get(n.min(replies.len().checked_sub(1)?)).cloned()
    }
}

impl Backend for MockBackend {
    fn call(
        &self,
        request: &VlmRequest,
        _model_tag: &str,
        ctx: CallContext,
    ) -> Result<BackendReply, AttemptError> {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        if self.script.delay_ms > 0 {
            thread::sleep(Duration::from_millis(self.script.delay_ms));
        }
        let reply = self.pick(&request.prompt.full_text(), ctx.request_index);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        match reply {
            Some(MockReply::Text(text)) => Ok(BackendReply {
                text,
                metadata: Default::default(),
            }),
            Some(MockReply::Status(code)) => Err(AttemptError::Status {
                code,
                body: "scripted".into(),
            }),
            Some(MockReply::NetworkError(m)) => Err(AttemptError::Network(m)),
            Some(MockReply::Timeout) => Err(AttemptError::Timeout),
            None => Err(AttemptError::Status {
                code: 404,
                body: "no scripted reply".into(),
            }),
        }
    }
}
