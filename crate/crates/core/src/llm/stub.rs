use std::sync::Mutex;

use serde::Deserialize;

use super::{BackendConfig, ChatMessage, RawCompletion, Role, StubOrTransport, Transport};
use crate::corpus::estimate_tokens;
use crate::records;

/// How a scripted entry selects the requests it answers. Matchers test
/// the content of the last user message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Matcher {
    Exact(String),
    Contains(String),
    /// Answers the next request not claimed by a keyed entry, once.
    Next,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StubEntry {
    pub matcher: Matcher,
    pub response: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryLine {
    #[serde(default)]
    exact: Option<String>,
    #[serde(default)]
    contains: Option<String>,
    response: String,
}

/// Ordered list of `(matcher, response)` records, one JSON object per line:
/// `{"contains": "...", "response": "..."}`, `{"exact": "...", "response": "..."}`
/// or `{"response": "..."}` for a positional entry.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StubScript {
    pub entries: Vec<StubEntry>,
}

impl StubScript {
    pub fn parse(text: &str) -> Result<Self, String> {
        let lines = records::parse_lines::<EntryLine>(text).map_err(|(line, e)| format!("line {line}: {e}"))?;
        let mut entries = Vec::new();
        for (line, rec) in lines {
            let matcher = match (rec.exact, rec.contains) {
                (Some(_), Some(_)) => return Err(format!("line {line}: use either 'exact' or 'contains'")),
                (Some(e), None) => Matcher::Exact(e),
                (None, Some(c)) if c.is_empty() => return Err(format!("line {line}: empty 'contains'")),
                (None, Some(c)) => Matcher::Contains(c),
                (None, None) => Matcher::Next,
            };
            entries.push(StubEntry {
                matcher,
                response: rec.response,
            });
        }
        Ok(StubScript { entries })
    }

    pub fn keyed(pairs: impl IntoIterator<Item = (impl Into<String>, impl Into<String>)>) -> Self {
        StubScript {
            entries: pairs
                .into_iter()
                .map(|(m, r)| StubEntry {
                    matcher: Matcher::Contains(m.into()),
                    response: r.into(),
                })
                .collect(),
        }
    }
}

/// Deterministic scripted backend. Usage is synthesized with the token
/// estimator so cost accounting can be exercised offline.
pub struct StubTransport {
    script: StubScript,
    cursor: Mutex<usize>,
}

impl StubTransport {
    pub fn new(script: StubScript) -> Self {
        StubTransport {
            script,
            cursor: Mutex::new(0),
        }
    }

    fn lookup(&self, user: &str) -> Option<&str> {
        let keyed = self.script.entries.iter().find(|e| match &e.matcher {
            Matcher::Exact(s) => s == user,
            Matcher::Contains(s) => user.contains(s.as_str()),
            Matcher::Next => false,
        });
        if let Some(e) = keyed {
            return Some(&e.response);
        }
        let mut cursor = self.cursor.lock().unwrap();
        let positional = self
            .script
            .entries
            .iter()
            .filter(|e| e.matcher == Matcher::Next)
            .nth(*cursor)?;
        *cursor += 1;
        Some(&positional.response)
    }
}

impl Transport for StubTransport {
    fn send(&self, messages: &[ChatMessage], _cfg: &BackendConfig) -> Result<RawCompletion, StubOrTransport> {
        let user = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let Some(response) = self.lookup(user) else {
            let excerpt: String = user.chars().take(80).collect();
            return Err(StubOrTransport::ScriptExhausted(excerpt));
        };
        let prompt_tokens = messages.iter().map(|m| estimate_tokens(&m.content) as u64).sum();
        Ok(RawCompletion {
            text: response.to_string(),
            prompt_tokens,
            completion_tokens: estimate_tokens(response) as u64,
        })
    }

    fn order_dependent(&self) -> bool {
        self.script.entries.iter().any(|e| e.matcher == Matcher::Next)
    }
}
