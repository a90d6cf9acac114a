//! Deterministic scripted oracle.
//!
//! A mock script is a JSON document of ordered rules; the first rule that
//! matches a prompt answers it.
//!
//! ```json
//! {
//!   "version": 1,
//!   "rules": [
//!     {
//!       "template": "next_action",
//!       "when": {"url": {"equals": "http://shop.local/"},
//!                "high_level_task": {"contains": "Electronics"}},
//!       "replies": [{"next_action": {"action": {"type": "CLICK", "element_id": 3}}}],
//!       "sequence_key": ["high_level_task"],
//!       "usage": {"prompt_tokens": 1200, "completion_tokens": 80}
//!     },
//!     {"template": "refine_task", "reply": {"Analysis": "", "Need-to-Refine": "no", "High-Level-Task": ""}}
//!   ]
//! }
//! ```
//!
//! * `template`, `fingerprint` and `when` must all hold for a rule to match.
//!   `when` keys are prompt variables, plus `_hint` for the corrective note of
//!   a re-request. A bare string matcher means `equals`.
//! * `reply` is a JSON value (serialized compactly) or a string sent verbatim.
//! * `replies` is consumed in order, one per match, per distinct value of the
//!   `sequence_key` variables; the last entry repeats once exhausted.
//! * `error` makes the first `error_times` matches (all, if unset) fail with a
//!   retryable transport error.
//! * Without `usage`, token counts are `ceil(chars / 4)` of prompt and reply.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use regex::Regex;
use serde::Deserialize;
use serde_json::Value;
use thiserror::Error;

use super::ledger::Usage;
use super::templates::{PromptTemplate, RenderedPrompt};
use super::transport::{ChatTransport, Completion, TransportError};

#[derive(Debug, Error)]
pub enum MockScriptError {
    #[error("cannot read mock script {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("mock script {path}: {message}")]
    Invalid { path: String, message: String },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Matcher {
    #[serde(default)]
    pub equals: Option<String>,
    #[serde(default)]
    pub contains: Option<String>,
    #[serde(default)]
    pub not_contains: Option<String>,
    #[serde(default)]
    pub regex: Option<String>,
    #[serde(skip)]
    compiled: Option<Regex>,
}

impl Matcher {
    fn matches(&self, value: &str) -> bool {
        self.equals.as_deref().is_none_or(|e| e == value)
            && self.contains.as_deref().is_none_or(|c| value.contains(c))
            && self.not_contains.as_deref().is_none_or(|c| !value.contains(c))
            && self.compiled.as_ref().is_none_or(|re| re.is_match(value))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum MatcherSpec {
    Equals(String),
    Full(Matcher),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleSpec {
    #[serde(default)]
    template: Option<String>,
    #[serde(default)]
    fingerprint: Option<String>,
    #[serde(default)]
    when: BTreeMap<String, MatcherSpec>,
    #[serde(default)]
    reply: Option<Value>,
    #[serde(default)]
    replies: Vec<Value>,
    #[serde(default)]
    sequence_key: Vec<String>,
    #[serde(default)]
    error: Option<String>,
    #[serde(default)]
    error_times: Option<usize>,
    #[serde(default)]
    usage: Option<Usage>,
    #[serde(default)]
    #[allow(dead_code)]
    note: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptSpec {
    #[serde(default = "one")]
    version: u32,
    rules: Vec<RuleSpec>,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone)]
pub struct MockRule {
    template: Option<PromptTemplate>,
    fingerprint: Option<String>,
    when: BTreeMap<String, Matcher>,
    replies: Vec<String>,
    sequence_key: Vec<String>,
    error: Option<String>,
    error_times: Option<usize>,
    usage: Option<Usage>,
}

fn reply_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => serde_json::to_string(other).expect("json value serializes"),
    }
}

impl MockRule {
    /// A rule answering every prompt of `template` with `reply`.
    pub fn always(template: PromptTemplate, reply: Value) -> MockRule {
        MockRule {
            template: Some(template),
            fingerprint: None,
            when: BTreeMap::new(),
            replies: vec![reply_text(&reply)],
            sequence_key: Vec::new(),
            error: None,
            error_times: None,
            usage: None,
        }
    }

    /// Answers successive matching prompts with successive replies.
    pub fn sequence(template: PromptTemplate, replies: impl IntoIterator<Item = Value>) -> MockRule {
        let mut rule = MockRule::always(template, Value::Null);
        rule.replies = replies.into_iter().map(|v| reply_text(&v)).collect();
        rule
    }

    pub fn when(mut self, var: &str, contains: &str) -> MockRule {
        self.when.insert(
            var.to_string(),
            Matcher {
                contains: Some(contains.to_string()),
                ..Matcher::default()
            },
        );
        self
    }

    pub fn keyed_by(mut self, var: &str) -> MockRule {
        self.sequence_key.push(var.to_string());
        self
    }

    pub fn with_usage(mut self, prompt_tokens: u64, completion_tokens: u64) -> MockRule {
        self.usage = Some(Usage {
            prompt_tokens,
            completion_tokens,
        });
        self
    }

    pub fn failing(mut self, error: &str, times: usize) -> MockRule {
        self.error = Some(error.to_string());
        self.error_times = Some(times);
        self
    }

    fn var<'a>(prompt: &'a RenderedPrompt, name: &str) -> &'a str {
        match name {
            "_hint" => prompt.hint.as_deref().unwrap_or(""),
            "_text" => &prompt.text,
            _ => prompt.vars.get(name).map(String::as_str).unwrap_or(""),
        }
    }

    fn matches(&self, prompt: &RenderedPrompt, fingerprint: &str) -> bool {
        self.template.is_none_or(|t| t == prompt.template)
            && self.fingerprint.as_deref().is_none_or(|f| fingerprint.starts_with(f))
            && self
                .when
                .iter()
                .all(|(name, m)| m.matches(Self::var(prompt, name)))
    }
}

/// Scripted rules; cloneable description, no runtime state.
#[derive(Debug, Clone, Default)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
}

impl MockScript {
    pub fn new(rules: Vec<MockRule>) -> Self {
        MockScript { rules }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<MockScript, MockScriptError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| MockScriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text).map_err(|message| MockScriptError::Invalid {
            path: path.display().to_string(),
            message,
        })
    }

    pub fn from_json(text: &str) -> Result<MockScript, String> {
        let spec: ScriptSpec = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if spec.version != 1 {
            return Err(format!("unsupported version {}", spec.version));
        }
        let mut rules = Vec::with_capacity(spec.rules.len());
        for (i, r) in spec.rules.into_iter().enumerate() {
            let template = r
                .template
                .as_deref()
                .map(str::parse::<PromptTemplate>)
                .transpose()
                .map_err(|e| format!("rules[{i}]: {e}"))?;
            let mut when = BTreeMap::new();
            for (name, spec) in r.when {
                let mut m = match spec {
                    MatcherSpec::Equals(s) => Matcher {
                        equals: Some(s),
                        ..Matcher::default()
                    },
                    MatcherSpec::Full(m) => m,
                };
                if let Some(re) = &m.regex {
                    m.compiled = Some(Regex::new(re).map_err(|e| format!("rules[{i}].when.{name}: {e}"))?);
                }
                when.insert(name, m);
            }
            let mut replies: Vec<String> = r.replies.iter().map(reply_text).collect();
            if let Some(v) = &r.reply {
                replies.insert(0, reply_text(v));
            }
            if replies.is_empty() && r.error.is_none() {
                return Err(format!("rules[{i}]: needs `reply`, `replies` or `error`"));
            }
            rules.push(MockRule {
                template,
                fingerprint: r.fingerprint,
                when,
                replies,
                sequence_key: r.sequence_key,
                error: r.error,
                error_times: r.error_times,
                usage: r.usage,
            });
        }
        Ok(MockScript { rules })
    }
}

fn approx_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

/// Transport answering from a [`MockScript`].
#[derive(Debug, Default)]
pub struct MockTransport {
    script: MockScript,
    counters: Mutex<HashMap<(usize, String), usize>>,
}

impl MockTransport {
    pub fn new(script: MockScript) -> Self {
        MockTransport {
            script,
            counters: Mutex::new(HashMap::new()),
        }
    }
}

impl ChatTransport for MockTransport {
    fn complete(&self, prompt: &RenderedPrompt) -> Result<Completion, TransportError> {
        let fingerprint = prompt.fingerprint();
        let (index, rule) = self
            .script
            .rules
            .iter()
            .enumerate()
            .find(|(_, r)| r.matches(prompt, &fingerprint))
            .ok_or_else(|| {
                TransportError::Fatal(format!(
                    "no scripted reply for {} prompt {}",
                    prompt.template,
                    &fingerprint[..12]
                ))
            })?;
        let key = rule
            .sequence_key
            .iter()
            .map(|k| MockRule::var(prompt, k))
            .collect::<Vec<_>>()
            .join("\u{1f}");
        let n = {
            let mut counters = self.counters.lock().expect("mock counters");
            let c = counters.entry((index, key)).or_insert(0);
            let n = *c;
            *c += 1;
            n
        };
        if let Some(err) = &rule.error {
            if rule.error_times.is_none_or(|t| n < t) {
                return Err(TransportError::Retryable(err.clone()));
            }
        }
        let offset = if rule.error.is_some() {
            n - rule.error_times.unwrap_or(0)
        } else {
            n
        };
        let text = rule.replies[offset.min(rule.replies.len() - 1)].clone();
        let usage = rule.usage.unwrap_or(Usage {
            prompt_tokens: approx_tokens(&prompt.text),
            completion_tokens: approx_tokens(&text),
        });
        Ok(Completion { text, usage })
    }
}
