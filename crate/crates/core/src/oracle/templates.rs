//! Prompt templates shipped as data files under `prompts/`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::OracleError;

/// Template format version; bump when a body changes.
pub const TEMPLATE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTemplate {
    Categorize,
    ProposeTask,
    NextAction,
    RefineTask,
    RefineTrajectory,
    JudgeDiversity,
}

impl PromptTemplate {
    pub const ALL: [PromptTemplate; 6] = [
        PromptTemplate::Categorize,
        PromptTemplate::ProposeTask,
        PromptTemplate::NextAction,
        PromptTemplate::RefineTask,
        PromptTemplate::RefineTrajectory,
        PromptTemplate::JudgeDiversity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptTemplate::Categorize => "categorize",
            PromptTemplate::ProposeTask => "propose_task",
            PromptTemplate::NextAction => "next_action",
            PromptTemplate::RefineTask => "refine_task",
            PromptTemplate::RefineTrajectory => "refine_trajectory",
            PromptTemplate::JudgeDiversity => "judge_diversity",
        }
    }

    pub fn body(self) -> &'static str {
        match self {
            PromptTemplate::Categorize => include_str!("../../prompts/categorize.txt"),
            PromptTemplate::ProposeTask => include_str!("../../prompts/propose_task.txt"),
            PromptTemplate::NextAction => include_str!("../../prompts/next_action.txt"),
            PromptTemplate::RefineTask => include_str!("../../prompts/refine_task.txt"),
            PromptTemplate::RefineTrajectory => include_str!("../../prompts/refine_trajectory.txt"),
            PromptTemplate::JudgeDiversity => include_str!("../../prompts/judge_diversity.txt"),
        }
    }

    /// Distinct placeholder names in order of first appearance.
    pub fn placeholders(self) -> Vec<&'static str> {
        let mut seen = BTreeSet::new();
        placeholder_re()
            .captures_iter(self.body())
            .map(|c| c.get(1).unwrap().as_str())
            .filter(|name| seen.insert(*name))
            .collect()
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptTemplate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptTemplate::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown template `{s}`"))
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").unwrap())
}

/// A fully bound prompt, ready to send.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub template: PromptTemplate,
    pub text: String,
    /// The variables the prompt was rendered from (kept for mock matching).
    pub vars: BTreeMap<String, String>,
    /// Screenshot handles to attach.
    pub images: Vec<String>,
    /// Corrective note appended on a re-request.
    pub hint: Option<String>,
}

impl RenderedPrompt {
    /// Hex SHA-256 over the template name and the rendered text.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.template.name().as_bytes());
        h.update([0]);
        h.update(self.text.as_bytes());
        hex::encode(h.finalize())
    }

    /// The same prompt with a corrective note appended.
    pub fn with_hint(&self, hint: impl Into<String>) -> RenderedPrompt {
        let hint = hint.into();
        let mut next = self.clone();
        next.text = format!(
            "{}\n\nNOTE: your previous reply was rejected: {hint}\nReturn a corrected JSON object only.",
            self.text
        );
        next.hint = Some(hint);
        next
    }
}

/// Substitutes every `{placeholder}` of the template. Values are inserted
/// verbatim and never re-scanned.
pub fn render(
    template: PromptTemplate,
    vars: &BTreeMap<String, String>,
    images: &[String],
) -> Result<RenderedPrompt, OracleError> {
    let body = template.body();
    if let Some(missing) = template
        .placeholders()
        .into_iter()
        .find(|p| !vars.contains_key(*p))
    {
        return Err(OracleError::MissingPlaceholder {
            template,
            name: missing.to_string(),
        });
    }
    let text = placeholder_re()
        .replace_all(body, |caps: &regex::Captures<'_>| vars[&caps[1]].clone())
        .into_owned();
    Ok(RenderedPrompt {
        template,
        text,
        vars: vars.clone(),
        images: images.to_vec(),
        hint: None,
    })
}

/// Builds a variable map from string pairs.
pub fn vars<K: Into<String>, V: Into<String>>(pairs: impl IntoIterator<Item = (K, V)>) -> BTreeMap<String, String> {
    pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect()
}
