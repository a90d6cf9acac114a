//! Site-graph documents: the simulator's description of a website.
//!
//! A site graph is a JSON document:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "name": "shop",
//!   "start_page": "home",
//!   "pages": {
//!     "home": {
//!       "url": "http://shop.local/",
//!       "tree_template": "RootWebArea \"Shop\"\n  link \"Login\" [1]",
//!       "elements": [{"id": 1, "role": "link", "name": "Login", "interactive": true}],
//!       "transitions": [
//!         {"element_id": 1, "kind": "click", "effect": {"goto": "login"}}
//!       ],
//!       "below_fold": {"tree_template": "...", "elements": []},
//!       "error_text": null
//!     }
//!   }
//! }
//! ```
//!
//! Templates (`tree_template`, element names, `set` values) may reference
//! session state as `{{key}}`; unknown keys render as the empty string.
//! `$value` inside a `set` value is replaced by the action's value.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::ActionKind;
use crate::model::Element;

pub const SITE_GRAPH_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SiteGraphError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> SiteGraphError {
    SiteGraphError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteGraph {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub start_page: String,
    pub pages: BTreeMap<String, PageSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PageSpec {
    pub url: String,
    pub tree_template: String,
    pub elements: Vec<Element>,
    #[serde(default)]
    pub transitions: Vec<Transition>,
    /// Content revealed by scrolling down.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub below_fold: Option<BelowFold>,
    /// Error banner reported when this page is reached.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_text: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BelowFold {
    pub tree_template: String,
    #[serde(default)]
    pub elements: Vec<Element>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transition {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element_id: Option<u32>,
    pub kind: ActionKind,
    /// Anchored regex over the action value; absent matches everything.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_pattern: Option<String>,
    /// Guard on session state: key -> required value, `*` meaning any
    /// non-empty value and the empty string meaning unset.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub when: BTreeMap<String, String>,
    #[serde(default)]
    pub effect: Effect,
    #[serde(skip)]
    pub(crate) matcher: Option<Regex>,
}

/// What a transition does. An empty effect is a no-op.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Effect {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub set: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goto: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Transition {
    pub(crate) fn value_matches(&self, value: &str) -> bool {
        self.matcher.as_ref().is_none_or(|re| re.is_match(value))
    }

    pub(crate) fn guard_holds(&self, state: &BTreeMap<String, String>) -> bool {
        self.when.iter().all(|(key, want)| {
            let have = state.get(key).map(String::as_str).unwrap_or("");
            match want.as_str() {
                "*" => !have.is_empty(),
                _ => have == want,
            }
        })
    }
}

impl PageSpec {
    pub fn all_elements(&self) -> impl Iterator<Item = &Element> {
        self.elements
            .iter()
            .chain(self.below_fold.iter().flat_map(|b| b.elements.iter()))
    }
}

impl SiteGraph {
    /// Reads and validates a site-graph file.
    pub fn load(path: impl AsRef<Path>) -> Result<SiteGraph, SiteGraphError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| SiteGraphError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn from_json(text: &str, origin: &str) -> Result<SiteGraph, SiteGraphError> {
        let mut graph: SiteGraph =
            serde_json::from_str(text).map_err(|e| SiteGraphError::Parse {
                path: origin.to_string(),
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?;
        graph.validate()?;
        Ok(graph)
    }

    /// Checks every structural rule and compiles value patterns.
    pub fn validate(&mut self) -> Result<(), SiteGraphError> {
        if self.schema_version != SITE_GRAPH_SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!(
                    "unsupported version {} (expected {SITE_GRAPH_SCHEMA_VERSION})",
                    self.schema_version
                ),
            ));
        }
        if self.pages.is_empty() {
            return Err(invalid("pages", "at least one page is required"));
        }
        if !self.pages.contains_key(&self.start_page) {
            return Err(invalid(
                "start_page",
                format!("`{}` is not a page", self.start_page),
            ));
        }
        let page_ids: BTreeSet<String> = self.pages.keys().cloned().collect();
        let mut urls = BTreeMap::new();
        for (page_id, page) in self.pages.iter_mut() {
            let field = format!("pages.{page_id}");
            if let Some(other) = urls.insert(page.url.clone(), page_id.clone()) {
                return Err(invalid(
                    format!("{field}.url"),
                    format!("url `{}` already used by page `{other}`", page.url),
                ));
            }
            if page.elements.is_empty() {
                return Err(invalid(format!("{field}.elements"), "page has no elements"));
            }
            let mut ids = BTreeSet::new();
            for (i, el) in page.all_elements().enumerate() {
                if !ids.insert(el.id) {
                    return Err(invalid(
                        format!("{field}.elements[{i}]"),
                        format!("duplicate element id {}", el.id),
                    ));
                }
                if el.interactive && el.role.is_empty() && el.name.is_empty() {
                    return Err(invalid(
                        format!("{field}.elements[{i}]"),
                        "interactive element needs a role or a name",
                    ));
                }
            }
            for (i, tr) in page.transitions.iter_mut().enumerate() {
                let tfield = format!("{field}.transitions[{i}]");
                match (tr.kind.targets_element(), tr.element_id) {
                    (true, None) => {
                        return Err(invalid(
                            format!("{tfield}.element_id"),
                            format!("{} transitions need an element id", tr.kind),
                        ))
                    }
                    (false, Some(_)) => {
                        return Err(invalid(
                            format!("{tfield}.element_id"),
                            format!("{} transitions take no element id", tr.kind),
                        ))
                    }
                    (true, Some(id)) if !ids.contains(&id) => {
                        return Err(invalid(
                            format!("{tfield}.element_id"),
                            format!("element {id} does not exist on this page"),
                        ))
                    }
                    _ => {}
                }
                if let Some(target) = &tr.effect.goto {
                    if !page_ids.contains(target) {
                        return Err(invalid(
                            format!("{tfield}.effect.goto"),
                            format!("dangling transition target `{target}`"),
                        ));
                    }
                }
                if let Some(pattern) = &tr.value_pattern {
                    let re = Regex::new(&format!("^(?:{pattern})$")).map_err(|e| {
                        invalid(format!("{tfield}.value_pattern"), e.to_string())
                    })?;
                    tr.matcher = Some(re);
                }
            }
        }
        Ok(())
    }

    pub fn page(&self, page_id: &str) -> Option<&PageSpec> {
        self.pages.get(page_id)
    }

    /// Page whose url equals `url`, ignoring a trailing slash.
    pub fn page_by_url(&self, url: &str) -> Option<&str> {
        let want = url.trim_end_matches('/');
        self.pages
            .iter()
            .find(|(_, p)| p.url.trim_end_matches('/') == want)
            .map(|(id, _)| id.as_str())
    }
}
