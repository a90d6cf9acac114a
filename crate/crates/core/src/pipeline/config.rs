//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//! workers = 2
//! run_root = "runs"            # relative paths resolve against this file
//!
//! [oracle]
//! endpoint = "https://api.openai.com/v1"
//! model = "gpt-4.1"
//! api_key_env = "OPENAI_API_KEY"
//! mock_script = "mock.json"    # optional; replaces the endpoint entirely
//! [oracle.pricing]
//! input_per_mtok = "2.00"
//! output_per_mtok = "8.00"
//!
//! [collector]
//! step_budget = 30
//!
//! [explorer]
//! max_tasks = 500
//!
//! [[sites]]
//! name = "shop"
//! site_graph = "shop.site.json"   # or: browser_endpoint = "http://localhost:4444"
//! start_url = "http://shop.local/" # browser sites only
//! website_intro = "An online store."
//! task_examples = ["Find the price of the cheapest USB cable."]
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::collector::CollectorConfig;
use crate::dataset::DEFAULT_WINDOW;
use crate::explorer::ExplorerBudget;
use crate::oracle::Pricing;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default = "default_run_root")]
    pub run_root: PathBuf,
    /// Run directory name; defaults to `run-{seed}`.
    #[serde(default)]
    pub run_id: Option<String>,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub collector: CollectorConfig,
    #[serde(default)]
    pub explorer: ExplorerBudget,
    #[serde(default)]
    pub export: ExportSection,
    #[serde(default)]
    pub stats: StatsSection,
    pub sites: Vec<SiteConfig>,
}

fn one() -> usize {
    1
}

fn default_run_root() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the API key; keys never live in the file.
    pub api_key_env: Option<String>,
    /// Decoding temperature; omitted from requests when unset.
    pub temperature: Option<f64>,
    pub mock_script: Option<PathBuf>,
    pub pricing: Pricing,
    pub max_in_flight: usize,
    pub max_total_tokens: Option<u64>,
    pub max_retries: u32,
    pub max_reparse: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            endpoint: "https://api.openai.com/v1".into(),
            model: "gpt-4.1".into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            temperature: None,
            mock_script: None,
            pricing: Pricing::default(),
            max_in_flight: 4,
            max_total_tokens: None,
            max_retries: 3,
            max_reparse: 2,
            backoff_ms: 1000,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSection {
    pub window: usize,
}

impl Default for ExportSection {
    fn default() -> Self {
        ExportSection { window: DEFAULT_WINDOW }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSection {
    /// Ask the oracle for a per-site diversity score.
    pub judge_diversity: bool,
}

impl Default for StatsSection {
    fn default() -> Self {
        StatsSection { judge_diversity: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteConfig {
    pub name: String,
    #[serde(default)]
    pub site_graph: Option<PathBuf>,
    #[serde(default)]
    pub browser_endpoint: Option<String>,
    /// Where a browser session starts; required with `browser_endpoint`.
    #[serde(default)]
    pub start_url: Option<String>,
    #[serde(default)]
    pub website_intro: String,
    #[serde(default)]
    pub task_examples: Vec<String>,
}

impl RunConfig {
    /// Reads, resolves relative paths against the file's directory, and
    /// validates.
    pub fn load(path: &Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let mut cfg = RunConfig::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<RunConfig, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.run_root);
        if let Some(p) = self.oracle.mock_script.as_mut() {
            fix(p);
        }
        for s in &mut self.sites {
            if let Some(p) = s.site_graph.as_mut() {
                fix(p);
            }
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.workers == 0 {
            return Err("workers must be at least 1".into());
        }
        if self.sites.is_empty() {
            return Err("at least one [[sites]] entry is required".into());
        }
        let mut names = BTreeSet::new();
        for s in &self.sites {
            if s.name.is_empty() || !s.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(format!("site name {:?} must be non-empty [A-Za-z0-9_-]", s.name));
            }
            if !names.insert(&s.name) {
                return Err(format!("duplicate site name {:?}", s.name));
            }
            match (&s.site_graph, &s.browser_endpoint) {
                (Some(_), None) => {}
                (None, Some(_)) if s.start_url.is_some() => {}
                (None, Some(_)) => return Err(format!("site {:?}: browser sites need start_url", s.name)),
                _ => {
                    return Err(format!(
                        "site {:?}: exactly one of site_graph and browser_endpoint is required",
                        s.name
                    ))
                }
            }
        }
        self.collector.validate()?;
        if self.explorer.max_pages == 0 || self.explorer.max_tasks == 0 {
            return Err("explorer budgets must be positive".into());
        }
        if self.export.window == 0 {
            return Err("export.window must be positive".into());
        }
        if self.oracle.max_in_flight == 0 {
            return Err("oracle.max_in_flight must be positive".into());
        }
        Ok(())
    }

    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| format!("run-{}", self.seed))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.run_root.join(self.run_id())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [[sites]]
        name = "shop"
        site_graph = "shop.json"
    "#;

    #[test]
    fn defaults() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.workers, 1);
        assert_eq!(cfg.collector.step_budget, 30);
        assert_eq!(cfg.export.window, 3);
        assert_eq!(cfg.explorer.max_tasks, 500);
        assert_eq!(cfg.oracle.max_retries, 3);
        assert_eq!(cfg.oracle.max_reparse, 2);
        assert_eq!(cfg.run_id(), "run-0");
    }

    #[test]
    fn rejects_ambiguous_site() {
        let err = RunConfig::from_toml(
            r#"
            [[sites]]
            name = "shop"
            site_graph = "a.json"
            browser_endpoint = "http://localhost:4444"
        "#,
        )
        .unwrap_err();
        assert!(err.contains("exactly one"), "{err}");
    }

    #[test]
    fn rejects_zero_workers_and_unknown_keys() {
        assert!(RunConfig::from_toml(&format!("workers = 0\n{MINIMAL}")).is_err());
        assert!(RunConfig::from_toml(&format!("wokers = 2\n{MINIMAL}")).is_err());
    }

    #[test]
    fn pricing_parses_as_decimal() {
        let cfg = RunConfig::from_toml(&format!(
            "[oracle.pricing]\ninput_per_mtok = \"2.00\"\noutput_per_mtok = \"8.00\"\n{MINIMAL}"
        ))
        .unwrap();
        assert_eq!(cfg.oracle.pricing.output_per_mtok.to_string(), "8.00");
    }
}
