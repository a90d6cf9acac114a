//! Categorized exploration: categorize each page's elements, sample a few
//! unvisited ones per category, record what they do, and propose a task
//! from every recorded interaction.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::env::{EnvError, Environment, TransitionOutcome};
use crate::model::{InteractionTriplet, Observation, Task, TaskType};
use crate::oracle::{
    render, vars, Oracle, OracleError, PromptTemplate, ProposedInteraction, ReplySchema,
    UNINTERACTIVE_CATEGORY,
};

/// Interactions sampled per category and page.
pub const PER_CATEGORY: usize = 2;

/// Placeholder used when the environment provides no screenshot.
pub const NO_SCREENSHOT: &str = "(no screenshot available; rely on the accessibility tree)";

#[derive(Debug, Error)]
pub enum ExploreError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("page {url} has no elements to categorize")]
    NoElements { url: String },
    #[error("categorization of {url} produced no interactive elements")]
    EmptyPlan { url: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplorerBudget {
    pub max_pages: usize,
    pub max_tasks: usize,
}

impl Default for ExplorerBudget {
    fn default() -> Self {
        ExplorerBudget {
            max_pages: 50,
            max_tasks: 500,
        }
    }
}

/// What the proposal prompt is told about the site.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteBrief {
    pub name: String,
    pub intro: String,
    pub task_examples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryPlan {
    pub page_url: String,
    pub categories: BTreeMap<String, Vec<ProposedInteraction>>,
    pub uninteractive: Vec<u32>,
}

impl CategoryPlan {
    pub fn interaction_count(&self) -> usize {
        self.categories.values().map(Vec::len).sum()
    }
}

/// Discovered urls in discovery order, each with its depth.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UrlPool {
    discovered: Vec<(String, usize)>,
    visited: BTreeSet<String>,
    #[serde(skip)]
    queue: VecDeque<usize>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl UrlPool {
    pub fn new(start_url: &str) -> Self {
        let mut pool = UrlPool::default();
        pool.push(start_url, 0);
        pool
    }

    fn push(&mut self, url: &str, depth: usize) {
        self.index.insert(url.to_string(), self.discovered.len());
        self.queue.push_back(self.discovered.len());
        self.discovered.push((url.to_string(), depth));
    }

    /// Adds `url` one level below `parent`; returns false if already known.
    pub fn discover(&mut self, url: &str, parent: &str) -> bool {
        if self.index.contains_key(url) {
            return false;
        }
        let depth = self.depth(parent).map_or(0, |d| d + 1);
        self.push(url, depth);
        true
    }

    pub fn depth(&self, url: &str) -> Option<usize> {
        self.index.get(url).map(|&i| self.discovered[i].1)
    }

    /// Next unvisited url in discovery (breadth-first) order, marked visited.
    pub fn next_unvisited(&mut self) -> Option<(String, usize)> {
        while let Some(i) = self.queue.pop_front() {
            let (url, depth) = &self.discovered[i];
            if self.visited.insert(url.clone()) {
                return Some((url.clone(), *depth));
            }
        }
        None
    }

    pub fn discovered(&self) -> &[(String, usize)] {
        &self.discovered
    }

    pub fn visited(&self) -> &BTreeSet<String> {
        &self.visited
    }

    pub fn len(&self) -> usize {
        self.discovered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.discovered.is_empty()
    }
}

/// Element ids already interacted with, per url.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitLedger {
    seen: BTreeMap<String, BTreeSet<u32>>,
}

impl VisitLedger {
    pub fn is_visited(&self, url: &str, element_id: u32) -> bool {
        self.seen.get(url).is_some_and(|s| s.contains(&element_id))
    }

    pub fn mark(&mut self, url: &str, element_id: u32) {
        self.seen.entry(url.to_string()).or_default().insert(element_id);
    }

    pub fn visited_on(&self, url: &str) -> usize {
        self.seen.get(url).map_or(0, BTreeSet::len)
    }
}

/// A triplet as persisted, with where it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub id: String,
    pub site: String,
    pub depth: usize,
    pub category: String,
    pub outcome: TransitionOutcome,
    pub triplet: InteractionTriplet,
}

fn image_info(obs: &Observation) -> String {
    match &obs.screenshot_ref {
        Some(r) => format!("attached ({r})"),
        None => NO_SCREENSHOT.to_string(),
    }
}

fn images(obs: &[&Observation]) -> Vec<String> {
    obs.iter().filter_map(|o| o.screenshot_ref.clone()).collect()
}

/// Asks the oracle to group the page's elements into task categories.
pub fn categorize_page(oracle: &Oracle, obs: &Observation) -> Result<CategoryPlan, ExploreError> {
    if obs.elements.is_empty() {
        return Err(ExploreError::NoElements { url: obs.url.clone() });
    }
    let v = vars([
        ("url", obs.url.clone()),
        ("page_context", obs.accessibility_tree.clone()),
        ("elements", obs.element_listing()),
        ("img_info", image_info(obs)),
        ("element_num", obs.elements.len().to_string()),
        ("const_uninteractive_category", UNINTERACTIVE_CATEGORY.to_string()),
    ]);
    let prompt = render(PromptTemplate::Categorize, &v, &images(&[obs]))?;
    let schema = ReplySchema::Categorize {
        element_ids: obs.elements.iter().map(|e| e.id).collect(),
    };
    let (reply, _) = oracle.call_categorize(&prompt, &schema)?;
    let plan = CategoryPlan {
        page_url: obs.url.clone(),
        categories: reply.categories,
        uninteractive: reply.uninteractive,
    };
    if plan.interaction_count() == 0 {
        return Err(ExploreError::EmptyPlan { url: obs.url.clone() });
    }
    Ok(plan)
}

/// Picks up to [`PER_CATEGORY`] unvisited interactions from every category,
/// uniformly without replacement. Categories are visited in name order and
/// picks keep their plan order, so the result depends only on the plan, the
/// ledger and the generator state.
pub fn sample_interactions<R: Rng + ?Sized>(
    plan: &CategoryPlan,
    ledger: &VisitLedger,
    rng: &mut R,
) -> Vec<ProposedInteraction> {
    let mut out = Vec::new();
    for interactions in plan.categories.values() {
        let unvisited: Vec<&ProposedInteraction> = interactions
            .iter()
            .filter(|p| !ledger.is_visited(&plan.page_url, p.element_id()))
            .collect();
        let k = unvisited.len().min(PER_CATEGORY);
        let mut picks = rand::seq::index::sample(rng, unvisited.len(), k).into_vec();
        picks.sort_unstable();
        out.extend(picks.into_iter().map(|i| unvisited[i].clone()));
    }
    out
}

/// Brings the session back to `url` before the next interaction.
fn restore(env: &mut dyn Environment, url: &str) -> Result<Observation, EnvError> {
    env.execute(&Action::goto(url))?;
    env.observe()
}

/// Executes each interaction from the page at `page_url`, restoring the page
/// in between. Newly reached urls join the pool one level deeper.
///
/// `next_id` yields the id of each recorded triplet. Interactions whose
/// element is missing are skipped and reported in `diagnostics`.
#[allow(clippy::too_many_arguments)]
pub fn collect_triplets(
    env: &mut dyn Environment,
    site: &str,
    page_url: &str,
    interactions: &[ProposedInteraction],
    pool: &mut UrlPool,
    ledger: &mut VisitLedger,
    next_id: &mut dyn FnMut() -> String,
    diagnostics: &mut Vec<String>,
) -> Result<Vec<TripletRecord>, EnvError> {
    let depth = pool.depth(page_url).unwrap_or(0);
    let mut out = Vec::new();
    for (i, p) in interactions.iter().enumerate() {
        let before = if i == 0 { env.observe()? } else { restore(env, page_url)? };
        if before.url != page_url {
            diagnostics.push(format!("could not restore {page_url}; stopped at {}", before.url));
            break;
        }
        let outcome = match env.execute(&p.action) {
            Ok(o) => o,
            Err(EnvError::ElementNotFound(id)) => {
                diagnostics.push(format!("{page_url}: element {id} vanished; skipped {}", p.action));
                continue;
            }
            Err(e) => return Err(e),
        };
        ledger.mark(page_url, p.element_id());
        let after = env.observe()?;
        if outcome.error.is_none() {
            pool.discover(&after.url, page_url);
        }
        out.push(TripletRecord {
            id: next_id(),
            site: site.to_string(),
            depth,
            category: p.category.clone(),
            outcome,
            triplet: InteractionTriplet {
                before,
                action: p.action.clone(),
                after,
            },
        });
    }
    Ok(out)
}

fn action_description(t: &InteractionTriplet) -> String {
    let a = &t.action;
    let target = a
        .element_id
        .and_then(|id| t.before.element(id))
        .map(|e| format!(" on {}", e.describe()))
        .unwrap_or_default();
    let mut s = format!("{a}{target}");
    if !a.low_level_instruction.is_empty() {
        s.push_str(&format!(" ({})", a.low_level_instruction));
    }
    s.push_str(&format!("; page went from {} to {}", t.before.url, t.after.url));
    s
}

/// Asks the oracle for one high-level task grounded in `record`.
pub fn propose_task(
    oracle: &Oracle,
    brief: &SiteBrief,
    record: &TripletRecord,
    task_id: &str,
) -> Result<Task, OracleError> {
    let t = &record.triplet;
    let examples = brief
        .task_examples
        .iter()
        .map(|e| format!("\"{e}\""))
        .collect::<Vec<_>>()
        .join("; ");
    let v = vars([
        ("website_intro", brief.intro.clone()),
        ("task_examples", examples),
        ("current_action_str", action_description(t)),
        ("website_name", brief.name.clone()),
        ("before_img_info", image_info(&t.before)),
        ("after_img_info", image_info(&t.after)),
    ]);
    let prompt = render(PromptTemplate::ProposeTask, &v, &images(&[&t.before, &t.after]))?;
    let (reply, _) = oracle.call_propose_task(&prompt, &ReplySchema::ProposeTask)?;
    let mut task = Task::new(task_id, &record.site, reply.high_level_instruction, &record.category);
    task.task_type = TaskType::infer(&task.text);
    task.triplet_id = Some(record.id.clone());
    Ok(task)
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Default)]
pub struct Exploration {
    pub triplets: Vec<TripletRecord>,
    pub tasks: Vec<Task>,
    pub pool: UrlPool,
    pub ledger: VisitLedger,
    pub diagnostics: Vec<String>,
}

pub fn task_id(site: &str, index: usize) -> String {
    format!("{site}-t{index:04}")
}

pub fn triplet_id(site: &str, index: usize) -> String {
    format!("{site}-x{index:04}")
}

/// Breadth-first exploration of one site until either budget is reached.
///
/// Oracle failures on a page or a triplet are recorded as diagnostics and
/// exploration continues; an exhausted token budget or a broken environment
/// ends it.
pub fn explore<R: Rng + ?Sized>(
    env: &mut dyn Environment,
    oracle: &Oracle,
    brief: &SiteBrief,
    budget: ExplorerBudget,
    rng: &mut R,
) -> Result<Exploration, ExploreError> {
    env.reset()?;
    let start = env.observe()?;
    let mut ex = Exploration {
        pool: UrlPool::new(&start.url),
        ..Exploration::default()
    };
    let mut seen_texts = BTreeSet::new();
    let mut pages = 0;
    let mut n_triplets = 0;
    while pages < budget.max_pages && ex.tasks.len() < budget.max_tasks {
        let Some((url, _depth)) = ex.pool.next_unvisited() else { break };
        pages += 1;
        let obs = restore(env, &url)?;
        if obs.url != url {
            ex.diagnostics.push(format!("{url}: navigation landed on {}", obs.url));
            continue;
        }
        let plan = match categorize_page(oracle, &obs) {
            Ok(p) => p,
            Err(ExploreError::Oracle(e @ OracleError::BudgetExhausted { .. })) => return Err(e.into()),
            Err(ExploreError::Env(e)) => return Err(e.into()),
            Err(e) => {
                ex.diagnostics.push(format!("{url}: {e}"));
                continue;
            }
        };
        let picks = sample_interactions(&plan, &ex.ledger, rng);
        let mut next_id = || {
            n_triplets += 1;
            triplet_id(&brief.name, n_triplets)
        };
        let records = collect_triplets(
            env,
            &brief.name,
            &url,
            &picks,
            &mut ex.pool,
            &mut ex.ledger,
            &mut next_id,
            &mut ex.diagnostics,
        )?;
        for record in records {
            if ex.tasks.len() >= budget.max_tasks {
                ex.triplets.push(record);
                continue;
            }
            match propose_task(oracle, brief, &record, &task_id(&brief.name, ex.tasks.len() + 1)) {
                Ok(task) => {
                    if seen_texts.insert(normalize_ws(&task.text).to_lowercase()) {
                        ex.tasks.push(task);
                    } else {
                        ex.diagnostics.push(format!("{}: duplicate task text dropped", record.id));
                    }
                }
                Err(e @ OracleError::BudgetExhausted { .. }) => return Err(e.into()),
                Err(e) => ex.diagnostics.push(format!("{}: {e}", record.id)),
            }
            ex.triplets.push(record);
        }
    }
    Ok(ex)
}
