//! Domain types shared by every pipeline stage.

use std::fmt;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action::{Action, ActionKind};

/// An addressable node of the current view.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Element {
    pub id: u32,
    pub role: String,
    pub name: String,
    pub interactive: bool,
}

impl Element {
    /// `[id] role "name"` as listed to the oracle.
    pub fn describe(&self) -> String {
        format!("[{}] {} \"{}\"", self.id, self.role, self.name)
    }
}

/// One environment snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub url: String,
    pub accessibility_tree: String,
    pub elements: Vec<Element>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub screenshot_ref: Option<String>,
}

impl Observation {
    pub fn element(&self, id: u32) -> Option<&Element> {
        self.elements.iter().find(|e| e.id == id)
    }

    /// Canonical serialization; two observations are the same view iff
    /// these bytes are equal.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("observation serializes")
    }

    /// Content address of the observation (hex SHA-256 of the canonical form).
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Element listing, one per line, in id order of appearance.
    pub fn element_listing(&self) -> String {
        self.elements
            .iter()
            .map(Element::describe)
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    InformationSeeking,
    SiteNavigation,
    ContentModification,
}

impl TaskType {
    /// Keyword classification of a task sentence.
    pub fn infer(text: &str) -> TaskType {
        let lower = text.trim().to_lowercase();
        const MODIFY: &[&str] = &[
            "add ", "create ", "post ", "update ", "edit ", "delete ", "remove ", "change ",
            "submit ", "write ", "set ", "sign up", "register ", "log in", "login ", "sign in",
            "subscribe", "place an order", "checkout", "leave a review", "rate ",
        ];
        const NAVIGATE: &[&str] = &["go to ", "navigate ", "open ", "visit ", "browse "];
        if MODIFY.iter().any(|k| lower.starts_with(k) || lower.contains(&format!(" and {k}"))) {
            TaskType::ContentModification
        } else if NAVIGATE.iter().any(|k| lower.starts_with(k)) {
            TaskType::SiteNavigation
        } else if MODIFY.iter().any(|k| lower.contains(k)) {
            TaskType::ContentModification
        } else {
            TaskType::InformationSeeking
        }
    }
}

/// What caused an in-flight task refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConflictTrigger {
    /// Elements implied by the task are absent or contradict observations.
    ExistsUI,
    /// The task lacks parameters that cannot be inferred.
    MissingArgs,
    /// Mechanical lack of progress.
    Stall,
}

impl fmt::Display for ConflictTrigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ConflictTrigger::ExistsUI => "exists_ui",
            ConflictTrigger::MissingArgs => "missing_args",
            ConflictTrigger::Stall => "stall",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Refinement {
    pub step_index: usize,
    pub prior_text: String,
    pub trigger: ConflictTrigger,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub site: String,
    pub text: String,
    pub category: String,
    pub task_type: TaskType,
    #[serde(default)]
    pub lineage: Vec<Refinement>,
    /// Triplet this task was proposed from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triplet_id: Option<String>,
}

impl Task {
    pub fn new(
        id: impl Into<String>,
        site: impl Into<String>,
        text: impl Into<String>,
        category: impl Into<String>,
    ) -> Self {
        let text = text.into();
        Task {
            id: id.into(),
            site: site.into(),
            task_type: TaskType::infer(&text),
            text,
            category: category.into(),
            lineage: Vec::new(),
            triplet_id: None,
        }
    }

    /// The proposal text before any refinement.
    pub fn original_text(&self) -> &str {
        self.lineage
            .first()
            .map(|r| r.prior_text.as_str())
            .unwrap_or(&self.text)
    }

    /// All task texts that were in force before the current one, oldest first.
    pub fn previous_texts(&self) -> Vec<&str> {
        self.lineage.iter().map(|r| r.prior_text.as_str()).collect()
    }

    /// Replaces the task text, recording the previous one. Lineage stays
    /// ordered by step index.
    pub fn refine(&mut self, step_index: usize, new_text: impl Into<String>, trigger: ConflictTrigger) {
        debug_assert!(self.lineage.last().is_none_or(|r| r.step_index <= step_index));
        let prior = std::mem::replace(&mut self.text, new_text.into());
        self.lineage.push(Refinement {
            step_index,
            prior_text: prior,
            trigger,
        });
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub observation: Observation,
    pub action: Action,
    /// Task text in force when the action was chosen.
    pub task_snapshot: String,
    #[serde(default)]
    pub reasoning: String,
    #[serde(default)]
    pub state_summary: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    CompletedNone,
    StoppedByAgent,
    BudgetExceeded,
}

impl Terminal {
    /// Pure classification of a step sequence under a step budget.
    pub fn classify(steps: &[Step], step_budget: usize) -> Terminal {
        match steps.last() {
            Some(s) if s.action.is_valid_completion() => Terminal::CompletedNone,
            Some(s) if steps.len() >= step_budget && !s.action.kind.is_terminal() => {
                Terminal::BudgetExceeded
            }
            _ => Terminal::StoppedByAgent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task: Task,
    pub steps: Vec<Step>,
    pub terminal: Terminal,
    pub refine_count: usize,
    pub cost_usd: Decimal,
}

impl Trajectory {
    pub fn new(task: Task, steps: Vec<Step>, step_budget: usize, cost_usd: Decimal) -> Self {
        let terminal = Terminal::classify(&steps, step_budget);
        Trajectory {
            refine_count: task.lineage.len(),
            task,
            steps,
            terminal,
            cost_usd,
        }
    }

    pub fn id(&self) -> &str {
        &self.task.id
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn ends_in_completion(&self) -> bool {
        self.steps.last().is_some_and(|s| s.action.is_valid_completion())
    }

    pub fn last_kind(&self) -> Option<ActionKind> {
        self.steps.last().map(|s| s.action.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionTriplet {
    pub before: Observation,
    pub action: Action,
    pub after: Observation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub observation: Observation,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub site: String,
    pub trajectory_id: String,
    pub step_index: usize,
}

/// One next-action supervision record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub task_text: String,
    /// Most recent last.
    pub history: Vec<HistoryEntry>,
    pub current_observation: Observation,
    pub target_action: Action,
    pub meta: ExampleMeta,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(url: &str) -> Observation {
        Observation {
            url: url.into(),
            accessibility_tree: String::new(),
            elements: vec![],
            screenshot_ref: None,
        }
    }

    fn step(i: usize, action: Action) -> Step {
        Step {
            index: i,
            observation: obs("http://x/"),
            action,
            task_snapshot: "t".into(),
            reasoning: String::new(),
            state_summary: String::new(),
        }
    }

    #[test]
    fn terminal_partition() {
        let done = vec![step(0, Action::click(1)), step(1, Action::none("ok"))];
        assert_eq!(Terminal::classify(&done, 30), Terminal::CompletedNone);
        let stopped = vec![step(0, Action::stop("impossible"))];
        assert_eq!(Terminal::classify(&stopped, 30), Terminal::StoppedByAgent);
        let exceeded: Vec<_> = (0..3).map(|i| step(i, Action::scroll("down"))).collect();
        assert_eq!(Terminal::classify(&exceeded, 3), Terminal::BudgetExceeded);
        let none_at_budget = vec![step(0, Action::click(1)), step(1, Action::none("x"))];
        assert_eq!(Terminal::classify(&none_at_budget, 2), Terminal::CompletedNone);
    }

    #[test]
    fn lineage_tracks_text() {
        let mut t = Task::new("s-1", "shop", "Sort the results", "Search & Filters");
        assert_eq!(t.original_text(), "Sort the results");
        t.refine(3, "Find the cheapest item", ConflictTrigger::ExistsUI);
        t.refine(5, "Find the cheapest charger", ConflictTrigger::MissingArgs);
        assert_eq!(t.text, "Find the cheapest charger");
        assert_eq!(t.original_text(), "Sort the results");
        assert_eq!(t.previous_texts(), vec!["Sort the results", "Find the cheapest item"]);
    }

    #[test]
    fn task_type_inference() {
        assert_eq!(
            TaskType::infer("What is the price of the cheapest USB-C cable?"),
            TaskType::InformationSeeking
        );
        assert_eq!(
            TaskType::infer("Navigate to the Health & Household category page"),
            TaskType::SiteNavigation
        );
        assert_eq!(
            TaskType::infer("Add the Anker charger to the shopping cart"),
            TaskType::ContentModification
        );
        assert_eq!(
            TaskType::infer("Log in with username 'emma' and view the account page"),
            TaskType::ContentModification
        );
    }

    #[test]
    fn content_hash_changes_with_tree() {
        let a = obs("http://x/");
        let mut b = a.clone();
        assert_eq!(a.content_hash(), b.content_hash());
        b.accessibility_tree.push('x');
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
