//! Typed oracle replies and their schema checks.
//!
//! Each parser takes the JSON object recovered by
//! [`extract_json`](super::extract_json) and either returns a reply whose
//! invariants hold or a `SchemaViolation` describing the first problem.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::templates::PromptTemplate;
use super::OracleError;
use crate::action::{Action, ActionKind};

/// Name of the category holding non-interactive element ids.
pub const UNINTERACTIVE_CATEGORY: &str = "Uninteractive";

/// What a reply must conform to, with the context needed to check it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplySchema {
    Categorize { element_ids: Vec<u32> },
    ProposeTask,
    NextAction,
    RefineTask,
    RefineTrajectory { steps: usize },
    JudgeDiversity,
}

impl ReplySchema {
    pub fn template(&self) -> PromptTemplate {
        match self {
            ReplySchema::Categorize { .. } => PromptTemplate::Categorize,
            ReplySchema::ProposeTask => PromptTemplate::ProposeTask,
            ReplySchema::NextAction => PromptTemplate::NextAction,
            ReplySchema::RefineTask => PromptTemplate::RefineTask,
            ReplySchema::RefineTrajectory { .. } => PromptTemplate::RefineTrajectory,
            ReplySchema::JudgeDiversity => PromptTemplate::JudgeDiversity,
        }
    }

    pub fn parse(&self, value: &Value) -> Result<ParsedReply, OracleError> {
        let obj = value
            .as_object()
            .ok_or_else(|| violation("reply is not a JSON object"))?;
        Ok(match self {
            ReplySchema::Categorize { element_ids } => {
                ParsedReply::Categorization(CategorizationReply::parse(obj, element_ids)?)
            }
            ReplySchema::ProposeTask => ParsedReply::TaskProposal(TaskProposal::parse(obj)?),
            ReplySchema::NextAction => ParsedReply::NextAction(NextActionReply::parse(obj)?),
            ReplySchema::RefineTask => ParsedReply::RefineTask(RefineTaskReply::parse(obj)?),
            ReplySchema::RefineTrajectory { steps } => {
                ParsedReply::RefineTrajectory(RefineTrajectoryReply::parse(obj, *steps)?)
            }
            ReplySchema::JudgeDiversity => ParsedReply::Diversity(DiversityReply::parse(obj)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParsedReply {
    Categorization(CategorizationReply),
    TaskProposal(TaskProposal),
    NextAction(NextActionReply),
    RefineTask(RefineTaskReply),
    RefineTrajectory(RefineTrajectoryReply),
    Diversity(DiversityReply),
}

fn violation(msg: impl Into<String>) -> OracleError {
    OracleError::SchemaViolation(msg.into())
}

fn req<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a Value, OracleError> {
    obj.get(key)
        .ok_or_else(|| violation(format!("missing field \"{key}\"")))
}

fn req_str(obj: &Map<String, Value>, key: &str) -> Result<String, OracleError> {
    req(obj, key)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| violation(format!("field \"{key}\" must be a string")))
}

fn opt_str(obj: &Map<String, Value>, key: &str) -> Result<String, OracleError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(String::new()),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(violation(format!("field \"{key}\" must be a string"))),
    }
}

fn req_int(obj: &Map<String, Value>, key: &str, lo: i64, hi: i64) -> Result<i64, OracleError> {
    let n = req(obj, key)?
        .as_i64()
        .ok_or_else(|| violation(format!("field \"{key}\" must be an integer")))?;
    if !(lo..=hi).contains(&n) {
        return Err(violation(format!("field \"{key}\" = {n} is outside {lo}..={hi}")));
    }
    Ok(n)
}

fn opt_bool(obj: &Map<String, Value>, key: &str) -> Result<bool, OracleError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(false),
        Some(Value::Bool(b)) => Ok(*b),
        Some(_) => Err(violation(format!("field \"{key}\" must be a boolean"))),
    }
}

/// `"yes"` / `"no"` in any letter case.
fn yes_no(obj: &Map<String, Value>, key: &str) -> Result<bool, OracleError> {
    let s = req_str(obj, key)?;
    match s.trim().to_ascii_lowercase().as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err(violation(format!("field \"{key}\" must be \"yes\" or \"no\", got \"{s}\""))),
    }
}

/// Element ids arrive as integers, numeric strings, or `''` for none.
fn element_id(v: Option<&Value>) -> Result<Option<u32>, OracleError> {
    match v {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) if s.trim().is_empty() => Ok(None),
        Some(Value::String(s)) => s
            .trim()
            .trim_matches(|c| c == '[' || c == ']')
            .parse::<u32>()
            .map(Some)
            .map_err(|_| violation(format!("element_id \"{s}\" is not an integer"))),
        Some(Value::Number(n)) => n
            .as_u64()
            .and_then(|n| u32::try_from(n).ok())
            .map(Some)
            .ok_or_else(|| violation(format!("element_id {n} is not a non-negative integer"))),
        Some(other) => Err(violation(format!("element_id has unsupported type: {other}"))),
    }
}

fn value_string(v: Option<&Value>) -> Result<String, OracleError> {
    match v {
        None | Some(Value::Null) => Ok(String::new()),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(other) => Err(violation(format!("value has unsupported type: {other}"))),
    }
}

/// One proposed interaction from a categorization reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposedInteraction {
    pub category: String,
    pub action: Action,
}

impl ProposedInteraction {
    pub fn element_id(&self) -> u32 {
        self.action.element_id.expect("categorized actions target elements")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorizationReply {
    pub analysis: String,
    /// Category name -> interactions, in category-name order.
    pub categories: BTreeMap<String, Vec<ProposedInteraction>>,
    pub uninteractive: Vec<u32>,
}

impl CategorizationReply {
    fn parse(obj: &Map<String, Value>, element_ids: &[u32]) -> Result<Self, OracleError> {
        let analysis = opt_str(obj, "Analysis")?;
        let cats = req(obj, "Categorization")?
            .as_object()
            .ok_or_else(|| violation("\"Categorization\" must be an object"))?;
        let known: BTreeSet<u32> = element_ids.iter().copied().collect();
        let mut used = BTreeSet::new();
        let mut claim = |id: u32, where_: &str| -> Result<(), OracleError> {
            if !known.contains(&id) {
                return Err(violation(format!("{where_}: element {id} is not on the page")));
            }
            if !used.insert(id) {
                return Err(violation(format!("{where_}: element {id} appears in two categories")));
            }
            Ok(())
        };

        let mut categories = BTreeMap::new();
        let mut uninteractive = Vec::new();
        for (name, entries) in cats {
            let list = entries
                .as_array()
                .ok_or_else(|| violation(format!("category \"{name}\" must be a list")))?;
            if name.eq_ignore_ascii_case(UNINTERACTIVE_CATEGORY) {
                for v in list {
                    let id = element_id(Some(v))?
                        .ok_or_else(|| violation("uninteractive entries must be element ids"))?;
                    claim(id, name)?;
                    uninteractive.push(id);
                }
                continue;
            }
            let mut interactions = Vec::new();
            for entry in list {
                let e = entry
                    .as_object()
                    .ok_or_else(|| violation(format!("category \"{name}\" entries must be objects")))?;
                let kind: ActionKind = req_str(e, "action")?
                    .parse()
                    .map_err(|_| violation(format!("category \"{name}\": unknown action")))?;
                if !kind.targets_element() {
                    return Err(violation(format!(
                        "category \"{name}\": action must be CLICK, TYPE or HOVER, got {kind}"
                    )));
                }
                let id = element_id(e.get("element_id"))?
                    .ok_or_else(|| violation(format!("category \"{name}\": missing element_id")))?;
                claim(id, name)?;
                let value = if kind == ActionKind::Type {
                    value_string(e.get("value"))?
                } else {
                    String::new()
                };
                let action = Action {
                    kind,
                    element_id: Some(id),
                    value,
                    low_level_instruction: opt_str(e, "low-level_instruction")?,
                };
                action
                    .validate()
                    .map_err(|err| violation(format!("category \"{name}\": {err}")))?;
                interactions.push(ProposedInteraction {
                    category: name.clone(),
                    action,
                });
            }
            if !interactions.is_empty() {
                categories.insert(name.clone(), interactions);
            }
        }
        // Elements the reply did not mention are not proposed for interaction.
        for id in element_ids {
            if !used.contains(id) {
                uninteractive.push(*id);
            }
        }
        Ok(CategorizationReply {
            analysis,
            categories,
            uninteractive,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskProposal {
    pub sub_instruction: String,
    pub analysis: String,
    pub high_level_instruction: String,
}

impl TaskProposal {
    fn parse(obj: &Map<String, Value>) -> Result<Self, OracleError> {
        let high = req_str(obj, "High-Level-Instruction")?;
        if high.trim().is_empty() {
            return Err(violation("\"High-Level-Instruction\" is empty"));
        }
        Ok(TaskProposal {
            sub_instruction: opt_str(obj, "Sub-Instruction")?,
            analysis: opt_str(obj, "Analysis")?,
            high_level_instruction: high.trim().to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextActionReply {
    pub state_observation_summary: String,
    pub reasoning: String,
    pub action: Action,
}

impl NextActionReply {
    fn parse(obj: &Map<String, Value>) -> Result<Self, OracleError> {
        let next = req(obj, "next_action")?
            .as_object()
            .ok_or_else(|| violation("\"next_action\" must be an object"))?;
        let act = req(next, "action")?
            .as_object()
            .ok_or_else(|| violation("\"next_action.action\" must be an object"))?;
        let kind: ActionKind = req_str(act, "type")?
            .parse()
            .map_err(|e| violation(format!("next_action.action.type: {e}")))?;
        let element_id = if kind.targets_element() {
            element_id(act.get("element_id"))?
        } else {
            None
        };
        let value = if kind.requires_value() {
            value_string(act.get("value"))?
        } else {
            String::new()
        };
        let value = if kind == ActionKind::Scroll {
            value.trim().to_ascii_lowercase()
        } else {
            value
        };
        let action = Action {
            kind,
            element_id,
            value,
            low_level_instruction: opt_str(next, "low-level_instruction")?,
        };
        action
            .validate()
            .map_err(|e| violation(format!("next_action.action: {e}")))?;
        Ok(NextActionReply {
            state_observation_summary: opt_str(obj, "state_observation_summary")?,
            reasoning: opt_str(obj, "reasoning")?,
            action,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineTaskReply {
    pub analysis: String,
    pub need_to_refine: bool,
    pub high_level_task: String,
}

impl RefineTaskReply {
    fn parse(obj: &Map<String, Value>) -> Result<Self, OracleError> {
        let need = yes_no(obj, "Need-to-Refine")?;
        let task = opt_str(obj, "High-Level-Task")?.trim().to_string();
        if need && task.is_empty() {
            return Err(violation("Need-to-Refine is \"yes\" but High-Level-Task is empty"));
        }
        if !need && !task.is_empty() {
            return Err(violation("Need-to-Refine is \"no\" but High-Level-Task is not empty"));
        }
        Ok(RefineTaskReply {
            analysis: opt_str(obj, "Analysis")?,
            need_to_refine: need,
            high_level_task: task,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineDecision {
    Keep,
    Refine,
    Drop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineTrajectoryReply {
    pub task: String,
    pub score: u8,
    pub decision: RefineDecision,
    pub order: Vec<usize>,
    pub modify_end: bool,
    pub append_end: bool,
    pub final_none_value: String,
    pub drop_reason: String,
    pub modification_reason: String,
}

impl RefineTrajectoryReply {
    /// A drop decision synthesized locally (e.g. for an unparseable reply).
    pub fn local_drop(reason: impl Into<String>) -> Self {
        RefineTrajectoryReply {
            task: String::new(),
            score: 0,
            decision: RefineDecision::Drop,
            order: Vec::new(),
            modify_end: false,
            append_end: false,
            final_none_value: String::new(),
            drop_reason: reason.into(),
            modification_reason: String::new(),
        }
    }

    /// Checks the reply against a trajectory of `steps` steps.
    pub fn validate(&self, steps: usize) -> Result<(), OracleError> {
        if self.score > 100 {
            return Err(violation(format!("score {} is outside 0..=100", self.score)));
        }
        let mut seen = BTreeSet::new();
        for &i in &self.order {
            if i >= steps {
                return Err(violation(format!("order index {i} is out of range 0..{steps}")));
            }
            if !seen.insert(i) {
                return Err(violation(format!("order index {i} is duplicated")));
            }
        }
        match self.decision {
            RefineDecision::Keep => {
                if !self.order.iter().copied().eq(0..steps) {
                    return Err(violation("decision keep requires the identity order"));
                }
            }
            RefineDecision::Drop => {
                if !self.order.is_empty() {
                    return Err(violation("decision drop requires an empty order"));
                }
                if self.drop_reason.trim().is_empty() {
                    return Err(violation("decision drop requires a drop_reason"));
                }
            }
            RefineDecision::Refine => {}
        }
        if self.decision != RefineDecision::Drop && self.final_none_value.trim().is_empty() {
            return Err(violation("keep/refine require a non-empty final_none_value"));
        }
        Ok(())
    }

    fn parse(obj: &Map<String, Value>, steps: usize) -> Result<Self, OracleError> {
        let decision = match req_str(obj, "decision")?.trim().to_ascii_lowercase().as_str() {
            "keep" => RefineDecision::Keep,
            "refine" => RefineDecision::Refine,
            "drop" => RefineDecision::Drop,
            other => return Err(violation(format!("unknown decision \"{other}\""))),
        };
        let order = req(obj, "order")?
            .as_array()
            .ok_or_else(|| violation("\"order\" must be a list"))?
            .iter()
            .map(|v| {
                v.as_u64()
                    .map(|n| n as usize)
                    .ok_or_else(|| violation(format!("order entry {v} is not a non-negative integer")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let score = match obj.get("score") {
            None | Some(Value::Null) => 0,
            Some(_) => req_int(obj, "score", 0, 100)? as u8,
        };
        let reply = RefineTrajectoryReply {
            task: opt_str(obj, "task")?,
            score,
            decision,
            order,
            modify_end: opt_bool(obj, "modify_end")?,
            append_end: opt_bool(obj, "append_end")?,
            final_none_value: opt_str(obj, "final_none_value")?,
            drop_reason: opt_str(obj, "drop_reason")?,
            modification_reason: opt_str(obj, "modification_reason")?,
        };
        reply.validate(steps)?;
        Ok(reply)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiversitySubscores {
    pub intent_variety: u8,
    pub action_diversity: u8,
    pub goal_coverage: u8,
    pub redundancy_minimization: u8,
}

impl DiversitySubscores {
    pub fn total(&self) -> u32 {
        [
            self.intent_variety,
            self.action_diversity,
            self.goal_coverage,
            self.redundancy_minimization,
        ]
        .iter()
        .map(|&s| u32::from(s))
        .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiversityReply {
    pub score: u8,
    pub subscores: DiversitySubscores,
    pub analysis: String,
    pub representative_examples: Vec<String>,
}

impl DiversityReply {
    fn parse(obj: &Map<String, Value>) -> Result<Self, OracleError> {
        let score = req_int(obj, "score", 0, 100)? as u8;
        let subs = req(obj, "subscores")?
            .as_object()
            .ok_or_else(|| violation("\"subscores\" must be an object"))?;
        let sub = |k: &str| req_int(subs, k, 0, 25).map(|v| v as u8);
        let subscores = DiversitySubscores {
            intent_variety: sub("intent_variety")?,
            action_diversity: sub("action_diversity")?,
            goal_coverage: sub("goal_coverage")?,
            redundancy_minimization: sub("redundancy_minimization")?,
        };
        if u32::from(score) != subscores.total() {
            return Err(violation(format!(
                "score {score} does not equal the subscore sum {}",
                subscores.total()
            )));
        }
        let representative_examples = match obj.get("representative_examples") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| {
                    v.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| violation("representative_examples must be strings"))
                })
                .collect::<Result<_, _>>()?,
            Some(_) => return Err(violation("representative_examples must be a list")),
        };
        Ok(DiversityReply {
            score,
            subscores,
            analysis: opt_str(obj, "analysis")?,
            representative_examples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn refine_traj(v: Value, k: usize) -> Result<RefineTrajectoryReply, OracleError> {
        match (ReplySchema::RefineTrajectory { steps: k }).parse(&v)? {
            ParsedReply::RefineTrajectory(r) => Ok(r),
            _ => unreachable!(),
        }
    }

    fn base(decision: &str, order: Value) -> Value {
        json!({
            "task": "t", "score": 70, "decision": decision, "order": order,
            "modify_end": false, "append_end": false,
            "final_none_value": "answer", "drop_reason": "", "modification_reason": "r"
        })
    }

    #[test]
    fn refine_trajectory_order_rules() {
        assert!(refine_traj(base("refine", json!([0, 2, 1])), 3).is_ok());
        assert!(refine_traj(base("refine", json!([0, 0, 1])), 3).is_err());
        assert!(refine_traj(base("refine", json!([0, 3])), 3).is_err());
        assert!(refine_traj(base("refine", json!([-1])), 3).is_err());
        assert!(refine_traj(base("keep", json!([0, 1, 2])), 3).is_ok());
        assert!(refine_traj(base("keep", json!([0, 2, 1])), 3).is_err());
        let mut drop = base("drop", json!([]));
        assert!(refine_traj(drop.clone(), 3).is_err(), "needs drop_reason");
        drop["drop_reason"] = json!("too noisy");
        drop["final_none_value"] = json!("");
        assert!(refine_traj(drop, 3).is_ok());
    }

    #[test]
    fn refine_trajectory_missing_decision() {
        let mut v = base("keep", json!([0]));
        v.as_object_mut().unwrap().remove("decision");
        let err = refine_traj(v, 1).unwrap_err();
        assert!(err.to_string().contains("decision"));
    }

    #[test]
    fn refine_task_consistency() {
        let s = ReplySchema::RefineTask;
        assert!(s
            .parse(&json!({"Analysis": "a", "Need-to-Refine": "YES", "High-Level-Task": "x"}))
            .is_ok());
        assert!(s
            .parse(&json!({"Analysis": "a", "Need-to-Refine": "yes", "High-Level-Task": ""}))
            .is_err());
        assert!(s
            .parse(&json!({"Analysis": "a", "Need-to-Refine": "no", "High-Level-Task": "x"}))
            .is_err());
        assert!(s
            .parse(&json!({"Analysis": "a", "Need-to-Refine": "maybe", "High-Level-Task": ""}))
            .is_err());
        assert!(s
            .parse(&json!({"Analysis": "a", "Need-to-Refine": true, "High-Level-Task": ""}))
            .is_err());
    }

    #[test]
    fn diversity_subscores() {
        let s = ReplySchema::JudgeDiversity;
        let ok = json!({"score": 85, "subscores": {"intent_variety": 20, "action_diversity": 20,
            "goal_coverage": 25, "redundancy_minimization": 20}, "analysis": "", "representative_examples": []});
        match s.parse(&ok).unwrap() {
            ParsedReply::Diversity(d) => assert_eq!(d.score, 85),
            _ => unreachable!(),
        }
        let mut bad = ok.clone();
        bad["subscores"]["intent_variety"] = json!(30);
        bad["score"] = json!(95);
        assert!(s.parse(&bad).is_err());
        let mut bad = ok;
        bad["score"] = json!(90);
        assert!(s.parse(&bad).is_err());
    }

    #[test]
    fn next_action_forms() {
        let s = ReplySchema::NextAction;
        let parse = |v: Value| match s.parse(&v) {
            Ok(ParsedReply::NextAction(r)) => Ok(r.action),
            Ok(_) => unreachable!(),
            Err(e) => Err(e),
        };
        let a = parse(json!({"state_observation_summary": "s", "reasoning": "r",
            "next_action": {"low-level_instruction": "click it",
            "action": {"type": "CLICK", "element_id": "7", "value": ""}}}))
        .unwrap();
        assert_eq!(a, Action::click(7).with_instruction("click it"));
        let a = parse(json!({"next_action": {"action": {"type": "NONE", "element_id": "", "value": "$9.99"}}}))
            .unwrap();
        assert_eq!(a, Action::none("$9.99"));
        let a = parse(json!({"next_action": {"action": {"type": "SCROLL", "element_id": "", "value": "Down"}}}))
            .unwrap();
        assert_eq!(a, Action::scroll("down"));
        assert!(parse(json!({"next_action": {"action": {"type": "TYPE", "element_id": 3, "value": ""}}})).is_err());
        assert!(parse(json!({"next_action": {"action": {"type": "FLY"}}})).is_err());
    }

    #[test]
    fn categorization_rules() {
        let ids = vec![1, 2, 3, 4];
        let s = ReplySchema::Categorize { element_ids: ids };
        let ok = json!({"Analysis": "a", "Categorization": {
            "Search & Filters": [{"action": "TYPE", "element_id": 1, "value": "usb cable", "low-level_instruction": "Type"}],
            "Shopping Content": [{"action": "CLICK", "element_id": 2, "value": "", "low-level_instruction": "Click"}],
            "Uninteractive": [3]
        }});
        match s.parse(&ok).unwrap() {
            ParsedReply::Categorization(c) => {
                assert_eq!(c.categories.len(), 2);
                assert_eq!(c.uninteractive, vec![3, 4]);
            }
            _ => unreachable!(),
        }
        let dup = json!({"Categorization": {
            "A": [{"action": "CLICK", "element_id": 2}],
            "B": [{"action": "CLICK", "element_id": 2}]
        }});
        assert!(s.parse(&dup).unwrap_err().to_string().contains("two categories"));
        let unknown = json!({"Categorization": {"A": [{"action": "CLICK", "element_id": 9}]}});
        assert!(s.parse(&unknown).is_err());
        let scroll = json!({"Categorization": {"A": [{"action": "SCROLL", "element_id": 2}]}});
        assert!(s.parse(&scroll).is_err());
    }

    #[test]
    fn proposal_requires_instruction() {
        let s = ReplySchema::ProposeTask;
        assert!(s.parse(&json!({"Sub-Instruction": "x", "Analysis": "y"})).is_err());
        assert!(s
            .parse(&json!({"Sub-Instruction": "x", "Analysis": "y", "High-Level-Instruction": " "}))
            .is_err());
    }
}
