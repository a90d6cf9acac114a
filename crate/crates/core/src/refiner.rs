//! Post-hoc trajectory refinement: a judge decides keep/refine/drop with an
//! index order, and the edits are applied mechanically.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::model::{Step, Terminal, Trajectory};
use crate::oracle::{
    render, vars, Oracle, OracleError, PromptTemplate, RefineDecision, RefineTrajectoryReply, ReplySchema,
};

/// Drop reason used when the judge never produced a valid reply.
pub const UNPARSEABLE_REPLY: &str = "unparseable judge reply";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("edit contract violated: {0}")]
pub struct EditContractViolation(pub String);

/// Text form handed to the judge.
pub fn summarize_trajectory(t: &Trajectory) -> String {
    let mut out = format!("Length of trajectory: {}\nHigh-level task: {}\n", t.len(), t.task.text);
    for (i, step) in t.steps.iter().enumerate() {
        let summary = if step.state_summary.trim().is_empty() {
            "(no summary)"
        } else {
            step.state_summary.trim()
        };
        out.push_str(&format!("Step {i}:\n  State: {summary}\n  Action: {}", step.action));
        if !step.action.low_level_instruction.is_empty() {
            out.push_str(&format!(" ({})", step.action.low_level_instruction));
        }
        out.push('\n');
    }
    out
}

/// Asks the judge. A reply that never validates becomes a local drop.
pub fn decide(oracle: &Oracle, t: &Trajectory) -> Result<RefineTrajectoryReply, OracleError> {
    let v = vars([("trajectory", summarize_trajectory(t))]);
    let prompt = render(PromptTemplate::RefineTrajectory, &v, &[])?;
    match oracle.call_refine_trajectory(&prompt, &ReplySchema::RefineTrajectory { steps: t.len() }) {
        Ok((reply, _)) => Ok(reply),
        Err(OracleError::SchemaViolation(_) | OracleError::NoJsonFound) => {
            Ok(RefineTrajectoryReply::local_drop(UNPARSEABLE_REPLY))
        }
        Err(e) => Err(e),
    }
}

fn none_step(last: &Step, index: usize, value: &str, task_text: &str) -> Step {
    Step {
        index,
        observation: last.observation.clone(),
        action: Action::none(value),
        task_snapshot: task_text.to_string(),
        reasoning: String::new(),
        state_summary: last.state_summary.clone(),
    }
}

/// Applies a validated reply. `Ok(None)` means the trajectory is dropped.
///
/// Retained steps are copied verbatim apart from their index; the only step
/// that may be synthesized is a final `none`, by replacing the last action
/// (`modify_end`) or appending a step that reuses the last observation
/// (`append_end`).
pub fn apply_edits(
    t: &Trajectory,
    reply: &RefineTrajectoryReply,
) -> Result<Option<Trajectory>, EditContractViolation> {
    reply
        .validate(t.len())
        .map_err(|e| EditContractViolation(e.to_string()))?;
    match reply.decision {
        RefineDecision::Drop => Ok(None),
        RefineDecision::Keep => {
            if t.ends_in_completion() {
                Ok(Some(t.clone()))
            } else {
                Err(EditContractViolation(
                    "keep requires the trajectory to already end in a none action with a value".into(),
                ))
            }
        }
        RefineDecision::Refine => {
            if reply.modify_end && reply.append_end {
                return Err(EditContractViolation("modify_end and append_end are mutually exclusive".into()));
            }
            let mut steps: Vec<Step> = reply
                .order
                .iter()
                .enumerate()
                .map(|(new_index, &old)| Step { index: new_index, ..t.steps[old].clone() })
                .collect();
            let value = reply.final_none_value.trim();
            if reply.modify_end {
                let last = steps
                    .last_mut()
                    .ok_or_else(|| EditContractViolation("modify_end on an empty order".into()))?;
                last.action = Action::none(value);
            } else if reply.append_end {
                let last = steps
                    .last()
                    .or(t.steps.last())
                    .ok_or_else(|| EditContractViolation("append_end on an empty trajectory".into()))?;
                let step = none_step(last, steps.len(), value, &t.task.text);
                steps.push(step);
            }
            match steps.last() {
                Some(s) if s.action.is_valid_completion() => {}
                _ => {
                    return Err(EditContractViolation(
                        "refined trajectory does not end in a none action with a value".into(),
                    ))
                }
            }
            Ok(Some(Trajectory {
                task: t.task.clone(),
                steps,
                terminal: Terminal::CompletedNone,
                refine_count: t.refine_count,
                cost_usd: t.cost_usd,
            }))
        }
    }
}

/// Persisted form of a surviving trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinedRecord {
    pub trajectory: Trajectory,
    pub decision: RefineDecision,
    /// The judge's 0-100 quality score.
    pub score: u8,
    pub original_len: usize,
    pub modification_reason: String,
}

/// Persisted form of a dropped trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropRecord {
    pub trajectory_id: String,
    pub site: String,
    pub drop_reason: String,
    pub score: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RefineOutcome {
    Kept(RefinedRecord),
    Dropped(DropRecord),
}

/// Decides and applies in one go; contract violations become drops.
pub fn refine_trajectory(oracle: &Oracle, t: &Trajectory) -> Result<RefineOutcome, OracleError> {
    let dropped = |reason: String, score: u8| {
        RefineOutcome::Dropped(DropRecord {
            trajectory_id: t.id().to_string(),
            site: t.task.site.clone(),
            drop_reason: reason,
            score,
        })
    };
    if t.is_empty() {
        return Ok(dropped("empty trajectory".into(), 0));
    }
    let reply = decide(oracle, t)?;
    Ok(match apply_edits(t, &reply) {
        Ok(Some(refined)) => RefineOutcome::Kept(RefinedRecord {
            trajectory: refined,
            decision: reply.decision,
            score: reply.score,
            original_len: t.len(),
            modification_reason: reply.modification_reason,
        }),
        Ok(None) => dropped(reply.drop_reason, reply.score),
        Err(e) => dropped(e.to_string(), reply.score),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Observation, Task};
    use rust_decimal::Decimal;

    fn traj(actions: Vec<Action>) -> Trajectory {
        let steps = actions
            .into_iter()
            .enumerate()
            .map(|(i, a)| Step {
                index: i,
                observation: Observation {
                    url: format!("http://x/{i}"),
                    accessibility_tree: format!("page {i}"),
                    elements: vec![],
                    screenshot_ref: None,
                },
                action: a,
                task_snapshot: "t".into(),
                reasoning: String::new(),
                state_summary: if i == 0 { String::new() } else { format!("state {i}") },
            })
            .collect();
        Trajectory::new(Task::new("s-t0001", "s", "t", "c"), steps, 30, Decimal::ZERO)
    }

    fn reply(decision: RefineDecision, order: Vec<usize>) -> RefineTrajectoryReply {
        RefineTrajectoryReply {
            task: "t".into(),
            score: 50,
            decision,
            order,
            modify_end: false,
            append_end: false,
            final_none_value: "done".into(),
            drop_reason: String::new(),
            modification_reason: String::new(),
        }
    }

    #[test]
    fn summary_lists_actions_in_order() {
        let t = traj(vec![Action::click(1), Action::none("ok")]);
        let s = summarize_trajectory(&t);
        assert!(s.starts_with("Length of trajectory: 2\n"));
        assert!(s.contains("(no summary)"));
        assert!(s.find("click [1]").unwrap() < s.find("none [ok]").unwrap());
        assert_eq!(s, summarize_trajectory(&t));
    }

    #[test]
    fn keep_is_identity() {
        let t = traj(vec![Action::click(1), Action::click(2), Action::none("ok")]);
        let out = apply_edits(&t, &reply(RefineDecision::Keep, vec![0, 1, 2])).unwrap().unwrap();
        assert_eq!(serde_json::to_string(&out).unwrap(), serde_json::to_string(&t).unwrap());
    }

    #[test]
    fn keep_without_none_is_violation() {
        let t = traj(vec![Action::click(1), Action::stop("stuck")]);
        assert!(apply_edits(&t, &reply(RefineDecision::Keep, vec![0, 1])).is_err());
    }

    #[test]
    fn modify_end_replaces_stop() {
        let t = traj(vec![Action::click(1), Action::click(2), Action::stop("stuck")]);
        let mut r = reply(RefineDecision::Refine, vec![0, 2]);
        r.modify_end = true;
        let out = apply_edits(&t, &r).unwrap().unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out.steps[1].action, Action::none("done"));
        assert_eq!(out.steps[1].observation, t.steps[2].observation);
        assert_eq!(out.terminal, Terminal::CompletedNone);
    }

    #[test]
    fn append_end_reuses_last_observation() {
        let t = traj(vec![Action::click(1), Action::click(2)]);
        let mut r = reply(RefineDecision::Refine, vec![1, 0]);
        r.append_end = true;
        let out = apply_edits(&t, &r).unwrap().unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out.steps[0].action, t.steps[1].action);
        assert_eq!(out.steps[2].observation, t.steps[0].observation);
        assert_eq!(out.steps.iter().map(|s| s.index).collect::<Vec<_>>(), [0, 1, 2]);
    }

    #[test]
    fn refine_without_end_fix_must_already_end_in_none() {
        let t = traj(vec![Action::click(1), Action::none("ok"), Action::click(3)]);
        assert!(apply_edits(&t, &reply(RefineDecision::Refine, vec![0, 1])).unwrap().is_some());
        assert!(apply_edits(&t, &reply(RefineDecision::Refine, vec![0, 2])).is_err());
    }

    #[test]
    fn drop_returns_none() {
        let t = traj(vec![Action::click(1)]);
        let mut r = reply(RefineDecision::Drop, vec![]);
        r.final_none_value.clear();
        r.drop_reason = "noise".into();
        assert_eq!(apply_edits(&t, &r).unwrap(), None);
    }
}
