//! Task execution with online task refinement.
//!
//! Each step: observe, ask for the next action, execute it, then check
//! whether the task conflicts with what the site actually offers. A conflict
//! replaces the task text for all later steps; earlier steps keep the text
//! they were collected under.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::ActionKind;
use crate::env::{EnvError, Environment, TransitionOutcome};
use crate::explorer::NO_SCREENSHOT;
use crate::model::{ConflictTrigger, Observation, Step, Task, Trajectory};
use crate::oracle::{render, vars, NextActionReply, Oracle, OracleError, PromptTemplate, ReplySchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectorConfig {
    pub step_budget: usize,
    pub context_window: usize,
    pub stall_noop_threshold: usize,
    pub loop_repeat_threshold: usize,
    pub max_refines_per_task: usize,
}

impl Default for CollectorConfig {
    fn default() -> Self {
        CollectorConfig {
            step_budget: 30,
            context_window: 3,
            stall_noop_threshold: 3,
            loop_repeat_threshold: 2,
            max_refines_per_task: 4,
        }
    }
}

impl CollectorConfig {
    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("step_budget", self.step_budget),
            ("context_window", self.context_window),
            ("stall_noop_threshold", self.stall_noop_threshold),
            ("loop_repeat_threshold", self.loop_repeat_threshold),
            ("max_refines_per_task", self.max_refines_per_task),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(format!("collector.{name} must be positive")),
            None => Ok(()),
        }
    }
}

/// How many recent loop signatures are remembered.
pub const SIGNATURE_MEMORY: usize = 10;

/// Mechanical progress tracker.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StallState {
    pub consecutive_noops: usize,
    /// (normalized url, first error line) of recent navigations and errors.
    pub recent_signatures: VecDeque<(String, String)>,
    last_url: Option<String>,
}

impl StallState {
    pub fn new(start_url: &str) -> Self {
        StallState {
            last_url: Some(normalize_url(start_url)),
            ..StallState::default()
        }
    }

    /// Forgets accumulated evidence; used after the task was refined.
    pub fn clear(&mut self) {
        self.consecutive_noops = 0;
        self.recent_signatures.clear();
    }
}

/// Lowercases scheme and host, and drops a trailing slash and fragment.
pub fn normalize_url(url: &str) -> String {
    let url = url.split('#').next().unwrap_or(url);
    let (head, rest) = match url.find("://") {
        Some(i) => {
            let after = &url[i + 3..];
            let host_end = after.find('/').map_or(url.len(), |j| i + 3 + j);
            (url[..host_end].to_lowercase(), &url[host_end..])
        }
        None => (String::new(), url),
    };
    let rest = rest.trim_end_matches('/');
    format!("{head}{rest}")
}

/// Records one transition and reports whether progress has stalled: either
/// `stall_noop_threshold` consecutive unchanged observations, or the same
/// (url, error) signature seen `loop_repeat_threshold` times among recent
/// navigations and errors.
pub fn check_stall(
    state: &mut StallState,
    config: &CollectorConfig,
    outcome: &TransitionOutcome,
    obs_after: &Observation,
) -> bool {
    if outcome.changed {
        state.consecutive_noops = 0;
    } else {
        state.consecutive_noops += 1;
    }
    let url = normalize_url(&obs_after.url);
    let moved = state.last_url.as_deref() != Some(url.as_str());
    state.last_url = Some(url.clone());
    let mut looped = false;
    if moved || outcome.error.is_some() {
        let error = outcome
            .error
            .as_deref()
            .and_then(|e| e.lines().next())
            .unwrap_or("")
            .trim()
            .to_string();
        let sig = (url, error);
        state.recent_signatures.push_back(sig.clone());
        if state.recent_signatures.len() > SIGNATURE_MEMORY {
            state.recent_signatures.pop_front();
        }
        looped = state.recent_signatures.iter().filter(|s| **s == sig).count() >= config.loop_repeat_threshold;
    }
    state.consecutive_noops >= config.stall_noop_threshold || looped
}

#[derive(Debug, Error)]
pub enum CollectError {
    #[error("environment failure: {0}")]
    Env(#[from] EnvError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Debug trail of one episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EpisodeEvent {
    Step {
        task_id: String,
        index: usize,
        action: String,
        changed: bool,
        #[serde(skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    InvalidElement {
        task_id: String,
        index: usize,
        element_id: u32,
        corrected: bool,
    },
    Stall {
        task_id: String,
        index: usize,
    },
    Refined {
        task_id: String,
        index: usize,
        trigger: ConflictTrigger,
        text: String,
    },
    Diagnostic {
        task_id: String,
        index: usize,
        message: String,
    },
}

/// The agent's decision for one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub reply: NextActionReply,
    /// Set when the reply still references an element that is not on the
    /// page after the corrective re-ask.
    pub invalid_element: Option<u32>,
    /// Whether a corrective re-ask was issued.
    pub reasked: bool,
}

fn image_info(obs: &Observation) -> String {
    match &obs.screenshot_ref {
        Some(r) => format!("attached ({r})"),
        None => NO_SCREENSHOT.to_string(),
    }
}

fn history_hint(history: &[Step], window: usize) -> String {
    if history.is_empty() {
        "no previous actions".to_string()
    } else {
        format!("the most recent {} of at most {window} steps, oldest first", history.len())
    }
}

fn render_history(history: &[Step]) -> String {
    if history.is_empty() {
        return "(none)".to_string();
    }
    history
        .iter()
        .map(|s| {
            let summary = if s.state_summary.is_empty() { "(no summary)" } else { &s.state_summary };
            format!("Step {}:\nState: {summary}\nAction: {}", s.index + 1, s.action)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Asks for the next action. A reply naming an element that is not on the
/// page gets one corrective re-ask.
pub fn next_action(
    oracle: &Oracle,
    task: &Task,
    history: &[Step],
    obs: &Observation,
    window: usize,
) -> Result<Decision, OracleError> {
    let v = vars([
        ("high_level_task", task.text.clone()),
        ("url", obs.url.clone()),
        ("page_context", obs.accessibility_tree.clone()),
        ("elements", obs.element_listing()),
        ("img_info", image_info(obs)),
        ("hint_for_history", history_hint(history, window)),
        ("previous_state_action", render_history(history)),
    ]);
    let images: Vec<String> = obs.screenshot_ref.iter().cloned().collect();
    let prompt = render(PromptTemplate::NextAction, &v, &images)?;
    let (reply, _) = oracle.call_next_action(&prompt, &ReplySchema::NextAction)?;
    let missing = |r: &NextActionReply| r.action.element_id.filter(|id| obs.element(*id).is_none());
    let Some(bad) = missing(&reply) else {
        return Ok(Decision { reply, invalid_element: None, reasked: false });
    };
    let hint = format!("element_id {bad} does not exist in Elements; choose an id from the Elements list");
    let (retry, _) = oracle.call_next_action(&prompt.with_hint(hint), &ReplySchema::NextAction)?;
    let invalid_element = missing(&retry);
    Ok(Decision { reply: retry, invalid_element, reasked: true })
}

/// Result of the conflict check after a step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conflict {
    pub triggered: bool,
    pub trigger: Option<ConflictTrigger>,
    pub refined_text: Option<String>,
}

impl Conflict {
    fn none() -> Self {
        Conflict { triggered: false, trigger: None, refined_text: None }
    }
}

const MISSING_ARGS_CUES: &[&str] = &["missing", "insufficient", "lacks", "parameter", "unspecified", "ambiguous"];

/// One task-refinement call. `stalled` is the mechanical verdict for the
/// step; it is passed to the oracle and, when the oracle refines, becomes
/// the trigger.
pub fn check_conflict(
    oracle: &Oracle,
    task: &Task,
    history: &[Step],
    obs: &Observation,
    stalled: bool,
    window: usize,
) -> Result<Conflict, OracleError> {
    let previous = task.previous_texts();
    let previous = if previous.is_empty() {
        "(none)".to_string()
    } else {
        previous.iter().map(|t| format!("\"{t}\"")).collect::<Vec<_>>().join("\n")
    };
    let mut hint = history_hint(history, window);
    if stalled {
        hint.push_str("; STALL DETECTED: recent actions made no progress or repeated the same page/error");
    }
    let v = vars([
        ("current_high_level_task", task.text.clone()),
        ("previous_high_level_tasks", previous),
        ("hint_for_history", hint),
        ("previous_state_action", render_history(history)),
        ("curr_url", obs.url.clone()),
        ("curr_state_context", obs.accessibility_tree.clone()),
        ("img_info", image_info(obs)),
    ]);
    let images: Vec<String> = obs.screenshot_ref.iter().cloned().collect();
    let prompt = render(PromptTemplate::RefineTask, &v, &images)?;
    let (reply, _) = oracle.call_refine_task(&prompt, &ReplySchema::RefineTask)?;
    if !reply.need_to_refine {
        return Ok(Conflict::none());
    }
    let trigger = if stalled {
        ConflictTrigger::Stall
    } else {
        let analysis = reply.analysis.to_lowercase();
        if MISSING_ARGS_CUES.iter().any(|c| analysis.contains(c)) {
            ConflictTrigger::MissingArgs
        } else {
            ConflictTrigger::ExistsUI
        }
    };
    Ok(Conflict {
        triggered: true,
        trigger: Some(trigger),
        refined_text: Some(reply.high_level_task),
    })
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub trajectory: Trajectory,
    pub events: Vec<EpisodeEvent>,
}

fn is_fatal(e: &OracleError) -> bool {
    matches!(e, OracleError::BudgetExhausted { .. })
}

fn tail(steps: &[Step], n: usize) -> &[Step] {
    &steps[steps.len().saturating_sub(n)..]
}

/// Runs one episode from a fresh session. `oracle` should be scoped to the
/// episode so the trajectory carries its own cost.
///
/// Oracle failures on the next-action call end the episode early (the
/// trajectory is then classified from the steps taken so far); failures of
/// the refinement call are recorded and treated as no conflict. An
/// exhausted token budget or a broken environment is returned as an error.
pub fn collect(
    env: &mut dyn Environment,
    oracle: &Oracle,
    task: &Task,
    config: &CollectorConfig,
) -> Result<Episode, CollectError> {
    env.reset()?;
    let mut task = task.clone();
    let mut steps: Vec<Step> = Vec::new();
    let mut events = Vec::new();
    let mut refine_count = 0;
    let mut obs = env.observe()?;
    let mut stall = StallState::new(&obs.url);
    let id = task.id.clone();
    let diag = |index: usize, message: String| EpisodeEvent::Diagnostic { task_id: id.clone(), index, message };

    for index in 0..config.step_budget {
        let history = tail(&steps, config.context_window);
        let decision = match next_action(oracle, &task, history, &obs, config.context_window) {
            Ok(d) => d,
            Err(e) if is_fatal(&e) => return Err(e.into()),
            Err(e) => {
                events.push(diag(index, format!("episode ended: next action unavailable: {e}")));
                break;
            }
        };
        if decision.reasked {
            let element_id = decision
                .invalid_element
                .or(decision.reply.action.element_id)
                .unwrap_or_default();
            events.push(EpisodeEvent::InvalidElement {
                task_id: id.clone(),
                index,
                element_id,
                corrected: decision.invalid_element.is_none(),
            });
        }
        let action = decision.reply.action.clone();
        let outcome = match decision.invalid_element {
            Some(bad) => TransitionOutcome::failed(format!("element {bad} not found")),
            None => match env.execute(&action) {
                Ok(o) => o,
                Err(EnvError::ElementNotFound(bad)) => TransitionOutcome::failed(format!("element {bad} not found")),
                Err(e) => return Err(e.into()),
            },
        };
        events.push(EpisodeEvent::Step {
            task_id: id.clone(),
            index,
            action: action.to_string(),
            changed: outcome.changed,
            error: outcome.error.clone(),
        });
        steps.push(Step {
            index,
            observation: obs.clone(),
            action: action.clone(),
            task_snapshot: task.text.clone(),
            reasoning: decision.reply.reasoning,
            state_summary: decision.reply.state_observation_summary,
        });
        if matches!(action.kind, ActionKind::None | ActionKind::Stop) {
            break;
        }
        if index + 1 == config.step_budget {
            break;
        }
        obs = env.observe()?;
        let stalled = check_stall(&mut stall, config, &outcome, &obs);
        if stalled {
            events.push(EpisodeEvent::Stall { task_id: id.clone(), index });
        }
        if refine_count >= config.max_refines_per_task {
            continue;
        }
        let history = tail(&steps, config.context_window);
        match check_conflict(oracle, &task, history, &obs, stalled, config.context_window) {
            Ok(Conflict { triggered: true, trigger: Some(trigger), refined_text: Some(text) }) => {
                task.refine(index, text.clone(), trigger);
                refine_count += 1;
                stall.clear();
                events.push(EpisodeEvent::Refined { task_id: id.clone(), index, trigger, text });
            }
            Ok(_) => {}
            Err(e) if is_fatal(&e) => return Err(e.into()),
            Err(e) => events.push(diag(index, format!("refinement check failed: {e}"))),
        }
    }
    let cost = oracle.scope_cost();
    let trajectory = Trajectory::new(task, steps, config.step_budget, cost);
    debug_assert_eq!(trajectory.refine_count, refine_count);
    Ok(Episode { trajectory, events })
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

    fn noop() -> TransitionOutcome {
        TransitionOutcome::noop()
    }

    fn changed() -> TransitionOutcome {
        TransitionOutcome { changed: true, error: None }
    }

    #[test]
    fn three_noops_stall() {
        let cfg = CollectorConfig::default();
        let mut s = StallState::new("http://a/");
        let o = obs("http://a/");
        assert!(!check_stall(&mut s, &cfg, &noop(), &o));
        assert!(!check_stall(&mut s, &cfg, &noop(), &o));
        assert!(check_stall(&mut s, &cfg, &noop(), &o));
    }

    #[test]
    fn change_resets_noops() {
        let cfg = CollectorConfig::default();
        let mut s = StallState::new("http://a/");
        let o = obs("http://a/");
        let seq = [noop(), changed(), noop(), noop()];
        let fired: Vec<bool> = seq.iter().map(|x| check_stall(&mut s, &cfg, x, &o)).collect();
        assert_eq!(fired, [false, false, false, false]);
    }

    #[test]
    fn same_error_page_twice_stalls() {
        let cfg = CollectorConfig::default();
        let mut s = StallState::new("http://a/login");
        let err = TransitionOutcome { changed: true, error: Some("Invalid credentials\nTry again".into()) };
        assert!(!check_stall(&mut s, &cfg, &err, &obs("http://a/login/error")));
        assert!(!check_stall(&mut s, &cfg, &changed(), &obs("http://a/login")));
        assert!(check_stall(&mut s, &cfg, &err, &obs("http://a/login/error/")));
    }

    #[test]
    fn url_normalization() {
        assert_eq!(normalize_url("HTTP://Shop.Local/Cart/#top"), "http://shop.local/Cart");
        assert_eq!(normalize_url("http://shop.local/"), "http://shop.local");
    }

    #[test]
    fn zero_fields_rejected() {
        let cfg = CollectorConfig { context_window: 0, ..CollectorConfig::default() };
        assert!(cfg.validate().unwrap_err().contains("context_window"));
    }
}
