use std::collections::BTreeMap;

use rand::Rng;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::model::{Task, Terminal, Trajectory};
use crate::oracle::{render, vars, CallRecord, DiversityReply, Oracle, PromptTemplate, ReplySchema};
use crate::refiner::{DropRecord, RefinedRecord};

/// Tasks shown to the diversity judge per call.
pub const DIVERSITY_SAMPLE: usize = 100;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SiteStats {
    pub n_tasks: usize,
    pub n_trajectories: usize,
    pub n_completed: usize,
    pub n_failed: usize,
    pub n_exceeded: usize,
    pub completed_pct: f64,
    pub failed_pct: f64,
    pub exceeded_pct: f64,
    /// Mean length of the collected (raw) trajectories.
    pub mean_steps: f64,
    pub mean_refines: f64,
    pub n_refined: usize,
    pub n_dropped: usize,
    pub n_examples: usize,
    pub total_cost_usd: Decimal,
    /// Mean judge score over surviving trajectories.
    pub mean_quality_score: Option<f64>,
    pub diversity_score: Option<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub overall: SiteStats,
    pub sites: BTreeMap<String, SiteStats>,
}

fn pct(n: usize, of: usize) -> f64 {
    if of == 0 {
        0.0
    } else {
        n as f64 * 100.0 / of as f64
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn site_stats(
    tasks: &[&Task],
    raw: &[&Trajectory],
    refined: &[&RefinedRecord],
    drops: usize,
    cost: Decimal,
) -> SiteStats {
    let count = |t: Terminal| raw.iter().filter(|r| r.terminal == t).count();
    let (c, f, e) = (
        count(Terminal::CompletedNone),
        count(Terminal::StoppedByAgent),
        count(Terminal::BudgetExceeded),
    );
    let n = raw.len();
    SiteStats {
        n_tasks: tasks.len(),
        n_trajectories: n,
        n_completed: c,
        n_failed: f,
        n_exceeded: e,
        completed_pct: pct(c, n),
        failed_pct: pct(f, n),
        exceeded_pct: pct(e, n),
        mean_steps: mean(raw.iter().map(|t| t.len() as f64)).unwrap_or(0.0),
        mean_refines: mean(raw.iter().map(|t| t.refine_count as f64)).unwrap_or(0.0),
        n_refined: refined.len(),
        n_dropped: drops,
        n_examples: refined.iter().map(|r| r.trajectory.len()).sum(),
        total_cost_usd: cost,
        mean_quality_score: mean(refined.iter().map(|r| f64::from(r.score))),
        diversity_score: None,
    }
}

/// Call records belong to a site when their scope starts with `"{site}/"`.
pub fn site_of_scope(scope: &str) -> &str {
    scope.split('/').next().unwrap_or("")
}

/// Table-style statistics. Terminal percentages are over the raw
/// (collected) trajectories, so dropped trajectories still count.
pub fn compute_stats(
    tasks: &[Task],
    raw: &[Trajectory],
    refined: &[RefinedRecord],
    drops: &[DropRecord],
    ledger: &[CallRecord],
) -> CorpusStats {
    let mut sites: Vec<&str> = tasks
        .iter()
        .map(|t| t.site.as_str())
        .chain(raw.iter().map(|t| t.task.site.as_str()))
        .collect();
    sites.sort_unstable();
    sites.dedup();
    let by_site = |site: &str| {
        let cost: Decimal = ledger
            .iter()
            .filter(|r| site_of_scope(&r.scope) == site)
            .map(|r| r.cost_usd)
            .sum();
        site_stats(
            &tasks.iter().filter(|t| t.site == site).collect::<Vec<_>>(),
            &raw.iter().filter(|t| t.task.site == site).collect::<Vec<_>>(),
            &refined.iter().filter(|r| r.trajectory.task.site == site).collect::<Vec<_>>(),
            drops.iter().filter(|d| d.site == site).count(),
            cost,
        )
    };
    CorpusStats {
        sites: sites.iter().map(|s| (s.to_string(), by_site(s))).collect(),
        overall: site_stats(
            &tasks.iter().collect::<Vec<_>>(),
            &raw.iter().collect::<Vec<_>>(),
            &refined.iter().collect::<Vec<_>>(),
            drops.len(),
            ledger.iter().map(|r| r.cost_usd).sum(),
        ),
    }
}

/// Scores the diversity of up to [`DIVERSITY_SAMPLE`] tasks drawn uniformly
/// with `rng` (all tasks, in order, when there are fewer).
pub fn judge_diversity<R: Rng + ?Sized>(
    oracle: &Oracle,
    tasks: &[Task],
    rng: &mut R,
) -> Result<DiversityReply, DatasetError> {
    if tasks.len() < 2 {
        return Err(DatasetError::TooFewTasks(tasks.len()));
    }
    let mut picks = rand::seq::index::sample(rng, tasks.len(), tasks.len().min(DIVERSITY_SAMPLE)).into_vec();
    picks.sort_unstable();
    let block = picks
        .iter()
        .enumerate()
        .map(|(i, &j)| format!("{}. {}", i + 1, tasks[j].text))
        .collect::<Vec<_>>()
        .join("\n");
    let prompt = render(PromptTemplate::JudgeDiversity, &vars([("task_list_block", block)]), &[])?;
    let (reply, _) = oracle.call_judge_diversity(&prompt, &ReplySchema::JudgeDiversity)?;
    Ok(reply)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::Action;
    use crate::model::{Observation, Step};

    fn raw(site: &str, id: usize, last: Action, len: usize, refines: usize) -> Trajectory {
        let mut task = Task::new(format!("{site}-t{id:04}"), site, "t", "c");
        for i in 0..refines {
            task.refine(i, format!("t{i}"), crate::model::ConflictTrigger::Stall);
        }
        let steps = (0..len)
            .map(|i| Step {
                index: i,
                observation: Observation {
                    url: "u".into(),
                    accessibility_tree: String::new(),
                    elements: vec![],
                    screenshot_ref: None,
                },
                action: if i + 1 == len { last.clone() } else { Action::click(1) },
                task_snapshot: String::new(),
                reasoning: String::new(),
                state_summary: String::new(),
            })
            .collect();
        Trajectory::new(task, steps, 3, Decimal::ZERO)
    }

    #[test]
    fn thirds() {
        let r = vec![
            raw("a", 1, Action::none("x"), 2, 2),
            raw("a", 2, Action::stop("y"), 2, 2),
            raw("a", 3, Action::click(1), 3, 2),
        ];
        let s = compute_stats(&[], &r, &[], &[], &[]);
        assert_eq!((s.overall.n_completed, s.overall.n_failed, s.overall.n_exceeded), (1, 1, 1));
        assert!((s.overall.completed_pct - 100.0 / 3.0).abs() < 1e-9);
        assert_eq!(s.overall.mean_refines, 2.0);
        assert!((s.overall.completed_pct + s.overall.failed_pct + s.overall.exceeded_pct - 100.0).abs() < 1e-9);
    }
}
