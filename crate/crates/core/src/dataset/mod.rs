//! Training-example split, JSONL export and corpus statistics.
//!
//! Export layout (all files UTF-8, one JSON object per line):
//!
//! * `dataset.jsonl` — `{task, history: [{obs_ref, action}], observation_ref,
//!   target_action, meta: {site, trajectory_id, step_index}}`
//! * `observations.jsonl` — `{ref, observation}`, each distinct observation
//!   once, in first-use order; `ref` is the observation's content hash.
//! * `manifest.json` — record counts, per-file sha256 and a `content_hash`
//!   covering both data files.

mod stats;

pub use stats::{compute_stats, judge_diversity, site_of_scope, CorpusStats, SiteStats, DIVERSITY_SAMPLE};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::action::Action;
use crate::model::{ExampleMeta, HistoryEntry, Observation, TrainingExample, Trajectory};

/// Default number of history pairs per example.
pub const DEFAULT_WINDOW: usize = 3;

pub const EXPORT_SCHEMA_VERSION: u32 = 1;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const OBSERVATIONS_FILE: &str = "observations.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("trajectory {0} has no steps")]
    EmptyTrajectory(String),
    #[error("window must be positive")]
    ZeroWindow,
    #[error("diversity judging needs at least 2 tasks, got {0}")]
    TooFewTasks(usize),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error(transparent)]
    Oracle(#[from] crate::oracle::OracleError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One example per step; example `k` sees the `min(k, window)` preceding
/// (observation, action) pairs, and every example is labelled with the
/// trajectory's final task text.
pub fn split_examples(t: &Trajectory, window: usize) -> Result<Vec<TrainingExample>, DatasetError> {
    if window == 0 {
        return Err(DatasetError::ZeroWindow);
    }
    if t.is_empty() {
        return Err(DatasetError::EmptyTrajectory(t.id().to_string()));
    }
    Ok(t.steps
        .iter()
        .enumerate()
        .map(|(k, step)| TrainingExample {
            task_text: t.task.text.clone(),
            history: t.steps[k.saturating_sub(window)..k]
                .iter()
                .map(|s| HistoryEntry {
                    observation: s.observation.clone(),
                    action: s.action.clone(),
                })
                .collect(),
            current_observation: step.observation.clone(),
            target_action: step.action.clone(),
            meta: ExampleMeta {
                site: t.task.site.clone(),
                trajectory_id: t.id().to_string(),
                step_index: k,
            },
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryRef {
    pub obs_ref: String,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub task: String,
    pub history: Vec<HistoryRef>,
    pub observation_ref: String,
    pub target_action: Action,
    pub meta: ExampleMeta,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationRecord {
    #[serde(rename = "ref")]
    pub obs_ref: String,
    pub observation: Observation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub n_records: usize,
    pub n_observations: usize,
    /// sha256 over both data files (names and bytes).
    pub content_hash: String,
    pub files: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes examples into the two JSONL payloads.
fn encode(examples: &[TrainingExample]) -> (Vec<u8>, Vec<u8>, usize) {
    let mut dataset = Vec::new();
    let mut observations = Vec::new();
    let mut stored: HashSet<String> = HashSet::new();
    let mut store = |obs: &Observation| -> String {
        let r = obs.content_hash();
        if stored.insert(r.clone()) {
            let rec = ObservationRecord {
                obs_ref: r.clone(),
                observation: obs.clone(),
            };
            serde_json::to_writer(&mut observations, &rec).expect("observation serializes");
            observations.push(b'\n');
        }
        r
    };
    for ex in examples {
        let rec = ExampleRecord {
            task: ex.task_text.clone(),
            history: ex
                .history
                .iter()
                .map(|h| HistoryRef {
                    obs_ref: store(&h.observation),
                    action: h.action.clone(),
                })
                .collect(),
            observation_ref: store(&ex.current_observation),
            target_action: ex.target_action.clone(),
            meta: ex.meta.clone(),
        };
        serde_json::to_writer(&mut dataset, &rec).expect("example serializes");
        dataset.push(b'\n');
    }
    let n_obs = stored.len();
    (dataset, observations, n_obs)
}

fn content_hash(dataset: &[u8], observations: &[u8]) -> String {
    let mut h = Sha256::new();
    for (name, bytes) in [(DATASET_FILE, dataset), (OBSERVATIONS_FILE, observations)] {
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    hex::encode(h.finalize())
}

/// Writes `dataset.jsonl`, `observations.jsonl` and `manifest.json` into
/// `dir`, replacing existing files.
pub fn export_jsonl(examples: &[TrainingExample], dir: &Path) -> Result<Manifest, DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (dataset, observations, n_observations) = encode(examples);
    let manifest = Manifest {
        schema_version: EXPORT_SCHEMA_VERSION,
        n_records: examples.len(),
        n_observations,
        content_hash: content_hash(&dataset, &observations),
        files: BTreeMap::from([
            (DATASET_FILE.to_string(), sha256_hex(&dataset)),
            (OBSERVATIONS_FILE.to_string(), sha256_hex(&observations)),
        ]),
    };
    for (name, bytes) in [(DATASET_FILE, dataset), (OBSERVATIONS_FILE, observations)] {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Reconstructs the examples of an export directory.
pub fn read_examples(dir: &Path) -> Result<Vec<TrainingExample>, DatasetError> {
    let obs_path = dir.join(OBSERVATIONS_FILE);
    let observations: HashMap<String, Observation> = read_jsonl::<ObservationRecord>(&obs_path)?
        .into_iter()
        .map(|r| (r.obs_ref, r.observation))
        .collect();
    let ds_path = dir.join(DATASET_FILE);
    let lookup = |r: &str, line: usize| {
        observations.get(r).cloned().ok_or_else(|| DatasetError::Malformed {
            path: ds_path.display().to_string(),
            line,
            message: format!("unknown observation ref {r}"),
        })
    };
    read_jsonl::<ExampleRecord>(&ds_path)?
        .into_iter()
        .enumerate()
        .map(|(i, rec)| {
            Ok(TrainingExample {
                task_text: rec.task,
                history: rec
                    .history
                    .iter()
                    .map(|h| {
                        Ok(HistoryEntry {
                            observation: lookup(&h.obs_ref, i + 1)?,
                            action: h.action.clone(),
                        })
                    })
                    .collect::<Result<_, DatasetError>>()?,
                current_observation: lookup(&rec.observation_ref, i + 1)?,
                target_action: rec.target_action,
                meta: rec.meta,
            })
        })
        .collect()
}

/// Order-insensitive hash of a JSONL file's lines.
pub fn unordered_hash(path: &Path) -> Result<String, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    lines.sort_unstable();
    let mut h = Sha256::new();
    for l in lines {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

/// Writes `value` as one JSON line.
pub fn write_jsonl_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> io::Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Element, Step, Task};
    use rust_decimal::Decimal;

    fn traj(n: usize) -> Trajectory {
        let steps = (0..n)
            .map(|i| Step {
                index: i,
                observation: Observation {
                    url: format!("http://x/{}", i % 2),
                    accessibility_tree: format!("tree {}", i % 2),
                    elements: vec![Element {
                        id: 1,
                        role: "button".into(),
                        name: "Go".into(),
                        interactive: true,
                    }],
                    screenshot_ref: None,
                },
                action: if i + 1 == n { Action::none("answer") } else { Action::click(1) },
                task_snapshot: "t".into(),
                reasoning: String::new(),
                state_summary: String::new(),
            })
            .collect();
        Trajectory::new(Task::new("s-t0001", "s", "final task", "c"), steps, 30, Decimal::ZERO)
    }

    #[test]
    fn history_lengths() {
        let lens = |t, w| {
            split_examples(&traj(t), w)
                .unwrap()
                .iter()
                .map(|e| e.history.len())
                .collect::<Vec<_>>()
        };
        assert_eq!(lens(1, 3), [0]);
        assert_eq!(lens(5, 3), [0, 1, 2, 3, 3]);
        assert_eq!(lens(3, 10), [0, 1, 2]);
    }

    #[test]
    fn empty_trajectory_rejected() {
        assert!(matches!(split_examples(&traj(0), 3), Err(DatasetError::EmptyTrajectory(_))));
    }

    #[test]
    fn export_round_trips_and_dedups() {
        let dir = tempfile::tempdir().unwrap();
        let examples = split_examples(&traj(5), 3).unwrap();
        let m = export_jsonl(&examples, dir.path()).unwrap();
        assert_eq!(m.n_records, 5);
        assert_eq!(m.n_observations, 2);
        assert_eq!(read_examples(dir.path()).unwrap(), examples);
        let again = export_jsonl(&examples, dir.path()).unwrap();
        assert_eq!(m.content_hash, again.content_hash);
    }

    #[test]
    fn empty_export() {
        let dir = tempfile::tempdir().unwrap();
        let m = export_jsonl(&[], dir.path()).unwrap();
        assert_eq!(m.n_records, 0);
        assert_eq!(fs::read(dir.path().join(DATASET_FILE)).unwrap(), b"");
    }
}
