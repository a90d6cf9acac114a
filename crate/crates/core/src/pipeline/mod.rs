//! Stage orchestration over a run directory.
//!
//! Stages read the previous stage's files and append their own, one record
//! per finished unit of work, so an interrupted stage resumes where it
//! stopped:
//!
//! | stage   | reads                         | writes                                   |
//! |---------|-------------------------------|------------------------------------------|
//! | explore | site graphs / browsers        | `triplets.jsonl`, `tasks.jsonl`          |
//! | collect | `tasks.jsonl`                 | `trajectories_raw.jsonl` (+ `drops.jsonl` on environment failure) |
//! | refine  | `trajectories_raw.jsonl`      | `trajectories_refined.jsonl`, `drops.jsonl` |
//! | export  | `trajectories_refined.jsonl`  | `dataset.jsonl`, `observations.jsonl`, `manifest.json` |
//! | stats   | everything above, `ledger.jsonl` | `stats.json`                          |
//!
//! Every oracle call is appended to `ledger.jsonl`; `events.jsonl` is a
//! debugging trail.

mod config;
pub mod store;

pub use config::{ExportSection, OracleSection, RunConfig, SiteConfig, StatsSection};
pub use store::{read_records, Appender, Checkpoints, RunDir};

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::collector::{self, CollectError};
use crate::dataset::{self, CorpusStats, Manifest};
use crate::env::{EnvError, EnvFactory, SimFactory, SiteGraph};
use crate::explorer::{self, ExploreError, SiteBrief, TripletRecord};
use crate::model::{Task, Trajectory};
use crate::oracle::{CallRecord, HttpTransport, MockScript, Oracle, OracleConfig, OracleError};
use crate::refiner::{self, DropRecord, RefineOutcome, RefinedRecord};

#[derive(Debug, Error)]
pub enum PipelineError {
    /// Bad configuration or inputs named by it; the CLI exits with 2.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("environment failure: {0}")]
    Env(#[from] EnvError),
    #[error("{0}")]
    Dataset(#[from] dataset::DatasetError),
}

impl PipelineError {
    pub fn is_config(&self) -> bool {
        matches!(self, PipelineError::Config(_))
    }
}

/// Deterministic per-(site, stage) seed derived from the run seed.
pub fn derive_seed(root: u64, site: &str, stage: &str) -> u64 {
    let digest = Sha256::digest(format!("{root}/{site}/{stage}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn stage_rng(root: u64, site: &str, stage: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, site, stage))
}

/// Counts reported by a stage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StageReport {
    pub stage: &'static str,
    pub written: usize,
    pub skipped: usize,
    pub dropped: usize,
    pub diagnostics: usize,
}

struct Site {
    config: SiteConfig,
    factory: Box<dyn EnvFactory>,
}

impl Site {
    fn brief(&self) -> SiteBrief {
        SiteBrief {
            name: self.config.name.clone(),
            intro: self.config.website_intro.clone(),
            task_examples: self.config.task_examples.clone(),
        }
    }
}

pub struct Pipeline {
    config: RunConfig,
    run: RunDir,
    oracle: Oracle,
    sites: Vec<Site>,
}

fn build_oracle(cfg: &OracleSection) -> Result<Oracle, PipelineError> {
    let oc = OracleConfig {
        max_retries: cfg.max_retries,
        max_reparse: cfg.max_reparse,
        backoff_base: Duration::from_millis(cfg.backoff_ms),
        max_in_flight: cfg.max_in_flight,
        max_total_tokens: cfg.max_total_tokens,
        pricing: cfg.pricing,
    };
    if let Some(path) = &cfg.mock_script {
        let script = MockScript::load(path).map_err(|e| PipelineError::Config(e.to_string()))?;
        return Ok(Oracle::mock(script, oc));
    }
    let api_key = match &cfg.api_key_env {
        Some(var) => Some(std::env::var(var).map_err(|_| {
            PipelineError::Config(format!("environment variable {var} (oracle.api_key_env) is not set"))
        })?),
        None => None,
    };
    let transport = HttpTransport::new(
        &cfg.endpoint,
        &cfg.model,
        api_key,
        cfg.temperature,
        Duration::from_secs(cfg.timeout_secs),
    );
    Ok(Oracle::new(Box::new(transport), oc))
}

fn open_site(cfg: &SiteConfig, run: &RunDir) -> Result<Box<dyn EnvFactory>, PipelineError> {
    if let Some(path) = &cfg.site_graph {
        let graph = SiteGraph::load(path).map_err(|e| PipelineError::Config(e.to_string()))?;
        let factory = SimFactory::new(graph).map_err(|e| PipelineError::Config(e.to_string()))?;
        return Ok(Box::new(factory));
    }
    let endpoint = cfg.browser_endpoint.clone().unwrap_or_default();
    #[cfg(feature = "webdriver")]
    {
        let start = cfg.start_url.clone().unwrap_or_default();
        let shots = run.path("screenshots");
        Ok(Box::new(crate::webdriver::WebDriverFactory::new(endpoint, start, shots)))
    }
    #[cfg(not(feature = "webdriver"))]
    {
        let _ = run;
        Err(PipelineError::Config(format!(
            "site {:?} uses browser_endpoint {endpoint} but this build lacks the `webdriver` feature",
            cfg.name
        )))
    }
}

/// Runs `work` over `items` on up to `workers` threads and hands each result
/// to `sink` on the calling thread, in completion order. A sink error stops
/// the pool after in-flight items finish.
fn run_pool<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    work: impl Fn(&T) -> R + Sync,
    mut sink: impl FnMut(R) -> Result<(), PipelineError>,
) -> Result<(), PipelineError> {
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let workers = workers.clamp(1, items.len().max(1));
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel();
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, stop, work) = (&next, &stop, &work);
            scope.spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(item) = items.get(i) else { break };
                    if tx.send(work(item)).is_err() {
                        break;
                    }
                }
            });
        }
        drop(tx);
        let mut result = Ok(());
        for r in rx {
            if result.is_ok() {
                if let Err(e) = sink(r) {
                    stop.store(true, Ordering::SeqCst);
                    result = Err(e);
                }
            }
        }
        result
    })
}

fn event(stage: &str, payload: impl Serialize) -> Value {
    let mut v = serde_json::to_value(payload).expect("event serializes");
    match v.as_object_mut() {
        Some(obj) => {
            obj.insert("stage".into(), json!(stage));
            v
        }
        None => json!({"stage": stage, "detail": v}),
    }
}

impl Pipeline {
    /// Builds the oracle and environments and creates the run directory.
    /// Anything wrong with the configuration or the files it names is a
    /// [`PipelineError::Config`].
    pub fn new(config: RunConfig) -> Result<Pipeline, PipelineError> {
        config.validate().map_err(PipelineError::Config)?;
        let oracle = build_oracle(&config.oracle)?;
        let run = RunDir::create(config.run_dir())?;
        let sites = config
            .sites
            .iter()
            .map(|s| Ok(Site { config: s.clone(), factory: open_site(s, &run)? }))
            .collect::<Result<Vec<_>, PipelineError>>()?;
        Ok(Pipeline { config, run, oracle, sites })
    }

    pub fn from_file(path: &Path) -> Result<Pipeline, PipelineError> {
        Pipeline::new(RunConfig::load(path).map_err(PipelineError::Config)?)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn run_dir(&self) -> &RunDir {
        &self.run
    }

    pub fn oracle(&self) -> &Oracle {
        &self.oracle
    }

    /// Moves oracle call records accumulated so far into `ledger.jsonl`.
    fn flush_ledger(&self, ledger: &mut Appender) -> Result<(), PipelineError> {
        for rec in self.oracle.ledger().drain() {
            ledger.append(&rec)?;
        }
        Ok(())
    }

    /// Stage 1: explore every site not yet explored in this run.
    pub fn explore(&self) -> Result<StageReport, PipelineError> {
        let mut checkpoints = self.run.checkpoints()?;
        let pending: Vec<&Site> = self
            .sites
            .iter()
            .filter(|s| !checkpoints.explored_sites.contains(&s.config.name))
            .collect();
        let mut report = StageReport { stage: "explore", skipped: self.sites.len() - pending.len(), ..Default::default() };
        // Partial output of sites that did not finish is discarded.
        let unfinished: BTreeSet<&str> = pending.iter().map(|s| s.config.name.as_str()).collect();
        let tasks: Vec<Task> = self.run.read(store::TASKS)?;
        let triplets: Vec<TripletRecord> = self.run.read(store::TRIPLETS)?;
        if tasks.iter().any(|t| unfinished.contains(t.site.as_str()))
            || triplets.iter().any(|t| unfinished.contains(t.site.as_str()))
        {
            let keep_t: Vec<_> = tasks.into_iter().filter(|t| !unfinished.contains(t.site.as_str())).collect();
            let keep_x: Vec<_> = triplets.into_iter().filter(|t| !unfinished.contains(t.site.as_str())).collect();
            self.run.rewrite(store::TASKS, &keep_t)?;
            self.run.rewrite(store::TRIPLETS, &keep_x)?;
        }

        let mut tasks_out = self.run.appender(store::TASKS)?;
        let mut triplets_out = self.run.appender(store::TRIPLETS)?;
        let mut events = self.run.appender(store::EVENTS)?;
        let mut ledger = self.run.appender(store::LEDGER)?;
        let seed = self.config.seed;
        let budget = self.config.explorer;
        run_pool(
            &pending,
            self.config.workers,
            |site| {
                let name = &site.config.name;
                let oracle = self.oracle.with_scope(format!("{name}/explore"));
                let mut rng = stage_rng(seed, name, "explore");
                let mut env = site.factory.open()?;
                let ex = explorer::explore(env.as_mut(), &oracle, &site.brief(), budget, &mut rng);
                Ok::<_, ExploreError>((name.clone(), ex?))
            },
            |result| {
                let (name, ex) = result.map_err(|e| match e {
                    ExploreError::Oracle(o) => PipelineError::Oracle(o),
                    ExploreError::Env(env) => PipelineError::Env(env),
                    other => PipelineError::Io(other.to_string()),
                })?;
                for t in &ex.triplets {
                    triplets_out.append(t)?;
                }
                for t in &ex.tasks {
                    tasks_out.append(t)?;
                }
                for d in &ex.diagnostics {
                    events.append(&event("explore", json!({"event": "diagnostic", "site": name, "message": d})))?;
                }
                events.append(&event(
                    "explore",
                    json!({"event": "site_explored", "site": name, "pages": ex.pool.visited().len(),
                           "triplets": ex.triplets.len(), "tasks": ex.tasks.len()}),
                ))?;
                self.flush_ledger(&mut ledger)?;
                checkpoints.explored_sites.insert(name);
                self.run.save_checkpoints(&checkpoints)?;
                report.written += ex.tasks.len();
                report.diagnostics += ex.diagnostics.len();
                Ok(())
            },
        )?;
        self.flush_ledger(&mut ledger)?;
        Ok(report)
    }

    fn site(&self, name: &str) -> Option<&Site> {
        self.sites.iter().find(|s| s.config.name == name)
    }

    /// Stage 2: one trajectory per task that has none yet.
    pub fn collect(&self) -> Result<StageReport, PipelineError> {
        let tasks: Vec<Task> = self.run.read(store::TASKS)?;
        let raw: Vec<Trajectory> = self.run.read(store::RAW)?;
        let drops: Vec<DropRecord> = self.run.read(store::DROPS)?;
        let done: BTreeSet<&str> = raw
            .iter()
            .map(|t| t.id())
            .chain(drops.iter().map(|d| d.trajectory_id.as_str()))
            .collect();
        let mut pending = Vec::new();
        for t in &tasks {
            if done.contains(t.id.as_str()) {
                continue;
            }
            let site = self
                .site(&t.site)
                .ok_or_else(|| PipelineError::Config(format!("task {} names unknown site {:?}", t.id, t.site)))?;
            pending.push((t, site));
        }
        let mut report = StageReport { stage: "collect", skipped: tasks.len() - pending.len(), ..Default::default() };
        let mut raw_out = self.run.appender(store::RAW)?;
        let mut drops_out = self.run.appender(store::DROPS)?;
        let mut events = self.run.appender(store::EVENTS)?;
        let mut ledger = self.run.appender(store::LEDGER)?;
        let cfg = self.config.collector;
        run_pool(
            &pending,
            self.config.workers,
            |(task, site)| {
                let oracle = self.oracle.with_scope(format!("{}/collect/{}", task.site, task.id));
                let episode = site
                    .factory
                    .open()
                    .map_err(CollectError::from)
                    .and_then(|mut env| collector::collect(env.as_mut(), &oracle, task, &cfg));
                (*task, episode)
            },
            |(task, episode)| {
                match episode {
                    Ok(ep) => {
                        for e in &ep.events {
                            events.append(&event("collect", e))?;
                        }
                        raw_out.append(&ep.trajectory)?;
                        report.written += 1;
                    }
                    Err(CollectError::Env(e)) => {
                        drops_out.append(&DropRecord {
                            trajectory_id: task.id.clone(),
                            site: task.site.clone(),
                            drop_reason: format!("collection failed: environment failure: {e}"),
                            score: 0,
                        })?;
                        report.dropped += 1;
                    }
                    Err(CollectError::Oracle(e)) => return Err(e.into()),
                }
                self.flush_ledger(&mut ledger)
            },
        )?;
        self.flush_ledger(&mut ledger)?;
        Ok(report)
    }

    /// Stage 3: keep/refine/drop every raw trajectory not yet decided.
    pub fn refine(&self) -> Result<StageReport, PipelineError> {
        let raw: Vec<Trajectory> = self.run.read(store::RAW)?;
        let refined: Vec<RefinedRecord> = self.run.read(store::REFINED)?;
        let drops: Vec<DropRecord> = self.run.read(store::DROPS)?;
        let done: BTreeSet<&str> = refined
            .iter()
            .map(|r| r.trajectory.id())
            .chain(drops.iter().map(|d| d.trajectory_id.as_str()))
            .collect();
        let pending: Vec<&Trajectory> = raw.iter().filter(|t| !done.contains(t.id())).collect();
        let mut report = StageReport { stage: "refine", skipped: raw.len() - pending.len(), ..Default::default() };
        let mut refined_out = self.run.appender(store::REFINED)?;
        let mut drops_out = self.run.appender(store::DROPS)?;
        let mut events = self.run.appender(store::EVENTS)?;
        let mut ledger = self.run.appender(store::LEDGER)?;
        run_pool(
            &pending,
            self.config.workers,
            |t| {
                let oracle = self.oracle.with_scope(format!("{}/refine/{}", t.task.site, t.id()));
                refiner::refine_trajectory(&oracle, t)
            },
            |outcome| {
                match outcome? {
                    RefineOutcome::Kept(r) => {
                        events.append(&event(
                            "refine",
                            json!({"event": "refined", "trajectory_id": r.trajectory.id(), "decision": r.decision,
                                   "from_len": r.original_len, "to_len": r.trajectory.len()}),
                        ))?;
                        refined_out.append(&r)?;
                        report.written += 1;
                    }
                    RefineOutcome::Dropped(d) => {
                        events.append(&event(
                            "refine",
                            json!({"event": "dropped", "trajectory_id": d.trajectory_id, "reason": d.drop_reason}),
                        ))?;
                        drops_out.append(&d)?;
                        report.dropped += 1;
                    }
                }
                self.flush_ledger(&mut ledger)
            },
        )?;
        self.flush_ledger(&mut ledger)?;
        Ok(report)
    }

    /// Stage 4: windowed examples of all refined trajectories (or one
    /// site's), ordered by trajectory id.
    pub fn export(&self, window: Option<usize>, site: Option<&str>) -> Result<Manifest, PipelineError> {
        self.export_to(window, site, self.run.root())
    }

    /// [`Pipeline::export`] into `dir` instead of the run directory.
    pub fn export_to(&self, window: Option<usize>, site: Option<&str>, dir: &Path) -> Result<Manifest, PipelineError> {
        let window = window.unwrap_or(self.config.export.window);
        if window == 0 {
            return Err(PipelineError::Config("window must be positive".into()));
        }
        if let Some(s) = site {
            if self.site(s).is_none() {
                return Err(PipelineError::Config(format!("unknown site {s:?}")));
            }
        }
        let mut refined: Vec<RefinedRecord> = self.run.read(store::REFINED)?;
        refined.retain(|r| site.is_none_or(|s| r.trajectory.task.site == s));
        refined.sort_by(|a, b| a.trajectory.id().cmp(b.trajectory.id()));
        let mut examples = Vec::new();
        for r in &refined {
            examples.extend(dataset::split_examples(&r.trajectory, window)?);
        }
        Ok(dataset::export_jsonl(&examples, dir)?)
    }

    /// Corpus statistics, with per-site diversity judged once per run.
    pub fn stats(&self) -> Result<CorpusStats, PipelineError> {
        let tasks: Vec<Task> = self.run.read(store::TASKS)?;
        let mut checkpoints = self.run.checkpoints()?;
        if self.config.stats.judge_diversity {
            let mut ledger = self.run.appender(store::LEDGER)?;
            for site in &self.sites {
                let name = &site.config.name;
                let site_tasks: Vec<Task> = tasks.iter().filter(|t| &t.site == name).cloned().collect();
                if checkpoints.diversity.contains_key(name) || site_tasks.len() < 2 {
                    continue;
                }
                let oracle = self.oracle.with_scope(format!("{name}/diversity"));
                let mut rng = stage_rng(self.config.seed, name, "diversity");
                let reply = dataset::judge_diversity(&oracle, &site_tasks, &mut rng)?;
                self.flush_ledger(&mut ledger)?;
                checkpoints.diversity.insert(name.clone(), reply.score);
                self.run.save_checkpoints(&checkpoints)?;
            }
        }
        let raw: Vec<Trajectory> = self.run.read(store::RAW)?;
        let refined: Vec<RefinedRecord> = self.run.read(store::REFINED)?;
        let drops: Vec<DropRecord> = self.run.read(store::DROPS)?;
        let ledger: Vec<CallRecord> = self.run.read(store::LEDGER)?;
        let mut stats = dataset::compute_stats(&tasks, &raw, &refined, &drops, &ledger);
        for (site, s) in stats.sites.iter_mut() {
            s.diversity_score = checkpoints.diversity.get(site).copied();
        }
        let scores: Vec<u32> = stats.sites.values().filter_map(|s| s.diversity_score).map(u32::from).collect();
        if !scores.is_empty() {
            let mean = (scores.iter().sum::<u32>() as f64 / scores.len() as f64).round();
            stats.overall.diversity_score = Some(mean as u8);
        }
        self.run.write_json(store::STATS, &stats)?;
        Ok(stats)
    }

    /// All stages in order.
    pub fn run_all(&self) -> Result<(Manifest, CorpusStats), PipelineError> {
        self.explore()?;
        self.collect()?;
        self.refine()?;
        let manifest = self.export(None, None)?;
        let stats = self.stats()?;
        Ok((manifest, stats))
    }
}

/// Per-site costs from a ledger file, keyed by the scope's site prefix.
pub fn cost_by_site(records: &[CallRecord]) -> BTreeMap<String, rust_decimal::Decimal> {
    let mut out = BTreeMap::new();
    for r in records {
        *out.entry(dataset::site_of_scope(&r.scope).to_string()).or_default() += r.cost_usd;
    }
    out
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("run", &self.run.root())
            .field("sites", &self.sites.iter().map(|s| &s.config.name).collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}
