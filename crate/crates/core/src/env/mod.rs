//! The environment interface and its deterministic site-graph simulator.

mod sim;
mod site_graph;

pub use sim::SimSession;
pub use site_graph::{
    BelowFold, Effect, PageSpec, SiteGraph, SiteGraphError, Transition, SITE_GRAPH_SCHEMA_VERSION,
};

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::model::Observation;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid site graph: {0}")]
    InvalidGraph(#[from] SiteGraphError),
    #[error("element {0} not found in the current observation")]
    ElementNotFound(u32),
    #[error("session is terminal; no actions accepted after none/stop")]
    SessionTerminal,
    #[error("could not connect to browser endpoint: {0}")]
    ConnectFailed(String),
    #[error("browser protocol error: {0}")]
    Protocol(String),
}

/// Result of executing one action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionOutcome {
    /// True iff the serialized observation differs before/after.
    pub changed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TransitionOutcome {
    pub fn noop() -> Self {
        TransitionOutcome {
            changed: false,
            error: None,
        }
    }

    pub fn failed(error: impl Into<String>) -> Self {
        TransitionOutcome {
            changed: false,
            error: Some(error.into()),
        }
    }
}

/// A partially observable environment: the simulator and the live-browser
/// adapter both implement this.
pub trait Environment {
    /// Restarts the episode at the start page with fresh state.
    fn reset(&mut self) -> Result<(), EnvError>;

    fn observe(&mut self) -> Result<Observation, EnvError>;

    fn execute(&mut self, action: &Action) -> Result<TransitionOutcome, EnvError>;
}

impl<E: Environment + ?Sized> Environment for Box<E> {
    fn reset(&mut self) -> Result<(), EnvError> {
        (**self).reset()
    }

    fn observe(&mut self) -> Result<Observation, EnvError> {
        (**self).observe()
    }

    fn execute(&mut self, action: &Action) -> Result<TransitionOutcome, EnvError> {
        (**self).execute(action)
    }
}

/// Opens independent sessions, one per worker.
pub trait EnvFactory: Send + Sync {
    fn open(&self) -> Result<Box<dyn Environment + Send>, EnvError>;
}

/// Factory for simulator sessions over a shared graph.
#[derive(Debug, Clone)]
pub struct SimFactory {
    graph: Arc<SiteGraph>,
}

impl SimFactory {
    pub fn new(mut graph: SiteGraph) -> Result<Self, EnvError> {
        graph.validate()?;
        Ok(SimFactory {
            graph: Arc::new(graph),
        })
    }

    pub fn graph(&self) -> &SiteGraph {
        &self.graph
    }
}

impl EnvFactory for SimFactory {
    fn open(&self) -> Result<Box<dyn Environment + Send>, EnvError> {
        Ok(Box::new(SimSession::fresh(self.graph.clone())))
    }
}
