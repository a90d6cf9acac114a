//! Synthetic web-agent data: explore a site, propose tasks, collect
//! trajectories while refining the task online, refine trajectories
//! afterwards, and export windowed training examples.

pub mod action;
pub mod collector;
pub mod dataset;
pub mod env;
pub mod explorer;
pub mod model;
pub mod oracle;
pub mod pipeline;
pub mod refiner;
#[cfg(feature = "webdriver")]
pub mod webdriver;

pub use action::{parse_action, render_action, Action, ActionError, ActionKind};
pub use env::{EnvError, EnvFactory, Environment, SimFactory, SimSession, SiteGraph, TransitionOutcome};
pub use model::*;
