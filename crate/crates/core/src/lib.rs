//! Config-driven knowledge distillation: registry, hooks, losses, data
//! pipeline, model toolkit and a multi-stage training engine.

pub mod builtins;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod hooks;
pub mod logging;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod params;
pub mod registry;
pub mod serialize;
pub mod toolkit;
pub mod zoo;

pub use distill_tensor as tensor;

pub use config::{build_experiment, load_experiment, parse_config, ExperimentConfig};
pub use engine::{run_experiment, run_experiment_observed, ExperimentReport, Metrics, RunOptions};
pub use error::{Error, Issue, Result, Side};
pub use hooks::{HookSpec, IoDictionary, Network};
pub use params::Params;
pub use registry::{Category, Component, Registry};
