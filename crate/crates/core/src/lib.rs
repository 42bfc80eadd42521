//! Ontology-driven multi-task learning.
//!
//! The network mirrors a concept DAG: shared experts feed one
//! representation block per concept, gated both over the experts and over
//! the concept's parents, with decoupled reconstruction and outcome heads.
//! Shared-bottom, ungated mixture, and multi-gate mixture baselines share
//! the same code path.

pub mod datastore;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod ontology;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
