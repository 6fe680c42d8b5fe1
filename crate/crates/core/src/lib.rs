//! Differentiable macroscopic network traffic simulation.
//!
//! A Link Transmission Model with an incremental node model and DUO /
//! logit-DUO route choice, recorded on a reverse-mode AD tape so any scalar
//! output can be differentiated with respect to scenario parameters.

pub mod ad;
pub mod engine;
pub mod ltm;
pub mod node;
pub mod optimize;
pub mod routing;
pub mod scenario;

pub use ad::{AdError, Tape, Var};
pub use scenario::{Param, ParamSet, Scenario, ScenarioError};
