//! Continuous-time discrete choice with randomly considered peers.
//!
//! Agents on a directed network revise choices at Poisson times. At each
//! revision the agent draws a random subset of her reference group (the
//! active set), then chooses from a rule driven by the active set's average
//! choice. The crate builds the induced Markov generator, solves for the
//! stationary distribution, simulates event-level and snapshot observation
//! schemes, and recovers the network, selection kernel, choice rules, and
//! clock rates back from those observations.

pub mod config;
pub mod embedding;
pub mod equilibrium;
pub mod error;
pub mod files;
pub mod identify;
pub mod model;
pub mod report;
pub mod scenario;
pub mod simulate;

pub use config::ChoiceConfiguration;
pub use error::{Error, Result};
pub use model::{
    validate_assumptions, AssumptionReport, CcpCell, CcpProvenance, CcpTable, ChoiceRule,
    LogitRule, ModelSpec, PeerAverage, SelectionKernel, TabularRule,
};
