//! Risk assessment workbench for communication networks with shared backup
//! path protection (SBPP).
//!
//! The crate has two halves that meet in the middle:
//!
//! * A ground-truth side: random or imported topologies ([`topology`]),
//!   SLA provisioning with router-disjoint working/backup paths
//!   ([`provisioning`]), stochastic link up/down models ([`reliability`])
//!   and a discrete-event simulator ([`simulator`]) that prices SLA
//!   downtime into per-year penalties.
//! * A surrogate side: scenarios are flattened into a bipartite
//!   SLA/component metagraph ([`metagraph`]), fed to a message-passing
//!   neural model with a Student-t output head ([`model`]), trained on
//!   simulated penalties ([`training`]) and queried for risk measures
//!   such as VaR and CVaR ([`risk`]).
//!
//! Everything is deterministic given explicit seeds, independent of the
//! number of worker threads.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod linalg;
pub mod metagraph;
pub mod model;
pub mod paths;
pub mod provisioning;
pub mod reliability;
pub mod risk;
pub mod rng;
pub mod simulator;
pub mod sndlib;
pub mod tdist;
pub mod topology;
pub mod training;

pub use error::{Error, Result};
