//! Simulation harness: scenarios, adversary, cost accounting and suites.

pub mod cost;
pub mod scenario;
pub mod sim;
pub mod suites;

pub use cost::{cost_formulas, CostError, CostReport, Params, Scheme};
pub use scenario::{run, RunOutput, Scenario};
pub use sim::{AdversaryConfig, SimConfig, SimError, Simulation, Verdict};
