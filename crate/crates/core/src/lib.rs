//! Simulated layer-two payment network whose channel logic runs inside
//! trusted execution environments.

pub mod channel;
pub mod crypto;
pub mod encoding;
pub mod harness;
pub mod ideal;
pub mod ledger;
pub mod multihop;
pub mod program;
pub mod replication;
pub mod tee;
