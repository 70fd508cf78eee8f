//! Secure federated averaging over additively shared fixed-point vectors.

pub mod data;
pub mod exec;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod protocol;
pub mod ring;
pub mod seed;
pub mod sharing;
pub mod transport;

pub use exec::Execution;
