//! Entanglement scheduling and distribution for buffered quantum networks.

pub mod engine;
pub mod experiment;
pub mod layout;
pub mod lp;
pub mod mred;
pub mod protocol;
pub mod rng;
pub mod scheduler;
pub mod topology;
pub mod workload;
