//! Core library for ember: a backend-pluggable processor stress-workload
//! toolkit with a deterministic workload model, an analytical machine
//! simulator, a metric/measurement framework, and an NSGA-II auto-tuner.

pub mod machine;
pub mod measurement;
pub mod metrics;
pub mod optimizer;
pub mod pipeline;
pub mod workload;
