//! Deterministic discrete-event simulation of a cloud model serving requests
//! together with a pool of edge devices, plus the baseline policies.

mod config;
mod engine;
mod report;

pub use config::{
    Arrival, BackendConfig, CategoryWeight, ClusterSpec, CloudSpec, EdgeModelSpec, LengthDistribution, Policy, RunConfig,
    WorkloadSpec,
};
pub use engine::{
    calibrate, generate_workload, routing_baseline, run, run_sweep, run_with_backend, Calibration, RouteTarget,
    SweepParam,
};
pub use report::{
    CalibrationSummary, Counts, CsvRow, EnqueueRecord, QueryMode, QueryRecord, RunReport, StageLatencies, Trace,
};
