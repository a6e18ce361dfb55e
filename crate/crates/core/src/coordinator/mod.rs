//! Coordinator logic: data allocation, gradient reduction, latency-aware
//! budgets and the per-project iteration state machine. Networking lives
//! elsewhere; everything here is driven by explicit calls and a caller
//! supplied clock.

mod allocation;
mod latency;
mod project;
mod reduce;

pub use allocation::{AllocationChanges, AllocationDelta, DataIndexTable, DatumState, DuplicateIds, WorkerId};
pub use latency::{budget_for, time_budget_ms, BudgetMode, LatencyEstimator};
pub use project::{
    Boundary, Outgoing, Project, ProjectConfig, ProjectError, ProjectSummary, ReportOutcome,
    WorkerRecord,
};
pub use reduce::reduce;
