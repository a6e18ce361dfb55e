use serde::{Deserialize, Serialize};

use crate::protocol::Budget;

/// Smoothed one-way latency of a worker link.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyEstimator {
    ewma_ms: f64,
    samples: u64,
}

impl LatencyEstimator {
    pub fn ewma_ms(&self) -> f64 {
        self.ewma_ms
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    /// Folds in one round trip. `compute_ms` is the time the worker spent
    /// computing; the remainder is split evenly between the two directions.
    pub fn observe(&mut self, rtt_ms: f64, compute_ms: f64) {
        let rtt = if rtt_ms.is_finite() { rtt_ms.max(0.0) } else { 0.0 };
        let compute = if compute_ms.is_finite() { compute_ms.max(0.0) } else { 0.0 };
        let one_way = (rtt - compute).max(0.0) / 2.0;
        self.ewma_ms = 0.8 * self.ewma_ms + 0.2 * one_way;
        self.samples += 1;
    }
}

/// Compute budget for a worker in time mode: the iteration period minus a
/// round trip and the reduce margin, never below `min_budget_ms`.
pub fn time_budget_ms(period_s: f64, ewma_ms: f64, reduce_margin_ms: u64, min_budget_ms: u64) -> u64 {
    let raw = period_s * 1000.0 - 2.0 * ewma_ms - reduce_margin_ms as f64;
    if raw.is_finite() && raw > min_budget_ms as f64 {
        raw.floor() as u64
    } else {
        min_budget_ms
    }
}

/// How work orders size their budgets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    TimeBudget,
    StepBudget,
}

pub fn budget_for(
    mode: BudgetMode,
    period_s: f64,
    ewma_ms: f64,
    reduce_margin_ms: u64,
    min_budget_ms: u64,
    steps: u64,
) -> Budget {
    match mode {
        BudgetMode::TimeBudget => Budget::BudgetMs(time_budget_ms(
            period_s,
            ewma_ms,
            reduce_margin_ms,
            min_budget_ms,
        )),
        BudgetMode::StepBudget => Budget::Steps(steps),
    }
}
