//! Resource accounting for a finished run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ExecutorDescriptor, RunState, StepResult};
use crate::planner::ExecutionPlan;
use crate::vocab::Resources;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepUsage {
    pub executor_id: Option<String>,
    pub cpu_seconds_used: f64,
    pub storage_bytes_used: u64,
    pub budget: Resources,
    pub over_budget: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecutorUsage {
    pub steps: u64,
    pub cpu_seconds_used: f64,
    pub storage_bytes_used: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub total_cpu_seconds: f64,
    pub total_storage_bytes: u64,
    pub per_executor: BTreeMap<String, ExecutorUsage>,
    pub per_step: BTreeMap<String, StepUsage>,
    /// Steps whose usage exceeded their budget.
    pub flagged: Vec<String>,
}

/// Totals per executor and per step. Every executor of the run is listed,
/// including idle ones. Steps that never ran count as zero.
pub fn account(
    plan: &ExecutionPlan,
    state: &RunState,
    results: &BTreeMap<String, StepResult>,
    executors: &[ExecutorDescriptor],
) -> ResourceReport {
    let mut report = ResourceReport::default();
    for e in executors {
        report.per_executor.insert(e.executor_id.clone(), ExecutorUsage::default());
    }
    for step in &plan.steps {
        let id = &step.step_id;
        let r = results.get(id);
        let cpu = r.map_or(0.0, |r| r.cpu_seconds_used);
        let storage = r.map_or(0, |r| r.storage_bytes_used);
        let over = cpu > step.resource_budget.cpu_seconds as f64 || storage > step.resource_budget.storage_bytes
            || r.is_some_and(|r| r.reason == Some(super::FailureReason::BudgetExceeded));
        let executor_id = r.map(|r| r.executor_id.clone()).or_else(|| state.steps.get(id).and_then(|s| s.executor_id.clone()));
        if let Some(x) = &executor_id {
            let u = report.per_executor.entry(x.clone()).or_default();
            u.steps += 1;
            u.cpu_seconds_used += cpu;
            u.storage_bytes_used += storage;
        }
        report.total_cpu_seconds += cpu;
        report.total_storage_bytes += storage;
        if over {
            report.flagged.push(id.clone());
        }
        report.per_step.insert(
            id.clone(),
            StepUsage { executor_id, cpu_seconds_used: cpu, storage_bytes_used: storage, budget: step.resource_budget, over_budget: over },
        );
    }
    report
}
