//! Assembly of a validated configuration into a deterministic execution plan.
//!
//! A plan is a DAG of test and control-check steps. Its `plan_id` is the
//! SHA-256 of the canonical JSON of everything else in the plan, so a plan
//! certifies itself and two assemblies from the same inputs agree byte for
//! byte.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::catalogue::{Catalogue, Requirement, ResolutionError, Version};
use crate::digest::{canonical_json, canonical_json_pretty, sha256_hex};
use crate::dsl::{self, ConfigDocument, GuidelineRef, ValidationReport};
use crate::mapping::{ControlMapping, CoverageReport, Gap};
use crate::vocab::{Dimension, Resources};

pub const PLAN_FILE: &str = "plan.json";
pub const PLAN_DIGEST_FILE: &str = "plan.sha256";
pub const PLAN_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Test,
    ControlCheck,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StepBinding {
    Module { capability: String, name: String, version: Version, checksum: String },
    Control { control_id: String, activity: String, control_type: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub step_id: String,
    pub kind: StepKind,
    pub dimension: Dimension,
    /// Objective served by a test step.
    pub objective: Option<String>,
    pub test_type: Option<String>,
    pub binding: StepBinding,
    /// Input name to artefact reference (`sha256:<hex>`).
    pub inputs: BTreeMap<String, String>,
    pub seed: u64,
    pub executor_constraint: Option<String>,
    pub resource_budget: Resources,
    pub guidelines: Vec<GuidelineRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub plan_schema: u32,
    pub plan_id: String,
    pub config_name: String,
    pub config_digest: String,
    pub mapping_version: String,
    pub limits: Resources,
    /// Gaps accepted under `allow_gaps`.
    pub waived_gaps: Vec<Gap>,
    /// Sorted by `step_id`.
    pub steps: Vec<PlanStep>,
    /// Sorted, no duplicates.
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error("configuration does not validate ({} error(s))", .0.errors().count())]
    InvalidConfig(ValidationReport),
    #[error("coverage has {} unwaived gap(s): {}", .0.len(), display_gaps(.0))]
    Gaps(Vec<Gap>),
    #[error("step budgets total {total:?}, exceeding infrastructure limits {limit:?}")]
    BudgetExceeded { total: Resources, limit: Resources },
    #[error("step `{step_id}` targets dimension `{dimension}`, which the system profile does not declare")]
    DimensionViolation { step_id: String, dimension: Dimension },
    #[error("method resolution failed: {0}")]
    Resolution(#[from] ResolutionError),
    #[error("test `{test_id}` has an invalid method query: {message}")]
    InvalidMethod { test_id: String, message: String },
    #[error("step id `{0}` is produced twice")]
    DuplicateStep(String),
    #[error("plan contains a cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("plan_id {recorded} does not match recomputed {computed}")]
    IdMismatch { recorded: String, computed: String },
    #[error("malformed plan document: {0}")]
    Malformed(String),
}

fn display_gaps(gaps: &[Gap]) -> String {
    gaps.iter()
        .map(|g| match &g.test_type {
            Some(t) => format!("{}/{t}: {}", g.objective_id, g.reason),
            None => format!("{}: {}", g.objective_id, g.reason),
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// Step id for a covered row no explicit test claimed.
fn row_step_id(objective: &str, test_type: &str) -> String {
    format!("{}.{test_type}", objective.replace(':', "-"))
}

struct PendingTest {
    step_id: String,
    objective: String,
    test_type: Option<String>,
    requirement: Requirement,
    dimension: Dimension,
    inputs: BTreeMap<String, String>,
    seed: u64,
    executor: Option<String>,
    budget: Option<Resources>,
    guidelines: Vec<GuidelineRef>,
}

/// Builds the plan. Explicit tests claim the covered row with the same
/// objective and capability; rows left unclaimed become steps of their own.
pub fn assemble(
    config: &ConfigDocument,
    coverage: &CoverageReport,
    controls: &[ControlMapping],
    catalogue: &Catalogue,
    mapping_version: &str,
) -> Result<ExecutionPlan, PlanError> {
    let report = dsl::validate(config);
    if !report.ok {
        return Err(PlanError::InvalidConfig(report));
    }
    let config_digest = sha256_hex(dsl::canonical::render_tree(&dsl::canonical::to_tree(config)));
    if !coverage.gaps.is_empty() && !config.allow_gaps {
        return Err(PlanError::Gaps(coverage.gaps.clone()));
    }
    let mut waived_gaps = if config.allow_gaps { coverage.gaps.clone() } else { Vec::new() };
    waived_gaps.sort_by(|a, b| (&a.objective_id, &a.test_type).cmp(&(&b.objective_id, &b.test_type)));

    let mut claimed = vec![false; coverage.covered.len()];
    let mut pending: Vec<PendingTest> = Vec::new();
    let mut tests: Vec<&dsl::TestSpec> = config.tests.iter().collect();
    tests.sort_by(|a, b| a.test_id.cmp(&b.test_id));
    for t in tests {
        let requirement = Requirement::parse_query(&t.method)
            .map_err(|e| PlanError::InvalidMethod { test_id: t.test_id.clone(), message: e.to_string() })?;
        let row = coverage.covered.iter().enumerate().find(|(i, r)| {
            !claimed[*i] && r.objective_id == t.objective && r.method.capability == requirement.capability
        });
        let (test_type, guidelines) = match row {
            Some((i, r)) => {
                claimed[i] = true;
                (Some(r.test_type.clone()), r.guidelines.clone())
            }
            None => (None, Vec::new()),
        };
        pending.push(PendingTest {
            step_id: t.test_id.clone(),
            objective: t.objective.clone(),
            test_type,
            requirement,
            dimension: t.dimension,
            inputs: t.inputs.clone(),
            seed: t.seed,
            executor: t.executor.clone(),
            budget: t.budget,
            guidelines,
        });
    }
    for (row, _) in coverage.covered.iter().zip(&claimed).filter(|(_, c)| !**c) {
        pending.push(PendingTest {
            step_id: row_step_id(&row.objective_id, &row.test_type),
            objective: row.objective_id.clone(),
            test_type: Some(row.test_type.clone()),
            requirement: row.method.clone(),
            dimension: row.dimension,
            inputs: BTreeMap::new(),
            seed: 0,
            executor: None,
            budget: None,
            guidelines: row.guidelines.clone(),
        });
    }

    let resolution = if pending.is_empty() {
        None
    } else {
        let roots: Vec<Requirement> = pending.iter().map(|p| p.requirement.clone()).collect();
        Some(catalogue.resolve(&roots)?)
    };

    let mut steps: Vec<PlanStep> = Vec::new();
    let mut ids = BTreeSet::new();
    for p in pending {
        if !config.system.dimensions.contains(&p.dimension) {
            return Err(PlanError::DimensionViolation { step_id: p.step_id, dimension: p.dimension });
        }
        let binding = &resolution.as_ref().expect("resolved when tests exist").bindings[&p.requirement.capability];
        let estimate = catalogue.get(&binding.name, &binding.version).map(|m| m.resource_estimate).unwrap_or_default();
        if !ids.insert(p.step_id.clone()) {
            return Err(PlanError::DuplicateStep(p.step_id));
        }
        steps.push(PlanStep {
            step_id: p.step_id,
            kind: StepKind::Test,
            dimension: p.dimension,
            objective: Some(p.objective),
            test_type: p.test_type,
            binding: StepBinding::Module {
                capability: p.requirement.capability.clone(),
                name: binding.name.clone(),
                version: binding.version,
                checksum: binding.checksum.clone(),
            },
            inputs: p.inputs,
            seed: p.seed,
            executor_constraint: p.executor,
            resource_budget: p.budget.unwrap_or(estimate),
            guidelines: p.guidelines,
        });
    }
    for c in controls {
        if !config.system.dimensions.contains(&c.dimension) || c.dimension == Dimension::FinalProduct {
            return Err(PlanError::DimensionViolation { step_id: c.control_id.clone(), dimension: c.dimension });
        }
        if !ids.insert(c.control_id.clone()) {
            return Err(PlanError::DuplicateStep(c.control_id.clone()));
        }
        steps.push(PlanStep {
            step_id: c.control_id.clone(),
            kind: StepKind::ControlCheck,
            dimension: c.dimension,
            objective: None,
            test_type: None,
            binding: StepBinding::Control {
                control_id: c.control_id.clone(),
                activity: c.activity.clone(),
                control_type: c.control_type.clone(),
            },
            inputs: BTreeMap::new(),
            seed: 0,
            executor_constraint: None,
            resource_budget: Resources::default(),
            guidelines: c.guidelines.clone(),
        });
    }
    steps.sort_by(|a, b| a.step_id.cmp(&b.step_id));

    let limit = config.infrastructure.limits();
    let total = steps.iter().fold(Resources::default(), |acc, s| acc.saturating_add(s.resource_budget));
    if !total.fits_within(limit) {
        return Err(PlanError::BudgetExceeded { total, limit });
    }

    let mut edges: BTreeSet<Edge> = BTreeSet::new();
    if let Some(resolution) = &resolution {
        dependency_edges(&steps, resolution, catalogue, &mut edges);
    }
    for c in steps.iter().filter(|s| s.kind == StepKind::ControlCheck) {
        for t in steps.iter().filter(|s| s.kind == StepKind::Test && s.dimension == c.dimension) {
            edges.insert(Edge { from: c.step_id.clone(), to: t.step_id.clone() });
        }
    }

    let mut plan = ExecutionPlan {
        plan_schema: PLAN_SCHEMA,
        plan_id: String::new(),
        config_name: config.name.clone(),
        config_digest,
        mapping_version: mapping_version.to_string(),
        limits: limit,
        waived_gaps,
        steps,
        edges: edges.into_iter().collect(),
    };
    topological_order(&plan)?;
    plan.plan_id = plan_hash(&plan);
    Ok(plan)
}

/// Edge `b -> a` when test `a`'s module needs the capability test `b`
/// exercises, directly or through modules that are not steps.
fn dependency_edges(
    steps: &[PlanStep],
    resolution: &crate::catalogue::Resolution,
    catalogue: &Catalogue,
    edges: &mut BTreeSet<Edge>,
) {
    let mut by_capability: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for s in steps {
        if let StepBinding::Module { capability, .. } = &s.binding {
            by_capability.entry(capability.as_str()).or_default().push(&s.step_id);
        }
    }
    let requires = |cap: &str| -> Vec<String> {
        resolution
            .bindings
            .get(cap)
            .and_then(|b| catalogue.get(&b.name, &b.version))
            .map(|m| m.requires.iter().map(|r| r.capability.clone()).collect())
            .unwrap_or_default()
    };
    for s in steps {
        let StepBinding::Module { capability, .. } = &s.binding else { continue };
        let mut seen = BTreeSet::new();
        let mut stack = requires(capability);
        while let Some(cap) = stack.pop() {
            if !seen.insert(cap.clone()) {
                continue;
            }
            match by_capability.get(cap.as_str()) {
                Some(providers) => {
                    for p in providers {
                        if *p != s.step_id {
                            edges.insert(Edge { from: p.to_string(), to: s.step_id.clone() });
                        }
                    }
                }
                None => stack.extend(requires(&cap)),
            }
        }
    }
}

fn hash_value(plan: &ExecutionPlan) -> Value {
    let mut value = serde_json::to_value(plan).expect("plan serializes");
    if let Value::Object(map) = &mut value {
        map.remove("plan_id");
        if let Some(Value::Array(steps)) = map.get_mut("steps") {
            steps.sort_by(|a, b| a["step_id"].as_str().cmp(&b["step_id"].as_str()));
        }
    }
    value
}

/// SHA-256 of the canonical serialization, excluding `plan_id` itself.
pub fn plan_hash(plan: &ExecutionPlan) -> String {
    sha256_hex(canonical_json(&hash_value(plan)))
}

impl ExecutionPlan {
    pub fn step(&self, id: &str) -> Option<&PlanStep> {
        self.steps.iter().find(|s| s.step_id == id)
    }

    pub fn verify_id(&self) -> Result<(), PlanError> {
        let computed = plan_hash(self);
        if computed == self.plan_id {
            Ok(())
        } else {
            Err(PlanError::IdMismatch { recorded: self.plan_id.clone(), computed })
        }
    }

    pub fn to_json_pretty(&self) -> String {
        canonical_json_pretty(&serde_json::to_value(self).expect("plan serializes"))
    }

    /// Parses and checks the self-certifying id.
    pub fn from_json(text: &str) -> Result<Self, PlanError> {
        let plan: ExecutionPlan = serde_json::from_str(text).map_err(|e| PlanError::Malformed(e.to_string()))?;
        plan.verify_id()?;
        Ok(plan)
    }

    /// Writes `plan.json` and `plan.sha256` into `dir`.
    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(PLAN_FILE), self.to_json_pretty())?;
        std::fs::write(dir.join(PLAN_DIGEST_FILE), format!("{}\n", self.plan_id))
    }

    /// Direct predecessors of each step.
    pub fn predecessors(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut m: BTreeMap<&str, Vec<&str>> = self.steps.iter().map(|s| (s.step_id.as_str(), Vec::new())).collect();
        for e in &self.edges {
            m.entry(e.to.as_str()).or_default().push(e.from.as_str());
        }
        m
    }

    /// Every step reachable from `id` along edges.
    pub fn descendants(&self, id: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut stack = vec![id.to_string()];
        while let Some(n) = stack.pop() {
            for e in self.edges.iter().filter(|e| e.from == n) {
                if out.insert(e.to.clone()) {
                    stack.push(e.to.clone());
                }
            }
        }
        out
    }

    pub fn ancestors(&self, id: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut stack = vec![id.to_string()];
        while let Some(n) = stack.pop() {
            for e in self.edges.iter().filter(|e| e.to == n) {
                if out.insert(e.from.clone()) {
                    stack.push(e.from.clone());
                }
            }
        }
        out
    }
}

/// Kahn's algorithm; among ready steps the smallest id goes first.
pub fn topological_order(plan: &ExecutionPlan) -> Result<Vec<String>, PlanError> {
    let ids: BTreeSet<&str> = plan.steps.iter().map(|s| s.step_id.as_str()).collect();
    let mut indegree: BTreeMap<&str, usize> = ids.iter().map(|id| (*id, 0)).collect();
    let mut successors: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut predecessors: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in &plan.edges {
        if !ids.contains(e.from.as_str()) || !ids.contains(e.to.as_str()) {
            return Err(PlanError::Malformed(format!("edge {} -> {} names an unknown step", e.from, e.to)));
        }
        *indegree.get_mut(e.to.as_str()).expect("known") += 1;
        successors.entry(&e.from).or_default().push(&e.to);
        predecessors.entry(&e.to).or_default().push(&e.from);
    }
    let mut ready: BTreeSet<&str> = indegree.iter().filter(|(_, d)| **d == 0).map(|(id, _)| *id).collect();
    let mut order = Vec::with_capacity(ids.len());
    while let Some(id) = ready.pop_first() {
        order.push(id.to_string());
        indegree.remove(id);
        for s in successors.get(id).into_iter().flatten() {
            let d = indegree.get_mut(s).expect("pending");
            *d -= 1;
            if *d == 0 {
                ready.insert(s);
            }
        }
    }
    if indegree.is_empty() {
        return Ok(order);
    }
    // Each leftover step has a leftover predecessor; walk backwards until a
    // step repeats, then report the loop in edge direction.
    let mut path: Vec<&str> = vec![*indegree.keys().next().expect("non-empty")];
    loop {
        let last = *path.last().expect("non-empty");
        let prev = *predecessors[last].iter().filter(|p| indegree.contains_key(*p)).min().expect("leftover predecessor");
        if let Some(start) = path.iter().position(|p| *p == prev) {
            let mut cycle: Vec<String> = path[start..].iter().rev().map(|s| s.to_string()).collect();
            cycle.insert(0, prev.to_string());
            return Err(PlanError::Cycle(cycle));
        }
        path.push(prev);
    }
}
