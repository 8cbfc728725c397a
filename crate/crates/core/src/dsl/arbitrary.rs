//! Proptest strategies producing documents that validate.

use std::collections::BTreeSet;

use proptest::collection::{btree_map, btree_set, vec};
use proptest::prelude::*;
use proptest::sample::{select, subsequence};

use super::model::{AccessRule, ConfigDocument, ControlSpec, GuidelineRef, InfraSpec, ObjectiveSpec, ReportSpec, SystemProfile, TestSpec};
use super::syntax::{Literal, Pos};
use super::validate::BUILTIN_OBJECTIVES;
use super::CURRENT_SCHEMA_VERSION;
use crate::vocab::{ControlStatus, Dimension, Priority, ReportFormat, Resources, RiskClass, Role, Zone};

pub fn identifier() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_-]{0,10}"
}

/// Free text, including characters that need escaping.
pub fn text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 _.:/\"\\\\-]{1,16}".prop_filter("not blank", |s| !s.trim().is_empty())
}

fn scalar() -> impl Strategy<Value = Literal> {
    prop_oneof![
        text().prop_map(Literal::Str),
        (-1_000_000_000i64..1_000_000_000).prop_map(Literal::Int),
        (-1.0e6f64..1.0e6).prop_filter("decimal", |x| x.fract() != 0.0).prop_map(Literal::Decimal),
        any::<bool>().prop_map(Literal::Bool),
        identifier().prop_filter("not a keyword", |s| s != "true" && s != "false").prop_map(Literal::Ident),
    ]
}

pub fn literal() -> impl Strategy<Value = Literal> {
    prop_oneof![3 => scalar(), 1 => vec(scalar(), 0..4).prop_map(Literal::List)]
}

pub fn objective_id() -> impl Strategy<Value = String> {
    prop_oneof![select(BUILTIN_OBJECTIVES).prop_map(str::to_string), identifier().prop_map(|s| format!("custom:{s}"))]
}

pub fn digest_ref() -> impl Strategy<Value = String> {
    "[0-9a-f]{64}".prop_map(|h| format!("sha256:{h}"))
}

fn method() -> impl Strategy<Value = String> {
    (identifier(), 0u64..5, 0u64..10, 0u64..10, 0..4usize).prop_map(|(cap, a, b, c, op)| match op {
        0 => format!("{cap}@^{a}.{b}.{c}"),
        1 => format!("{cap}@~{a}.{b}.{c}"),
        2 => format!("{cap}@={a}.{b}.{c}"),
        _ => format!("{cap}@>={a}.{b}.{c}"),
    })
}

fn dimension_set() -> impl Strategy<Value = BTreeSet<Dimension>> {
    subsequence(Dimension::ALL.to_vec(), 1..=Dimension::ALL.len()).prop_map(|v| v.into_iter().collect())
}

fn objectives() -> impl Strategy<Value = Vec<ObjectiveSpec>> {
    btree_map(objective_id(), (select(Priority::ALL), btree_map(identifier(), literal(), 0..3)), 0..4).prop_map(|m| {
        m.into_iter()
            .map(|(objective_id, (priority, parameters))| ObjectiveSpec { pos: Pos::default(), objective_id, priority, parameters })
            .collect()
    })
}

fn controls(dims: Vec<Dimension>) -> BoxedStrategy<Vec<ControlSpec>> {
    if dims.is_empty() {
        return Just(Vec::new()).boxed();
    }
    let guideline = proptest::option::of((text(), text()).prop_map(|(source, clause)| GuidelineRef { source, clause }));
    btree_map(identifier(), (identifier(), proptest::option::of(identifier()), guideline, select(ControlStatus::ALL), select(dims)), 0..4)
        .prop_map(|m| {
            m.into_iter()
                .map(|(control_id, (activity, control_type, guideline, status, dimension))| ControlSpec {
                    pos: Pos::default(),
                    control_id,
                    activity,
                    control_type,
                    guideline,
                    status,
                    dimension,
                })
                .collect()
        })
        .boxed()
}

fn infrastructure() -> impl Strategy<Value = InfraSpec> {
    (btree_set(identifier(), 1..4), 1u64..100_000, 1u64..1_000_000_000).prop_map(|(executors, cpu, storage)| InfraSpec {
        pos: Pos::default(),
        executors,
        max_cpu_seconds: cpu,
        max_storage_bytes: storage,
    })
}

fn tests(objectives: Vec<String>, dims: Vec<Dimension>, infra: InfraSpec) -> BoxedStrategy<Vec<TestSpec>> {
    if objectives.is_empty() {
        return Just(Vec::new()).boxed();
    }
    let executors: Vec<String> = infra.executors.iter().cloned().collect();
    let limits = infra.limits();
    let budget = proptest::option::of((0..=limits.cpu_seconds, 0..=limits.storage_bytes))
        .prop_map(|b| b.map(|(cpu_seconds, storage_bytes)| Resources { cpu_seconds, storage_bytes }));
    let item = (
        select(objectives),
        method(),
        select(dims),
        btree_map(identifier(), digest_ref(), 0..3),
        0u64..1_000_000_000_000,
        budget,
        proptest::option::of(select(executors)),
    );
    btree_map(identifier(), item, 0..4)
        .prop_map(|m| {
            m.into_iter()
                .map(|(test_id, (objective, method, dimension, inputs, seed, budget, executor))| TestSpec {
                    pos: Pos::default(),
                    test_id,
                    objective,
                    method,
                    dimension,
                    inputs,
                    seed,
                    budget,
                    executor,
                })
                .collect()
        })
        .boxed()
}

fn access() -> impl Strategy<Value = Vec<AccessRule>> {
    btree_map(select(Role::ALL), subsequence(Zone::ALL.to_vec(), 1..=Zone::ALL.len()), 0..=Role::ALL.len()).prop_map(|m| {
        m.into_iter().map(|(role, zones)| AccessRule { pos: Pos::default(), role, zones: zones.into_iter().collect() }).collect()
    })
}

/// A configuration document with no validation errors.
pub fn valid_document() -> impl Strategy<Value = ConfigDocument> {
    let risk = select(vec![RiskClass::Minimal, RiskClass::Limited, RiskClass::High]);
    let system = (text(), risk, identifier(), dimension_set());
    (identifier(), any::<bool>(), system, objectives(), infrastructure(), access(), subsequence(ReportFormat::ALL.to_vec(), 1..=2))
        .prop_flat_map(|(name, allow_gaps, (system_name, risk_class, domain_tag, dims), objectives, infra, access, formats)| {
            let control_dims: Vec<Dimension> = dims.iter().copied().filter(|d| *d != Dimension::FinalProduct).collect();
            let ids: Vec<String> = objectives.iter().map(|o| o.objective_id.clone()).collect();
            let dim_list: Vec<Dimension> = dims.iter().copied().collect();
            let base = ConfigDocument {
                pos: Pos::default(),
                name,
                schema_version: CURRENT_SCHEMA_VERSION.to_string(),
                allow_gaps,
                system: SystemProfile { pos: Pos::default(), system_name, risk_class, domain_tag, dimensions: dims },
                objectives,
                controls: Vec::new(),
                tests: Vec::new(),
                infrastructure: infra.clone(),
                access,
                reporting: ReportSpec { pos: Pos::default(), formats: formats.into_iter().collect() },
                unknown: Vec::new(),
            };
            (Just(base), controls(control_dims), tests(ids, dim_list, infra))
        })
        .prop_map(|(mut doc, controls, tests)| {
            doc.controls = controls;
            doc.tests = tests;
            doc
        })
}
