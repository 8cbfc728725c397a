//! Translation chains from objectives to bound test methods and from control
//! activities to control types.
//!
//! The mapping table is data (`mapping_table { ... }` in the block format);
//! the default table is embedded from `data/mapping_default.sbx`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::catalogue::{Binding, Catalogue, Requirement};
use crate::dsl::model::lower_guideline;
use crate::dsl::reader::{identifier_label, no_label, Reader};
use crate::dsl::syntax::parse_single;
use crate::dsl::{ControlSpec, GuidelineRef, ObjectiveSpec, ParseError};
use crate::vocab::{Dimension, TestKind};

pub const DEFAULT_TABLE: &str = include_str!("../data/mapping_default.sbx");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveRow {
    pub test_type: String,
    pub dimension: Dimension,
    pub kind: TestKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestTypeRow {
    pub method: Requirement,
    pub guidelines: Vec<GuidelineRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlTypeRow {
    pub control_type: String,
    pub guidelines: Vec<GuidelineRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingTable {
    pub version: String,
    /// Rows per objective, in table order.
    pub objective_rows: BTreeMap<String, Vec<ObjectiveRow>>,
    pub test_type_rows: BTreeMap<String, TestTypeRow>,
    pub control_rows: BTreeMap<String, Vec<ControlTypeRow>>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MappingError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("invalid mapping table: {0}")]
    Invalid(String),
}

/// One objective matched with one test type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestTypePair {
    pub objective_id: String,
    pub test_type: String,
    pub dimension: Dimension,
    pub kind: TestKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestTypeMapping {
    pub pairs: Vec<TestTypePair>,
    /// Declared objectives with no table row.
    pub unmapped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoveredRow {
    pub objective_id: String,
    pub test_type: String,
    pub dimension: Dimension,
    pub kind: TestKind,
    pub method: Requirement,
    pub binding: Binding,
    pub guidelines: Vec<GuidelineRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gap {
    pub objective_id: String,
    /// Absent when the objective has no table row at all.
    pub test_type: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub covered: Vec<CoveredRow>,
    pub gaps: Vec<Gap>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlMapping {
    pub control_id: String,
    pub activity: String,
    pub dimension: Dimension,
    pub control_type: Option<String>,
    pub guidelines: Vec<GuidelineRef>,
    /// Set when the activity (or the requested control type) has no row.
    pub flagged: bool,
}

impl MappingTable {
    pub fn default_table() -> Self {
        Self::parse(DEFAULT_TABLE).expect("embedded mapping table is valid")
    }

    pub fn parse(source: &str) -> Result<Self, MappingError> {
        let root = parse_single(source, "mapping_table")?;
        no_label(&root)?;
        let mut r = Reader::new(&root, "mapping_table")?;
        let version = r.required_string("version")?;

        let mut objective_rows = BTreeMap::new();
        if let Some(section) = r.block("objectives")? {
            no_label(section)?;
            let mut sr = Reader::new(section, "objectives")?;
            for ob in sr.remaining_blocks() {
                no_label(ob)?;
                let id = ob.head.text.clone();
                let mut rows: Vec<ObjectiveRow> = Vec::new();
                let mut orr = Reader::new(ob, format!("objectives/{id}"))?;
                for rb in orr.blocks("row") {
                    let (_, test_type) = identifier_label(rb)?;
                    let mut rr = Reader::new(rb, format!("objectives/{id}/{test_type}"))?;
                    let dimension = rr.required_keyword("dimension")?;
                    let kind = rr.required_keyword("kind")?;
                    rr.finish_strict()?;
                    if rows.iter().any(|x| x.test_type == test_type) {
                        return Err(MappingError::Invalid(format!("objective `{id}` lists `{test_type}` twice")));
                    }
                    rows.push(ObjectiveRow { test_type, dimension, kind });
                }
                orr.finish_strict()?;
                if objective_rows.insert(id.clone(), rows).is_some() {
                    return Err(MappingError::Invalid(format!("objective `{id}` appears twice")));
                }
            }
            sr.finish_strict()?;
        }

        let mut test_type_rows = BTreeMap::new();
        if let Some(section) = r.block("test_types")? {
            no_label(section)?;
            let mut sr = Reader::new(section, "test_types")?;
            for tb in sr.blocks("test_type") {
                let (_, id) = identifier_label(tb)?;
                let path = format!("test_types/{id}");
                let mut tr = Reader::new(tb, path.clone())?;
                let mf = tr.required("method")?;
                let text = crate::dsl::reader::expect_str(mf, &mf.value)?;
                let method = Requirement::parse_query(&text).map_err(|e| ParseError::InvalidValue {
                    pos: mf.value_pos,
                    field: "method".into(),
                    message: e.to_string(),
                })?;
                let guidelines =
                    tr.blocks("guideline").into_iter().map(|g| lower_guideline(g, &format!("{path}/guideline"))).collect::<Result<Vec<_>, _>>()?;
                tr.finish_strict()?;
                if test_type_rows.insert(id.clone(), TestTypeRow { method, guidelines }).is_some() {
                    return Err(MappingError::Invalid(format!("test type `{id}` appears twice")));
                }
            }
            sr.finish_strict()?;
        }

        let mut control_rows = BTreeMap::new();
        if let Some(section) = r.block("controls")? {
            no_label(section)?;
            let mut sr = Reader::new(section, "controls")?;
            for ab in sr.blocks("activity") {
                let (_, activity) = identifier_label(ab)?;
                let mut ar = Reader::new(ab, format!("controls/{activity}"))?;
                let mut rows = Vec::new();
                for cb in ar.blocks("control_type") {
                    let (_, control_type) = identifier_label(cb)?;
                    let path = format!("controls/{activity}/{control_type}");
                    let mut cr = Reader::new(cb, path.clone())?;
                    let guidelines = cr
                        .blocks("guideline")
                        .into_iter()
                        .map(|g| lower_guideline(g, &format!("{path}/guideline")))
                        .collect::<Result<Vec<_>, _>>()?;
                    cr.finish_strict()?;
                    rows.push(ControlTypeRow { control_type, guidelines });
                }
                ar.finish_strict()?;
                if control_rows.insert(activity.clone(), rows).is_some() {
                    return Err(MappingError::Invalid(format!("activity `{activity}` appears twice")));
                }
            }
            sr.finish_strict()?;
        }
        r.finish_strict()?;

        let table = MappingTable { version, objective_rows, test_type_rows, control_rows };
        table.check()?;
        Ok(table)
    }

    fn check(&self) -> Result<(), MappingError> {
        for (objective, rows) in &self.objective_rows {
            for row in rows {
                if !self.test_type_rows.contains_key(&row.test_type) {
                    return Err(MappingError::Invalid(format!(
                        "objective `{objective}` references undefined test type `{}`",
                        row.test_type
                    )));
                }
                let expected = match row.kind {
                    TestKind::Behavioral => Dimension::FinalProduct,
                    TestKind::Statistical => Dimension::DataModels,
                };
                if row.dimension != expected {
                    return Err(MappingError::Invalid(format!(
                        "`{objective}`/`{}`: {} tests must target {expected}",
                        row.test_type, row.kind
                    )));
                }
            }
        }
        for (id, row) in &self.test_type_rows {
            if row.guidelines.iter().any(|g| g.source.trim().is_empty()) {
                return Err(MappingError::Invalid(format!("test type `{id}` has a guideline with an empty source")));
            }
        }
        Ok(())
    }
}

/// Table rows for each declared objective, in declaration order then table
/// order. Objectives without rows are reported, not rejected.
pub fn objectives_to_test_types(objectives: &[ObjectiveSpec], table: &MappingTable) -> TestTypeMapping {
    let mut out = TestTypeMapping::default();
    for o in objectives {
        match table.objective_rows.get(&o.objective_id) {
            Some(rows) if !rows.is_empty() => out.pairs.extend(rows.iter().map(|r| TestTypePair {
                objective_id: o.objective_id.clone(),
                test_type: r.test_type.clone(),
                dimension: r.dimension,
                kind: r.kind,
            })),
            _ => out.unmapped.push(o.objective_id.clone()),
        }
    }
    out
}

/// Binds each pair's method query through the catalogue. Failures become
/// gaps carrying the resolver's explanation.
pub fn test_types_to_methods(mapping: &TestTypeMapping, table: &MappingTable, catalogue: &Catalogue) -> CoverageReport {
    let mut report = CoverageReport::default();
    for pair in &mapping.pairs {
        let row = &table.test_type_rows[&pair.test_type];
        match catalogue.resolve(std::slice::from_ref(&row.method)) {
            Ok(resolution) => report.covered.push(CoveredRow {
                objective_id: pair.objective_id.clone(),
                test_type: pair.test_type.clone(),
                dimension: pair.dimension,
                kind: pair.kind,
                method: row.method.clone(),
                binding: resolution.bindings[&row.method.capability].clone(),
                guidelines: row.guidelines.clone(),
            }),
            Err(e) => report.gaps.push(Gap {
                objective_id: pair.objective_id.clone(),
                test_type: Some(pair.test_type.clone()),
                reason: e.to_string(),
            }),
        }
    }
    for objective in &mapping.unmapped {
        report.gaps.push(Gap {
            objective_id: objective.clone(),
            test_type: None,
            reason: format!("mapping table has no test type for objective `{objective}`"),
        });
    }
    report
}

/// Both testing stages in one call.
pub fn coverage(objectives: &[ObjectiveSpec], table: &MappingTable, catalogue: &Catalogue) -> CoverageReport {
    test_types_to_methods(&objectives_to_test_types(objectives, table), table, catalogue)
}

/// Joins each control to its activity row. A control naming a control type
/// takes that row; otherwise the first row of the activity applies.
pub fn controls_to_control_types(controls: &[ControlSpec], table: &MappingTable) -> Vec<ControlMapping> {
    controls
        .iter()
        .map(|c| {
            let rows = table.control_rows.get(&c.activity);
            let row = rows.and_then(|rows| match &c.control_type {
                Some(t) => rows.iter().find(|r| &r.control_type == t),
                None => rows.first(),
            });
            let mut guidelines = row.map(|r| r.guidelines.clone()).unwrap_or_default();
            if let Some(g) = &c.guideline {
                if !guidelines.contains(g) {
                    guidelines.push(g.clone());
                }
            }
            ControlMapping {
                control_id: c.control_id.clone(),
                activity: c.activity.clone(),
                dimension: c.dimension,
                control_type: row.map(|r| r.control_type.clone()).or_else(|| c.control_type.clone()),
                guidelines,
                flagged: row.is_none(),
            }
        })
        .collect()
}
