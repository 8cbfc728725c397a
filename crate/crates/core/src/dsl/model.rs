//! Typed sandbox configuration and its lowering from the block tree.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use super::reader::{self, expect_identifier, expect_keyword, identifier_label, no_label, Reader, UnknownKey};
use super::syntax::{Block, Literal, Pos};
use super::ParseError;
use crate::vocab::{ControlStatus, Dimension, Priority, ReportFormat, Resources, RiskClass, Role, UnknownKeyword, Zone};

/// The schema version written when a document does not state one.
pub const CURRENT_SCHEMA_VERSION: &str = "1.0.0";
pub const KNOWN_SCHEMA_VERSIONS: &[&str] = &["1.0.0"];

/// One parsed sandbox configuration.
///
/// Keyed collections keep declaration order, but equality ignores it (and
/// ignores positions), so a document equals its canonical re-parse.
#[derive(Debug, Clone)]
pub struct ConfigDocument {
    pub pos: Pos,
    pub name: String,
    pub schema_version: String,
    /// Waives coverage gaps at planning time.
    pub allow_gaps: bool,
    pub system: SystemProfile,
    pub objectives: Vec<ObjectiveSpec>,
    pub controls: Vec<ControlSpec>,
    pub tests: Vec<TestSpec>,
    pub infrastructure: InfraSpec,
    pub access: Vec<AccessRule>,
    pub reporting: ReportSpec,
    /// Keys no schema rule consumed; reported by validation.
    pub unknown: Vec<UnknownKey>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemProfile {
    pub pos: Pos,
    pub system_name: String,
    pub risk_class: RiskClass,
    pub domain_tag: String,
    pub dimensions: BTreeSet<Dimension>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveSpec {
    pub pos: Pos,
    pub objective_id: String,
    pub priority: Priority,
    pub parameters: BTreeMap<String, Literal>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct GuidelineRef {
    pub source: String,
    pub clause: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlSpec {
    pub pos: Pos,
    pub control_id: String,
    pub activity: String,
    pub control_type: Option<String>,
    pub guideline: Option<GuidelineRef>,
    pub status: ControlStatus,
    pub dimension: Dimension,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestSpec {
    pub pos: Pos,
    pub test_id: String,
    pub objective: String,
    /// `capability@range`, e.g. `noise-perturbation@^1.0.0`.
    pub method: String,
    pub dimension: Dimension,
    /// Input name to artefact reference (`sha256:<hex>`).
    pub inputs: BTreeMap<String, String>,
    pub seed: u64,
    pub budget: Option<Resources>,
    pub executor: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfraSpec {
    pub pos: Pos,
    pub executors: BTreeSet<String>,
    pub max_cpu_seconds: u64,
    pub max_storage_bytes: u64,
}

impl InfraSpec {
    pub fn limits(&self) -> Resources {
        Resources { cpu_seconds: self.max_cpu_seconds, storage_bytes: self.max_storage_bytes }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccessRule {
    pub pos: Pos,
    pub role: Role,
    pub zones: BTreeSet<Zone>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSpec {
    pub pos: Pos,
    pub formats: BTreeSet<ReportFormat>,
}

impl ConfigDocument {
    pub fn objective(&self, id: &str) -> Option<&ObjectiveSpec> {
        self.objectives.iter().find(|o| o.objective_id == id)
    }

    pub fn test(&self, id: &str) -> Option<&TestSpec> {
        self.tests.iter().find(|t| t.test_id == id)
    }

    pub fn control(&self, id: &str) -> Option<&ControlSpec> {
        self.controls.iter().find(|c| c.control_id == id)
    }
}

fn sorted_by<'a, T, K: Ord>(items: &'a [T], key: impl Fn(&T) -> K) -> Vec<&'a T> {
    let mut v: Vec<&T> = items.iter().collect();
    v.sort_by_key(|t| key(t));
    v
}

impl PartialEq for ConfigDocument {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.schema_version == other.schema_version
            && self.allow_gaps == other.allow_gaps
            && self.system == other.system
            && sorted_by(&self.objectives, |o| o.objective_id.clone())
                == sorted_by(&other.objectives, |o| o.objective_id.clone())
            && sorted_by(&self.controls, |c| c.control_id.clone())
                == sorted_by(&other.controls, |c| c.control_id.clone())
            && sorted_by(&self.tests, |t| t.test_id.clone()) == sorted_by(&other.tests, |t| t.test_id.clone())
            && self.infrastructure == other.infrastructure
            && sorted_by(&self.access, |a| a.role) == sorted_by(&other.access, |a| a.role)
            && self.reporting == other.reporting
            && self.unknown == other.unknown
    }
}

/// Parses a keyword list into a set, rejecting repeats.
fn keyword_set<T>(r: &mut Reader<'_>, key: &str) -> Result<Option<BTreeSet<T>>, ParseError>
where
    T: FromStr<Err = UnknownKeyword> + Ord + Copy + std::fmt::Display,
{
    let path = r.path().to_string();
    let Some(f) = r.field(key) else { return Ok(None) };
    let Literal::List(items) = &f.value else { return Err(reader::mismatch(f, "a list", &f.value)) };
    let mut out = BTreeSet::new();
    for lit in items {
        let v: T = expect_keyword(f, lit)?;
        if !out.insert(v) {
            return Err(ParseError::Duplicate { what: format!("`{key}` entry in `{path}`"), id: v.to_string(), first: f.value_pos, second: f.value_pos });
        }
    }
    Ok(Some(out))
}

struct IdRegistry {
    what: &'static str,
    seen: BTreeMap<String, Pos>,
}

impl IdRegistry {
    fn new(what: &'static str) -> Self {
        IdRegistry { what, seen: BTreeMap::new() }
    }

    fn claim(&mut self, id: &str, pos: Pos) -> Result<(), ParseError> {
        if let Some(first) = self.seen.get(id) {
            return Err(ParseError::Duplicate { what: self.what.to_string(), id: id.to_string(), first: *first, second: pos });
        }
        self.seen.insert(id.to_string(), pos);
        Ok(())
    }
}

pub(super) fn lower(root: &Block) -> Result<ConfigDocument, ParseError> {
    let name = match &root.label {
        Some(w) if w.quoted => w.text.clone(),
        Some(w) => {
            return Err(ParseError::Syntax { pos: w.pos, expected: vec!["quoted sandbox name".into()], found: format!("identifier `{}`", w.text) })
        }
        None => {
            return Err(ParseError::Syntax { pos: root.head.pos, expected: vec!["quoted sandbox name".into()], found: "`{`".into() })
        }
    };
    let mut unknown = Vec::new();
    let mut r = Reader::new(root, "")?;
    let schema_version = r.string("schema_version")?.unwrap_or_else(|| CURRENT_SCHEMA_VERSION.to_string());
    let allow_gaps = r.boolean("allow_gaps")?.unwrap_or(false);

    let system = lower_system(r.required_block("system")?, &mut unknown)?;

    let mut objectives = Vec::new();
    if let Some(section) = r.block("objectives")? {
        no_label(section)?;
        let mut ids = IdRegistry::new("objective");
        let mut sr = Reader::new(section, "objectives")?;
        unknown.extend(sr.remaining_fields().into_iter().map(|f| UnknownKey { pos: f.pos, path: "objectives".into(), key: f.key.clone() }));
        for b in sr.remaining_blocks() {
            no_label(b)?;
            ids.claim(&b.head.text, b.head.pos)?;
            objectives.push(lower_objective(b, &mut unknown)?);
        }
    }

    // Tests and controls share one identifier namespace: both become plan steps.
    let mut step_ids = IdRegistry::new("test/control identifier");
    let mut controls = Vec::new();
    if let Some(section) = r.block("controls")? {
        no_label(section)?;
        let mut sr = Reader::new(section, "controls")?;
        for b in sr.blocks("control") {
            let (pos, id) = identifier_label(b)?;
            step_ids.claim(&id, pos)?;
            controls.push(lower_control(b, id, &mut unknown)?);
        }
        unknown.extend(sr.finish());
    }

    let mut tests = Vec::new();
    if let Some(section) = r.block("tests")? {
        no_label(section)?;
        let mut sr = Reader::new(section, "tests")?;
        for b in sr.blocks("test") {
            let (pos, id) = identifier_label(b)?;
            step_ids.claim(&id, pos)?;
            tests.push(lower_test(b, id, &mut unknown)?);
        }
        unknown.extend(sr.finish());
    }

    let infrastructure = lower_infra(r.required_block("infrastructure")?, &mut unknown)?;

    let mut access = Vec::new();
    if let Some(section) = r.block("access")? {
        no_label(section)?;
        let mut roles = IdRegistry::new("access role");
        let mut sr = Reader::new(section, "access")?;
        for b in sr.blocks("role") {
            let label = b.label.as_ref().ok_or_else(|| ParseError::Syntax {
                pos: b.head.pos,
                expected: vec!["role name after `role`".into()],
                found: "`{`".into(),
            })?;
            let role: Role = label.text.parse().map_err(|e: UnknownKeyword| ParseError::InvalidEnum {
                pos: label.pos,
                field: "role".into(),
                value: label.text.clone(),
                expected: e.expected.iter().map(|s| s.to_string()).collect(),
            })?;
            roles.claim(role.as_str(), label.pos)?;
            let path = format!("access/{role}");
            let mut rr = Reader::new(b, path)?;
            let zones = keyword_set::<Zone>(&mut rr, "zones")?;
            let zones = match zones {
                Some(z) => z,
                None => return Err(ParseError::Missing { pos: b.head.pos, block: rr.path().to_string(), field: "zones".into() }),
            };
            unknown.extend(rr.finish());
            access.push(AccessRule { pos: b.head.pos, role, zones });
        }
        unknown.extend(sr.finish());
    }

    let reporting = match r.block("reporting")? {
        Some(b) => {
            no_label(b)?;
            let mut rr = Reader::new(b, "reporting")?;
            let formats = keyword_set::<ReportFormat>(&mut rr, "formats")?
                .ok_or(ParseError::Missing { pos: b.head.pos, block: "reporting".into(), field: "formats".into() })?;
            unknown.extend(rr.finish());
            ReportSpec { pos: b.head.pos, formats }
        }
        None => ReportSpec { pos: root.head.pos, formats: BTreeSet::from([ReportFormat::Json]) },
    };

    unknown.extend(r.finish());
    Ok(ConfigDocument {
        pos: root.head.pos,
        name,
        schema_version,
        allow_gaps,
        system,
        objectives,
        controls,
        tests,
        infrastructure,
        access,
        reporting,
        unknown,
    })
}

fn lower_system(b: &Block, unknown: &mut Vec<UnknownKey>) -> Result<SystemProfile, ParseError> {
    no_label(b)?;
    let mut r = Reader::new(b, "system")?;
    let system_name = r.required_string("system_name")?;
    let risk_class = r.required_keyword("risk_class")?;
    let domain_tag = r.string("domain_tag")?.unwrap_or_default();
    let dimensions = keyword_set::<Dimension>(&mut r, "dimensions")?
        .ok_or(ParseError::Missing { pos: b.head.pos, block: "system".into(), field: "dimensions".into() })?;
    unknown.extend(r.finish());
    Ok(SystemProfile { pos: b.head.pos, system_name, risk_class, domain_tag, dimensions })
}

fn lower_objective(b: &Block, unknown: &mut Vec<UnknownKey>) -> Result<ObjectiveSpec, ParseError> {
    let id = b.head.text.clone();
    let path = format!("objectives/{id}");
    let mut r = Reader::new(b, path.clone())?;
    let priority = r.keyword("priority")?.unwrap_or(Priority::Medium);
    let mut parameters = BTreeMap::new();
    if let Some(pb) = r.block("parameters")? {
        no_label(pb)?;
        let ppath = format!("{path}/parameters");
        let mut pr = Reader::new(pb, ppath.clone())?;
        for f in pr.remaining_fields() {
            parameters.insert(f.key.clone(), f.value.clone());
        }
        unknown.extend(pr.finish());
    }
    unknown.extend(r.finish());
    Ok(ObjectiveSpec { pos: b.head.pos, objective_id: id, priority, parameters })
}

pub(crate) fn lower_guideline(b: &Block, path: &str) -> Result<GuidelineRef, ParseError> {
    no_label(b)?;
    let mut r = Reader::new(b, path)?;
    let source = r.required_string("source")?;
    let clause = r.string("clause")?.unwrap_or_default();
    r.finish_strict()?;
    Ok(GuidelineRef { source, clause })
}

fn lower_control(b: &Block, control_id: String, unknown: &mut Vec<UnknownKey>) -> Result<ControlSpec, ParseError> {
    let path = format!("controls/{control_id}");
    let mut r = Reader::new(b, path.clone())?;
    let activity = r.required_string("activity")?;
    let control_type = r.string("control_type")?;
    let guideline = r.block("guideline")?.map(|g| lower_guideline(g, &format!("{path}/guideline"))).transpose()?;
    let status = r.keyword("status")?.unwrap_or(ControlStatus::Declared);
    let dimension = r.keyword("dimension")?.unwrap_or(Dimension::Processes);
    unknown.extend(r.finish());
    Ok(ControlSpec { pos: b.head.pos, control_id, activity, control_type, guideline, status, dimension })
}

fn lower_test(b: &Block, test_id: String, unknown: &mut Vec<UnknownKey>) -> Result<TestSpec, ParseError> {
    let path = format!("tests/{test_id}");
    let mut r = Reader::new(b, path.clone())?;
    let objective = r.required_word("objective")?;
    let method = r.required_string("method")?;
    let dimension = r.required_keyword("dimension")?;
    let seed = r.unsigned("seed")?.unwrap_or(0);
    let executor = match r.field("executor") {
        Some(f) => Some(expect_identifier(f, &f.value)?),
        None => None,
    };
    let mut inputs = BTreeMap::new();
    if let Some(ib) = r.block("inputs")? {
        no_label(ib)?;
        let mut ir = Reader::new(ib, format!("{path}/inputs"))?;
        for f in ir.remaining_fields() {
            inputs.insert(f.key.clone(), reader::expect_str(f, &f.value)?);
        }
        unknown.extend(ir.finish());
    }
    let budget = match r.block("budget")? {
        Some(bb) => {
            no_label(bb)?;
            let mut br = Reader::new(bb, format!("{path}/budget"))?;
            let cpu_seconds = br.required_unsigned("cpu_seconds")?;
            let storage_bytes = br.required_unsigned("storage_bytes")?;
            unknown.extend(br.finish());
            Some(Resources { cpu_seconds, storage_bytes })
        }
        None => None,
    };
    unknown.extend(r.finish());
    Ok(TestSpec { pos: b.head.pos, test_id, objective, method, dimension, inputs, seed, budget, executor })
}

fn lower_infra(b: &Block, unknown: &mut Vec<UnknownKey>) -> Result<InfraSpec, ParseError> {
    no_label(b)?;
    let mut r = Reader::new(b, "infrastructure")?;
    let executors_field = r.required("executors")?;
    let Literal::List(items) = &executors_field.value else {
        return Err(reader::mismatch(executors_field, "a list", &executors_field.value));
    };
    let mut executors = BTreeSet::new();
    for lit in items {
        let id = expect_identifier(executors_field, lit)?;
        if !executors.insert(id.clone()) {
            return Err(ParseError::Duplicate {
                what: "executor".into(),
                id,
                first: executors_field.value_pos,
                second: executors_field.value_pos,
            });
        }
    }
    let max_cpu_seconds = r.required_unsigned("max_cpu_seconds")?;
    let max_storage_bytes = r.required_unsigned("max_storage_bytes")?;
    unknown.extend(r.finish());
    Ok(InfraSpec { pos: b.head.pos, executors, max_cpu_seconds, max_storage_bytes })
}
