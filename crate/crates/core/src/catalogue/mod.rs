//! Catalogue of assessment modules and of technical experts.
//!
//! Released versions are immutable: a `(name, version)` pair is bound to one
//! entrypoint checksum forever. Method queries select modules by capability
//! and version range; [`Catalogue::resolve`] binds a whole set of roots with
//! their transitive requirements.

mod resolve;
pub mod version;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use resolve::{Binding, Requester, Resolution, ResolutionError};
pub use version::{Requirement, Version, VersionError, VersionRange};

use crate::digest::{is_sha256_hex, sha256_hex};
use crate::vocab::{is_identifier, Dimension, LicenseClass, Resources};

/// Version tag of the import/export document.
pub const METADATA_SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleDescriptor {
    pub name: String,
    pub version: Version,
    pub provides: Vec<String>,
    #[serde(default)]
    pub test_types: Vec<String>,
    pub dimension: Dimension,
    #[serde(default)]
    pub requires: Vec<Requirement>,
    pub resource_estimate: Resources,
    pub entrypoint: String,
    pub checksum: String,
    pub license_class: LicenseClass,
}

impl ModuleDescriptor {
    /// `name@version`.
    pub fn id(&self) -> CatalogueId {
        CatalogueId(format!("{}@{}", self.name, self.version))
    }

    pub fn provides(&self, capability: &str) -> bool {
        self.provides.iter().any(|p| p == capability)
    }

    pub fn check(&self) -> Result<(), CatalogueError> {
        let invalid = |message: String| Err(CatalogueError::Invalid { id: self.id().0, message });
        if !is_identifier(&self.name) {
            return invalid(format!("module name `{}` is not an identifier", self.name));
        }
        if self.provides.is_empty() {
            return invalid("a module must provide at least one capability".into());
        }
        if let Some(bad) = self.provides.iter().chain(&self.test_types).find(|c| !is_identifier(c)) {
            return invalid(format!("`{bad}` is not a valid capability or test type"));
        }
        if !is_sha256_hex(&self.checksum) {
            return invalid(format!("checksum `{}` is not 64 lowercase hex characters", self.checksum));
        }
        if self.entrypoint.is_empty() {
            return invalid("entrypoint must not be empty".into());
        }
        if let Some(r) = self.requires.iter().find(|r| self.provides(&r.capability)) {
            return invalid(format!("module requires capability `{}` it provides itself", r.capability));
        }
        Ok(())
    }

    /// Resolves the entrypoint against `base` when it is relative.
    pub fn entrypoint_path(&self, base: &Path) -> std::path::PathBuf {
        let p = Path::new(&self.entrypoint);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }

    /// Checks the checksum against the entrypoint file, when it exists.
    pub fn verify_entrypoint(&self, base: &Path) -> Result<(), CatalogueError> {
        let path = self.entrypoint_path(base);
        match std::fs::read(&path) {
            Ok(bytes) => {
                let actual = sha256_hex(&bytes);
                if actual == self.checksum {
                    Ok(())
                } else {
                    Err(CatalogueError::ChecksumMismatch { id: self.id().0, expected: self.checksum.clone(), actual })
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(CatalogueError::Io(format!("{}: {e}", path.display()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CatalogueId(pub String);

impl std::fmt::Display for CatalogueId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertRecord {
    pub expert_id: String,
    pub name: String,
    #[serde(default)]
    pub accreditations: Vec<String>,
    #[serde(default)]
    pub operable_capabilities: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CatalogueError {
    #[error("invalid descriptor `{id}`: {message}")]
    Invalid { id: String, message: String },
    #[error("`{id}` is already registered with checksum {existing}; released versions are immutable")]
    Conflict { id: String, existing: String, attempted: String },
    #[error("entrypoint of `{id}` hashes to {actual}, expected {expected}")]
    ChecksumMismatch { id: String, expected: String, actual: String },
    #[error("invalid expert record: {0}")]
    InvalidExpert(String),
    #[error("expert `{0}` is already registered with different details")]
    ExpertConflict(String),
    #[error("unsupported metadata_schema_version `{0}` (supported: {METADATA_SCHEMA_VERSION})")]
    SchemaVersion(String),
    #[error("malformed catalogue document: {0}")]
    Malformed(String),
    #[error("{0}")]
    Io(String),
}

/// Capability to experts able to operate it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertCoverage {
    pub experts: Vec<String>,
    pub uncovered: bool,
}

/// The import/export document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogueDocument {
    pub metadata_schema_version: String,
    pub modules: Vec<ModuleDescriptor>,
    #[serde(default)]
    pub experts: Vec<ExpertRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Catalogue {
    modules: BTreeMap<(String, Version), ModuleDescriptor>,
    experts: BTreeMap<String, ExpertRecord>,
}

impl Catalogue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a descriptor. Registering an identical descriptor again
    /// returns the same id; a different checksum for a released version is
    /// a conflict.
    pub fn register(&mut self, descriptor: ModuleDescriptor) -> Result<CatalogueId, CatalogueError> {
        descriptor.check()?;
        let key = (descriptor.name.clone(), descriptor.version);
        if let Some(existing) = self.modules.get(&key) {
            if existing.checksum != descriptor.checksum {
                return Err(CatalogueError::Conflict {
                    id: descriptor.id().0,
                    existing: existing.checksum.clone(),
                    attempted: descriptor.checksum,
                });
            }
            if *existing != descriptor {
                return Err(CatalogueError::Invalid {
                    id: descriptor.id().0,
                    message: "already registered with different metadata".into(),
                });
            }
            return Ok(existing.id());
        }
        let id = descriptor.id();
        self.modules.insert(key, descriptor);
        Ok(id)
    }

    pub fn register_expert(&mut self, expert: ExpertRecord) -> Result<(), CatalogueError> {
        if !is_identifier(&expert.expert_id) {
            return Err(CatalogueError::InvalidExpert(format!("`{}` is not an identifier", expert.expert_id)));
        }
        match self.experts.get(&expert.expert_id) {
            Some(existing) if *existing == expert => Ok(()),
            Some(_) => Err(CatalogueError::ExpertConflict(expert.expert_id)),
            None => {
                self.experts.insert(expert.expert_id.clone(), expert);
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str, version: &Version) -> Option<&ModuleDescriptor> {
        self.modules.get(&(name.to_string(), *version))
    }

    /// All modules, ordered by name then version.
    pub fn modules(&self) -> impl Iterator<Item = &ModuleDescriptor> {
        self.modules.values()
    }

    pub fn experts(&self) -> impl Iterator<Item = &ExpertRecord> {
        self.experts.values()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    /// Modules providing `capability` within `range`, highest version first
    /// (ties by name).
    pub fn query(&self, capability: &str, range: &VersionRange) -> Vec<&ModuleDescriptor> {
        let mut out: Vec<&ModuleDescriptor> =
            self.modules.values().filter(|m| m.provides(capability) && range.matches(&m.version)).collect();
        out.sort_by(|a, b| b.version.cmp(&a.version).then_with(|| a.name.cmp(&b.name)));
        out
    }

    /// Parses `range` first; for callers holding range text.
    pub fn query_str(&self, capability: &str, range: &str) -> Result<Vec<&ModuleDescriptor>, VersionError> {
        let range: VersionRange = range.parse()?;
        Ok(self.query(capability, &range))
    }

    /// For each bound capability, the experts who can operate it.
    pub fn match_experts<'a>(
        resolution: &Resolution,
        experts: impl IntoIterator<Item = &'a ExpertRecord>,
    ) -> BTreeMap<String, ExpertCoverage> {
        let experts: Vec<&ExpertRecord> = experts.into_iter().collect();
        resolution
            .bindings
            .keys()
            .map(|cap| {
                let mut ids: Vec<String> = experts
                    .iter()
                    .filter(|e| e.operable_capabilities.iter().any(|c| c == cap))
                    .map(|e| e.expert_id.clone())
                    .collect();
                ids.sort();
                ids.dedup();
                let uncovered = ids.is_empty();
                (cap.clone(), ExpertCoverage { experts: ids, uncovered })
            })
            .collect()
    }

    pub fn export(&self) -> CatalogueDocument {
        CatalogueDocument {
            metadata_schema_version: METADATA_SCHEMA_VERSION.to_string(),
            modules: self.modules.values().cloned().collect(),
            experts: self.experts.values().cloned().collect(),
        }
    }

    pub fn export_json(&self) -> String {
        let value = serde_json::to_value(self.export()).expect("catalogue serializes");
        crate::digest::canonical_json_pretty(&value)
    }

    pub fn import(doc: CatalogueDocument) -> Result<Self, CatalogueError> {
        if doc.metadata_schema_version != METADATA_SCHEMA_VERSION {
            return Err(CatalogueError::SchemaVersion(doc.metadata_schema_version));
        }
        let mut cat = Catalogue::new();
        for m in doc.modules {
            cat.register(m)?;
        }
        for e in doc.experts {
            cat.register_expert(e)?;
        }
        Ok(cat)
    }

    pub fn import_json(text: &str) -> Result<Self, CatalogueError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| CatalogueError::Malformed(e.to_string()))?;
        if let Some(v) = value.get("metadata_schema_version").and_then(|v| v.as_str()) {
            if v != METADATA_SCHEMA_VERSION {
                return Err(CatalogueError::SchemaVersion(v.to_string()));
            }
        }
        let doc: CatalogueDocument = serde_json::from_value(value).map_err(|e| CatalogueError::Malformed(e.to_string()))?;
        Self::import(doc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn module(name: &str, version: &str, provides: &[&str], requires: &[&str]) -> ModuleDescriptor {
        ModuleDescriptor {
            name: name.into(),
            version: version.parse().unwrap(),
            provides: provides.iter().map(|s| s.to_string()).collect(),
            test_types: vec![],
            dimension: Dimension::FinalProduct,
            requires: requires.iter().map(|q| Requirement::parse_query(q).unwrap()).collect(),
            resource_estimate: Resources { cpu_seconds: 1, storage_bytes: 1 },
            entrypoint: format!("plugins/{name}"),
            checksum: sha256_hex(format!("{name}@{version}")),
            license_class: LicenseClass::Open,
        }
    }

    #[test]
    fn register_is_idempotent() {
        let mut c = Catalogue::new();
        let m = module("noise-perturbation", "1.2.0", &["noise-perturbation"], &[]);
        let a = c.register(m.clone()).unwrap();
        let b = c.register(m).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0, "noise-perturbation@1.2.0");
        assert_eq!(c.modules().count(), 1);
    }

    #[test]
    fn altered_checksum_conflicts() {
        let mut c = Catalogue::new();
        let m = module("noise-perturbation", "1.2.0", &["noise-perturbation"], &[]);
        c.register(m.clone()).unwrap();
        let mut altered = m.clone();
        altered.checksum = sha256_hex("tampered");
        assert!(matches!(c.register(altered), Err(CatalogueError::Conflict { .. })));
        assert_eq!(c.get("noise-perturbation", &"1.2.0".parse().unwrap()).unwrap().checksum, m.checksum);
    }

    #[test]
    fn two_component_version_rejected() {
        let mut v = serde_json::to_value(module("x", "1.2.0", &["x"], &[])).unwrap();
        v["version"] = "1.2".into();
        let err = serde_json::from_value::<ModuleDescriptor>(v).unwrap_err();
        assert!(err.to_string().contains("major.minor.patch"));
    }

    #[test]
    fn bad_checksum_rejected() {
        let mut m = module("x", "1.0.0", &["x"], &[]);
        m.checksum = "ABC".into();
        assert!(matches!(Catalogue::new().register(m), Err(CatalogueError::Invalid { .. })));
    }

    #[test]
    fn query_orders_by_version_descending() {
        let mut c = Catalogue::new();
        for v in ["1.0.0", "2.0.0", "1.2.0"] {
            c.register(module("cap", v, &["cap"], &[])).unwrap();
        }
        let got: Vec<String> = c.query_str("cap", "^1.0.0").unwrap().iter().map(|m| m.version.to_string()).collect();
        assert_eq!(got, ["1.2.0", "1.0.0"]);
        let exact: Vec<String> = c.query_str("cap", "=2.0.0").unwrap().iter().map(|m| m.version.to_string()).collect();
        assert_eq!(exact, ["2.0.0"]);
        assert!(c.query_str("other", "^1.0.0").unwrap().is_empty());
        assert!(c.query_str("cap", "1.0").is_err());
    }

    #[test]
    fn export_import_round_trip() {
        let mut c = Catalogue::new();
        c.register(module("a", "1.1.0", &["a"], &["b@~2.0.0"])).unwrap();
        c.register(module("b", "2.0.3", &["b"], &[])).unwrap();
        c.register_expert(ExpertRecord {
            expert_id: "citcom-expert".into(),
            name: "CitCom node".into(),
            accreditations: vec!["ISO/IEC 17025".into()],
            operable_capabilities: vec!["a".into()],
        })
        .unwrap();
        let text = c.export_json();
        assert!(text.contains("\"metadata_schema_version\": \"1\""));
        assert_eq!(Catalogue::import_json(&text).unwrap(), c);
        let bumped = text.replace("\"metadata_schema_version\": \"1\"", "\"metadata_schema_version\": \"2\"");
        assert!(matches!(Catalogue::import_json(&bumped), Err(CatalogueError::SchemaVersion(_))));
    }

    #[test]
    fn experts_matched_and_uncovered_flagged() {
        let mut c = Catalogue::new();
        c.register(module("a", "1.1.0", &["a"], &["b@~2.0.0"])).unwrap();
        c.register(module("b", "2.0.3", &["b"], &[])).unwrap();
        let res = c.resolve(&[Requirement::parse_query("a@^1.0.0").unwrap()]).unwrap();
        let all = ExpertRecord {
            expert_id: "e1".into(),
            name: "One".into(),
            accreditations: vec![],
            operable_capabilities: vec!["a".into(), "b".into()],
        };
        let m = Catalogue::match_experts(&res, [&all]);
        assert!(m.values().all(|c| c.experts == ["e1"] && !c.uncovered));
        let none = Catalogue::match_experts(&res, []);
        assert_eq!(none.len(), 2);
        assert!(none.values().all(|c| c.uncovered && c.experts.is_empty()));
    }
}
