//! Workspace storage: content-addressed artefacts per data zone and an
//! append-only record file for configs, plans, runs, catalogue entries and
//! control statuses.
//!
//! Layout under the workspace root:
//!
//! ```text
//! artefacts/<zone>/<ab>/<cdef...>        blob, named by its SHA-256
//! artefacts/<zone>/<ab>/<cdef...>.ref    its ArtefactRef as JSON
//! records.ndjson                         one record per line
//! ```

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::digest::{is_sha256_hex, sha256_hex, to_canonical_json};
use crate::vocab::Zone;

pub const WORKSPACE_ENV: &str = "SBX_WORKSPACE";
pub const RECORD_SCHEMA_VERSION: u32 = 1;
pub const RECORDS_FILE: &str = "records.ndjson";
pub const ARTEFACTS_DIR: &str = "artefacts";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArtefactRef {
    pub digest: String,
    pub size_bytes: u64,
    pub media_hint: String,
    pub zone: Zone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordClass {
    Config,
    Plan,
    Run,
    Module,
    Expert,
    ControlStatus,
    Report,
    Idempotency,
}

impl RecordClass {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordClass::Config => "config",
            RecordClass::Plan => "plan",
            RecordClass::Run => "run",
            RecordClass::Module => "module",
            RecordClass::Expert => "expert",
            RecordClass::ControlStatus => "control_status",
            RecordClass::Report => "report",
            RecordClass::Idempotency => "idempotency",
        }
    }
}

/// One line of the record file. Later records for the same class and id
/// supersede earlier ones; nothing is ever rewritten in place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub schema_version: u32,
    pub class: RecordClass,
    pub id: String,
    pub written: String,
    pub body: Value,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("storage I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("access denied: artefact is in zone `{zone}`, requester holds [{}]", held.iter().map(|z| z.as_str()).collect::<Vec<_>>().join(", "))]
    AccessDenied { zone: Zone, held: Vec<Zone> },
    #[error("artefact {digest} not found")]
    NotFound { digest: String },
    #[error("integrity error: artefact {expected} hashes to {actual} on disk")]
    Integrity { expected: String, actual: String },
    #[error("`{0}` is not a SHA-256 digest")]
    BadDigest(String),
    #[error("record {class}/{id} has schema_version {found}; this build reads {supported}")]
    SchemaVersion { class: &'static str, id: String, found: u32, supported: u32 },
    #[error("record file line {line} is malformed: {message}")]
    Malformed { line: usize, message: String },
    #[error("record {class}/{id} does not decode: {message}")]
    Decode { class: &'static str, id: String, message: String },
}

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    records_lock: Mutex<()>,
}

/// Strips an optional `sha256:` prefix and checks the digest shape.
pub fn normalize_digest(s: &str) -> Result<&str, StoreError> {
    let d = s.strip_prefix("sha256:").unwrap_or(s);
    if is_sha256_hex(d) {
        Ok(d)
    } else {
        Err(StoreError::BadDigest(s.to_string()))
    }
}

fn fsync_dir(dir: &Path) {
    // Directory fsync makes the rename durable; unsupported platforms ignore it.
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        std::fs::create_dir_all(root.join(ARTEFACTS_DIR))?;
        Ok(Store { root, records_lock: Mutex::new(()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn blob_path(&self, zone: Zone, digest: &str) -> PathBuf {
        self.root.join(ARTEFACTS_DIR).join(zone.as_str()).join(&digest[..2]).join(&digest[2..])
    }

    fn ref_path(&self, zone: Zone, digest: &str) -> PathBuf {
        let mut p = self.blob_path(zone, digest).into_os_string();
        p.push(".ref");
        PathBuf::from(p)
    }

    fn write_atomic(&self, target: &Path, bytes: &[u8]) -> Result<(), StoreError> {
        let dir = target.parent().expect("blob paths have parents");
        std::fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(".tmp-{}", uuid::Uuid::new_v4()));
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        drop(f);
        std::fs::rename(&tmp, target)?;
        fsync_dir(dir);
        Ok(())
    }

    /// Stores `bytes` in `zone`. Putting the same content into the same zone
    /// again returns the original ref; the same content in another zone is a
    /// separate copy.
    pub fn put_artefact(&self, bytes: &[u8], zone: Zone, media_hint: &str) -> Result<ArtefactRef, StoreError> {
        let digest = sha256_hex(bytes);
        let ref_path = self.ref_path(zone, &digest);
        if let Ok(existing) = std::fs::read(&ref_path) {
            if let Ok(r) = serde_json::from_slice::<ArtefactRef>(&existing) {
                if self.blob_path(zone, &digest).exists() {
                    return Ok(r);
                }
            }
        }
        let r = ArtefactRef { digest: digest.clone(), size_bytes: bytes.len() as u64, media_hint: media_hint.to_string(), zone };
        self.write_atomic(&self.blob_path(zone, &digest), bytes)?;
        self.write_atomic(&ref_path, to_canonical_json(&r).expect("ref serializes").as_bytes())?;
        Ok(r)
    }

    pub fn put_file(&self, path: &Path, zone: Zone, media_hint: &str) -> Result<ArtefactRef, StoreError> {
        self.put_artefact(&std::fs::read(path)?, zone, media_hint)
    }

    /// Looks up the ref for a digest in one zone.
    pub fn artefact_ref(&self, zone: Zone, digest: &str) -> Result<Option<ArtefactRef>, StoreError> {
        let digest = normalize_digest(digest)?;
        match std::fs::read(self.ref_path(zone, digest)) {
            Ok(b) => serde_json::from_slice(&b)
                .map(Some)
                .map_err(|e| StoreError::Malformed { line: 0, message: format!("ref for {digest}: {e}") }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// All zones holding a digest.
    pub fn locate(&self, digest: &str) -> Result<Vec<ArtefactRef>, StoreError> {
        let mut out = Vec::new();
        for zone in Zone::ALL {
            if let Some(r) = self.artefact_ref(*zone, digest)? {
                out.push(r);
            }
        }
        Ok(out)
    }

    /// Returns the bytes of `r` if the requester holds its zone. The bytes
    /// are re-hashed on every read.
    pub fn get_artefact(&self, r: &ArtefactRef, requester: &[Zone]) -> Result<Vec<u8>, StoreError> {
        let digest = normalize_digest(&r.digest)?;
        if !requester.contains(&r.zone) {
            let mut held = requester.to_vec();
            held.sort();
            held.dedup();
            return Err(StoreError::AccessDenied { zone: r.zone, held });
        }
        let bytes = match std::fs::read(self.blob_path(r.zone, digest)) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound { digest: digest.to_string() })
            }
            Err(e) => return Err(e.into()),
        };
        let actual = sha256_hex(&bytes);
        if actual != digest {
            return Err(StoreError::Integrity { expected: digest.to_string(), actual });
        }
        Ok(bytes)
    }

    fn records_path(&self) -> PathBuf {
        self.root.join(RECORDS_FILE)
    }

    /// Appends a record, fsynced before return.
    pub fn persist<T: Serialize>(&self, class: RecordClass, id: &str, body: &T) -> Result<(), StoreError> {
        let record = Record {
            schema_version: RECORD_SCHEMA_VERSION,
            class,
            id: id.to_string(),
            written: crate::audit::now_rfc3339(),
            body: serde_json::to_value(body).map_err(|e| StoreError::Decode {
                class: class.as_str(),
                id: id.to_string(),
                message: e.to_string(),
            })?,
        };
        let mut line = to_canonical_json(&record).expect("record serializes");
        line.push('\n');
        let _g = self.records_lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut f = OpenOptions::new().create(true).append(true).open(self.records_path())?;
        f.write_all(line.as_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    /// Every record in file order.
    pub fn records(&self) -> Result<Vec<Record>, StoreError> {
        let text = match std::fs::read_to_string(self.records_path()) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| StoreError::Malformed { line: i + 1, message: e.to_string() }))
            .collect()
    }

    fn check_version(r: &Record) -> Result<(), StoreError> {
        if r.schema_version != RECORD_SCHEMA_VERSION {
            return Err(StoreError::SchemaVersion {
                class: r.class.as_str(),
                id: r.id.clone(),
                found: r.schema_version,
                supported: RECORD_SCHEMA_VERSION,
            });
        }
        Ok(())
    }

    fn decode<T: DeserializeOwned>(r: Record) -> Result<T, StoreError> {
        Self::check_version(&r)?;
        serde_json::from_value(r.body).map_err(|e| StoreError::Decode {
            class: r.class.as_str(),
            id: r.id.clone(),
            message: e.to_string(),
        })
    }

    /// The latest record for `(class, id)`.
    pub fn load<T: DeserializeOwned>(&self, class: RecordClass, id: &str) -> Result<Option<T>, StoreError> {
        let latest = self.records()?.into_iter().rev().find(|r| r.class == class && r.id == id);
        latest.map(Self::decode).transpose()
    }

    /// Latest value per id, ordered by first write time, then id.
    pub fn list<T: DeserializeOwned>(&self, class: RecordClass) -> Result<Vec<(String, T)>, StoreError> {
        let mut first: BTreeMap<String, String> = BTreeMap::new();
        let mut latest: BTreeMap<String, Record> = BTreeMap::new();
        for r in self.records()?.into_iter().filter(|r| r.class == class) {
            first.entry(r.id.clone()).or_insert_with(|| r.written.clone());
            latest.insert(r.id.clone(), r);
        }
        let mut ids: Vec<(String, String)> = first.into_iter().map(|(id, t)| (t, id)).collect();
        ids.sort();
        ids.into_iter()
            .map(|(_, id)| {
                let r = latest.remove(&id).expect("present");
                Ok((id, Self::decode(r)?))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::digest::EMPTY_SHA256;

    fn store() -> (tempfile::TempDir, Store) {
        let d = tempfile::tempdir().unwrap();
        let s = Store::open(d.path()).unwrap();
        (d, s)
    }

    #[test]
    fn empty_blob_digest() {
        let (_d, s) = store();
        let r = s.put_artefact(b"", Zone::Shared, "text/plain").unwrap();
        assert_eq!(r.digest, EMPTY_SHA256);
        assert_eq!(r.size_bytes, 0);
    }

    #[test]
    fn put_is_idempotent_within_zone() {
        let (_d, s) = store();
        let a = s.put_artefact(b"abc", Zone::Confidential, "x").unwrap();
        let b = s.put_artefact(b"abc", Zone::Confidential, "y").unwrap();
        assert_eq!(a, b);
        let c = s.put_artefact(b"abc", Zone::Shared, "x").unwrap();
        assert_ne!(a, c);
        assert_eq!(s.locate(&a.digest).unwrap().len(), 2);
    }

    #[test]
    fn fan_out_layout() {
        let (d, s) = store();
        let r = s.put_artefact(b"abc", Zone::Regulatory, "x").unwrap();
        let expected = d.path().join("artefacts/regulatory").join(&r.digest[..2]).join(&r.digest[2..]);
        assert_eq!(std::fs::read(expected).unwrap(), b"abc");
    }

    #[test]
    fn zone_rule() {
        let (_d, s) = store();
        let r = s.put_artefact(b"secret", Zone::Confidential, "x").unwrap();
        assert!(matches!(s.get_artefact(&r, &[Zone::Shared]), Err(StoreError::AccessDenied { zone: Zone::Confidential, .. })));
        assert_eq!(s.get_artefact(&r, &[Zone::Confidential, Zone::Shared]).unwrap(), b"secret");
    }

    #[test]
    fn corruption_is_reported() {
        let (_d, s) = store();
        let r = s.put_artefact(b"payload", Zone::Shared, "x").unwrap();
        std::fs::write(s.blob_path(Zone::Shared, &r.digest), b"payloaD").unwrap();
        let err = s.get_artefact(&r, &[Zone::Shared]).unwrap_err();
        assert!(matches!(err, StoreError::Integrity { ref expected, .. } if *expected == r.digest));
    }

    #[test]
    fn missing_blob_is_not_found() {
        let (_d, s) = store();
        let r = ArtefactRef { digest: EMPTY_SHA256.into(), size_bytes: 0, media_hint: String::new(), zone: Zone::Shared };
        assert!(matches!(s.get_artefact(&r, &[Zone::Shared]), Err(StoreError::NotFound { .. })));
    }

    #[test]
    fn records_latest_wins_and_list_is_stable() {
        let (_d, s) = store();
        for id in ["c", "a", "b"] {
            s.persist(RecordClass::Run, id, &serde_json::json!({ "v": 1 })).unwrap();
        }
        s.persist(RecordClass::Run, "c", &serde_json::json!({ "v": 2 })).unwrap();
        let listed: Vec<(String, Value)> = s.list(RecordClass::Run).unwrap();
        assert_eq!(listed.len(), 3);
        assert_eq!(listed.iter().map(|(id, _)| id.as_str()).collect::<Vec<_>>(), ["c", "a", "b"]);
        assert_eq!(listed[0].1["v"], 2);
        assert!(s.list::<Value>(RecordClass::Plan).unwrap().is_empty());
    }

    #[test]
    fn schema_skew_is_an_error() {
        let (_d, s) = store();
        s.persist(RecordClass::Plan, "p", &serde_json::json!({})).unwrap();
        let text = std::fs::read_to_string(s.records_path()).unwrap().replace("\"schema_version\":1", "\"schema_version\":2");
        std::fs::write(s.records_path(), text).unwrap();
        assert!(matches!(
            s.load::<Value>(RecordClass::Plan, "p"),
            Err(StoreError::SchemaVersion { found: 2, supported: 1, .. })
        ));
    }

    #[test]
    fn reopen_preserves_records() {
        let (d, s) = store();
        let r = s.put_artefact(b"x", Zone::Shared, "x").unwrap();
        s.persist(RecordClass::Config, "k", &"v").unwrap();
        drop(s);
        let s = Store::open(d.path()).unwrap();
        assert_eq!(s.load::<String>(RecordClass::Config, "k").unwrap().as_deref(), Some("v"));
        assert_eq!(s.get_artefact(&r, &[Zone::Shared]).unwrap(), b"x");
    }
}
