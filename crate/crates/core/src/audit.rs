//! Hash-chained, append-only audit log.
//!
//! Each entry commits to its predecessor:
//! `entry_hash = sha256("index|timestamp|actor|action|payload_digest|prev_hash")`,
//! and the first entry links to 64 zeros. The chain file holds one entry per
//! line as canonical JSON; verification re-derives every hash and also
//! insists that each line is exactly the canonical serialization of the
//! entry it encodes, so no byte of the file is outside the evidence.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::digest::{canonical_json, is_sha256_hex, sha256_hex, to_canonical_json};

pub const GENESIS_PREV_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";
pub const EXPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditEntry {
    pub index: u64,
    pub timestamp: String,
    /// `role:principal`.
    pub actor: String,
    pub action: String,
    pub payload_digest: String,
    pub prev_hash: String,
    pub entry_hash: String,
}

impl AuditEntry {
    /// The text whose digest is `entry_hash`.
    pub fn hash_input(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}",
            self.index, self.timestamp, self.actor, self.action, self.payload_digest, self.prev_hash
        )
    }

    pub fn computed_hash(&self) -> String {
        sha256_hex(self.hash_input())
    }

    pub fn to_line(&self) -> String {
        to_canonical_json(self).expect("entry serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainHead {
    pub length: u64,
    pub head_hash: String,
}

impl ChainHead {
    pub fn empty() -> Self {
        ChainHead { length: 0, head_hash: GENESIS_PREV_HASH.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BreakReason {
    HashMismatch,
    LinkMismatch,
    IndexGap,
    /// The line is not the canonical encoding of an entry.
    Malformed,
}

impl std::fmt::Display for BreakReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BreakReason::HashMismatch => "hash_mismatch",
            BreakReason::LinkMismatch => "link_mismatch",
            BreakReason::IndexGap => "index_gap",
            BreakReason::Malformed => "malformed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Verdict {
    Ok { ok: bool, head: ChainHead },
    Broken { ok: bool, broken_at: u64, reason: BreakReason },
}

impl Verdict {
    fn ok(head: ChainHead) -> Self {
        Verdict::Ok { ok: true, head }
    }

    fn broken(at: u64, reason: BreakReason) -> Self {
        Verdict::Broken { ok: false, broken_at: at, reason }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, Verdict::Ok { .. })
    }

    pub fn head(&self) -> Option<&ChainHead> {
        match self {
            Verdict::Ok { head, .. } => Some(head),
            Verdict::Broken { .. } => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("audit storage: {0}")]
    Io(#[from] std::io::Error),
    #[error("audit field `{field}` must not contain `|` or line breaks")]
    InvalidField { field: &'static str },
    #[error("audit chain is broken at entry {broken_at}: {reason}")]
    Broken { broken_at: u64, reason: BreakReason },
    #[error("invalid export range {start}..={end} for a chain of {length} entries")]
    Range { start: u64, end: u64, length: u64 },
    #[error("malformed export document: {0}")]
    MalformedExport(String),
}

/// Splits chain text into lines. A non-empty chain ends with a newline;
/// the missing-newline case is reported against the last line.
fn lines(bytes: &[u8]) -> (Vec<&[u8]>, bool) {
    if bytes.is_empty() {
        return (Vec::new(), true);
    }
    let terminated = bytes.ends_with(b"\n");
    let body = if terminated { &bytes[..bytes.len() - 1] } else { bytes };
    (body.split(|b| *b == b'\n').collect(), terminated)
}

fn parse_line(line: &[u8]) -> Option<AuditEntry> {
    let entry: AuditEntry = serde_json::from_slice(line).ok()?;
    let well_formed = entry.to_line().as_bytes() == line
        && is_sha256_hex(&entry.payload_digest)
        && is_sha256_hex(&entry.prev_hash)
        && is_sha256_hex(&entry.entry_hash);
    well_formed.then_some(entry)
}

/// Checks a sequence of entries that should start at `first_index` and
/// link to `prev_hash`. Returns the head on success.
fn check_sequence<'a>(
    entries: impl IntoIterator<Item = Result<AuditEntry, u64>>,
    first_index: u64,
    mut prev_hash: String,
) -> Verdict {
    let mut expected = first_index;
    for item in entries {
        let entry = match item {
            Ok(e) => e,
            Err(at) => return Verdict::broken(at, BreakReason::Malformed),
        };
        if entry.index != expected {
            return Verdict::broken(expected, BreakReason::IndexGap);
        }
        if entry.computed_hash() != entry.entry_hash {
            return Verdict::broken(expected, BreakReason::HashMismatch);
        }
        if entry.prev_hash != prev_hash {
            return Verdict::broken(expected, BreakReason::LinkMismatch);
        }
        prev_hash = entry.entry_hash;
        expected += 1;
    }
    Verdict::ok(ChainHead { length: expected, head_hash: prev_hash })
}

/// Verifies a chain file's bytes.
pub fn verify_bytes(bytes: &[u8]) -> Verdict {
    let (lines, terminated) = lines(bytes);
    let last = lines.len().saturating_sub(1);
    let items = lines.iter().enumerate().map(|(i, line)| {
        if i == last && !terminated {
            return Err(i as u64);
        }
        parse_line(line).ok_or(i as u64)
    });
    check_sequence(items, 0, GENESIS_PREV_HASH.to_string())
}

pub fn verify_entries(entries: &[AuditEntry]) -> Verdict {
    check_sequence(entries.iter().cloned().map(Ok), 0, GENESIS_PREV_HASH.to_string())
}

/// Trailer line of an export: the continuity proof for the range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportTrailer {
    pub export_schema: u32,
    pub range_start: u64,
    pub range_end: u64,
    /// Hash of the entry before `range_start` (genesis zeros for 0).
    pub prev_hash: String,
    /// Head of the whole chain at export time.
    pub chain_head: ChainHead,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Export {
    pub entries: Vec<AuditEntry>,
    pub trailer: ExportTrailer,
}

/// Renders entries `start..=end` of a verified chain plus the trailer.
pub fn export_entries(entries: &[AuditEntry], range: Option<(u64, u64)>) -> Result<String, AuditError> {
    if let Verdict::Broken { broken_at, reason, .. } = verify_entries(entries) {
        return Err(AuditError::Broken { broken_at, reason });
    }
    let length = entries.len() as u64;
    let (start, end) = match range {
        Some(r) => r,
        None if length == 0 => return Err(AuditError::Range { start: 0, end: 0, length }),
        None => (0, length - 1),
    };
    if start > end || end >= length {
        return Err(AuditError::Range { start, end, length });
    }
    let slice = &entries[start as usize..=end as usize];
    let trailer = ExportTrailer {
        export_schema: EXPORT_SCHEMA,
        range_start: start,
        range_end: end,
        prev_hash: slice[0].prev_hash.clone(),
        chain_head: ChainHead { length, head_hash: entries.last().expect("non-empty").entry_hash.clone() },
    };
    let mut out = String::new();
    for e in slice {
        out.push_str(&e.to_line());
        out.push('\n');
    }
    out.push_str(&to_canonical_json(&trailer).expect("trailer serializes"));
    out.push('\n');
    Ok(out)
}

/// True when the text's last line is an export trailer.
pub fn is_export(bytes: &[u8]) -> bool {
    let (lines, _) = lines(bytes);
    lines.last().is_some_and(|l| serde_json::from_slice::<ExportTrailer>(l).is_ok())
}

pub fn import(text: &str) -> Result<Export, AuditError> {
    let (lines, terminated) = lines(text.as_bytes());
    if !terminated {
        return Err(AuditError::MalformedExport("missing final newline".into()));
    }
    let (trailer_line, body) = lines.split_last().ok_or_else(|| AuditError::MalformedExport("empty document".into()))?;
    let trailer: ExportTrailer =
        serde_json::from_slice(trailer_line).map_err(|e| AuditError::MalformedExport(format!("trailer: {e}")))?;
    if trailer.export_schema != EXPORT_SCHEMA {
        return Err(AuditError::MalformedExport(format!("unsupported export_schema {}", trailer.export_schema)));
    }
    let entries = body
        .iter()
        .enumerate()
        .map(|(i, l)| parse_line(l).ok_or_else(|| AuditError::MalformedExport(format!("line {} is not a canonical entry", i + 1))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Export { entries, trailer })
}

/// Verifies an export document: the entries must link from the trailer's
/// `prev_hash`, cover exactly the stated range, and reach the recorded head
/// when the range ends at it.
pub fn verify_export_bytes(bytes: &[u8]) -> Verdict {
    let (lines, terminated) = lines(bytes);
    let Some((trailer_line, body)) = lines.split_last() else { return Verdict::broken(0, BreakReason::Malformed) };
    let trailer: Option<ExportTrailer> =
        if terminated { serde_json::from_slice(trailer_line).ok() } else { None };
    let Some(trailer) = trailer else { return Verdict::broken(0, BreakReason::Malformed) };
    let start = trailer.range_start;
    let trailer_ok = to_canonical_json(&trailer).expect("trailer serializes").as_bytes() == *trailer_line
        && trailer.export_schema == EXPORT_SCHEMA
        && is_sha256_hex(&trailer.prev_hash)
        && is_sha256_hex(&trailer.chain_head.head_hash)
        && (start > 0 || trailer.prev_hash == GENESIS_PREV_HASH)
        && trailer.range_end >= start
        && trailer.range_end < trailer.chain_head.length;
    if !trailer_ok {
        return Verdict::broken(start, BreakReason::Malformed);
    }
    let items = body.iter().enumerate().map(|(i, l)| parse_line(l).ok_or(start + i as u64));
    let verdict = check_sequence(items, start, trailer.prev_hash.clone());
    let Verdict::Ok { head, .. } = &verdict else { return verdict };
    if head.length != trailer.range_end + 1 {
        return Verdict::broken(head.length.min(trailer.range_end + 1), BreakReason::IndexGap);
    }
    if head.length == trailer.chain_head.length && head.head_hash != trailer.chain_head.head_hash {
        return Verdict::broken(trailer.range_end, BreakReason::HashMismatch);
    }
    verdict
}

/// Verifies either a chain file or an export document.
pub fn verify_any_bytes(bytes: &[u8]) -> Verdict {
    if is_export(bytes) {
        verify_export_bytes(bytes)
    } else {
        verify_bytes(bytes)
    }
}

/// Advisory whole-file lock, released on drop.
struct FileLock(File);

impl FileLock {
    fn acquire(file: File) -> std::io::Result<Self> {
        use std::os::unix::io::AsRawFd;
        // SAFETY: flock on a descriptor owned by `file`, which outlives the lock.
        let rc = unsafe { libc::flock(file.as_raw_fd(), libc::LOCK_EX) };
        if rc != 0 {
            return Err(std::io::Error::last_os_error());
        }
        Ok(FileLock(file))
    }
}

impl Drop for FileLock {
    fn drop(&mut self) {
        use std::os::unix::io::AsRawFd;
        // SAFETY: see `acquire`.
        unsafe {
            libc::flock(self.0.as_raw_fd(), libc::LOCK_UN);
        }
    }
}

/// A chain stored in one file. Appends are serialized within the process by
/// a mutex and across processes by `flock`; each append is fsynced before it
/// returns.
#[derive(Debug)]
pub struct AuditLog {
    path: PathBuf,
    guard: Mutex<()>,
}

fn check_field(value: &str, field: &'static str) -> Result<(), AuditError> {
    if value.contains(['|', '\n', '\r']) {
        Err(AuditError::InvalidField { field })
    } else {
        Ok(())
    }
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Micros, true)
}

/// Digest of a payload's canonical JSON.
pub fn payload_digest(payload: &Value) -> String {
    sha256_hex(canonical_json(payload))
}

impl AuditLog {
    pub fn open(path: impl Into<PathBuf>) -> Self {
        AuditLog { path: path.into(), guard: Mutex::new(()) }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, actor: &str, action: &str, payload: &Value) -> Result<AuditEntry, AuditError> {
        self.append_at(actor, action, payload, &now_rfc3339())
    }

    /// Appends with a caller-chosen timestamp.
    pub fn append_at(&self, actor: &str, action: &str, payload: &Value, timestamp: &str) -> Result<AuditEntry, AuditError> {
        check_field(actor, "actor")?;
        check_field(action, "action")?;
        check_field(timestamp, "timestamp")?;
        let _g = self.guard.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(parent) = self.path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).read(true).append(true).open(&self.path)?;
        let mut lock = FileLock::acquire(file)?;
        let bytes = std::fs::read(&self.path)?;
        let head = match verify_bytes(&bytes) {
            Verdict::Ok { head, .. } => head,
            Verdict::Broken { broken_at, reason, .. } => return Err(AuditError::Broken { broken_at, reason }),
        };
        let mut entry = AuditEntry {
            index: head.length,
            timestamp: timestamp.to_string(),
            actor: actor.to_string(),
            action: action.to_string(),
            payload_digest: payload_digest(payload),
            prev_hash: head.head_hash,
            entry_hash: String::new(),
        };
        entry.entry_hash = entry.computed_hash();
        let mut line = entry.to_line();
        line.push('\n');
        lock.0.write_all(line.as_bytes())?;
        lock.0.sync_all()?;
        Ok(entry)
    }

    pub fn read_bytes(&self) -> Result<Vec<u8>, AuditError> {
        match std::fs::read(&self.path) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn verify(&self) -> Result<Verdict, AuditError> {
        Ok(verify_bytes(&self.read_bytes()?))
    }

    /// All entries of a verifying chain.
    pub fn entries(&self) -> Result<Vec<AuditEntry>, AuditError> {
        let bytes = self.read_bytes()?;
        if let Verdict::Broken { broken_at, reason, .. } = verify_bytes(&bytes) {
            return Err(AuditError::Broken { broken_at, reason });
        }
        let (lines, _) = lines(&bytes);
        Ok(lines.iter().map(|l| parse_line(l).expect("verified")).collect())
    }

    pub fn head(&self) -> Result<ChainHead, AuditError> {
        match self.verify()? {
            Verdict::Ok { head, .. } => Ok(head),
            Verdict::Broken { broken_at, reason, .. } => Err(AuditError::Broken { broken_at, reason }),
        }
    }

    pub fn export(&self, range: Option<(u64, u64)>) -> Result<String, AuditError> {
        export_entries(&self.entries()?, range)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn chain(n: usize) -> (tempfile::TempDir, AuditLog) {
        let dir = tempfile::tempdir().unwrap();
        let log = AuditLog::open(dir.path().join("audit.log"));
        for i in 0..n {
            log.append_at("provider:alice", "config.submitted", &json!({ "n": i }), "2026-01-01T00:00:00.000000Z").unwrap();
        }
        (dir, log)
    }

    #[test]
    fn genesis_and_chaining() {
        let (_d, log) = chain(2);
        let e = log.entries().unwrap();
        assert_eq!(e[0].index, 0);
        assert_eq!(e[0].prev_hash, GENESIS_PREV_HASH);
        assert_eq!(e[1].prev_hash, e[0].entry_hash);
        assert_eq!(log.head().unwrap(), ChainHead { length: 2, head_hash: e[1].entry_hash.clone() });
    }

    #[test]
    fn pipe_in_fields_rejected() {
        let (_d, log) = chain(0);
        assert!(matches!(log.append("a|b", "x", &json!({})), Err(AuditError::InvalidField { field: "actor" })));
    }

    #[test]
    fn hundred_entries_verify() {
        let (_d, log) = chain(100);
        assert!(log.verify().unwrap().is_ok());
    }

    #[test]
    fn deleting_middle_entry_is_index_gap() {
        let (_d, log) = chain(5);
        let text = String::from_utf8(log.read_bytes().unwrap()).unwrap();
        let kept: Vec<&str> = text.lines().enumerate().filter(|(i, _)| *i != 2).map(|(_, l)| l).collect();
        let tampered = format!("{}\n", kept.join("\n"));
        assert_eq!(verify_bytes(tampered.as_bytes()), Verdict::broken(2, BreakReason::IndexGap));
    }

    #[test]
    fn truncation_and_reordering_detected() {
        let (_d, log) = chain(3);
        let bytes = log.read_bytes().unwrap();
        assert!(!verify_bytes(&bytes[..bytes.len() - 1]).is_ok());
        let text = String::from_utf8(bytes).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.swap(0, 1);
        assert!(!verify_bytes(format!("{}\n", lines.join("\n")).as_bytes()).is_ok());
    }

    #[test]
    fn export_range_round_trip() {
        let (_d, log) = chain(5);
        let entries = log.entries().unwrap();
        let text = log.export(Some((2, 4))).unwrap();
        let imported = import(&text).unwrap();
        assert_eq!(imported.entries, entries[2..=4]);
        assert_eq!(imported.trailer.prev_hash, entries[1].entry_hash);
        assert!(verify_export_bytes(text.as_bytes()).is_ok());
        assert!(verify_any_bytes(text.as_bytes()).is_ok());
        let full = log.export(None).unwrap();
        assert_eq!(import(&full).unwrap().entries, entries);
    }

    #[test]
    fn export_refuses_broken_chain() {
        let (_d, log) = chain(3);
        let mut entries = log.entries().unwrap();
        entries[1].action = "forged".into();
        assert!(matches!(export_entries(&entries, None), Err(AuditError::Broken { broken_at: 1, .. })));
    }

    #[test]
    fn append_refuses_broken_chain() {
        let (_d, log) = chain(2);
        let text = String::from_utf8(log.read_bytes().unwrap()).unwrap().replace("config.submitted", "config.submittex");
        std::fs::write(log.path(), text).unwrap();
        assert!(matches!(log.append("a:b", "x", &json!({})), Err(AuditError::Broken { broken_at: 0, .. })));
    }

    #[test]
    fn verdict_json_shape() {
        let v = serde_json::to_value(Verdict::broken(3, BreakReason::LinkMismatch)).unwrap();
        assert_eq!(v, json!({"ok": false, "broken_at": 3, "reason": "link_mismatch"}));
        let ok: Verdict = serde_json::from_value(json!({"ok": true, "head": {"length": 0, "head_hash": GENESIS_PREV_HASH}})).unwrap();
        assert!(ok.is_ok());
    }
}
