mod support;

use sbx_core::audit::verify_bytes;
use support::{five_entry_chain, sha256sum};

#[test]
fn pristine_chain_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let log = five_entry_chain(dir.path());
    let v = verify_bytes(&log.read_bytes().unwrap());
    assert!(v.is_ok(), "{v:?}");
    assert_eq!(v.head().unwrap().length, 5);
}

#[test]
fn entry_hashes_agree_with_an_external_digest() {
    let dir = tempfile::tempdir().unwrap();
    let entries = five_entry_chain(dir.path()).entries().unwrap();
    let mut prev = "0".repeat(64);
    for e in &entries {
        assert_eq!(e.prev_hash, prev);
        let input = format!("{}|{}|{}|{}|{}|{}", e.index, e.timestamp, e.actor, e.action, e.payload_digest, e.prev_hash);
        if let Some(h) = sha256sum(&input) {
            assert_eq!(e.entry_hash, h);
        }
        prev = e.entry_hash.clone();
    }
}

#[test]
fn every_single_byte_mutation_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let bytes = five_entry_chain(dir.path()).read_bytes().unwrap();
    let mut tried = 0u64;
    let mut missed = Vec::new();
    for i in 0..bytes.len() {
        let mut m = bytes.clone();
        for delta in 1..=255u8 {
            m[i] = bytes[i].wrapping_add(delta);
            tried += 1;
            if verify_bytes(&m).is_ok() {
                missed.push((i, m[i]));
            }
        }
    }
    assert_eq!(tried, bytes.len() as u64 * 255);
    assert!(missed.is_empty(), "undetected: {:?}", &missed[..missed.len().min(10)]);
}
