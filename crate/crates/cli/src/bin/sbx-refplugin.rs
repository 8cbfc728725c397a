//! Reference assessment plug-in.
//!
//! `sbx-refplugin <mode>` speaks the plug-in protocol: it reads the job
//! document from stdin, writes progress records to stdout and leaves
//! `result.json` in the working directory (the job's output directory).
//! Output depends only on the job seed and the bytes of its inputs.
//!
//! The three assessment modes work on a CSV dataset with a group column
//! and a 0/1 label column (the last two columns). The remaining modes
//! misbehave on purpose to exercise the engine's failure handling.

use std::collections::BTreeMap;
use std::io::Read;
use std::process::ExitCode;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sbx_core::digest::sha256_hex;
use sbx_core::engine::JobDocument;
use serde_json::{json, Value};

const MODES: &[&str] = &["robustness", "fairness", "transparency", "no-result", "exit-nonzero", "malformed-metrics"];

/// Noise levels swept by the robustness mode and the accuracy each must keep.
const NOISE_LEVELS: [f64; 4] = [0.01, 0.05, 0.1, 0.2];
const MIN_ACCURACY: f64 = 0.75;
const ROBUSTNESS_TRIALS: usize = 400;

/// Largest tolerated gap in positive rates between groups.
const MAX_DISPARITY: f64 = 0.2;
const BOOTSTRAP_SAMPLES: usize = 500;

struct Rows {
    header: Vec<String>,
    groups: Vec<String>,
    labels: Vec<bool>,
}

fn parse_csv(text: &str) -> Result<Rows, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines.next().ok_or("dataset is empty")?.split(',').map(|s| s.trim().to_string()).collect();
    if header.len() < 2 {
        return Err("dataset needs a group column and a label column".into());
    }
    let (mut groups, mut labels) = (Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != header.len() {
            return Err(format!("row {} has {} cells, expected {}", i + 1, cells.len(), header.len()));
        }
        let label = match cells[cells.len() - 1] {
            "0" => false,
            "1" => true,
            other => return Err(format!("row {}: label `{other}` is not 0 or 1", i + 1)),
        };
        groups.push(cells[cells.len() - 2].to_string());
        labels.push(label);
    }
    if labels.is_empty() {
        return Err("dataset has no rows".into());
    }
    Ok(Rows { header, groups, labels })
}

fn unit(rng: &mut ChaCha20Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

fn progress(p: f64, message: &str) {
    println!("{}", json!({ "progress": p, "message": message }));
}

/// Perturbs labels at each noise level and measures how many a
/// label-reading detector still gets right.
fn robustness(rows: &Rows, rng: &mut ChaCha20Rng) -> (bool, BTreeMap<String, f64>, String) {
    let mut metrics = BTreeMap::new();
    let mut csv = String::from("noise_level,accuracy\n");
    let mut worst = 1.0f64;
    for (i, level) in NOISE_LEVELS.iter().enumerate() {
        let mut correct = 0usize;
        for _ in 0..ROBUSTNESS_TRIALS {
            correct += rows.labels.iter().filter(|_| unit(rng) >= *level).count();
        }
        let acc = correct as f64 / (ROBUSTNESS_TRIALS * rows.labels.len()) as f64;
        worst = worst.min(acc);
        metrics.insert(format!("accuracy_noise_{level}"), acc);
        csv.push_str(&format!("{level},{acc:.6}\n"));
        progress((i + 1) as f64 / NOISE_LEVELS.len() as f64, &format!("noise level {level}"));
    }
    metrics.insert("min_accuracy".into(), worst);
    (worst >= MIN_ACCURACY, metrics, csv)
}

fn disparity(groups: &[String], labels: &[bool], idx: impl Iterator<Item = usize>) -> (f64, BTreeMap<String, f64>) {
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for i in idx {
        let c = counts.entry(groups[i].as_str()).or_default();
        c.0 += 1;
        c.1 += usize::from(labels[i]);
    }
    let rates: BTreeMap<String, f64> = counts.iter().map(|(g, (n, k))| (g.to_string(), *k as f64 / *n as f64)).collect();
    let max = rates.values().cloned().fold(f64::MIN, f64::max);
    let min = rates.values().cloned().fold(f64::MAX, f64::min);
    (max - min, rates)
}

/// Demographic parity gap with a bootstrap interval.
fn fairness(rows: &Rows, rng: &mut ChaCha20Rng) -> (bool, BTreeMap<String, f64>, String) {
    let n = rows.labels.len();
    let (gap, rates) = disparity(&rows.groups, &rows.labels, 0..n);
    progress(0.5, "positive rates computed");
    let mut boot: Vec<f64> = (0..BOOTSTRAP_SAMPLES)
        .map(|_| {
            let idx: Vec<usize> = (0..n).map(|_| (rng.next_u64() % n as u64) as usize).collect();
            disparity(&rows.groups, &rows.labels, idx.into_iter()).0
        })
        .collect();
    boot.sort_by(f64::total_cmp);
    let lo = boot[BOOTSTRAP_SAMPLES / 40];
    let hi = boot[BOOTSTRAP_SAMPLES - 1 - BOOTSTRAP_SAMPLES / 40];
    progress(1.0, "bootstrap done");
    let mut metrics: BTreeMap<String, f64> = rates.iter().map(|(g, r)| (format!("positive_rate_{g}"), *r)).collect();
    metrics.insert("demographic_parity_difference".into(), gap);
    metrics.insert("disparity_ci_low".into(), lo);
    metrics.insert("disparity_ci_high".into(), hi);
    let mut csv = String::from("group,positive_rate\n");
    for (g, r) in &rates {
        csv.push_str(&format!("{g},{r:.6}\n"));
    }
    (gap <= MAX_DISPARITY, metrics, csv)
}

/// Attribution scores over the dataset's feature columns (or synthetic
/// features when there is no dataset), normalized to one.
fn transparency(rows: Option<&Rows>, rng: &mut ChaCha20Rng) -> (bool, BTreeMap<String, f64>, String) {
    let features: Vec<String> = match rows {
        Some(r) => r.header[..r.header.len() - 1].to_vec(),
        None => ["brightness", "motion", "distance"].iter().map(|s| s.to_string()).collect(),
    };
    let raw: Vec<f64> = features.iter().map(|_| 0.05 + unit(rng)).collect();
    let total: f64 = raw.iter().sum();
    let scores: BTreeMap<&str, f64> = features.iter().map(String::as_str).zip(raw.iter().map(|x| x / total)).collect();
    progress(1.0, "attributions computed");
    let top = scores.values().cloned().fold(0.0, f64::max);
    let mut metrics = BTreeMap::new();
    metrics.insert("attribution_mass".into(), scores.values().sum::<f64>());
    metrics.insert("top_feature_share".into(), top);
    metrics.insert("features_explained".into(), scores.len() as f64);
    let doc = serde_json::to_string_pretty(&json!({ "attributions": scores })).expect("serializes");
    (true, metrics, doc + "\n")
}

fn write(path: &str, bytes: &[u8]) -> Result<(), String> {
    std::fs::write(path, bytes).map_err(|e| format!("cannot write {path}: {e}"))
}

fn run(mode: &str) -> Result<(), String> {
    let mut stdin = String::new();
    std::io::stdin().read_to_string(&mut stdin).map_err(|e| format!("cannot read job: {e}"))?;
    let job: JobDocument = serde_json::from_str(&stdin).map_err(|e| format!("job document: {e}"))?;

    match mode {
        "exit-nonzero" => return Err("refusing to run (exit-nonzero mode)".into()),
        "no-result" => {
            progress(1.0, "finished without a result");
            return Ok(());
        }
        "malformed-metrics" => {
            let v = json!({ "verdict": "pass", "metrics": { "score": "high" }, "artefacts": [] });
            return write("result.json", v.to_string().as_bytes());
        }
        _ => {}
    }

    // Seed from the job seed and every input's bytes, in digest order.
    let mut material = job.seed.to_le_bytes().to_vec();
    let mut dataset = None;
    for (digest, path) in &job.inputs {
        let bytes = std::fs::read(path).map_err(|e| format!("input {digest} at {path}: {e}"))?;
        material.extend_from_slice(&bytes);
        if dataset.is_none() {
            let text = String::from_utf8(bytes).map_err(|_| format!("input {digest} is not UTF-8 text"))?;
            dataset = Some(parse_csv(&text).map_err(|e| format!("input {digest}: {e}"))?);
        }
    }
    let mut seed = [0u8; 32];
    hex::decode_to_slice(sha256_hex(&material), &mut seed).expect("sha256 hex");
    let mut rng = ChaCha20Rng::from_seed(seed);

    let need = || dataset.as_ref().ok_or_else(|| format!("{mode} needs a dataset input"));
    let (passed, metrics, artefact, body) = match mode {
        "robustness" => {
            let (p, m, b) = robustness(need()?, &mut rng);
            (p, m, "robustness.csv", b)
        }
        "fairness" => {
            let (p, m, b) = fairness(need()?, &mut rng);
            (p, m, "fairness.csv", b)
        }
        "transparency" => {
            let (p, m, b) = transparency(dataset.as_ref(), &mut rng);
            (p, m, "explanation.json", b)
        }
        other => return Err(format!("unknown mode `{other}`")),
    };
    write(artefact, body.as_bytes())?;
    let metrics: serde_json::Map<String, Value> = metrics.into_iter().map(|(k, v)| (k, json!(v))).collect();
    let result = json!({
        "verdict": if passed { "pass" } else { "fail" },
        "metrics": metrics,
        "artefacts": [artefact],
    });
    write("result.json", result.to_string().as_bytes())
}

fn main() -> ExitCode {
    let mode = std::env::args().nth(1).unwrap_or_default();
    if !MODES.contains(&mode.as_str()) {
        eprintln!("usage: sbx-refplugin <{}>", MODES.join("|"));
        return ExitCode::from(2);
    }
    match run(&mode) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sbx-refplugin {mode}: {e}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DATA: &str = "frame,group,label\n1,a,1\n2,a,0\n3,b,1\n4,b,1\n";

    #[test]
    fn csv_takes_the_last_two_columns() {
        let r = parse_csv(DATA).unwrap();
        assert_eq!(r.groups, ["a", "a", "b", "b"]);
        assert_eq!(r.labels, [true, false, true, true]);
        assert!(parse_csv("a,b\n1,2\n").is_err());
        assert!(parse_csv("a,b\n").is_err());
    }

    #[test]
    fn disparity_is_the_gap_in_positive_rates() {
        let r = parse_csv(DATA).unwrap();
        let (gap, rates) = disparity(&r.groups, &r.labels, 0..4);
        assert_eq!(rates["a"], 0.5);
        assert_eq!(rates["b"], 1.0);
        assert_eq!(gap, 0.5);
    }

    #[test]
    fn robustness_accuracy_tracks_the_noise_level() {
        let r = parse_csv(DATA).unwrap();
        let mut rng = ChaCha20Rng::from_seed([7; 32]);
        let (_, m, _) = robustness(&r, &mut rng);
        for level in NOISE_LEVELS {
            let acc = m[&format!("accuracy_noise_{level}")];
            assert!((acc - (1.0 - level)).abs() < 0.05, "{level}: {acc}");
        }
    }
}
