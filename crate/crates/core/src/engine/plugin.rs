//! One plug-in invocation: a child process fed a job document on stdin,
//! reporting progress on stdout and leaving `result.json` in its output
//! directory.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::os::unix::process::CommandExt;
use std::path::{Component, Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::vocab::Resources;

/// The document written to a plug-in's standard input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobDocument {
    pub step_id: String,
    pub seed: u64,
    /// Digest to mounted path.
    pub inputs: BTreeMap<String, String>,
    pub output_dir: String,
    pub budget: Resources,
}

/// `result.json` as written by a plug-in.
#[derive(Debug, Clone, PartialEq)]
pub struct PluginResult {
    pub passed: bool,
    pub metrics: BTreeMap<String, f64>,
    pub artefacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Progress {
    pub progress: f64,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    NonzeroExit,
    ProtocolViolation,
    Timeout,
    BudgetExceeded,
    LaunchFailed,
    InputUnavailable,
}

impl FailureReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureReason::NonzeroExit => "nonzero_exit",
            FailureReason::ProtocolViolation => "protocol_violation",
            FailureReason::Timeout => "timeout",
            FailureReason::BudgetExceeded => "budget_exceeded",
            FailureReason::LaunchFailed => "launch_failed",
            FailureReason::InputUnavailable => "input_unavailable",
        }
    }
}

impl std::fmt::Display for FailureReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct Invocation {
    pub outcome: Result<PluginResult, (FailureReason, String)>,
    pub cpu_seconds: f64,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
}

/// Parses one stdout line as a progress record. Anything else is log text.
pub fn parse_progress(line: &str) -> Option<Progress> {
    let v: Value = serde_json::from_str(line).ok()?;
    let obj = v.as_object()?;
    if obj.len() != 2 {
        return None;
    }
    let progress = obj.get("progress")?.as_f64()?;
    let message = obj.get("message")?.as_str()?.to_string();
    (0.0..=1.0).contains(&progress).then_some(Progress { progress, message })
}

fn safe_relative(p: &str) -> bool {
    let path = Path::new(p);
    !p.is_empty() && path.components().all(|c| matches!(c, Component::Normal(_)))
}

/// Checks a `result.json` document against the protocol.
pub fn parse_result(bytes: &[u8], output_dir: &Path) -> Result<PluginResult, String> {
    let v: Value = serde_json::from_slice(bytes).map_err(|e| format!("result.json is not JSON: {e}"))?;
    let obj = v.as_object().ok_or("result.json must be an object")?;
    if let Some(k) = obj.keys().find(|k| !matches!(k.as_str(), "verdict" | "metrics" | "artefacts")) {
        return Err(format!("unexpected key `{k}` in result.json"));
    }
    let passed = match obj.get("verdict").and_then(Value::as_str) {
        Some("pass") => true,
        Some("fail") => false,
        _ => return Err("verdict must be \"pass\" or \"fail\"".into()),
    };
    let metrics_obj = obj.get("metrics").and_then(Value::as_object).ok_or("metrics must be an object")?;
    let mut metrics = BTreeMap::new();
    for (k, v) in metrics_obj {
        match v.as_f64() {
            Some(x) if x.is_finite() => {
                metrics.insert(k.clone(), x);
            }
            _ => return Err(format!("metric `{k}` is not a finite number")),
        }
    }
    let list = obj.get("artefacts").and_then(Value::as_array).ok_or("artefacts must be a list")?;
    let mut artefacts = Vec::new();
    for a in list {
        let rel = a.as_str().ok_or("artefact entries must be strings")?;
        if !safe_relative(rel) {
            return Err(format!("artefact path `{rel}` must be relative and stay inside output_dir"));
        }
        let full = output_dir.join(rel);
        let meta = std::fs::symlink_metadata(&full).map_err(|_| format!("artefact `{rel}` was not written"))?;
        if !meta.is_file() {
            return Err(format!("artefact `{rel}` is not a regular file"));
        }
        if artefacts.iter().any(|x| x == rel) {
            return Err(format!("artefact `{rel}` listed twice"));
        }
        artefacts.push(rel.to_string());
    }
    Ok(PluginResult { passed, metrics, artefacts })
}

fn dir_size(p: &Path) -> u64 {
    let Ok(rd) = std::fs::read_dir(p) else { return 0 };
    rd.flatten()
        .map(|e| match e.file_type() {
            Ok(t) if t.is_dir() => dir_size(&e.path()),
            Ok(t) if t.is_file() => e.metadata().map(|m| m.len()).unwrap_or(0),
            _ => 0,
        })
        .sum()
}

fn timeval_secs(tv: libc::timeval) -> f64 {
    tv.tv_sec as f64 + tv.tv_usec as f64 / 1e6
}

enum Exit {
    Code(i32),
    Signal(i32),
}

/// Runs the plug-in at `entrypoint` for `job` and reports what happened.
/// `on_progress` is called from a reader thread for each progress record.
pub fn invoke(
    entrypoint: &Path,
    job: &JobDocument,
    timeout: Duration,
    on_progress: &(dyn Fn(Progress) + Sync),
) -> Invocation {
    let output_dir = PathBuf::from(&job.output_dir);
    let fail = |reason, msg: String| Invocation { outcome: Err((reason, msg)), cpu_seconds: 0.0, stdout: vec![], stderr: vec![] };
    if let Err(e) = std::fs::create_dir_all(&output_dir) {
        return fail(FailureReason::LaunchFailed, format!("cannot create output_dir: {e}"));
    }
    let cpu_limit = job.budget.cpu_seconds.max(1);
    let mut cmd = Command::new(entrypoint);
    cmd.current_dir(&output_dir).stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::piped());
    // SAFETY: setrlimit is async-signal-safe and touches only the child.
    unsafe {
        cmd.pre_exec(move || {
            let lim = libc::rlimit { rlim_cur: cpu_limit as libc::rlim_t, rlim_max: (cpu_limit + 1) as libc::rlim_t };
            if libc::setrlimit(libc::RLIMIT_CPU, &lim) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            Ok(())
        });
    }
    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => return fail(FailureReason::LaunchFailed, format!("{}: {e}", entrypoint.display())),
    };
    let pid = child.id() as libc::pid_t;
    let doc = serde_json::to_vec(job).expect("job serializes");
    let mut stdin = child.stdin.take().expect("piped");
    let stdout = child.stdout.take().expect("piped");
    let mut stderr = child.stderr.take().expect("piped");

    std::thread::scope(|s| {
        // A plug-in that never reads stdin must not block us; write from a thread.
        s.spawn(move || {
            let _ = stdin.write_all(&doc);
        });
        let out_reader = s.spawn(move || {
            let mut captured = Vec::new();
            let mut r = BufReader::new(stdout);
            let mut line = Vec::new();
            while r.read_until(b'\n', &mut line).unwrap_or(0) > 0 {
                if let Some(p) = std::str::from_utf8(&line).ok().and_then(|l| parse_progress(l.trim_end())) {
                    on_progress(p);
                }
                captured.extend_from_slice(&line);
                line.clear();
            }
            captured
        });
        let err_reader = s.spawn(move || {
            let mut captured = Vec::new();
            let _ = stderr.read_to_end(&mut captured);
            captured
        });

        let started = Instant::now();
        let mut killed_for: Option<FailureReason> = None;
        let mut last_size_check = Instant::now();
        let (exit, cpu) = loop {
            let mut status: libc::c_int = 0;
            // SAFETY: zeroed rusage is a valid out-parameter.
            let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
            // SAFETY: pid is our unreaped child; wait4 only writes to the out-parameters.
            let rc = unsafe { libc::wait4(pid, &mut status, libc::WNOHANG, &mut usage) };
            if rc == pid {
                let cpu = timeval_secs(usage.ru_utime) + timeval_secs(usage.ru_stime);
                let exit = if libc::WIFEXITED(status) {
                    Exit::Code(libc::WEXITSTATUS(status))
                } else {
                    Exit::Signal(libc::WTERMSIG(status))
                };
                break (exit, cpu);
            }
            if rc < 0 {
                break (Exit::Code(-1), 0.0);
            }
            if killed_for.is_none() {
                if started.elapsed() > timeout {
                    killed_for = Some(FailureReason::Timeout);
                } else if last_size_check.elapsed() > Duration::from_millis(50) {
                    last_size_check = Instant::now();
                    if dir_size(&output_dir) > job.budget.storage_bytes {
                        killed_for = Some(FailureReason::BudgetExceeded);
                    }
                }
                if killed_for.is_some() {
                    let _ = child.kill();
                }
            }
            std::thread::sleep(Duration::from_millis(2));
        };
        // The child was reaped through wait4; dropping `child` does not wait again.
        drop(child);
        let stdout = out_reader.join().unwrap_or_default();
        let stderr = err_reader.join().unwrap_or_default();
        let done = |outcome| Invocation { outcome, cpu_seconds: cpu, stdout: stdout.clone(), stderr: stderr.clone() };

        if let Some(reason) = killed_for {
            let msg = match reason {
                FailureReason::Timeout => format!("no exit within {:.1}s wall clock", timeout.as_secs_f64()),
                _ => format!("output exceeded the storage budget of {} bytes", job.budget.storage_bytes),
            };
            return done(Err((reason, msg)));
        }
        match exit {
            Exit::Signal(sig) if sig == libc::SIGXCPU || (sig == libc::SIGKILL && cpu >= cpu_limit as f64) => {
                return done(Err((FailureReason::BudgetExceeded, format!("cpu budget of {} s exhausted", job.budget.cpu_seconds))))
            }
            Exit::Signal(sig) => return done(Err((FailureReason::NonzeroExit, format!("terminated by signal {sig}")))),
            Exit::Code(0) => {}
            Exit::Code(code) => return done(Err((FailureReason::NonzeroExit, format!("exited with status {code}")))),
        }
        if cpu > job.budget.cpu_seconds as f64 {
            return done(Err((FailureReason::BudgetExceeded, format!("used {cpu:.3} cpu seconds of {}", job.budget.cpu_seconds))));
        }
        if dir_size(&output_dir) > job.budget.storage_bytes {
            return done(Err((FailureReason::BudgetExceeded, format!("output exceeded {} bytes", job.budget.storage_bytes))));
        }
        let result_path = output_dir.join("result.json");
        match std::fs::read(&result_path) {
            Ok(bytes) => done(parse_result(&bytes, &output_dir).map_err(|m| (FailureReason::ProtocolViolation, m))),
            Err(_) => done(Err((FailureReason::ProtocolViolation, "exited 0 without writing result.json".into()))),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::os::unix::fs::PermissionsExt;

    fn script(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("plugin.sh");
        std::fs::write(&p, format!("#!/bin/sh\n{body}\n")).unwrap();
        std::fs::set_permissions(&p, std::fs::Permissions::from_mode(0o755)).unwrap();
        p
    }

    fn job(dir: &Path, cpu: u64) -> JobDocument {
        JobDocument {
            step_id: "s".into(),
            seed: 1,
            inputs: BTreeMap::new(),
            output_dir: dir.join("out").display().to_string(),
            budget: Resources { cpu_seconds: cpu, storage_bytes: 1 << 20 },
        }
    }

    fn run(body: &str, cpu: u64, timeout_ms: u64) -> Invocation {
        let d = tempfile::tempdir().unwrap();
        let p = script(d.path(), body);
        invoke(&p, &job(d.path(), cpu), Duration::from_millis(timeout_ms), &|_| {})
    }

    #[test]
    fn echo_plugin_passes() {
        let inv = run(
            "cat > /dev/null\necho '{\"progress\": 0.5, \"message\": \"half\"}'\nprintf '{\"verdict\":\"pass\",\"metrics\":{\"score\":1.0},\"artefacts\":[]}' > result.json",
            5,
            10_000,
        );
        let r = inv.outcome.unwrap();
        assert!(r.passed);
        assert_eq!(r.metrics["score"], 1.0);
    }

    #[test]
    fn nonzero_exit_keeps_diagnostics() {
        let inv = run("echo broken >&2\nexit 3", 5, 10_000);
        assert_eq!(inv.outcome.unwrap_err().0, FailureReason::NonzeroExit);
        assert_eq!(inv.stderr, b"broken\n");
    }

    #[test]
    fn missing_result_is_protocol_violation() {
        assert_eq!(run("exit 0", 5, 10_000).outcome.unwrap_err().0, FailureReason::ProtocolViolation);
    }

    #[test]
    fn timeout_kills() {
        let inv = run("exec sleep 5", 1, 200);
        assert_eq!(inv.outcome.unwrap_err().0, FailureReason::Timeout);
    }

    #[test]
    fn launch_failure() {
        let d = tempfile::tempdir().unwrap();
        let inv = invoke(&d.path().join("absent"), &job(d.path(), 1), Duration::from_secs(1), &|_| {});
        assert_eq!(inv.outcome.unwrap_err().0, FailureReason::LaunchFailed);
    }

    #[test]
    fn result_validation() {
        let d = tempfile::tempdir().unwrap();
        std::fs::write(d.path().join("a.txt"), "x").unwrap();
        let ok = parse_result(br#"{"verdict":"fail","metrics":{},"artefacts":["a.txt"]}"#, d.path()).unwrap();
        assert!(!ok.passed);
        for bad in [
            r#"{"verdict":"maybe","metrics":{},"artefacts":[]}"#,
            r#"{"verdict":"pass","metrics":{"x":"high"},"artefacts":[]}"#,
            r#"{"verdict":"pass","metrics":{},"artefacts":["../a.txt"]}"#,
            r#"{"verdict":"pass","metrics":{},"artefacts":["/etc/passwd"]}"#,
            r#"{"verdict":"pass","metrics":{},"artefacts":["missing"]}"#,
            r#"{"verdict":"pass","metrics":{},"artefacts":[],"extra":1}"#,
            r#"[1]"#,
        ] {
            assert!(parse_result(bad.as_bytes(), d.path()).is_err(), "{bad}");
        }
    }

    #[test]
    fn progress_lines() {
        assert_eq!(parse_progress(r#"{"progress":0.25,"message":"m"}"#), Some(Progress { progress: 0.25, message: "m".into() }));
        assert_eq!(parse_progress(r#"{"progress":2,"message":"m"}"#), None);
        assert_eq!(parse_progress("plain text"), None);
    }
}
