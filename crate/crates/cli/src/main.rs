//! `sbx`: configure, plan, run and audit sandbox assessments from the shell.
//!
//! Exit codes: 0 success, 1 the input was rejected (parse, validation,
//! planning, catalogue, mapping), 2 usage or missing workspace, 3 runtime
//! failure, refusal, or a run with a step that did not pass, 4 a broken
//! audit chain.

mod reference;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use sbx_core::audit;
use sbx_core::catalogue::{Catalogue, ExpertRecord, ModuleDescriptor, Requirement};
use sbx_core::digest::{canonical_json_pretty, is_sha256_hex};
use sbx_core::dsl::{self, ChangeKind, Diagnostic, ParseError};
use sbx_core::engine::{self, FailurePolicy, RunMonitor, RunRecord, RunState, StepStatus, StepVerdict};
use sbx_core::mapping::MappingTable;
use sbx_core::planner::ExecutionPlan;
use sbx_core::rbac::Principal;
use sbx_core::report::{self, Audience, ExitReport, ReportNote};
use sbx_core::triage::{self, AnswerSet, TriageModel};
use sbx_core::vocab::{ControlStatus, Zone};
use sbx_core::workspace::{self, RunStart, Workspace, WorkspaceError, MAPPING_FILE};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "sbx", version, about = "Configure, run and audit regulatory sandbox assessments")]
struct Cli {
    /// Workspace directory.
    #[arg(long, global = true, env = "SBX_WORKSPACE", value_name = "DIR")]
    workspace: Option<PathBuf>,
    /// Act as this principal.
    #[arg(long = "as", global = true, env = "SBX_PRINCIPAL", value_name = "PRINCIPAL_ID")]
    principal: Option<String>,
    #[arg(long, global = true, value_enum, default_value_t = Output::Text, overrides_with = "output")]
    output: Output,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Output {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create a workspace with one principal per role.
    Init {
        /// Mapping table to install instead of the built-in one.
        #[arg(long)]
        mapping: Option<PathBuf>,
    },
    /// Classify a system from a self-assessment answers file (non-binding).
    Triage {
        answers: PathBuf,
        /// Questionnaire and rules to use instead of the built-in model.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Parse and validate configuration files.
    Validate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Print configurations in canonical form.
    Fmt {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Only report files that are not canonical.
        #[arg(long, conflicts_with = "write")]
        check: bool,
        /// Rewrite files in place.
        #[arg(long)]
        write: bool,
    },
    /// Structural changes between two configurations.
    Diff { old: PathBuf, new: PathBuf },
    /// Store a configuration in the workspace.
    Submit { config: PathBuf },
    /// Assemble the execution plan for a configuration file or stored digest.
    Plan {
        config: String,
        /// Accept coverage gaps and record them in the plan.
        #[arg(long)]
        allow_gaps: bool,
        /// Mapping table for this plan only.
        #[arg(long)]
        mapping: Option<PathBuf>,
        /// Also write the plan document here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute a plan, given by id or by a plan.json file.
    Run {
        plan: String,
        /// Executors, e.g. `local:2` or `local,3xremote:1:20`.
        #[arg(long, default_value = "local:2")]
        executors: String,
        #[arg(long, default_value = "continue")]
        policy: String,
        #[arg(long)]
        idempotency_key: Option<String>,
    },
    /// List runs.
    Runs,
    /// Print a run's events as NDJSON.
    Events {
        run_id: String,
        #[arg(long, default_value_t = 0)]
        from: u64,
    },
    /// Generate (or show) the exit report of a finished run.
    Report {
        run_id: String,
        /// Print the rendering for one audience instead of the JSON report.
        #[arg(long)]
        audience: Option<Audience>,
        /// Reviewer note as SUBJECT=TEXT; regenerates the report.
        #[arg(long = "note", value_name = "SUBJECT=TEXT")]
        notes: Vec<String>,
        #[arg(long)]
        regenerate: bool,
    },
    #[command(subcommand)]
    Audit(AuditCmd),
    #[command(subcommand)]
    Catalogue(CatalogueCmd),
    #[command(subcommand)]
    Control(ControlCmd),
    #[command(subcommand)]
    Artefact(ArtefactCmd),
    /// Show the acting principal's role, zones and permitted actions.
    Session,
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = sbx_service::DEFAULT_LISTEN)]
        listen: std::net::SocketAddr,
        /// Directory with the dashboard's static files.
        #[arg(long, value_name = "DIR")]
        with_ui: Option<PathBuf>,
    },
    /// Print a shell completion script.
    Completions { shell: clap_complete::Shell },
    /// Print the man page.
    Man,
}

#[derive(Subcommand)]
enum AuditCmd {
    /// Verify the workspace chains, or one chain or export file.
    Verify { file: Option<PathBuf> },
    /// Export the workspace chain with a signed-off trailer.
    Export {
        #[arg(long)]
        from: Option<u64>,
        #[arg(long)]
        to: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CatalogueCmd {
    /// Register a module descriptor (JSON).
    Add { descriptor: PathBuf },
    /// Register the reference plug-ins for noise-perturbation,
    /// bias-detection and output-explainability.
    AddReference {
        /// Path of the sbx-refplugin binary (default: next to sbx).
        #[arg(long)]
        plugin: Option<PathBuf>,
        /// Override a capability's plug-in mode, as CAPABILITY=MODE.
        #[arg(long = "mode", value_name = "CAPABILITY=MODE")]
        modes: Vec<String>,
    },
    /// Print the catalogue.
    List,
    /// Resolve `capability@range` queries against the catalogue.
    Resolve {
        #[arg(required = true)]
        queries: Vec<String>,
    },
    /// Register a technical expert record (JSON).
    Expert { record: PathBuf },
}

#[derive(Subcommand)]
enum ControlCmd {
    Show { control_id: String },
    /// Controls of a stored configuration.
    List { config_digest: String },
    Set {
        control_id: String,
        status: ControlStatus,
        #[arg(long, default_value = "")]
        note: String,
    },
}

#[derive(Subcommand)]
enum ArtefactCmd {
    Put {
        file: PathBuf,
        #[arg(long, default_value = "shared")]
        zone: Zone,
        #[arg(long, default_value = "application/octet-stream")]
        hint: String,
    },
    Get {
        digest: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// A command failure with its exit code.
struct Fail {
    code: u8,
    message: String,
}

impl Fail {
    fn usage(message: impl Into<String>) -> Self {
        Fail { code: 2, message: message.into() }
    }

    fn rejected(message: impl Into<String>) -> Self {
        Fail { code: 1, message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Fail { code: 3, message: message.into() }
    }

    /// Already reported on stdout/stderr.
    fn silent(code: u8) -> Self {
        Fail { code, message: String::new() }
    }
}

impl From<WorkspaceError> for Fail {
    fn from(e: WorkspaceError) -> Self {
        let code = match e.code() {
            "no_workspace" | "not_initialized" => 2,
            "parse_error" | "validation_failed" | "plan_rejected" | "catalogue_rejected" | "mapping_invalid" | "principals_invalid" => 1,
            _ => 3,
        };
        let mut message = format!("{}: {e}", e.code());
        if let WorkspaceError::Invalid(report) = &e {
            for d in &report.diagnostics {
                message.push_str(&format!("\n  {}", diagnostic_line(None, d)));
            }
        }
        Fail { code, message }
    }
}

type Result<T, E = Fail> = std::result::Result<T, E>;

struct Ctx {
    workspace: Option<PathBuf>,
    principal: Option<String>,
    output: Output,
}

impl Ctx {
    fn open(&self) -> Result<Workspace> {
        let root = workspace::resolve_root(self.workspace.as_deref())?;
        Ok(Workspace::open(&root)?)
    }

    /// The acting principal. An unknown id acts as nobody, which the
    /// workspace denies and records.
    fn principal(&self, ws: &Workspace) -> Option<Principal> {
        self.principal.as_deref().and_then(|id| ws.principals().principal(id).cloned())
    }

    fn json(&self) -> bool {
        self.output == Output::Json
    }

    /// Prints `value` in JSON mode and `text` otherwise.
    fn emit(&self, value: &Value, text: impl FnOnce() -> String) {
        if self.json() {
            println!("{}", canonical_json_pretty(value));
        } else {
            print!("{}", text());
        }
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Fail::usage(format!("{}: {e}", path.display())))
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializes")
}

fn diagnostic_line(file: Option<&Path>, d: &Diagnostic) -> String {
    let sev = to_value(&d.severity);
    let prefix = file.map(|f| format!("{}:", f.display())).unwrap_or_default();
    format!("{prefix}{}:{}: {} {} {}: {} ({})", d.line, d.column, sev.as_str().unwrap_or("?"), d.code, d.name, d.message, d.path)
}

fn parse_error_line(file: &Path, e: &ParseError) -> String {
    let pos = e.pos();
    format!("{}:{}:{}: parse error: {e}", file.display(), pos.line, pos.column)
}

/// Parses and validates; the canonical text of a valid document.
fn load_valid(path: &Path) -> Result<(dsl::ConfigDocument, String)> {
    let source = read(path)?;
    let doc = dsl::parse(&source).map_err(|e| Fail::rejected(parse_error_line(path, &e)))?;
    match dsl::canonicalize(&doc) {
        Ok(text) => Ok((doc, text)),
        Err(dsl::CanonicalizeError::NotValid(report)) => {
            let lines: Vec<String> = report.errors().map(|d| diagnostic_line(Some(path), d)).collect();
            Err(Fail::rejected(lines.join("\n")))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Ctx { workspace: cli.workspace, principal: cli.principal, output: cli.output };
    match dispatch(&ctx, cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message.is_empty() {
                eprintln!("sbx: {}", f.message);
            }
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(ctx: &Ctx, cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Init { mapping } => init(ctx, mapping),
        Cmd::Triage { answers, model } => triage(ctx, &answers, model.as_deref()),
        Cmd::Validate { files } => validate(ctx, &files),
        Cmd::Fmt { files, check, write } => fmt(&files, check, write),
        Cmd::Diff { old, new } => diff(ctx, &old, &new),
        Cmd::Submit { config } => submit(ctx, &config),
        Cmd::Plan { config, allow_gaps, mapping, out } => plan(ctx, &config, allow_gaps, mapping.as_deref(), out.as_deref()),
        Cmd::Run { plan, executors, policy, idempotency_key } => run(ctx, &plan, &executors, &policy, idempotency_key.as_deref()),
        Cmd::Runs => runs(ctx),
        Cmd::Events { run_id, from } => events(ctx, &run_id, from),
        Cmd::Report { run_id, audience, notes, regenerate } => report_cmd(ctx, &run_id, audience, &notes, regenerate),
        Cmd::Audit(c) => audit_cmd(ctx, c),
        Cmd::Catalogue(c) => catalogue_cmd(ctx, c),
        Cmd::Control(c) => control_cmd(ctx, c),
        Cmd::Artefact(c) => artefact_cmd(ctx, c),
        Cmd::Session => {
            let ws = ctx.open()?;
            let s = ws.session(ctx.principal(&ws).as_ref())?;
            ctx.emit(&to_value(&s), || {
                let zones: Vec<&str> = s.zones.iter().map(|z| z.as_str()).collect();
                let actions: Vec<&str> = s.actions.iter().map(|a| a.as_str()).collect();
                format!("{} ({})\nzones: {}\nactions: {}\n", s.principal_id, s.role, zones.join(", "), actions.join(", "))
            });
            Ok(())
        }
        Cmd::Serve { listen, with_ui } => {
            let ws = ctx.open()?;
            let state = sbx_service::AppState::with_ui(ws, with_ui);
            let rt = tokio::runtime::Runtime::new().map_err(|e| Fail::runtime(e.to_string()))?;
            rt.block_on(sbx_service::serve(state, listen)).map_err(|e| Fail::runtime(format!("serve: {e}")))
        }
        Cmd::Completions { shell } => {
            clap_complete::generate(shell, &mut Cli::command(), "sbx", &mut std::io::stdout());
            Ok(())
        }
        Cmd::Man => {
            clap_mangen::Man::new(Cli::command()).render(&mut std::io::stdout()).map_err(|e| Fail::runtime(e.to_string()))
        }
    }
}

fn init(ctx: &Ctx, mapping: Option<PathBuf>) -> Result<()> {
    let root = workspace::resolve_root(ctx.workspace.as_deref())?;
    if let Some(m) = &mapping {
        let text = read(m)?;
        MappingTable::parse(&text).map_err(|e| Fail::rejected(format!("{}: {e}", m.display())))?;
        std::fs::create_dir_all(&root).map_err(|e| Fail::runtime(e.to_string()))?;
        std::fs::write(root.join(MAPPING_FILE), text).map_err(|e| Fail::runtime(e.to_string()))?;
    }
    let ws = Workspace::init(&root, None)?;
    let mut principals: Vec<Value> = ws
        .principals()
        .entries()
        .map(|(token, p)| json!({ "principal_id": p.principal_id, "role": p.role, "token": token }))
        .collect();
    principals.sort_by(|a, b| a["principal_id"].as_str().cmp(&b["principal_id"].as_str()));
    let v = json!({ "workspace": root, "principals": principals });
    ctx.emit(&v, || {
        let mut s = format!("workspace {}\n", root.display());
        for p in &principals {
            s.push_str(&format!("{:<10} {:<20} {}\n", p["principal_id"].as_str().unwrap_or(""), p["role"].as_str().unwrap_or(""), p["token"].as_str().unwrap_or("")));
        }
        s
    });
    Ok(())
}

fn triage(ctx: &Ctx, answers: &Path, model: Option<&Path>) -> Result<()> {
    let model = match model {
        Some(m) => TriageModel::parse(&read(m)?).map_err(|e| Fail::rejected(format!("{}: {e}", m.display())))?,
        None => TriageModel::default_model(),
    };
    let set = AnswerSet::parse(&read(answers)?).map_err(|e| Fail::rejected(format!("{}: {e}", answers.display())))?;
    let outcome = triage::classify(&set, &model).map_err(|e| Fail::rejected(format!("{}: {e}", answers.display())))?;
    ctx.emit(&to_value(&outcome), || triage::render_text(&outcome));
    Ok(())
}

fn validate(ctx: &Ctx, files: &[PathBuf]) -> Result<()> {
    let mut results = Vec::new();
    let mut all_ok = true;
    for f in files {
        let source = read(f)?;
        let entry = match dsl::parse(&source) {
            Err(e) => {
                all_ok = false;
                if !ctx.json() {
                    eprintln!("{}", parse_error_line(f, &e));
                }
                let pos = e.pos();
                json!({ "file": f, "ok": false, "parse_error": { "message": e.to_string(), "line": pos.line, "column": pos.column } })
            }
            Ok(doc) => {
                let report = dsl::validate(&doc);
                all_ok &= report.ok;
                if !ctx.json() {
                    for d in &report.diagnostics {
                        eprintln!("{}", diagnostic_line(Some(f), d));
                    }
                    if report.ok {
                        println!("{}: ok", f.display());
                    }
                }
                let digest = report.ok.then(|| dsl::config_digest(&doc).ok()).flatten();
                json!({ "file": f, "ok": report.ok, "config_digest": digest, "diagnostics": report.diagnostics })
            }
        };
        results.push(entry);
    }
    if ctx.json() {
        println!("{}", canonical_json_pretty(&Value::Array(results)));
    }
    if all_ok {
        Ok(())
    } else {
        Err(Fail::silent(1))
    }
}

fn fmt(files: &[PathBuf], check: bool, write: bool) -> Result<()> {
    let mut unformatted = false;
    for f in files {
        let (_, canonical) = load_valid(f)?;
        if check {
            if read(f)? != canonical {
                eprintln!("{}: not in canonical form", f.display());
                unformatted = true;
            }
        } else if write {
            std::fs::write(f, &canonical).map_err(|e| Fail::runtime(format!("{}: {e}", f.display())))?;
        } else {
            print!("{canonical}");
        }
    }
    if unformatted {
        Err(Fail::silent(1))
    } else {
        Ok(())
    }
}

fn diff(ctx: &Ctx, old: &Path, new: &Path) -> Result<()> {
    let (a, a_text) = load_valid(old)?;
    let (b, b_text) = load_valid(new)?;
    let changes = dsl::diff(&a, &b);
    let v = json!({
        "from_digest": sbx_core::digest::sha256_hex(&a_text),
        "to_digest": sbx_core::digest::sha256_hex(&b_text),
        "changes": changes.changes,
    });
    ctx.emit(&v, || {
        let show = |x: &Option<dsl::TreeValue>| x.as_ref().map(|t| to_value(t).to_string()).unwrap_or_default();
        let mut s = String::new();
        for c in &changes.changes {
            match c.kind {
                ChangeKind::Added => s.push_str(&format!("+ {}: {}\n", c.path, show(&c.after))),
                ChangeKind::Removed => s.push_str(&format!("- {}: {}\n", c.path, show(&c.before))),
                ChangeKind::Modified => s.push_str(&format!("~ {}: {} -> {}\n", c.path, show(&c.before), show(&c.after))),
            }
        }
        if s.is_empty() {
            s.push_str("no changes\n");
        }
        s
    });
    Ok(())
}

fn submit(ctx: &Ctx, config: &Path) -> Result<()> {
    let ws = ctx.open()?;
    let p = ctx.principal(&ws);
    let outcome = ws.submit_config(p.as_ref(), &read(config)?)?;
    if let Some(e) = &outcome.parse_error {
        eprintln!("{}: parse error: {e}", config.display());
    }
    if let Some(r) = &outcome.report {
        for d in &r.diagnostics {
            eprintln!("{}", diagnostic_line(Some(config), d));
        }
    }
    ctx.emit(&to_value(&outcome), || match &outcome.config_digest {
        Some(d) => format!("stored {d}\n"),
        None => String::new(),
    });
    if outcome.accepted() {
        Ok(())
    } else {
        Err(Fail::silent(1))
    }
}

fn plan(ctx: &Ctx, config: &str, allow_gaps: bool, mapping: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let mut ws = ctx.open()?;
    if let Some(m) = mapping {
        let table = MappingTable::parse(&read(m)?).map_err(|e| Fail::rejected(format!("{}: {e}", m.display())))?;
        ws.set_mapping(table);
    }
    let p = ctx.principal(&ws);
    let path = Path::new(config);
    let plan = if path.exists() {
        let doc = dsl::parse(&read(path)?).map_err(|e| Fail::rejected(parse_error_line(path, &e)))?;
        ws.assemble_plan(p.as_ref(), &doc, allow_gaps)?
    } else if is_sha256_hex(config.trim_start_matches("sha256:")) {
        ws.assemble_plan_for(p.as_ref(), config.trim_start_matches("sha256:"), allow_gaps)?
    } else {
        return Err(Fail::usage(format!("{config} is neither a file nor a configuration digest")));
    };
    let v = to_value(&plan);
    if let Some(o) = out {
        std::fs::write(o, canonical_json_pretty(&v)).map_err(|e| Fail::runtime(format!("{}: {e}", o.display())))?;
    }
    ctx.emit(&v, || render_plan(&plan));
    Ok(())
}

fn render_plan(plan: &ExecutionPlan) -> String {
    let mut s = format!("plan {}\nconfig {} ({})\n", plan.plan_id, plan.config_name, plan.config_digest);
    for step in &plan.steps {
        let binding = match &step.binding {
            sbx_core::planner::StepBinding::Module { name, version, .. } => format!("{name}@{version}"),
            sbx_core::planner::StepBinding::Control { control_id, .. } => format!("control {control_id}"),
        };
        s.push_str(&format!("  {:<40} {:<16} {binding}\n", step.step_id, step.dimension.as_str()));
    }
    for g in &plan.waived_gaps {
        s.push_str(&format!("  waived gap: {} {}\n", g.objective_id, g.test_type.as_deref().unwrap_or("")));
    }
    s
}

/// Plan id from an id or a plan.json path.
fn plan_ref(arg: &str) -> Result<String> {
    let path = Path::new(arg);
    if path.is_file() {
        let v: Value = serde_json::from_str(&read(path)?).map_err(|e| Fail::usage(format!("{arg}: {e}")))?;
        return v["plan_id"].as_str().map(str::to_string).ok_or_else(|| Fail::usage(format!("{arg} has no plan_id")));
    }
    Ok(arg.to_string())
}

fn run_summary(rec: &RunRecord, replayed: bool) -> Value {
    let steps: serde_json::Map<String, Value> = rec
        .state
        .steps
        .iter()
        .map(|(id, st)| {
            let r = rec.results.get(id);
            let v = json!({
                "status": st.status,
                "executor_id": st.executor_id,
                "verdict": st.verdict,
                "reason": r.and_then(|r| r.reason),
                "diagnostics": r.and_then(|r| r.diagnostics.clone()),
                "metrics": r.map(|r| r.metrics.clone()).unwrap_or_default(),
                "artefacts": r.map(|r| r.artefact_digests()).unwrap_or_default(),
            });
            (id.clone(), v)
        })
        .collect();
    json!({
        "run_id": rec.run_id,
        "plan_id": rec.plan_id,
        "config_digest": rec.config_digest,
        "phase": rec.state.phase,
        "replayed": replayed,
        "steps": steps,
    })
}

fn all_passed(state: &RunState) -> bool {
    state.succeeded() && state.steps.values().all(|s| s.status == StepStatus::Done && s.verdict == Some(StepVerdict::Pass))
}

fn run(ctx: &Ctx, plan: &str, executors: &str, policy: &str, key: Option<&str>) -> Result<()> {
    let ws = ctx.open()?;
    let p = ctx.principal(&ws);
    let executors = engine::parse_executors(executors).map_err(|e| Fail::usage(e.to_string()))?;
    let policy: FailurePolicy = policy.parse().map_err(|e: engine::EngineError| Fail::usage(e.to_string()))?;
    let plan_id = plan_ref(plan)?;
    let (record, replayed) = match ws.start_run(p.as_ref(), &plan_id, executors, policy, key)? {
        RunStart::Replayed(run_id) => (ws.run(p.as_ref(), &run_id)?, true),
        RunStart::New(spec) => {
            let monitor = RunMonitor::new(RunState::new(&spec.run_id, &spec.plan));
            let quiet = ctx.json();
            let record = std::thread::scope(|s| {
                let watcher = s.spawn(|| {
                    if !quiet {
                        watch(&monitor);
                    }
                });
                let r = ws.execute(&spec, &monitor);
                monitor.close();
                let _ = watcher.join();
                r
            })?;
            (record, false)
        }
    };
    let v = run_summary(&record, replayed);
    ctx.emit(&v, || {
        let mut s = format!("run {} ({})\n", record.run_id, if replayed { "replayed" } else { "finished" });
        for (id, st) in &record.state.steps {
            let verdict = st.verdict.map(StepVerdict::as_str).unwrap_or("-");
            let reason = record.results.get(id).and_then(|r| r.reason).map(|r| format!(" [{r}]")).unwrap_or_default();
            s.push_str(&format!("  {id:<40} {verdict}{reason}\n"));
        }
        s
    });
    if all_passed(&record.state) {
        Ok(())
    } else {
        Err(Fail::silent(3))
    }
}

/// Prints step transitions to stderr until the run closes.
fn watch(monitor: &RunMonitor) {
    let mut next = 0;
    loop {
        let (events, closed) = monitor.wait_events(next, std::time::Duration::from_millis(200));
        for e in &events {
            next = e.sequence_no + 1;
            let step = e.step_id.as_deref().unwrap_or("");
            match e.kind {
                engine::EventKind::StepStarted => eprintln!("started  {step}"),
                engine::EventKind::StepFinished => {
                    eprintln!("finished {step} {}", e.payload.get("verdict").and_then(Value::as_str).unwrap_or(""))
                }
                _ => {}
            }
        }
        if closed && events.is_empty() {
            return;
        }
    }
}

fn runs(ctx: &Ctx) -> Result<()> {
    let ws = ctx.open()?;
    let mut list = ws.runs(ctx.principal(&ws).as_ref())?;
    list.sort_by(|a, b| a.created.cmp(&b.created).then_with(|| a.run_id.cmp(&b.run_id)));
    let v: Vec<Value> = list
        .iter()
        .map(|r| json!({ "run_id": r.run_id, "plan_id": r.plan_id, "phase": r.state.phase, "created": r.created, "passed": all_passed(&r.state) }))
        .collect();
    ctx.emit(&Value::Array(v.clone()), || {
        list.iter().map(|r| format!("{} {} {:?} passed={}\n", r.run_id, r.created, r.state.phase, all_passed(&r.state))).collect()
    });
    Ok(())
}

fn events(ctx: &Ctx, run_id: &str, from: u64) -> Result<()> {
    let ws = ctx.open()?;
    let mut out = std::io::stdout().lock();
    for e in ws.events(ctx.principal(&ws).as_ref(), run_id, from)? {
        writeln!(out, "{}", serde_json::to_string(&e).expect("serializes")).map_err(|e| Fail::runtime(e.to_string()))?;
    }
    Ok(())
}

fn report_cmd(ctx: &Ctx, run_id: &str, audience: Option<Audience>, notes: &[String], regenerate: bool) -> Result<()> {
    let ws = ctx.open()?;
    let p = ctx.principal(&ws);
    let author = p.as_ref().map(Principal::actor).unwrap_or_default();
    let notes = notes
        .iter()
        .map(|n| {
            n.split_once('=')
                .map(|(s, t)| ReportNote { author: author.clone(), subject: s.trim().to_string(), text: t.trim().to_string() })
                .ok_or_else(|| Fail::usage(format!("note `{n}` must be SUBJECT=TEXT")))
        })
        .collect::<Result<Vec<_>>>()?;
    let existing = if regenerate || !notes.is_empty() {
        None
    } else {
        match ws.report(p.as_ref(), run_id) {
            Ok(r) => Some(r),
            Err(WorkspaceError::NotFound { .. }) => None,
            Err(e) => return Err(e.into()),
        }
    };
    let report: ExitReport = match existing {
        Some(r) => r,
        None => ws.generate_report(p.as_ref(), run_id, &notes)?,
    };
    if let Some(a) = audience {
        print!("{}", report::render_human(&report, a));
        return Ok(());
    }
    ctx.emit(&to_value(&report), || {
        let dir = ws.run_dir(run_id);
        let mut s = format!("report {} for run {run_id}\n", report.report_id);
        s.push_str(&format!("  {}\n", dir.join(report::REPORT_FILE).display()));
        for a in Audience::ALL {
            s.push_str(&format!("  {}\n", dir.join(a.file_name()).display()));
        }
        s
    });
    Ok(())
}

fn verdict_text(name: &str, v: &audit::Verdict) -> String {
    match v {
        audit::Verdict::Ok { head, .. } => format!("{name}: ok ({} entries, head {})\n", head.length, head.head_hash),
        audit::Verdict::Broken { broken_at, reason, .. } => format!("{name}: BROKEN at entry {broken_at} ({reason})\n"),
    }
}

fn audit_cmd(ctx: &Ctx, cmd: AuditCmd) -> Result<()> {
    match cmd {
        AuditCmd::Verify { file: Some(f) } => {
            let bytes = std::fs::read(&f).map_err(|e| Fail::usage(format!("{}: {e}", f.display())))?;
            let v = audit::verify_any_bytes(&bytes);
            ctx.emit(&to_value(&v), || verdict_text(&f.display().to_string(), &v));
            if v.is_ok() {
                Ok(())
            } else {
                Err(Fail::silent(4))
            }
        }
        AuditCmd::Verify { file: None } => {
            let ws = ctx.open()?;
            let summary = ws.verify_all()?;
            ctx.emit(&to_value(&summary), || summary.chains.iter().map(|(k, v)| verdict_text(k, v)).collect());
            if summary.ok {
                Ok(())
            } else {
                Err(Fail::silent(4))
            }
        }
        AuditCmd::Export { from, to, out } => {
            let ws = ctx.open()?;
            let range = match (from, to) {
                (None, None) => None,
                (f, t) => Some((f.unwrap_or(0), t.unwrap_or(u64::MAX))),
            };
            let text = ws.export_audit(ctx.principal(&ws).as_ref(), range)?;
            match out {
                Some(o) => std::fs::write(&o, text).map_err(|e| Fail::runtime(format!("{}: {e}", o.display()))),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}

fn catalogue_cmd(ctx: &Ctx, cmd: CatalogueCmd) -> Result<()> {
    let ws = ctx.open()?;
    let p = ctx.principal(&ws);
    match cmd {
        CatalogueCmd::Add { descriptor } => {
            let d: ModuleDescriptor =
                serde_json::from_str(&read(&descriptor)?).map_err(|e| Fail::rejected(format!("{}: {e}", descriptor.display())))?;
            let id = ws.register_module(p.as_ref(), d)?;
            ctx.emit(&json!({ "registered": id }), || format!("registered {id}\n"));
        }
        CatalogueCmd::AddReference { plugin, modes } => {
            let plugin = match plugin {
                Some(p) => p,
                None => reference::default_plugin_path().map_err(Fail::usage)?,
            };
            let ids = reference::install(&ws, p.as_ref(), &plugin, &modes)?;
            ctx.emit(&json!({ "registered": ids }), || ids.iter().map(|i| format!("registered {i}\n")).collect());
        }
        CatalogueCmd::List => {
            let cat = ws.catalogue()?;
            let doc = cat.export();
            ctx.emit(&to_value(&doc), || {
                let mut s = String::new();
                for m in cat.modules() {
                    s.push_str(&format!("{:<36} provides {}\n", m.id(), m.provides.join(", ")));
                }
                for e in cat.experts() {
                    s.push_str(&format!("expert {:<29} operates {}\n", e.expert_id, e.operable_capabilities.join(", ")));
                }
                s
            });
        }
        CatalogueCmd::Resolve { queries } => {
            let roots = queries
                .iter()
                .map(|q| Requirement::parse_query(q).map_err(|e| Fail::usage(format!("{q}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let cat: Catalogue = ws.catalogue()?;
            let res = cat.resolve(&roots).map_err(|e| Fail::rejected(e.to_string()))?;
            ctx.emit(&to_value(&res), || {
                res.order.iter().map(|c| format!("{c} -> {}@{}\n", res.bindings[c].name, res.bindings[c].version)).collect()
            });
        }
        CatalogueCmd::Expert { record } => {
            let e: ExpertRecord =
                serde_json::from_str(&read(&record)?).map_err(|e| Fail::rejected(format!("{}: {e}", record.display())))?;
            let id = e.expert_id.clone();
            ws.register_expert(p.as_ref(), e)?;
            ctx.emit(&json!({ "registered": id }), || format!("registered expert {id}\n"));
        }
    }
    Ok(())
}

fn control_cmd(ctx: &Ctx, cmd: ControlCmd) -> Result<()> {
    let ws = ctx.open()?;
    let p = ctx.principal(&ws);
    let line = |c: &workspace::ControlView| format!("{:<28} {:<10} {} ({})\n", c.control_id, c.status.as_str(), c.activity, c.config_digest);
    match cmd {
        ControlCmd::Show { control_id } => {
            let c = ws.control(p.as_ref(), &control_id)?;
            ctx.emit(&to_value(&c), || line(&c));
        }
        ControlCmd::List { config_digest } => {
            let cs = ws.controls(p.as_ref(), config_digest.trim_start_matches("sha256:"))?;
            ctx.emit(&to_value(&cs), || cs.iter().map(line).collect());
        }
        ControlCmd::Set { control_id, status, note } => {
            let c = ws.set_control_status(p.as_ref(), &control_id, status, &note)?;
            ctx.emit(&to_value(&c), || line(&c));
        }
    }
    Ok(())
}

fn artefact_cmd(ctx: &Ctx, cmd: ArtefactCmd) -> Result<()> {
    let ws = ctx.open()?;
    let p = ctx.principal(&ws);
    match cmd {
        ArtefactCmd::Put { file, zone, hint } => {
            let bytes = std::fs::read(&file).map_err(|e| Fail::usage(format!("{}: {e}", file.display())))?;
            let r = ws.put_artefact(p.as_ref(), &bytes, zone, &hint)?;
            ctx.emit(&to_value(&r), || format!("sha256:{} ({}, {} bytes)\n", r.digest, r.zone, r.size_bytes));
        }
        ArtefactCmd::Get { digest, out } => {
            let (_, bytes) = ws.artefact(p.as_ref(), &digest)?;
            match out {
                Some(o) => std::fs::write(&o, bytes).map_err(|e| Fail::runtime(format!("{}: {e}", o.display())))?,
                None => std::io::stdout().write_all(&bytes).map_err(|e| Fail::runtime(e.to_string()))?,
            }
        }
    }
    Ok(())
}
