//! The held-open NDJSON event stream.

use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap};
use axum::response::{IntoResponse, Response};
use futures::channel::mpsc::UnboundedSender;
use sbx_core::engine::{self, EventKind, EventRecord, RunPhase};
use sbx_core::rbac::Principal;
use serde::Deserialize;

use crate::{blocking, ApiError, AppState, LiveRun};

const POLL: Duration = Duration::from_millis(200);

#[derive(Deserialize)]
pub(crate) struct From {
    from: Option<u64>,
}

type Tx = UnboundedSender<Result<Bytes, Infallible>>;

fn send(tx: &Tx, e: &EventRecord) -> bool {
    let mut line = serde_json::to_vec(e).expect("event serializes");
    line.push(b'\n');
    tx.unbounded_send(Ok(Bytes::from(line))).is_ok()
}

/// Events from `?from=` on, then every new one until the run finishes.
pub(crate) async fn stream(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(run_id): Path<String>,
    Query(q): Query<From>,
) -> Result<Response, ApiError> {
    let from = q.from.unwrap_or(0);
    let id = run_id.clone();
    let (st, p) = blocking(move || {
        let p = st.principal(&headers);
        st.ws.run(p.as_ref(), &id)?;
        Ok((st, p.expect("authorized")))
    })
    .await?;
    let (tx, rx) = futures::channel::mpsc::unbounded();
    std::thread::spawn(move || match st.live_run(&run_id) {
        Some(live) => follow_live(&live, from, &tx),
        None => follow_file(&st, &p, &run_id, from, &tx),
    });
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], Body::from_stream(rx)).into_response())
}

/// From the in-process monitor; ends once the run record is stored.
fn follow_live(live: &LiveRun, from: u64, tx: &Tx) {
    let mut next = from;
    loop {
        let (events, closed) = live.monitor.wait_events(next, POLL);
        for e in &events {
            if !send(tx, e) {
                return;
            }
        }
        next += events.len() as u64;
        if closed && live.monitor.events_from(next).0.is_empty() {
            live.wait_persisted();
            return;
        }
        if tx.is_closed() {
            return;
        }
    }
}

/// From the run's event file, for runs executed by another process.
fn follow_file(st: &AppState, p: &Principal, run_id: &str, from: u64, tx: &Tx) {
    let path = st.ws.run_dir(run_id).join(engine::EVENTS_FILE);
    let mut next = from;
    loop {
        let events = engine::read_events(&path).unwrap_or_default();
        let start = next;
        for e in events.iter().filter(|e| e.sequence_no >= start) {
            if !send(tx, e) {
                return;
            }
            next = e.sequence_no + 1;
        }
        let finished = events.iter().any(|e| e.kind == EventKind::RunFinished);
        let stored = st.ws.run(Some(p), run_id).map(|r| r.state.phase == RunPhase::Finished).unwrap_or(true);
        if (finished && stored) || (stored && events.is_empty()) || tx.is_closed() {
            return;
        }
        std::thread::sleep(POLL);
    }
}
