//! HTTP service that runs interactive design sessions.
//!
//! Each session is mutated by one worker at a time; every accepted mutation
//! bumps the session revision and publishes a fresh immutable snapshot that
//! readers fetch without waiting for running computations. Mutations must
//! quote the current revision and are rejected with `409` otherwise.

pub mod error;
pub mod wire;

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use nalgebra::DVector;
use serde::de::DeserializeOwned;
use tokio::net::TcpListener;
use tokio::sync::Mutex;

use oedct::archive::RecordedSession;
use oedct::config::RunConfig;

pub use error::{ApiError, ErrorBody};
use wire::{
    FloatArray, MeasureBody, MeasureReply, NextReply, Precision, PrecisionQuery, RevisionBody, RoiBody, Snapshot, StopReply,
};

struct Slot {
    snapshot: RwLock<Arc<Snapshot>>,
    worker: Arc<Mutex<RecordedSession>>,
}

impl Slot {
    fn latest(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    fn publish(&self, snap: Snapshot) {
        *self.snapshot.write().expect("snapshot lock") = Arc::new(snap);
    }
}

/// Shared server state.
#[derive(Clone, Default)]
pub struct AppState {
    sessions: Arc<RwLock<HashMap<String, Arc<Slot>>>>,
    /// Used when a creation request has an empty body.
    default_config: Option<Arc<RunConfig>>,
}

impl AppState {
    pub fn new(default_config: Option<RunConfig>) -> Self {
        Self {
            sessions: Default::default(),
            default_config: default_config.map(Arc::new),
        }
    }

    fn slot(&self, id: &str) -> Result<Arc<Slot>, ApiError> {
        self.sessions
            .read()
            .expect("registry lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_state))
        .route("/sessions/{id}/roi", post(set_roi))
        .route("/sessions/{id}/next", post(next_projection))
        .route("/sessions/{id}/measure", post(apply_measurement))
        .route("/sessions/{id}/stop", post(stop))
        .route("/sessions/{id}/archive", get(archive))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

fn precision(q: Result<Query<PrecisionQuery>, QueryRejection>) -> Result<Precision, ApiError> {
    q.map(|Query(q)| q.precision)
        .map_err(|e| ApiError::bad_request("BadQuery", e.body_text(), Some("precision")))
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request("BadRequest", e.to_string(), None))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string(), None))?
}

/// Runs `f` as the single writer of the session if `revision` is current,
/// then publishes the new snapshot.
async fn mutate<T: Send + 'static>(
    slot: Arc<Slot>,
    revision: u64,
    f: impl FnOnce(&mut RecordedSession) -> Result<T, ApiError> + Send + 'static,
) -> Result<(Arc<Snapshot>, T), ApiError> {
    let mut guard = slot.worker.clone().lock_owned().await;
    let current = slot.latest().revision;
    if revision != current {
        return Err(ApiError::stale(current, revision));
    }
    blocking(move || {
        let out = f(&mut guard)?;
        slot.publish(Snapshot::capture(current + 1, guard.session()));
        Ok((slot.latest(), out))
    })
    .await
}

async fn create_session(
    State(state): State<AppState>,
    q: Result<Query<PrecisionQuery>, QueryRejection>,
    body: Bytes,
) -> Result<impl IntoResponse, ApiError> {
    let precision = precision(q)?;
    let config = if body.iter().all(u8::is_ascii_whitespace) {
        state
            .default_config
            .as_deref()
            .cloned()
            .ok_or_else(|| ApiError::bad_request("InvalidConfig", "request body must hold a run configuration", Some("<root>")))?
    } else {
        let text = std::str::from_utf8(&body).map_err(|e| ApiError::bad_request("BadRequest", e.to_string(), None))?;
        RunConfig::from_json_str(text, ".")?
    };
    let rec = blocking(move || Ok(RecordedSession::new(config)?)).await?;
    let snap = Arc::new(Snapshot::capture(0, rec.session()));
    let id = uuid::Uuid::new_v4().simple().to_string();
    let slot = Arc::new(Slot {
        snapshot: RwLock::new(snap.clone()),
        worker: Arc::new(Mutex::new(rec)),
    });
    state.sessions.write().expect("registry lock").insert(id.clone(), slot);
    Ok((StatusCode::CREATED, Json(snap.view(&id, precision))))
}

async fn get_state(
    State(state): State<AppState>,
    Path(id): Path<String>,
    q: Result<Query<PrecisionQuery>, QueryRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let precision = precision(q)?;
    let snap = state.slot(&id)?.latest();
    Ok(Json(snap.view(&id, precision)))
}

async fn set_roi(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let slot = state.slot(&id)?;
    let req: RoiBody = parse_body(&body)?;
    let (snap, ()) = mutate(slot, req.revision, move |rec| {
        let grid = rec.session().problem().grid;
        let roi = rec.config().region_roi(&grid, &req.roi)?;
        rec.set_roi(roi)?;
        Ok(())
    })
    .await?;
    Ok(Json(wire::RevisionReply { revision: snap.revision }))
}

async fn next_projection(
    State(state): State<AppState>,
    Path(id): Path<String>,
    q: Result<Query<PrecisionQuery>, QueryRejection>,
    body: Bytes,
) -> Result<impl IntoResponse, ApiError> {
    let precision = precision(q)?;
    let slot = state.slot(&id)?;
    let req: RevisionBody = parse_body(&body)?;
    let (snap, ()) = mutate(slot, req.revision, |rec| {
        rec.next()?;
        Ok(())
    })
    .await?;
    Ok(Json(NextReply {
        revision: snap.revision,
        design: snap.pending.expect("pending after next"),
        landscape: snap.landscape_view(precision).expect("landscape after next"),
    }))
}

async fn apply_measurement(
    State(state): State<AppState>,
    Path(id): Path<String>,
    q: Result<Query<PrecisionQuery>, QueryRejection>,
    body: Bytes,
) -> Result<impl IntoResponse, ApiError> {
    let precision = precision(q)?;
    let slot = state.slot(&id)?;
    let req: MeasureBody = parse_body(&body)?;
    let data = match (req.data, req.data_encoded, req.simulate) {
        (Some(d), None, None) => Some(d),
        (None, Some(enc), None) => Some(enc.decode()?),
        (None, None, Some(_)) => None,
        _ => {
            return Err(ApiError::bad_request(
                "BadRequest",
                "give exactly one of `data`, `data_encoded` or `simulate`",
                Some("data"),
            ))
        }
    };
    let seed = req.simulate.map(|s| s.seed);
    let (snap, ()) = mutate(slot, req.revision, move |rec| {
        match (data, seed) {
            (Some(y), _) => rec.measure(DVector::from_vec(y))?,
            (None, Some(seed)) => rec.measure_simulated(seed)?,
            (None, None) => unreachable!("validated above"),
        };
        Ok(())
    })
    .await?;
    Ok(Json(MeasureReply {
        revision: snap.revision,
        generation: snap.generation,
        reconstruction: FloatArray::encode(&snap.mean, precision),
        std: FloatArray::encode(&snap.std, precision),
    }))
}

async fn stop(
    State(state): State<AppState>,
    Path(id): Path<String>,
    q: Result<Query<PrecisionQuery>, QueryRejection>,
    body: Bytes,
) -> Result<impl IntoResponse, ApiError> {
    let precision = precision(q)?;
    let slot = state.slot(&id)?;
    let req: RevisionBody = parse_body(&body)?;
    let (snap, variance) = mutate(slot, req.revision, |rec| {
        rec.stop()?;
        Ok(rec.session().belief().cov_diagonal())
    })
    .await?;
    Ok(Json(StopReply {
        revision: snap.revision,
        reconstruction: FloatArray::encode(&snap.mean, precision),
        variance: FloatArray::encode(&variance, precision),
        archive: format!("/sessions/{id}/archive"),
    }))
}

/// Session archive as JSON; replaying it reproduces the session.
async fn archive(State(state): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let slot = state.slot(&id)?;
    let rec = slot.worker.lock().await;
    Ok(([(axum::http::header::CONTENT_TYPE, "application/json")], rec.archive().to_json()))
}
