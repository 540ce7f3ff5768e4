//! HTTP/1.1 JSON API over [`SupervisorApi`].

use std::convert::Infallible;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::StreamExt;
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;
use tower_http::services::ServeDir;

use super::{now_ns, ApiError, Event, SupervisorApi};
use crate::types::{SessionConfig, Violation, ViolationCode};

pub const HEARTBEAT_PERIOD: Duration = Duration::from_secs(2);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self {
            ApiError::Invalid(_) => StatusCode::BAD_REQUEST,
            ApiError::Transition(_) | ApiError::Partial(_) => StatusCode::CONFLICT,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = json!({ "error": self.code(), "message": self.to_string() });
        if let ApiError::Invalid(v) = &self {
            body["violations"] = json!(v);
        }
        (status, Json(body)).into_response()
    }
}

/// Runs a blocking supervisor call off the async workers.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(e.to_string()))?
}

pub fn router(api: SupervisorApi) -> Router {
    let ui = api.ui_dir();
    let r = Router::new()
        .route("/api/hubs", get(hubs))
        .route("/api/session", get(session).put(apply))
        .route("/api/session/start", post(start))
        .route("/api/session/stop", post(stop))
        .route("/api/metrics", get(metrics))
        .route("/api/recordings", get(recordings))
        .route("/api/recordings/:name", get(recording))
        .route("/api/events", get(events))
        .fallback(get(not_found).post(not_found).put(not_found));
    let r = match ui {
        Some(dir) => r.fallback_service(ServeDir::new(dir)),
        None => r,
    };
    r.with_state(api)
}

async fn not_found() -> ApiError {
    ApiError::NotFound("no such endpoint".into())
}

async fn hubs(State(api): State<SupervisorApi>) -> Result<Response, ApiError> {
    Ok(Json(blocking(move || Ok(api.hubs())).await?).into_response())
}

async fn session(State(api): State<SupervisorApi>) -> Result<Response, ApiError> {
    Ok(Json(blocking(move || Ok(api.session())).await?).into_response())
}

async fn apply(State(api): State<SupervisorApi>, body: Bytes) -> Result<Response, ApiError> {
    let cfg: SessionConfig = serde_json::from_slice(&body).map_err(|e| {
        ApiError::Invalid(vec![Violation::new(ViolationCode::BadJson, String::new(), e.to_string())])
    })?;
    Ok(Json(blocking(move || api.apply(cfg)).await?).into_response())
}

async fn start(State(api): State<SupervisorApi>) -> Result<Response, ApiError> {
    Ok(Json(blocking(move || api.start()).await?).into_response())
}

async fn stop(State(api): State<SupervisorApi>) -> Result<Response, ApiError> {
    Ok(Json(blocking(move || api.stop()).await?).into_response())
}

async fn metrics(State(api): State<SupervisorApi>) -> Result<Response, ApiError> {
    Ok(Json(blocking(move || Ok(api.metrics())).await?).into_response())
}

async fn recordings(State(api): State<SupervisorApi>) -> Result<Response, ApiError> {
    Ok(Json(blocking(move || Ok(api.recordings())).await?).into_response())
}

async fn recording(State(api): State<SupervisorApi>, Path(name): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(blocking(move || api.recording(&name)).await?).into_response())
}

fn line(ev: &Event) -> Bytes {
    let mut v = serde_json::to_vec(ev).unwrap_or_default();
    v.push(b'\n');
    Bytes::from(v)
}

async fn events(State(api): State<SupervisorApi>) -> Result<Response, ApiError> {
    // subscribe before the snapshot so nothing falls in between
    let rx = api.subscribe();
    let initial = blocking(move || Ok(api.snapshot_events())).await?;
    let heartbeat = tokio::time::interval_at(tokio::time::Instant::now() + HEARTBEAT_PERIOD, HEARTBEAT_PERIOD);
    let live = futures::stream::unfold((rx, heartbeat), |(mut rx, mut hb)| async move {
        let ev = tokio::select! {
            r = rx.recv() => match r {
                Ok(ev) => ev,
                Err(RecvError::Lagged(n)) => Event::Warning {
                    ts_ns: now_ns(),
                    message: format!("event stream lagged; {n} events skipped"),
                },
                Err(RecvError::Closed) => return None,
            },
            _ = hb.tick() => Event::Heartbeat { ts_ns: now_ns() },
        };
        Some((ev, (rx, hb)))
    });
    let body = futures::stream::iter(initial).chain(live).map(|ev| Ok::<_, Infallible>(line(&ev)));
    Ok(Response::builder()
        .header(header::CONTENT_TYPE, "application/x-ndjson")
        .header(header::CACHE_CONTROL, "no-cache")
        .body(Body::from_stream(body))
        .expect("static headers"))
}
