//! HTTP + JSON front end of the online classification service.

use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};
use specklenn::dataset::HitLabel;
use specklenn::error::Error;
use specklenn::service::{FrameSummary, LabelAck, Service, ServiceResult, ServiceStatus, SupportView};
use tokio::sync::broadcast;

use crate::preview::preview_png;

#[derive(Clone)]
pub struct AppState {
    pub service: Arc<Service>,
    results: broadcast::Sender<ServiceResult>,
}

pub struct ApiError(StatusCode, String);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::UnknownFrame(_) => StatusCode::NOT_FOUND,
            Error::NotReady(_) => StatusCode::CONFLICT,
            Error::Invalid(_) | Error::Config { .. } | Error::Shape { .. } | Error::DegenerateRow { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

impl From<anyhow::Error> for ApiError {
    fn from(e: anyhow::Error) -> Self {
        ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Runs CPU-bound service work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> specklenn::error::Result<T> + Send + 'static) -> Result<T, ApiError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    }
}

pub fn router(service: Arc<Service>) -> Router {
    let (results, _) = broadcast::channel(1024);
    let tx = results.clone();
    service.subscribe(move |r| {
        let _ = tx.send(r.clone());
    });
    Router::new()
        .route("/api/frames", get(list_frames).post(ingest))
        .route("/api/frames/{id}", get(get_frame))
        .route("/api/frames/{id}/image", get(frame_image))
        .route("/api/labels", post(label))
        .route("/api/supports", get(supports))
        .route("/api/supports/pin", post(pin))
        .route("/api/classify", post(classify))
        .route("/api/stream", get(stream))
        .route("/api/retrain", post(retrain))
        .route("/api/status", get(status))
        .with_state(AppState { service, results })
}

#[derive(Deserialize)]
struct FramesQuery {
    state: Option<String>,
}

async fn list_frames(State(st): State<AppState>, Query(q): Query<FramesQuery>) -> ApiResult<Vec<FrameSummary>> {
    Ok(Json(st.service.frames(q.state.as_deref())?))
}

async fn get_frame(State(st): State<AppState>, Path(id): Path<u64>) -> ApiResult<FrameSummary> {
    Ok(Json(FrameSummary::from(&st.service.frame(id)?)))
}

async fn frame_image(State(st): State<AppState>, Path(id): Path<u64>) -> Result<Response, ApiError> {
    let rec = st.service.frame(id)?;
    let side = (rec.image.len() as f64).sqrt() as usize;
    let png = preview_png(&rec.image, &rec.mask, side)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Deserialize)]
pub struct IngestRequest {
    pub image: Vec<f32>,
    pub mask: Option<Vec<bool>>,
}

#[derive(Serialize)]
pub struct IngestResponse {
    pub frame_id: u64,
    /// Present once supports exist; frames are classified on arrival.
    pub result: Option<ServiceResult>,
}

async fn ingest(State(st): State<AppState>, Json(req): Json<IngestRequest>) -> ApiResult<IngestResponse> {
    let svc = Arc::clone(&st.service);
    let out = blocking(move || {
        let frame_id = svc.ingest(req.image, req.mask)?;
        let result = match svc.classify(frame_id) {
            Ok(r) => Some(r),
            Err(Error::NotReady(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(IngestResponse { frame_id, result })
    })
    .await?;
    Ok(Json(out))
}

#[derive(Deserialize)]
pub struct LabelRequest {
    pub frame_id: u64,
    pub label: HitLabel,
}

async fn label(State(st): State<AppState>, Json(req): Json<LabelRequest>) -> ApiResult<LabelAck> {
    let svc = Arc::clone(&st.service);
    let ack = blocking(move || svc.label(req.frame_id, req.label)).await?;
    if ack.retrain_triggered {
        st.service.spawn_retrain();
    }
    Ok(Json(ack))
}

async fn supports(State(st): State<AppState>) -> ApiResult<SupportView> {
    Ok(Json(st.service.supports()))
}

#[derive(Deserialize)]
pub struct PinRequest {
    pub label: HitLabel,
    pub frame_ids: Vec<u64>,
}

async fn pin(State(st): State<AppState>, Json(req): Json<PinRequest>) -> ApiResult<SupportView> {
    let svc = Arc::clone(&st.service);
    Ok(Json(blocking(move || svc.pin(req.label, req.frame_ids)).await?))
}

#[derive(Deserialize)]
pub struct ClassifyRequest {
    pub frame_id: u64,
}

async fn classify(State(st): State<AppState>, Json(req): Json<ClassifyRequest>) -> ApiResult<ServiceResult> {
    let svc = Arc::clone(&st.service);
    Ok(Json(blocking(move || svc.classify(req.frame_id)).await?))
}

/// Server-sent `classification` events, one per result.
async fn stream(State(st): State<AppState>) -> Sse<impl Stream<Item = Result<SseEvent, Infallible>>> {
    let rx = st.results.subscribe();
    let events = futures::stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(r) => {
                    let ev = SseEvent::default().event("classification").json_data(&r).expect("result serializes");
                    return Some((Ok(ev), rx));
                }
                Err(broadcast::error::RecvError::Lagged(n)) => tracing::warn!(skipped = n, "stream subscriber lagging"),
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    Sse::new(events).keep_alive(KeepAlive::default())
}

#[derive(Serialize)]
pub struct RetrainResponse {
    /// False when a fine-tune was already running; another run is queued.
    pub started: bool,
}

async fn retrain(State(st): State<AppState>) -> (StatusCode, Json<RetrainResponse>) {
    let started = st.service.spawn_retrain();
    (StatusCode::ACCEPTED, Json(RetrainResponse { started }))
}

async fn status(State(st): State<AppState>) -> ApiResult<ServiceStatus> {
    Ok(Json(st.service.status()))
}

/// Serves until Ctrl-C.
pub async fn serve(service: Arc<Service>, bind: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
