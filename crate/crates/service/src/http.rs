//! HTTP+SSE surface. Handlers only decode, call one engine operation on the
//! blocking pool, and encode; errors become `{error, message}` bodies.

use std::convert::Infallible;
use std::future::Future;
use std::pin::Pin;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio_stream::wrappers::BroadcastStream;
use tokio_stream::{Stream, StreamExt};

use crate::engine::{stored_events, At, Engine, EngineError, SessionEvent};

#[derive(Debug)]
pub struct ApiError(pub EngineError);

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        Self(e)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(ErrorBody { error: self.0.kind().to_string(), message: self.0.to_string() })).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T, F>(engine: Arc<Engine>, op: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Engine) -> Result<T, EngineError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || op(&engine))
        .await
        .map_err(|e| ApiError(EngineError::Internal(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

/// Decodes a JSON body; an empty body decodes as the type's default.
fn body<T: DeserializeOwned + Default>(bytes: &Bytes) -> ApiResult<T> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(bytes).map_err(|e| ApiError(EngineError::BadRequest(format!("request body: {e}"))))
}

fn required<T: DeserializeOwned>(bytes: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(bytes).map_err(|e| ApiError(EngineError::BadRequest(format!("request body: {e}"))))
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/students", post(create_student))
        .route("/students/{id}", get(get_student))
        .route("/students/{id}/history", post(append_history))
        .route("/students/{id}/profile:rebuild", post(rebuild_profile))
        .route("/students/{id}/sessions", post(start_session))
        .route("/students/{id}/forgetting", get(forgetting))
        .route("/sessions/{id}", get(get_session).post(session_action))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/events", get(session_events))
        .with_state(engine)
}

async fn create_student(State(engine): State<Arc<Engine>>, bytes: Bytes) -> ApiResult<impl IntoResponse> {
    let req = required(&bytes)?;
    let view = blocking(engine, move |e| e.create_student(req)).await?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_student(State(engine): State<Arc<Engine>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(engine, move |e| e.get_student(&id)).await?))
}

async fn append_history(State(engine): State<Arc<Engine>>, Path(id): Path<String>, bytes: Bytes) -> ApiResult<impl IntoResponse> {
    let req = required(&bytes)?;
    Ok(Json(blocking(engine, move |e| e.append_history(&id, req)).await?))
}

async fn rebuild_profile(State(engine): State<Arc<Engine>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(engine, move |e| e.rebuild_profile(&id)).await?))
}

async fn start_session(State(engine): State<Arc<Engine>>, Path(id): Path<String>, bytes: Bytes) -> ApiResult<impl IntoResponse> {
    let at: At = body(&bytes)?;
    let session = blocking(engine, move |e| e.start_session(&id, at)).await?;
    Ok((StatusCode::CREATED, Json(session)))
}

#[derive(Debug, Deserialize)]
pub struct ForgettingQuery {
    /// Comma-separated concept ids or labels.
    pub concepts: Option<String>,
    pub at: Option<i64>,
}

async fn forgetting(
    State(engine): State<Arc<Engine>>,
    Path(id): Path<String>,
    Query(q): Query<ForgettingQuery>,
) -> ApiResult<impl IntoResponse> {
    let concepts: Vec<String> =
        q.concepts.unwrap_or_default().split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect();
    Ok(Json(blocking(engine, move |e| e.forgetting(&id, &concepts, q.at)).await?))
}

async fn get_session(State(engine): State<Arc<Engine>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(engine, move |e| e.get_session(&id)).await?))
}

/// `POST /sessions/{id}:end`; the action suffix arrives inside the segment.
async fn session_action(State(engine): State<Arc<Engine>>, Path(segment): Path<String>, bytes: Bytes) -> ApiResult<Response> {
    let Some(id) = segment.strip_suffix(":end") else {
        return Err(ApiError(EngineError::NotFound(format!("no action on /sessions/{segment}"))));
    };
    let id = id.to_string();
    let at: At = body(&bytes)?;
    Ok(Json(blocking(engine, move |e| e.end_session(&id, at)).await?).into_response())
}

async fn post_message(State(engine): State<Arc<Engine>>, Path(id): Path<String>, bytes: Bytes) -> ApiResult<impl IntoResponse> {
    let req = required(&bytes)?;
    Ok(Json(blocking(engine, move |e| e.post_message(&id, req)).await?))
}

type EventStream = Pin<Box<dyn Stream<Item = Result<Event, Infallible>> + Send>>;

fn to_sse(event: &SessionEvent) -> Result<Event, Infallible> {
    let data = serde_json::to_string(event).expect("event serializes");
    Ok(Event::default().event(event.name()).id(event.index().to_string()).data(data))
}

/// Stored turns first, then live ones. `Last-Event-ID` resumes after the
/// given index; live events already covered by the stored part are dropped.
async fn session_events(
    State(engine): State<Arc<Engine>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let rx = engine.subscribe();
    let sid = id.clone();
    let stored = blocking(engine, move |e| e.get_session(&sid)).await?;
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<usize>().ok())
        .map_or(0, |i| i + 1);
    let initial: Vec<SessionEvent> = stored_events(&stored).into_iter().filter(|e| e.index() >= resume).collect();
    let backlog = tokio_stream::iter(initial.iter().map(to_sse).collect::<Vec<_>>());
    if stored.session.closed {
        let stream: EventStream = Box::pin(backlog);
        return Ok(Sse::new(stream).into_response());
    }
    let mut next = resume.max(stored_events(&stored).len());
    let live = BroadcastStream::new(rx)
        .filter_map(Result::ok)
        .take_while(|e| !matches!(e, SessionEvent::Shutdown))
        .filter_map(move |e| {
            if e.session_id() != Some(id.as_str()) || e.index() < next {
                return None;
            }
            next = e.index() + 1;
            Some(to_sse(&e))
        });
    let stream: EventStream = Box::pin(backlog.chain(live));
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()).into_response())
}

/// Serves until `shutdown` resolves, then finishes in-flight requests and
/// ends open event streams.
pub async fn serve_with(
    listener: tokio::net::TcpListener,
    engine: Arc<Engine>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let app = router(engine.clone());
    axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            shutdown.await;
            log::info!("shutting down");
            engine.shutdown_streams();
        })
        .await
}

pub async fn ctrl_c() {
    if let Err(e) = tokio::signal::ctrl_c().await {
        log::error!("cannot listen for ctrl-c: {e}");
        std::future::pending::<()>().await;
    }
}
