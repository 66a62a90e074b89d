//! HTTP surface over [`Engine`]. Every handler runs engine work on the
//! blocking pool; query handling is bounded by the configured request
//! timeout and reports overruns in-band.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use sketchql::adaptation::{AdaptationError, Feedback, FeedbackSource, Verdict};
use sketchql::pipeline::{Engine, PipelineError, QueryResponse};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub nl: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackRequest {
    pub request_id: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub corrected_sql: Option<String>,
    #[serde(default)]
    pub note: Option<String>,
}

impl From<FeedbackRequest> for Feedback {
    fn from(r: FeedbackRequest) -> Self {
        Feedback {
            request_id: r.request_id,
            verdict: r.verdict,
            corrected_sql: r.corrected_sql,
            note: r.note,
            source: FeedbackSource::User,
        }
    }
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Adaptation(AdaptationError::UnknownRequest(_)) => StatusCode::NOT_FOUND,
            PipelineError::Adaptation(AdaptationError::InvalidCorrection(_)) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

async fn query(State(engine): State<Arc<Engine>>, Json(req): Json<QueryRequest>) -> Result<Json<QueryResponse>, ApiError> {
    if req.nl.trim().is_empty() {
        return Err(ApiError(StatusCode::BAD_REQUEST, "nl must not be empty".into()));
    }
    let budget = Duration::from_secs(engine.config().service.request_timeout_secs);
    let started = Instant::now();
    let worker = Arc::clone(&engine);
    let nl = req.nl.clone();
    let task = tokio::task::spawn_blocking(move || worker.run_query(&nl));
    match tokio::time::timeout(budget, task).await {
        Ok(Ok(response)) => Ok(Json(response)),
        Ok(Err(e)) => Err(ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
        Err(_) => {
            log::warn!("query exceeded {budget:?}");
            Ok(Json(QueryResponse::timed_out(&req.nl, engine.summary().version, started.elapsed())))
        }
    }
}

async fn feedback(State(engine): State<Arc<Engine>>, Json(req): Json<FeedbackRequest>) -> Result<Response, ApiError> {
    let fb = Feedback::from(req);
    let outcome = blocking(move || engine.submit_feedback(&fb)).await??;
    Ok(Json(outcome).into_response())
}

async fn request(State(engine): State<Arc<Engine>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let record = blocking(move || engine.request(&id)).await??;
    Ok(Json(record).into_response())
}

async fn summary(State(engine): State<Arc<Engine>>) -> Response {
    Json(engine.summary()).into_response()
}

async fn health(State(engine): State<Arc<Engine>>) -> Response {
    Json(json!({ "status": "ok", "knowledge_version": engine.summary().version })).into_response()
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/v1/query", post(query))
        .route("/v1/feedback", post(feedback))
        .route("/v1/requests/{id}", get(request))
        .route("/v1/knowledge/summary", get(summary))
        .route("/healthz", get(health))
        .with_state(engine)
}

/// Serve on `listener` until `shutdown` resolves.
pub async fn serve(
    engine: Arc<Engine>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(engine)).with_graceful_shutdown(shutdown).await
}

pub async fn bind(port: u16) -> std::io::Result<(tokio::net::TcpListener, SocketAddr)> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    let addr = listener.local_addr()?;
    Ok((listener, addr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use sketchql::model::{LanguageModel, ModelError, ModelSession, Role};
    use sketchql::pipeline::{PipelineConfig, QueryStatus};
    use sketchql::sample_data::sports_database;

    struct Slow;
    struct SlowSession;

    impl LanguageModel for Slow {
        fn session(&self) -> Box<dyn ModelSession> {
            Box::new(SlowSession)
        }
    }

    impl ModelSession for SlowSession {
        fn complete(&mut self, _prompt: &str, _role: Role) -> Result<String, ModelError> {
            std::thread::sleep(Duration::from_millis(1500));
            Ok("SELECT 1".into())
        }
    }

    #[tokio::test]
    async fn overrun_is_reported_in_band() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = PipelineConfig {
            knowledge_dir: dir.path().join("kb"),
            ..Default::default()
        };
        config.service.request_timeout_secs = 1;
        let engine = Arc::new(Engine::with_parts(config, Arc::new(Slow), sports_database().unwrap()).unwrap());
        let req = QueryRequest { nl: "total revenue".into() };
        let Json(resp) = query(State(engine), Json(req)).await.ok().unwrap();
        assert_eq!(resp.status, QueryStatus::Timeout);
        assert!(resp.sql.is_none());
        assert!(resp.error.unwrap().starts_with("request exceeded"));
    }
}
