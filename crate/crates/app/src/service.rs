//! JSON-over-HTTP front end. State is loaded once and never mutated.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;

use crate::api::{explain_one, field_path, parse_body, predict_many, sensitivity_one, ApiError, SiteRequest, MAX_BATCH};
use crate::bundle::{ModelBundle, MotionLibrary};

/// Request bodies above this size are refused before parsing.
pub const BODY_LIMIT: usize = 64 << 20;

pub struct ServiceState {
    pub bundle: ModelBundle,
    pub motions: MotionLibrary,
}

type Shared = Arc<Option<ServiceState>>;

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.body)).into_response()
    }
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    model_version: Option<String>,
}

/// Routes over `state`; with `None` every model endpoint answers 503.
pub fn router(state: Option<ServiceState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/predict", post(predict))
        .route("/explain", post(explain))
        .route("/sensitivity", post(sensitivity))
        .route("/batch", post(batch))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(Arc::new(state))
}

pub async fn serve(state: ServiceState, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    axum::serve(listener, router(Some(state))).await
}

async fn health(State(s): State<Shared>) -> Response {
    match s.as_ref() {
        Some(st) => Json(Health { status: "ok", model_version: Some(st.bundle.version.clone()) }).into_response(),
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(Health { status: "unavailable", model_version: None })).into_response(),
    }
}

/// Runs `f` on the blocking pool against loaded state.
async fn run<T, F>(s: Shared, f: F) -> Result<Json<T>, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&ServiceState) -> Result<T, ApiError> + Send + 'static,
{
    if s.is_none() {
        return Err(ApiError::unavailable());
    }
    tokio::task::spawn_blocking(move || f(s.as_ref().as_ref().expect("checked above")))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map(Json)
}

async fn predict(State(s): State<Shared>, body: Bytes) -> Response {
    let req: SiteRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    run(s, move |st| {
        let mut out = predict_many(&st.bundle, &st.motions, std::slice::from_ref(&req))?;
        Ok(out.remove(0))
    })
    .await
    .into_response()
}

async fn explain(State(s): State<Shared>, body: Bytes) -> Response {
    let req: SiteRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    run(s, move |st| explain_one(&st.bundle, &st.motions, &req)).await.into_response()
}

async fn sensitivity(State(s): State<Shared>, body: Bytes) -> Response {
    let req: SiteRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    run(s, move |st| sensitivity_one(&st.bundle, &st.motions, &req)).await.into_response()
}

async fn batch(State(s): State<Shared>, body: Bytes) -> Response {
    let items: Vec<serde_json::Value> = match parse_body(&body) {
        Ok(v) => v,
        Err(e) => return e.into_response(),
    };
    if items.len() > MAX_BATCH {
        return ApiError::too_large(items.len()).into_response();
    }
    let mut reqs = Vec::with_capacity(items.len());
    for (i, item) in items.into_iter().enumerate() {
        match serde_path_to_error::deserialize::<_, SiteRequest>(item) {
            Ok(r) => reqs.push(r),
            Err(e) => {
                let path = e.path().to_string();
                let msg = e.into_inner().to_string();
                let field = field_path(&path, &msg).map_or(format!("[{i}]"), |f| format!("[{i}].{f}"));
                return ApiError::bad_request(Some(field), msg).into_response();
            }
        }
    }
    run(s, move |st| predict_many(&st.bundle, &st.motions, &reqs)).await.into_response()
}
