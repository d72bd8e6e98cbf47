//! HTTP routes. Requests with an `Idempotency-Key` header are answered from a
//! cache when repeated with the same body.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use crate::engine::{ClarificationReply, CreateQuery, QueryService, Reservation, RollbackRequest, StepRequest};
use crate::error::{ApiError, ErrorCode};

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

pub fn router(service: Arc<QueryService>) -> Router {
    Router::new()
        .route("/v1/corpora", get(list_corpora))
        .route("/v1/queries", post(create_query))
        .route("/v1/queries/{id}", get(get_query))
        .route("/v1/queries/{id}/clarifications/{cid}", post(clarify))
        .route("/v1/queries/{id}/filter/step", post(filter_step))
        .route("/v1/queries/{id}/rollback", post(rollback))
        .route("/v1/queries/{id}/aggregate", post(aggregate))
        .route("/v1/queries/{id}/result", get(result))
        .fallback(not_found)
        .with_state(service)
}

fn error_response(e: &ApiError) -> Response {
    let status = StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, Json(json!({ "error": e }))).into_response()
}

fn json_response(status: u16, body: Value) -> Response {
    (StatusCode::from_u16(status).unwrap_or(StatusCode::OK), Json(body)).into_response()
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Err(ApiError::new(ErrorCode::InvalidRequest, "request body is required"));
    }
    serde_json::from_slice(body)
        .map_err(|e| ApiError::new(ErrorCode::InvalidRequest, format!("invalid JSON body: {e}")))
}

/// An empty body means the default request.
fn parse_optional_body<T: DeserializeOwned + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    parse_body(body)
}

type Handler = Box<dyn FnOnce(&QueryService) -> Result<(u16, Value), ApiError> + Send>;

async fn dispatch(
    service: Arc<QueryService>,
    method: Method,
    path: String,
    headers: &HeaderMap,
    body: &Bytes,
    f: Handler,
) -> Response {
    let key = headers.get(IDEMPOTENCY_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string);
    let route = format!("{method} {path}");
    let fingerprint = String::from_utf8_lossy(body).into_owned();
    if let Some(key) = &key {
        match service.idempotency.reserve(&route, key, &fingerprint) {
            Ok(Reservation::Replay { status, body }) => return json_response(status, body),
            Ok(Reservation::Fresh) => {}
            Err(e) => return error_response(&e),
        }
    }
    let svc = service.clone();
    let outcome = tokio::task::spawn_blocking(move || f(&svc))
        .await
        .unwrap_or_else(|e| Err(ApiError::new(ErrorCode::Internal, format!("handler panicked: {e}"))));
    match outcome {
        Ok((status, body)) => {
            if let Some(key) = &key {
                service.idempotency.complete(&route, key, &fingerprint, status, &body);
            }
            json_response(status, body)
        }
        Err(e) => {
            if let Some(key) = &key {
                service.idempotency.release(&route, key);
            }
            error_response(&e)
        }
    }
}

fn to_value<T: serde::Serialize>(x: T) -> Result<Value, ApiError> {
    serde_json::to_value(x).map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))
}

async fn list_corpora(State(svc): State<Arc<QueryService>>) -> Response {
    json_response(200, json!({ "corpora": svc.corpora() }))
}

async fn create_query(State(svc): State<Arc<QueryService>>, headers: HeaderMap, body: Bytes) -> Response {
    let req: CreateQuery = match parse_body(&body) {
        Ok(r) => r,
        Err(e) => return error_response(&e),
    };
    let f: Handler = Box::new(move |s| Ok((201, to_value(s.create_query(req)?)?)));
    dispatch(svc, Method::POST, "/v1/queries".into(), &headers, &body, f).await
}

async fn get_query(State(svc): State<Arc<QueryService>>, Path(id): Path<String>) -> Response {
    match svc.get(&id).and_then(to_value) {
        Ok(v) => json_response(200, v),
        Err(e) => error_response(&e),
    }
}

async fn clarify(
    State(svc): State<Arc<QueryService>>,
    Path((id, cid)): Path<(String, String)>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let req: ClarificationReply = match parse_body(&body) {
        Ok(r) => r,
        Err(e) => return error_response(&e),
    };
    let path = format!("/v1/queries/{id}/clarifications/{cid}");
    let f: Handler = Box::new(move |s| Ok((200, to_value(s.clarify(&id, &cid, req)?)?)));
    dispatch(svc, Method::POST, path, &headers, &body, f).await
}

async fn filter_step(
    State(svc): State<Arc<QueryService>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let req: StepRequest = match parse_optional_body(&body) {
        Ok(r) => r,
        Err(e) => return error_response(&e),
    };
    let path = format!("/v1/queries/{id}/filter/step");
    let f: Handler = Box::new(move |s| Ok((200, to_value(s.filter_step(&id, req)?)?)));
    dispatch(svc, Method::POST, path, &headers, &body, f).await
}

async fn rollback(
    State(svc): State<Arc<QueryService>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let req: RollbackRequest = match parse_optional_body(&body) {
        Ok(r) => r,
        Err(e) => return error_response(&e),
    };
    let path = format!("/v1/queries/{id}/rollback");
    let f: Handler = Box::new(move |s| Ok((200, to_value(s.rollback(&id, req)?)?)));
    dispatch(svc, Method::POST, path, &headers, &body, f).await
}

async fn aggregate(
    State(svc): State<Arc<QueryService>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let path = format!("/v1/queries/{id}/aggregate");
    let f: Handler = Box::new(move |s| Ok((200, to_value(s.aggregate(&id)?)?)));
    dispatch(svc, Method::POST, path, &headers, &body, f).await
}

async fn result(State(svc): State<Arc<QueryService>>, Path(id): Path<String>) -> Response {
    match svc.result(&id).and_then(to_value) {
        Ok(v) => json_response(200, v),
        Err(e) => error_response(&e),
    }
}

async fn not_found(method: Method, uri: axum::http::Uri) -> Response {
    error_response(&ApiError::new(ErrorCode::UnknownRoute, format!("no route for {method} {uri}")))
}
