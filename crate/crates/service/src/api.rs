//! REST endpoints. Errors are JSON: `{"error": {"code", "message", "field"?}}`.

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Map, Value};
use trialmatch_core::corpus::Decision;
use trialmatch_core::evaluation::Depth;
use trialmatch_core::prompting::{SchemaConfig, Strategy};

use crate::backends::BackendSpec;
use crate::model::{DecisionRow, MatchRun, RunSettings, RunStatus, Verdict};
use crate::store::{CreateRunError, NewReview, ReviewError};
use crate::Service;

pub const DEFAULT_PAGE: usize = 100;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;
pub const MAX_PAGE: usize = 1000;
pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
pub const TOTAL_COUNT_HEADER: &str = "x-total-count";

type AppState = Arc<Service>;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
            field: None,
        }
    }

    fn field(mut self, field: &str) -> Self {
        self.field = Some(field.into());
        self
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        log::error!("internal error: {e}");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", e.to_string())
    }

    fn unknown_run(id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "UNKNOWN_RUN", format!("no run {id:?}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut error = json!({"code": self.code, "message": self.message});
        if let Some(f) = self.field {
            error["field"] = f.into();
        }
        (self.status, Json(json!({ "error": error }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/runs", get(list_runs).post(create_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/decisions", get(get_decisions))
        .route("/runs/{id}/review-summary", get(review_summary))
        .route("/runs/{id}/review-sample", get(review_sample))
        .route("/reviews", get(list_reviews).post(submit_review))
        .route("/patients", get(list_patients))
        .route("/patients/{id}", get(get_patient))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "NOT_FOUND", "no such endpoint") })
        .with_state(service)
}

/// Store writes fsync, and remote backends hold blocking HTTP clients, so
/// both stay off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

fn json_object(body: &[u8], code: &'static str) -> ApiResult<Map<String, Value>> {
    match serde_json::from_slice::<Value>(body) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(ApiError::new(StatusCode::BAD_REQUEST, code, "request body must be a JSON object")),
        Err(e) => Err(ApiError::new(StatusCode::BAD_REQUEST, code, format!("malformed JSON: {e}"))),
    }
}

fn reject_unknown(map: &Map<String, Value>, allowed: &[&str], code: &'static str) -> ApiResult<()> {
    match map.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(ApiError::new(StatusCode::BAD_REQUEST, code, format!("unknown field {k:?}")).field(k)),
        None => Ok(()),
    }
}

fn optional_string(map: &Map<String, Value>, key: &str, code: &'static str) -> ApiResult<Option<String>> {
    match map.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(Some(s.clone())),
        Some(_) => Err(ApiError::new(StatusCode::BAD_REQUEST, code, format!("{key} must be a non-empty string")).field(key)),
    }
}

fn required_string(map: &Map<String, Value>, key: &str, code: &'static str) -> ApiResult<String> {
    optional_string(map, key, code)?
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, code, format!("{key} is required")).field(key))
}

struct RunRequest {
    strategy: Strategy,
    k: Option<usize>,
    backend: BackendSpec,
    schema: SchemaConfig,
    max_in_flight: usize,
    idempotency_key: Option<String>,
}

const INVALID_CONFIG: &str = "INVALID_CONFIG";

fn parse_run_request(body: &[u8]) -> ApiResult<RunRequest> {
    let bad = |field: &str, message: String| ApiError::new(StatusCode::BAD_REQUEST, INVALID_CONFIG, message).field(field);
    let map = json_object(body, INVALID_CONFIG)?;
    reject_unknown(
        &map,
        &["strategy", "k", "backend", "model", "schema", "max_in_flight", "idempotency_key"],
        INVALID_CONFIG,
    )?;
    let strategy = required_string(&map, "strategy", INVALID_CONFIG)?;
    let strategy = Strategy::from_str(&strategy).map_err(|e| bad("strategy", e.to_string()))?;
    let k = match map.get("k") {
        None | Some(Value::Null) => None,
        Some(Value::Number(n)) => match n.as_u64() {
            Some(k) if k > 0 => Some(k as usize),
            _ => return Err(bad("k", format!("k must be a positive integer or \"full\", got {n}"))),
        },
        Some(Value::String(s)) => Depth::from_str(s).map_err(|e| bad("k", e))?.k(),
        Some(other) => return Err(bad("k", format!("k must be a positive integer or \"full\", got {other}"))),
    };
    let backend = optional_string(&map, "backend", INVALID_CONFIG)?.unwrap_or_else(|| "oracle".into());
    let model = optional_string(&map, "model", INVALID_CONFIG)?;
    let schema = match map.get("schema") {
        None | Some(Value::Null) => SchemaConfig::default(),
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| bad("schema", format!("invalid schema: {e}")))?,
    };
    let max_in_flight = match map.get("max_in_flight") {
        None | Some(Value::Null) => DEFAULT_MAX_IN_FLIGHT,
        Some(v) => match v.as_u64() {
            Some(n) if (1..=64).contains(&n) => n as usize,
            _ => return Err(bad("max_in_flight", format!("max_in_flight must be an integer in 1..=64, got {v}"))),
        },
    };
    Ok(RunRequest {
        strategy,
        k,
        backend: BackendSpec { backend, model },
        schema,
        max_in_flight,
        idempotency_key: optional_string(&map, "idempotency_key", INVALID_CONFIG)?,
    })
}

async fn create_run(State(service): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    if service.shared.config.corpus.is_none() {
        return Err(ApiError::new(StatusCode::CONFLICT, "CORPUS_NOT_LOADED", "the service was started without a corpus"));
    }
    let request = parse_run_request(&body)?;
    let header_key = match headers.get(IDEMPOTENCY_HEADER) {
        Some(v) => Some(
            v.to_str()
                .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, INVALID_CONFIG, "idempotency key must be ASCII"))?
                .to_string(),
        ),
        None => None,
    };
    let key = match (header_key, request.idempotency_key.clone()) {
        (Some(h), Some(b)) if h != b => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                INVALID_CONFIG,
                "Idempotency-Key header and idempotency_key field disagree",
            )
            .field("idempotency_key"))
        }
        (h, b) => h.or(b),
    };

    let svc = Arc::clone(&service);
    let (run, created) = blocking(move || {
        let shared = &svc.shared;
        let backend = shared
            .config
            .backends
            .create(&request.backend)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, INVALID_CONFIG, e).field("backend"))?;
        let settings = RunSettings {
            strategy: request.strategy,
            k: request.k,
            backend: request.backend.backend.clone(),
            backend_id: backend.backend_id().to_string(),
            model: request.backend.model.clone(),
            schema: request.schema,
            max_in_flight: request.max_in_flight,
            criteria_version: shared.criteria_version.clone(),
        };
        drop(backend);
        shared.store.create_run(key, settings).map_err(|e| match e {
            CreateRunError::KeyConflict { .. } => ApiError::new(StatusCode::CONFLICT, "IDEMPOTENCY_CONFLICT", e.to_string()),
            CreateRunError::Store(e) => ApiError::internal(e),
        })
    })
    .await?;
    if created {
        service.enqueue(run.run_id.clone());
    }
    let location = HeaderValue::from_str(&format!("/runs/{}", run.run_id)).map_err(ApiError::internal)?;
    Ok((StatusCode::ACCEPTED, [(header::LOCATION, location)], Json(run)).into_response())
}

async fn list_runs(State(service): State<AppState>) -> Json<Vec<MatchRun>> {
    Json(service.store().runs())
}

async fn get_run(State(service): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<MatchRun>> {
    service.store().run(&id).map(Json).ok_or_else(|| ApiError::unknown_run(&id))
}

fn done_rows(service: &Service, id: &str) -> ApiResult<Arc<Vec<DecisionRow>>> {
    let run = service.store().run(id).ok_or_else(|| ApiError::unknown_run(id))?;
    if run.status != RunStatus::Done {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "RUN_NOT_DONE",
            format!("run {id} is {:?}", run.status).to_uppercase(),
        ));
    }
    service.store().decision_rows(id).ok_or_else(|| ApiError::internal(format!("run {id} has no decision rows")))
}

fn query_usize(query: &HashMap<String, String>, key: &str, default: usize, range: std::ops::RangeInclusive<usize>) -> ApiResult<usize> {
    match query.get(key) {
        None => Ok(default),
        Some(v) => match v.parse::<usize>() {
            Ok(n) if range.contains(&n) => Ok(n),
            _ => Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "INVALID_QUERY",
                format!("{key} must be an integer in {}..={}, got {v:?}", range.start(), range.end()),
            )
            .field(key)),
        },
    }
}

async fn get_decisions(
    State(service): State<AppState>,
    Path(id): Path<String>,
    Query(query): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let rows = done_rows(&service, &id)?;
    let decision = match query.get("decision") {
        Some(d) => Some(
            Decision::from_str(d)
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "INVALID_QUERY", e.to_string()).field("decision"))?,
        ),
        None => None,
    };
    let offset = query_usize(&query, "offset", 0, 0..=usize::MAX)?;
    let limit = query_usize(&query, "limit", DEFAULT_PAGE, 1..=MAX_PAGE)?;
    let matching: Vec<&DecisionRow> = rows
        .iter()
        .filter(|r| query.get("patient_id").is_none_or(|p| *p == r.patient_id))
        .filter(|r| query.get("criterion_id").is_none_or(|c| *c == r.criterion_id))
        .filter(|r| decision.is_none_or(|d| d == r.decision))
        .collect();
    let total = matching.len();
    let page: Vec<&DecisionRow> = matching.into_iter().skip(offset).take(limit).collect();
    Ok(([(TOTAL_COUNT_HEADER, total.to_string())], Json(page)).into_response())
}

async fn review_summary(State(service): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    if service.store().run(&id).is_none() {
        return Err(ApiError::unknown_run(&id));
    }
    Ok(Json(service.store().review_summary(&id)).into_response())
}

#[derive(Serialize)]
struct SampleCell {
    criterion_id: String,
    correct: Vec<DecisionRow>,
    incorrect: Vec<DecisionRow>,
}

/// Up to `per_cell` correct and `per_cell` incorrect decisions per criterion,
/// judged against the corpus labels, drawn with a seeded shuffle.
async fn review_sample(
    State(service): State<AppState>,
    Path(id): Path<String>,
    Query(query): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let rows = done_rows(&service, &id)?;
    let Some(labels) = service.shared.labels.as_ref() else {
        return Err(ApiError::new(StatusCode::CONFLICT, "LABELS_NOT_LOADED", "the loaded corpus has no labels"));
    };
    let per_cell = query_usize(&query, "per_cell", 20, 1..=MAX_PAGE)?;
    let seed = query_usize(&query, "seed", 0, 0..=usize::MAX)? as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = Vec::new();
    for criterion in &service.shared.config.criteria {
        let (mut correct, mut incorrect): (Vec<&DecisionRow>, Vec<&DecisionRow>) = (Vec::new(), Vec::new());
        for row in rows.iter().filter(|r| r.criterion_id == criterion.criterion_id) {
            match labels.get(&row.patient_id, &row.criterion_id) {
                Some(label) if label == row.decision => correct.push(row),
                Some(_) => incorrect.push(row),
                None => {}
            }
        }
        let mut draw = |pool: &mut Vec<&DecisionRow>| -> Vec<DecisionRow> {
            let (chosen, _) = pool.partial_shuffle(&mut rng, per_cell);
            let mut chosen: Vec<DecisionRow> = chosen.iter().map(|r| (*r).clone()).collect();
            chosen.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
            chosen
        };
        cells.push(SampleCell {
            criterion_id: criterion.criterion_id.clone(),
            correct: draw(&mut correct),
            incorrect: draw(&mut incorrect),
        });
    }
    Ok(Json(json!({"run_id": id, "per_cell": per_cell, "seed": seed, "cells": cells})).into_response())
}

const INVALID_REVIEW: &str = "INVALID_REVIEW";

async fn submit_review(State(service): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let map = json_object(&body, INVALID_REVIEW)?;
    reject_unknown(
        &map,
        &["run_id", "patient_id", "criterion_id", "verdict", "reviewer_id", "note"],
        INVALID_REVIEW,
    )?;
    let verdict = match map.get("verdict") {
        Some(Value::String(s)) => Verdict::from_str(s),
        Some(other) => Err(format!("verdict must be a string, got {other}")),
        None => Err("verdict is required".into()),
    }
    .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "INVALID_VERDICT", e).field("verdict"))?;
    let review = NewReview {
        run_id: required_string(&map, "run_id", INVALID_REVIEW)?,
        patient_id: required_string(&map, "patient_id", INVALID_REVIEW)?,
        criterion_id: required_string(&map, "criterion_id", INVALID_REVIEW)?,
        verdict,
        reviewer_id: required_string(&map, "reviewer_id", INVALID_REVIEW)?,
        note: match map.get("note") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => {
                return Err(ApiError::new(StatusCode::BAD_REQUEST, INVALID_REVIEW, "note must be a string").field("note"))
            }
        },
    };
    let svc = Arc::clone(&service);
    let stored = blocking(move || {
        svc.store().add_review(review).map_err(|e| match e {
            ReviewError::UnknownDecision { .. } => ApiError::new(StatusCode::NOT_FOUND, "UNKNOWN_DECISION", e.to_string()),
            ReviewError::Store(e) => ApiError::internal(e),
        })
    })
    .await?;
    Ok((StatusCode::CREATED, Json(stored)).into_response())
}

/// Review history, oldest first. `latest=true` keeps only each reviewer's
/// current verdict per decision.
async fn list_reviews(State(service): State<AppState>, Query(query): Query<HashMap<String, String>>) -> ApiResult<Response> {
    let latest_only = match query.get("latest").map(String::as_str) {
        None | Some("false") => false,
        Some("true") => true,
        Some(other) => {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, "INVALID_QUERY", format!("latest must be true or false, got {other:?}"))
                .field("latest"))
        }
    };
    let filter = |key: &str, value: &str| query.get(key).is_none_or(|q| q == value);
    let mut reviews: Vec<_> = service
        .store()
        .reviews()
        .into_iter()
        .filter(|r| {
            filter("run_id", &r.run_id)
                && filter("patient_id", &r.patient_id)
                && filter("criterion_id", &r.criterion_id)
                && filter("reviewer_id", &r.reviewer_id)
        })
        .collect();
    if latest_only {
        let mut seen = std::collections::HashSet::new();
        reviews.reverse();
        reviews.retain(|r| {
            seen.insert((r.run_id.clone(), r.reviewer_id.clone(), r.patient_id.clone(), r.criterion_id.clone()))
        });
        reviews.reverse();
    }
    Ok(([(TOTAL_COUNT_HEADER, reviews.len().to_string())], Json(reviews)).into_response())
}

fn corpus(service: &Service) -> ApiResult<&trialmatch_core::corpus::Corpus> {
    service
        .shared
        .config
        .corpus
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "CORPUS_NOT_LOADED", "the service was started without a corpus"))
}

async fn list_patients(State(service): State<AppState>) -> ApiResult<Response> {
    let patients: Vec<Value> = corpus(&service)?
        .patients()
        .iter()
        .map(|p| {
            json!({
                "patient_id": p.patient_id,
                "note_count": p.notes.len(),
                "first_note_date": p.notes.first().map(|n| n.date),
                "last_note_date": p.notes.last().map(|n| n.date),
            })
        })
        .collect();
    Ok(Json(patients).into_response())
}

async fn get_patient(State(service): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let patient = corpus(&service)?
        .patient(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "UNKNOWN_PATIENT", format!("no patient {id:?}")))?;
    Ok(Json(patient).into_response())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_request_validation() {
        let ok = parse_run_request(br#"{"strategy": "ican", "k": 3}"#).unwrap();
        assert_eq!((ok.strategy, ok.k, ok.backend.backend.as_str()), (Strategy::Ican, Some(3), "oracle"));
        assert_eq!(parse_run_request(br#"{"strategy": "ACAN", "k": "full"}"#).unwrap().k, None);

        let field = |body: &str| parse_run_request(body.as_bytes()).err().unwrap().field.unwrap();
        assert_eq!(field(r#"{"strategy": "xyz"}"#), "strategy");
        assert_eq!(field(r#"{}"#), "strategy");
        assert_eq!(field(r#"{"strategy": "ICAN", "k": 0}"#), "k");
        assert_eq!(field(r#"{"strategy": "ICAN", "k": -2}"#), "k");
        assert_eq!(field(r#"{"strategy": "ICAN", "bogus": 1}"#), "bogus");
        assert_eq!(field(r#"{"strategy": "ICAN", "schema": {"include_rationale": "yes"}}"#), "schema");
        assert_eq!(field(r#"{"strategy": "ICAN", "max_in_flight": 0}"#), "max_in_flight");
        assert!(parse_run_request(b"not json").is_err());
    }
}
