use std::collections::HashSet;
use std::io::Cursor;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::Json;
use image::ImageFormat;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use wadeable::dataset::{agreement_histogram, AgreementStats, AnnotationRecord, DatasetError};
use wadeable::extract::extract_instance;
use wadeable::prompt::TASK_STATEMENT;
use wadeable::rating::{TraversabilityRating, SCHEME_LINE};

use crate::AppState;

type AppRef = State<Arc<AppState>>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub rule: &'static str,
    pub detail: String,
}

impl ApiError {
    fn new(status: StatusCode, rule: &'static str, detail: impl Into<String>) -> Self {
        ApiError {
            status,
            rule,
            detail: detail.into(),
        }
    }

    fn invalid(rule: &'static str, detail: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, rule, detail)
    }

    fn internal(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_failure", detail)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(json!({"error": {"rule": self.rule, "detail": self.detail}}));
        (self.status, body).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub instance_id: String,
    pub robot_id: String,
    pub image_id: String,
    pub image_url: String,
    pub crop_url: String,
    pub instruction: String,
    pub scheme: String,
    pub already_rated: bool,
    /// Zero-based position in this annotator's task order.
    pub position: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextTask {
    pub done: bool,
    pub rated: usize,
    pub total: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<AnnotationTask>,
}

#[derive(Debug, Deserialize)]
pub struct TaskQuery {
    annotator: Option<String>,
    robot: Option<String>,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn task_list(state: &AppState, q: &TaskQuery) -> Result<Vec<AnnotationTask>, ApiError> {
    let annotator = q.annotator.as_deref().unwrap_or("").trim();
    if annotator.is_empty() {
        return Err(ApiError::invalid("empty_annotator", "annotator must be non-empty"));
    }
    let robot = q.robot.as_deref().unwrap_or("");
    if state.manifest.robot(robot).is_none() {
        return Err(ApiError::invalid("unknown_robot", format!("no robot `{robot}`")));
    }
    let rated: HashSet<String> = state
        .store
        .snapshot()
        .into_iter()
        .filter(|r| r.annotator_id == annotator && r.robot_id == robot)
        .map(|r| r.instance_id)
        .collect();
    let mut order: Vec<usize> = (0..state.manifest.instances.len()).collect();
    if let Some(seed) = state.config.shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ fnv1a(annotator)));
    }
    let total = order.len();
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(position, i)| {
            let inst = &state.manifest.instances[i];
            AnnotationTask {
                instance_id: inst.id.clone(),
                robot_id: robot.to_string(),
                image_id: inst.image_id.clone(),
                image_url: format!("/media/images/{}.png", inst.image_id),
                crop_url: format!("/media/crops/{}.png", inst.id),
                instruction: TASK_STATEMENT.to_string(),
                scheme: SCHEME_LINE.to_string(),
                already_rated: rated.contains(&inst.id),
                position,
                total,
            }
        })
        .collect())
}

pub async fn tasks(State(state): AppRef, Query(q): Query<TaskQuery>) -> Result<Json<Vec<AnnotationTask>>, ApiError> {
    task_list(&state, &q).map(Json)
}

pub async fn next_task(State(state): AppRef, Query(q): Query<TaskQuery>) -> Result<Json<NextTask>, ApiError> {
    let list = task_list(&state, &q)?;
    let total = list.len();
    let rated = list.iter().filter(|t| t.already_rated).count();
    let task = list.into_iter().find(|t| !t.already_rated);
    Ok(Json(NextTask {
        done: task.is_none(),
        rated,
        total,
        task,
    }))
}

/// Body of `POST /api/annotations`. The rating stays raw JSON so range and
/// type problems get their own rule names.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub annotator_id: String,
    pub instance_id: String,
    pub robot_id: String,
    pub rating: serde_json::Value,
}

fn validate(state: &AppState, req: &SubmitRequest) -> Result<TraversabilityRating, ApiError> {
    if req.annotator_id.trim().is_empty() {
        return Err(ApiError::invalid("empty_annotator", "annotator_id must be non-empty"));
    }
    if state.manifest.instance(&req.instance_id).is_none() {
        return Err(ApiError::invalid(
            "dangling_reference",
            format!("unknown instance `{}`", req.instance_id),
        ));
    }
    if state.manifest.robot(&req.robot_id).is_none() {
        return Err(ApiError::invalid(
            "dangling_reference",
            format!("unknown robot `{}`", req.robot_id),
        ));
    }
    let value = req
        .rating
        .as_i64()
        .ok_or_else(|| ApiError::invalid("rating_out_of_range", format!("rating {} is not an integer in 1..4", req.rating)))?;
    TraversabilityRating::new(value).map_err(|e| ApiError::invalid("rating_out_of_range", e.to_string()))
}

pub async fn submit(State(state): AppRef, body: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let req: SubmitRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed_request", e.to_string()))?;
    let rating = validate(&state, &req)?;
    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or_default();
    let record = AnnotationRecord {
        annotator_id: req.annotator_id.trim().to_string(),
        instance_id: req.instance_id,
        robot_id: req.robot_id,
        rating,
        timestamp,
    };
    let writer = state.clone();
    let stored = record.clone();
    tokio::task::spawn_blocking(move || writer.store.append(&stored))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(Json(json!({"ok": true, "record": record})))
}

#[derive(Debug, Deserialize)]
pub struct AgreementQuery {
    bin_width: Option<f64>,
}

pub async fn agreement(State(state): AppRef, Query(q): Query<AgreementQuery>) -> Result<Json<AgreementStats>, ApiError> {
    let bin_width = q.bin_width.unwrap_or(state.config.bin_width);
    let snapshot = state.store.snapshot();
    let result = agreement_histogram(&snapshot, bin_width).or_else(|e| match e {
        DatasetError::NoAnnotations => AgreementStats::empty(bin_width),
        other => Err(other),
    });
    result
        .map(Json)
        .map_err(|e| ApiError::invalid("invalid_bin_width", e.to_string()))
}

pub async fn export(State(state): AppRef) -> impl IntoResponse {
    (
        [(header::CONTENT_TYPE, "application/x-ndjson")],
        state.store.export_jsonl(),
    )
}

fn png_response(img: &image::RgbImage) -> Result<Response, ApiError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], buf.into_inner()).into_response())
}

fn strip_png(file: &str) -> Result<&str, ApiError> {
    file.strip_suffix(".png")
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no media `{file}`")))
}

pub async fn image(State(state): AppRef, Path(file): Path<String>) -> Result<Response, ApiError> {
    let id = strip_png(&file)?;
    let record = state
        .manifest
        .image(id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no image `{id}`")))?;
    let state2 = state.clone();
    let record = record.clone();
    let pixels = tokio::task::spawn_blocking(move || state2.manifest.load_image(&record))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(|e| ApiError::internal(e.to_string()))?;
    png_response(&pixels)
}

pub async fn crop(State(state): AppRef, Path(file): Path<String>) -> Result<Response, ApiError> {
    let id = strip_png(&file)?.to_string();
    let inst = state
        .manifest
        .instance(&id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no instance `{id}`")))?;
    let state2 = state.clone();
    let pixels = tokio::task::spawn_blocking(move || -> Result<image::RgbImage, String> {
        let m = &state2.manifest;
        let image = m.image(&inst.image_id).ok_or("instance without image")?;
        let pixels = m.load_image(image).map_err(|e| e.to_string())?;
        let mask = m.load_mask(&inst).map_err(|e| e.to_string())?;
        extract_instance(&pixels, &inst.id, &mask, &state2.config.crop)
            .map(|c| c.pixels)
            .map_err(|e| e.to_string())
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
    .map_err(ApiError::internal)?;
    png_response(&pixels)
}

pub async fn placeholder() -> Html<&'static str> {
    Html(
        "<!doctype html><html><head><meta charset=\"utf-8\"><title>wadeable</title></head><body>\
         <h1>Annotation service</h1>\
         <p>No UI directory is configured. Start the service with <code>--ui-dir</code> to serve the built annotation UI.</p>\
         <ul><li><code>GET /api/tasks?annotator=&amp;robot=</code></li>\
         <li><code>GET /api/task/next?annotator=&amp;robot=</code></li>\
         <li><code>POST /api/annotations</code></li>\
         <li><code>GET /api/stats/agreement</code></li>\
         <li><code>GET /api/export</code></li></ul></body></html>",
    )
}
