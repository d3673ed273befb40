//! JSON endpoints. Every handler runs its store work on the blocking pool.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hydra_core::analytics::{
    build_ecm, build_log_digest, status_metrics, training_diff, EnhancedConfusionMatrix, Evaluator, LogDigest,
    StatusReport, TrainingDiff,
};
use hydra_core::keeper::{alarm_kind, AlarmKind};
use hydra_core::image::Format;
use hydra_core::layout::ImageRoot;
use hydra_core::predict::ClassifierBackend;
use hydra_core::store::{HistoryQuery, Store, StoreError, WeightSeries};
use hydra_core::*;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::config::PollHints;
use crate::error::ApiError;

/// Identifies the acting user on mutating requests.
pub const USER_HEADER: &str = "x-hydra-user";
pub const DEFAULT_UNLABELED_LIMIT: usize = 50;
pub const MAX_UNLABELED_LIMIT: usize = 1000;
pub const DEFAULT_STATUS_WINDOW: Duration = Duration::from_secs(3600);
pub const DEFAULT_SERIES_WINDOW: Duration = Duration::from_secs(24 * 3600);
pub const DEFAULT_ALARM_WAIT: Duration = Duration::from_secs(25);
pub const MAX_ALARM_WAIT: Duration = Duration::from_secs(60);
const ALARM_POLL: Duration = Duration::from_millis(100);

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<dyn Store>,
    pub image_root: ImageRoot,
    pub backend: Arc<dyn ClassifierBackend>,
    pub clock: Arc<dyn Clock>,
    pub hints: PollHints,
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Runs `f` against the store off the async executor.
async fn blocking<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> Result<T, ApiError> + Send + 'static,
{
    let state = state.clone();
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError::Persistence(format!("request task failed: {e}")))?
}

pub fn router(state: AppState, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/plot-types", get(plot_types))
        .route("/labels", get(labels).post(assign_label))
        .route("/unlabeled", get(unlabeled))
        .route("/labeled", get(labeled))
        .route("/models", get(models))
        .route("/models/{id}/activate", post(activate))
        .route("/models/{id}/ecm", get(ecm))
        .route("/models/{id}/thresholds", get(thresholds).put(put_thresholds))
        .route("/models/{id}/diff", get(diff))
        .route("/run/live", get(live))
        .route("/images/{id}", get(image_bytes))
        .route("/heatmaps/{id}", get(heatmap_bytes))
        .route("/status", get(status))
        .route("/log", get(log))
        .route("/series", get(series))
        .route("/alarms/stream", get(alarms))
        .route("/config", get(config))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Accepts a numeric id or a name.
pub fn resolve_plot_type(store: &dyn Store, key: &str) -> Result<PlotType, ApiError> {
    if let Ok(id) = key.parse::<u64>() {
        return Ok(store.plot_type(PlotTypeId(id))?);
    }
    store
        .plot_type_by_name(key)?
        .ok_or_else(|| ApiError::UnknownEntity(format!("plot type {key:?} does not exist")))
}

fn acting_user(headers: &HeaderMap, body_user: Option<String>) -> Result<String, ApiError> {
    let header_user = match headers.get(USER_HEADER) {
        Some(v) => Some(
            v.to_str()
                .map_err(|_| ApiError::Validation(format!("{USER_HEADER} is not valid text")))?
                .to_string(),
        ),
        None => None,
    };
    match (body_user, header_user) {
        (Some(b), Some(h)) if b != h => Err(ApiError::Validation(format!("user {b:?} does not match {USER_HEADER} {h:?}"))),
        (Some(u), _) | (None, Some(u)) if !u.trim().is_empty() => Ok(u),
        _ => Err(ApiError::PermissionDenied("no user given".into())),
    }
}

fn require_labeler(store: &dyn Store, plot_type_id: PlotTypeId, user: &str) -> Result<(), ApiError> {
    if store.plot_type(plot_type_id)?.allowed_labelers.contains(user) {
        Ok(())
    } else {
        Err(StoreError::PermissionDenied { user: user.to_string(), plot_type_id }.into())
    }
}

fn window_from(
    clock: &dyn Clock,
    from: Option<i64>,
    to: Option<i64>,
    seconds: Option<u64>,
    default: Duration,
) -> Result<TimeRange, ApiError> {
    let to = to.map(Timestamp).unwrap_or_else(|| clock.now());
    let range = match (from, seconds) {
        (Some(_), Some(_)) => return Err(ApiError::Validation("give either from or window, not both".into())),
        (Some(from), None) => TimeRange::new(Timestamp(from), to),
        (None, Some(s)) => TimeRange::trailing(to, Duration::from_secs(s)),
        (None, None) => TimeRange::trailing(to, default),
    };
    if !range.is_valid() {
        return Err(ApiError::Validation("time window start is after its end".into()));
    }
    Ok(range)
}

fn hex(c: Rgb) -> String {
    format!("#{:02x}{:02x}{:02x}", c.0, c.1, c.2)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelView {
    pub label_id: LabelId,
    pub plot_type_id: PlotTypeId,
    pub name: String,
    /// `#rrggbb`
    pub color: String,
    pub severity: Severity,
}

impl From<LabelDef> for LabelView {
    fn from(l: LabelDef) -> Self {
        LabelView { label_id: l.label_id, plot_type_id: l.plot_type_id, name: l.name, color: hex(l.color), severity: l.severity }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlotTypeView {
    #[serde(flatten)]
    pub plot_type: PlotType,
    pub labels: Vec<LabelView>,
    pub active_model_id: Option<ModelId>,
}

async fn plot_types(State(s): State<AppState>) -> ApiResult<Vec<PlotTypeView>> {
    blocking(&s, |s| {
        let mut out = Vec::new();
        for pt in s.store.plot_types()? {
            let labels = s.store.labels(pt.plot_type_id)?.into_iter().map(LabelView::from).collect();
            let active_model_id = s.store.active_model(pt.plot_type_id)?.map(|m| m.model_id);
            out.push(PlotTypeView { plot_type: pt, labels, active_model_id });
        }
        Ok(Json(out))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct PlotTypeParam {
    plot_type: String,
}

async fn labels(State(s): State<AppState>, q: Result<Query<PlotTypeParam>, QueryRejection>) -> ApiResult<Vec<LabelView>> {
    let Query(q) = q?;
    blocking(&s, move |s| {
        let pt = resolve_plot_type(s.store.as_ref(), &q.plot_type)?;
        Ok(Json(s.store.labels(pt.plot_type_id)?.into_iter().map(LabelView::from).collect()))
    })
    .await
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageView {
    #[serde(flatten)]
    pub image: ImageRecord,
    pub image_url: String,
}

impl From<ImageRecord> for ImageView {
    fn from(image: ImageRecord) -> Self {
        ImageView { image_url: format!("/images/{}", image.image_id), image }
    }
}

#[derive(Debug, Deserialize)]
struct UnlabeledParams {
    plot_type: String,
    limit: Option<usize>,
    from: Option<i64>,
    to: Option<i64>,
}

async fn unlabeled(State(s): State<AppState>, q: Result<Query<UnlabeledParams>, QueryRejection>) -> ApiResult<Vec<ImageView>> {
    let Query(q) = q?;
    let limit = q.limit.unwrap_or(DEFAULT_UNLABELED_LIMIT);
    if limit == 0 || limit > MAX_UNLABELED_LIMIT {
        return Err(ApiError::Validation(format!("limit must be in 1..={MAX_UNLABELED_LIMIT}")));
    }
    blocking(&s, move |s| {
        let pt = resolve_plot_type(s.store.as_ref(), &q.plot_type)?;
        let window = optional_window(q.from, q.to)?;
        let images = s.store.query_unlabeled(pt.plot_type_id, limit, window)?;
        Ok(Json(images.into_iter().map(ImageView::from).collect()))
    })
    .await
}

fn optional_window(from: Option<i64>, to: Option<i64>) -> Result<Option<TimeRange>, ApiError> {
    if from.is_none() && to.is_none() {
        return Ok(None);
    }
    let range = TimeRange::new(Timestamp(from.unwrap_or(i64::MIN)), Timestamp(to.unwrap_or(i64::MAX)));
    if !range.is_valid() {
        return Err(ApiError::Validation("time window start is after its end".into()));
    }
    Ok(Some(range))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssignLabelRequest {
    pub image_id: ImageId,
    pub label_id: LabelId,
    /// Falls back to the `X-Hydra-User` header.
    #[serde(default)]
    pub user: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignLabelResponse {
    /// Position of this assignment in the image's label history, from 1.
    pub assignment_id: u64,
    pub assignment: LabelAssignment,
}

async fn assign_label(
    State(s): State<AppState>,
    headers: HeaderMap,
    body: Result<Json<AssignLabelRequest>, JsonRejection>,
) -> ApiResult<AssignLabelResponse> {
    let Json(body) = body?;
    let user = acting_user(&headers, body.user)?;
    blocking(&s, move |s| {
        let assignment = s.store.assign_label(body.image_id, body.label_id, &user, s.clock.now())?;
        let assignment_id = s.store.label_history(body.image_id)?.len() as u64;
        Ok(Json(AssignLabelResponse { assignment_id, assignment }))
    })
    .await
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledView {
    pub image: ImageView,
    pub assignment: LabelAssignment,
}

#[derive(Debug, Deserialize)]
struct LabeledParams {
    plot_type: String,
    label: Option<String>,
    from: Option<i64>,
    to: Option<i64>,
}

async fn labeled(State(s): State<AppState>, q: Result<Query<LabeledParams>, QueryRejection>) -> ApiResult<Vec<LabeledView>> {
    let Query(q) = q?;
    blocking(&s, move |s| {
        let pt = resolve_plot_type(s.store.as_ref(), &q.plot_type)?;
        let label = match &q.label {
            None => None,
            Some(key) => Some(resolve_label(s.store.as_ref(), pt.plot_type_id, key)?),
        };
        let window = optional_window(q.from, q.to)?;
        let rows = s.store.query_labeled(pt.plot_type_id, label, window)?;
        Ok(Json(rows.into_iter().map(|(image, assignment)| LabeledView { image: image.into(), assignment }).collect()))
    })
    .await
}

fn resolve_label(store: &dyn Store, plot_type_id: PlotTypeId, key: &str) -> Result<LabelId, ApiError> {
    let labels = store.labels(plot_type_id)?;
    let found = match key.parse::<u64>() {
        Ok(id) => labels.iter().find(|l| l.label_id.0 == id),
        Err(_) => labels.iter().find(|l| l.name == key),
    };
    found
        .map(|l| l.label_id)
        .ok_or_else(|| ApiError::UnknownEntity(format!("label {key:?} is not defined for plot type {plot_type_id}")))
}

async fn models(State(s): State<AppState>, q: Result<Query<PlotTypeParam>, QueryRejection>) -> ApiResult<Vec<ModelRecord>> {
    let Query(q) = q?;
    blocking(&s, move |s| {
        let pt = resolve_plot_type(s.store.as_ref(), &q.plot_type)?;
        Ok(Json(s.store.models(pt.plot_type_id)?))
    })
    .await
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivateResponse {
    pub model_id: ModelId,
    pub previous: Option<ModelId>,
}

async fn activate(
    State(s): State<AppState>,
    headers: HeaderMap,
    id: Result<UrlPath<u64>, PathRejection>,
) -> ApiResult<ActivateResponse> {
    let UrlPath(id) = id?;
    let user = acting_user(&headers, None)?;
    blocking(&s, move |s| {
        let model_id = ModelId(id);
        let model = s.store.model(model_id)?;
        require_labeler(s.store.as_ref(), model.plot_type_id, &user)?;
        let previous = s.store.set_active_model(model_id)?;
        tracing::info!(%model_id, ?previous, %user, "model activated");
        Ok(Json(ActivateResponse { model_id, previous }))
    })
    .await
}

fn evaluator(s: &AppState) -> Evaluator<'_> {
    Evaluator { store: s.store.as_ref(), backend: s.backend.as_ref(), image_root: &s.image_root }
}

async fn ecm(State(s): State<AppState>, id: Result<UrlPath<u64>, PathRejection>) -> ApiResult<EnhancedConfusionMatrix> {
    let UrlPath(id) = id?;
    blocking(&s, move |s| {
        let model = s.store.model(ModelId(id))?;
        let eval = evaluator(s);
        let set = eval.labeled_set(model.plot_type_id)?;
        Ok(Json(build_ecm(&eval, model.model_id, &set)?))
    })
    .await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdView {
    pub label_id: LabelId,
    pub label_name: String,
    pub threshold: f64,
}

fn threshold_views(store: &dyn Store, model_id: ModelId) -> Result<Vec<ThresholdView>, ApiError> {
    store
        .thresholds(model_id)?
        .into_iter()
        .map(|t| Ok(ThresholdView { label_id: t.label_id, label_name: store.label(t.label_id)?.name, threshold: t.threshold }))
        .collect()
}

async fn thresholds(State(s): State<AppState>, id: Result<UrlPath<u64>, PathRejection>) -> ApiResult<Vec<ThresholdView>> {
    let UrlPath(id) = id?;
    blocking(&s, move |s| Ok(Json(threshold_views(s.store.as_ref(), ModelId(id))?))).await
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdUpdate {
    pub label_id: LabelId,
    pub threshold: f64,
}

async fn put_thresholds(
    State(s): State<AppState>,
    headers: HeaderMap,
    id: Result<UrlPath<u64>, PathRejection>,
    body: Result<Json<Vec<ThresholdUpdate>>, JsonRejection>,
) -> ApiResult<Vec<ThresholdView>> {
    let UrlPath(id) = id?;
    let Json(body) = body?;
    let user = acting_user(&headers, None)?;
    blocking(&s, move |s| {
        let model = s.store.model(ModelId(id))?;
        require_labeler(s.store.as_ref(), model.plot_type_id, &user)?;
        let pairs: Vec<(LabelId, f64)> = body.iter().map(|u| (u.label_id, u.threshold)).collect();
        s.store.set_thresholds(model.model_id, &pairs)?;
        Ok(Json(threshold_views(s.store.as_ref(), model.model_id)?))
    })
    .await
}

/// The model's training set under current labels, or every labeled image
/// of its plot type when the model has no recorded training set.
async fn diff(State(s): State<AppState>, id: Result<UrlPath<u64>, PathRejection>) -> ApiResult<TrainingDiff> {
    let UrlPath(id) = id?;
    blocking(&s, move |s| {
        let model = s.store.model(ModelId(id))?;
        let eval = evaluator(s);
        let set = match model.training_set_id {
            Some(ts) => {
                let members: Vec<ImageId> = s.store.training_set(ts)?.members.iter().map(|m| m.0).collect();
                eval.with_current_labels(&members)?
            }
            None => eval.labeled_set(model.plot_type_id)?,
        };
        Ok(Json(training_diff(&eval, model.model_id, &set)?))
    })
    .await
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiveEntry {
    #[serde(flatten)]
    pub entry: RunTimeEntry,
    pub label_name: String,
    pub color: String,
    pub severity: Severity,
    pub image_url: String,
    pub heatmap_url: Option<String>,
}

#[derive(Debug, Deserialize)]
struct LiveParams {
    plot_type: Option<String>,
}

async fn live(State(s): State<AppState>, q: Result<Query<LiveParams>, QueryRejection>) -> ApiResult<Vec<LiveEntry>> {
    let Query(q) = q?;
    blocking(&s, move |s| {
        let pt = match &q.plot_type {
            Some(key) => Some(resolve_plot_type(s.store.as_ref(), key)?.plot_type_id),
            None => None,
        };
        let mut out = Vec::new();
        for entry in s.store.live_entries(pt)? {
            let label = s.store.label(entry.classification)?;
            out.push(LiveEntry {
                label_name: label.name,
                color: hex(label.color),
                severity: label.severity,
                image_url: format!("/images/{}", entry.image_id),
                heatmap_url: entry.gradcam_path.as_ref().map(|_| format!("/heatmaps/{}", entry.inference_id)),
                entry,
            });
        }
        Ok(Json(out))
    })
    .await
}

fn content_type(path: &Path) -> &'static str {
    Format::from_path(path).map_or("application/octet-stream", Format::mime)
}

fn file_response(path: &Path) -> Result<Response, ApiError> {
    match std::fs::read(path) {
        Ok(bytes) => Ok(([(header::CONTENT_TYPE, content_type(path))], bytes).into_response()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(ApiError::UnknownEntity(format!("{} is missing", path.display())))
        }
        Err(e) => Err(ApiError::Persistence(format!("{}: {e}", path.display()))),
    }
}

async fn image_bytes(State(s): State<AppState>, id: Result<UrlPath<u64>, PathRejection>) -> Result<Response, ApiError> {
    let UrlPath(id) = id?;
    blocking(&s, move |s| {
        let record = s.store.image(ImageId(id))?;
        file_response(&s.image_root.resolve(&record.storage_path))
    })
    .await
}

async fn heatmap_bytes(State(s): State<AppState>, id: Result<UrlPath<u64>, PathRejection>) -> Result<Response, ApiError> {
    let UrlPath(id) = id?;
    blocking(&s, move |s| {
        let inference_id = InferenceId(id);
        s.store.inference(inference_id)?;
        file_response(&s.image_root.resolve(&ImageRoot::heatmap_path(inference_id)))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct WindowParams {
    /// Trailing window length in seconds.
    window: Option<u64>,
    from: Option<i64>,
    to: Option<i64>,
}

async fn status(State(s): State<AppState>, q: Result<Query<WindowParams>, QueryRejection>) -> ApiResult<StatusReport> {
    let Query(q) = q?;
    blocking(&s, move |s| {
        let window = window_from(s.clock.as_ref(), q.from, q.to, q.window, DEFAULT_STATUS_WINDOW)?;
        Ok(Json(status_metrics(s.store.as_ref(), window)?))
    })
    .await
}

async fn log(State(s): State<AppState>, q: Result<Query<WindowParams>, QueryRejection>) -> ApiResult<LogDigest> {
    let Query(q) = q?;
    blocking(&s, move |s| {
        let window =
            window_from(s.clock.as_ref(), q.from, q.to, q.window, hydra_core::analytics::DEFAULT_DIGEST_WINDOW)?;
        Ok(Json(build_log_digest(s.store.as_ref(), window)?))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct SeriesParams {
    plot_type: String,
    window: Option<u64>,
    from: Option<i64>,
    to: Option<i64>,
}

async fn series(State(s): State<AppState>, q: Result<Query<SeriesParams>, QueryRejection>) -> ApiResult<Vec<WeightSeries>> {
    let Query(q) = q?;
    blocking(&s, move |s| {
        let pt = resolve_plot_type(s.store.as_ref(), &q.plot_type)?;
        let window = window_from(s.clock.as_ref(), q.from, q.to, q.window, DEFAULT_SERIES_WINDOW)?;
        Ok(Json(s.store.query_weight_series(pt.plot_type_id, window)?))
    })
    .await
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alarm {
    /// The inference id; strictly increasing.
    pub seq: u64,
    pub inference_id: InferenceId,
    pub image_id: ImageId,
    pub plot_type_id: PlotTypeId,
    pub kind: AlarmKind,
    pub label_name: String,
    pub raised_at: Timestamp,
    pub image_url: String,
    pub heatmap_url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlarmBatch {
    pub events: Vec<Alarm>,
    /// Pass as `after` on the next call.
    pub last_seq: u64,
}

#[derive(Debug, Deserialize)]
struct AlarmParams {
    /// Omit to start from the newest inference.
    after: Option<u64>,
    timeout_ms: Option<u64>,
}

/// Alarms recorded after `after`, read back from the run history. Returns
/// at most one poll interval after the first new one, or at the timeout.
fn alarms_after(store: &dyn Store, after: u64) -> Result<AlarmBatch, ApiError> {
    let mut events = Vec::new();
    let mut last_seq = after;
    loop {
        let inference_id = InferenceId(last_seq + 1);
        let row = match store.inference(inference_id) {
            Ok(row) => row,
            Err(StoreError::UnknownInference(_)) => break,
            Err(e) => return Err(e.into()),
        };
        last_seq += 1;
        let label = store.label(row.classification)?;
        if let Some(kind) = alarm_kind(label.severity, row.confirmed) {
            let image = store.image(row.image_id)?;
            events.push(Alarm {
                seq: last_seq,
                inference_id,
                image_id: row.image_id,
                plot_type_id: image.plot_type_id,
                kind,
                label_name: label.name,
                raised_at: row.inferred_at,
                image_url: format!("/images/{}", row.image_id),
                heatmap_url: (label.severity == Severity::Bad).then(|| format!("/heatmaps/{inference_id}")),
            });
        }
    }
    Ok(AlarmBatch { events, last_seq })
}

async fn alarms(State(s): State<AppState>, q: Result<Query<AlarmParams>, QueryRejection>) -> ApiResult<AlarmBatch> {
    let Query(q) = q?;
    let wait = q.timeout_ms.map_or(DEFAULT_ALARM_WAIT, Duration::from_millis).min(MAX_ALARM_WAIT);
    let Some(mut after) = q.after else {
        return blocking(&s, |s| {
            let last = s.store.query_history(&HistoryQuery::default())?.last().map_or(0, |r| r.inference_id.0);
            Ok(Json(AlarmBatch { events: Vec::new(), last_seq: last }))
        })
        .await;
    };
    let deadline = tokio::time::Instant::now() + wait;
    loop {
        let batch = blocking(&s, move |s| alarms_after(s.store.as_ref(), after)).await?;
        if !batch.events.is_empty() || tokio::time::Instant::now() >= deadline {
            return Ok(Json(batch));
        }
        after = batch.last_seq;
        tokio::time::sleep_until(deadline.min(tokio::time::Instant::now() + ALARM_POLL)).await;
    }
}

async fn config(State(s): State<AppState>) -> Json<PollHints> {
    Json(s.hints)
}
