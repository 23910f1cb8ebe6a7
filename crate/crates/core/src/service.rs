//! HTTP session service for interactive use.
//!
//! A session is loaded once, its bidirectional cosine candidates are scored at
//! creation, and every later request re-selects or filters that cached list.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/sessions` | `{"manifest_path": ...}` or `{"manifest": {...}}` |
//! | GET | `/sessions/{id}/changes?mode=&angle=&k=` | ranked changes |
//! | POST | `/sessions/{id}/query` | `{"points":[{"x","y","t"}], "semantic_angle"}` |
//! | GET | `/sessions/{id}/overlay?time=&ids=` | PNG |
//! | GET | `/sessions/{id}/latent?time=` | PNG |
//! | DELETE | `/sessions/{id}` | |

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use image::RgbImage;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;

use crate::error::Error;
use crate::interchange::{encode_rgb_png, read_rgb_image, ChangeLine, LoadOptions, RleMask, Session, SessionManifest, Time};
use crate::matching::{
    auto_threshold, candidates, point_query_filter, select, ChangeProposal, Direction, MatchConfig, PointQuery,
    QueryPoint, Scoring, SelectionMode, DEFAULT_SEMANTIC_ANGLE_DEG,
};
use crate::probe::{fit_pca, pca_rgb};
use crate::proposal::ProposalFilter;
use crate::synthetic::false_colour;

pub const DEFAULT_CAPACITY: usize = 8;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Relative manifest paths are resolved against this directory.
    pub session_dir: PathBuf,
    pub capacity: usize,
    /// Static UI assets served for unmatched paths.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            session_dir: PathBuf::from("."),
            capacity: DEFAULT_CAPACITY,
            ui_dir: None,
        }
    }
}

pub struct SessionState {
    pub id: String,
    pub session: Session,
    /// Every candidate of both directions, cosine scoring, in rank order.
    pub candidates: Vec<ChangeProposal>,
    pub last_config: Mutex<MatchConfig>,
}

impl SessionState {
    pub fn new(id: String, session: Session) -> crate::Result<Self> {
        let mut cands = candidates(&session, Scoring::Cosine, Direction::Bidirectional)?;
        crate::matching::sort_changes(&mut cands);
        Ok(Self {
            id,
            session,
            candidates: cands,
            last_config: Mutex::new(MatchConfig::default()),
        })
    }

    pub fn select(&self, config: &MatchConfig) -> crate::Result<Vec<ChangeProposal>> {
        let out = select(&self.candidates, config)?;
        *self.last_config.lock().expect("config lock") = config.clone();
        Ok(out)
    }
}

/// In-memory sessions with least-recently-used eviction.
pub struct AppState {
    config: ServiceConfig,
    sessions: Mutex<IndexMap<String, Arc<SessionState>>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self {
            config,
            sessions: Mutex::new(IndexMap::new()),
        }
    }

    pub fn insert(&self, state: SessionState) -> Arc<SessionState> {
        let state = Arc::new(state);
        let mut sessions = self.sessions.lock().expect("session lock");
        while sessions.len() >= self.config.capacity.max(1) {
            if let Some((evicted, _)) = sessions.shift_remove_index(0) {
                tracing::info!("evicting session {evicted}");
            }
        }
        sessions.insert(state.id.clone(), state.clone());
        state
    }

    pub fn get(&self, id: &str) -> Option<Arc<SessionState>> {
        let mut sessions = self.sessions.lock().expect("session lock");
        let state = sessions.shift_remove(id)?;
        sessions.insert(id.to_string(), state.clone());
        Some(state)
    }

    pub fn remove(&self, id: &str) -> bool {
        self.sessions.lock().expect("session lock").shift_remove(id).is_some()
    }

    pub fn ids(&self) -> Vec<String> {
        self.sessions.lock().expect("session lock").keys().cloned().collect()
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. }
            | Error::Format(_)
            | Error::Truncated { .. }
            | Error::UnsupportedDtype(_)
            | Error::Rle(_)
            | Error::Image(_)
            | Error::InvalidConfig(_) => StatusCode::BAD_REQUEST,
            Error::UnknownProposal(_) => StatusCode::NOT_FOUND,
            Error::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(config: ServiceConfig) -> Router {
    let ui_dir = config.ui_dir.clone();
    let app = Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", axum::routing::delete(delete_session))
        .route("/sessions/{id}/changes", get(get_changes))
        .route("/sessions/{id}/query", post(query_changes))
        .route("/sessions/{id}/overlay", get(overlay))
        .route("/sessions/{id}/latent", get(latent))
        .with_state(Arc::new(AppState::new(config)));
    let app = match ui_dir {
        Some(dir) => app.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => app,
    };
    app.layer(CorsLayer::permissive())
}

pub async fn serve(listener: tokio::net::TcpListener, config: ServiceConfig) -> std::io::Result<()> {
    axum::serve(listener, router(config)).await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    manifest_path: Option<PathBuf>,
    manifest: Option<serde_json::Value>,
    #[serde(default)]
    no_filter: bool,
    min_pred_iou: Option<f64>,
    min_stability: Option<f64>,
    nms_iou: Option<f64>,
}

#[derive(Debug, Serialize)]
struct CreateResponse {
    session_id: String,
    image_size: [usize; 2],
    n_t0: usize,
    n_t1: usize,
    n_candidates: usize,
}

fn load_options(req: &CreateRequest) -> ApiResult<LoadOptions> {
    if req.no_filter {
        return Ok(LoadOptions::unfiltered());
    }
    let base = ProposalFilter::default();
    let filter = ProposalFilter {
        min_pred_iou: req.min_pred_iou.unwrap_or(base.min_pred_iou),
        min_stability: req.min_stability.unwrap_or(base.min_stability),
        nms_iou: req.nms_iou.unwrap_or(base.nms_iou),
    };
    filter.validate()?;
    Ok(LoadOptions {
        filter: Some(filter),
        ..LoadOptions::default()
    })
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<CreateResponse>)> {
    let req: CreateRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("request body: {e}")))?;
    let options = load_options(&req)?;
    let base = app.config.session_dir.clone();
    let manifest = match (&req.manifest_path, &req.manifest) {
        (Some(path), None) => SessionManifest::read(base.join(path))?,
        (None, Some(inline)) => SessionManifest::from_json(&inline.to_string())?.resolved_against(&base),
        _ => return Err(ApiError::bad_request("give exactly one of manifest_path or manifest")),
    };
    let id = uuid::Uuid::new_v4().simple().to_string();
    let state = tokio::task::spawn_blocking(move || {
        let session = Session::load(&manifest, &options)?;
        SessionState::new(id, session)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let (h, w) = state.session.image_size();
    let response = CreateResponse {
        session_id: state.id.clone(),
        image_size: [h, w],
        n_t0: state.session.proposals(Time::T0).len(),
        n_t1: state.session.proposals(Time::T1).len(),
        n_candidates: state.candidates.len(),
    };
    app.insert(state);
    Ok((StatusCode::CREATED, Json(response)))
}

async fn list_sessions(State(app): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "sessions": app.ids() }))
}

async fn delete_session(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<StatusCode> {
    if app.remove(&id) {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::not_found(format!("no session {id}")))
    }
}

fn session(app: &AppState, id: &str) -> ApiResult<Arc<SessionState>> {
    app.get(id).ok_or_else(|| ApiError::not_found(format!("no session {id}")))
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> ApiResult<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| ApiError::bad_request(format!("{key}: {e}")))
}

/// Selection config from `mode`, `angle` and `k`; scoring and direction are
/// fixed to the cached candidates' bidirectional cosine.
fn match_config(mode: Option<&str>, angle: Option<f64>, k: Option<usize>) -> ApiResult<MatchConfig> {
    let defaults = MatchConfig::default();
    let config = MatchConfig {
        mode: mode.map(|m| parse::<SelectionMode>("mode", m)).transpose()?.unwrap_or(defaults.mode),
        angle_threshold_deg: angle.unwrap_or(defaults.angle_threshold_deg),
        k: k.unwrap_or(defaults.k),
        ..defaults
    };
    config.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(config)
}

fn config_from_query(q: &HashMap<String, String>) -> ApiResult<MatchConfig> {
    let angle = q.get("angle").map(|a| parse::<f64>("angle", a)).transpose()?;
    let k = q.get("k").map(|k| parse::<usize>("k", k)).transpose()?;
    match_config(q.get("mode").map(String::as_str), angle, k)
}

#[derive(Debug, Serialize)]
struct ChangesResponse {
    count: usize,
    mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    threshold_deg: Option<f64>,
    changes: Vec<ChangeLine>,
}

fn changes_response(state: &SessionState, config: &MatchConfig, changes: &[ChangeProposal]) -> ChangesResponse {
    ChangesResponse {
        count: changes.len(),
        mode: config.mode.to_string(),
        threshold_deg: match config.mode {
            SelectionMode::AngleThreshold => Some(config.angle_threshold_deg),
            SelectionMode::AutoOtsu => auto_threshold(&state.candidates),
            SelectionMode::TopK => None,
        },
        changes: changes.iter().map(ChangeLine::from_change).collect(),
    }
}

async fn get_changes(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<ChangesResponse>> {
    let state = session(&app, &id)?;
    let config = config_from_query(&q)?;
    let changes = state.select(&config)?;
    Ok(Json(changes_response(&state, &config, &changes)))
}

#[derive(Debug, Deserialize)]
struct PointBody {
    x: usize,
    y: usize,
    t: serde_json::Value,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryRequest {
    points: Vec<PointBody>,
    semantic_angle: Option<f64>,
    mode: Option<String>,
    angle: Option<f64>,
    k: Option<usize>,
}

fn query_point(p: &PointBody) -> ApiResult<QueryPoint> {
    let time = match &p.t {
        serde_json::Value::String(s) => parse::<Time>("t", s)?,
        serde_json::Value::Number(n) => parse::<Time>("t", &n.to_string())?,
        other => return Err(ApiError::bad_request(format!("t: expected t0/t1, got {other}"))),
    };
    Ok(QueryPoint { x: p.x, y: p.y, time })
}

async fn query_changes(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<ChangesResponse>> {
    let state = session(&app, &id)?;
    let req: QueryRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("request body: {e}")))?;
    if req.points.is_empty() {
        return Err(ApiError::bad_request("points must not be empty"));
    }
    let points = req.points.iter().map(query_point).collect::<ApiResult<Vec<_>>>()?;
    let config = match_config(req.mode.as_deref(), req.angle, req.k)?;
    let query = PointQuery::new(points).with_angle(req.semantic_angle.unwrap_or(DEFAULT_SEMANTIC_ANGLE_DEG));
    let selected = state.select(&config)?;
    let kept = point_query_filter(&selected, &query, &state.session).map_err(|e| match e {
        Error::InvalidConfig(msg) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, msg),
        other => other.into(),
    })?;
    Ok(Json(changes_response(&state, &config, &kept)))
}

fn time_param(q: &HashMap<String, String>) -> ApiResult<Time> {
    q.get("time").map_or(Ok(Time::T0), |t| parse("time", t))
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// Tints each mask's pixels and draws its boundary in a solid colour.
pub fn render_overlay(base: &RgbImage, masks: &[&RleMask]) -> RgbImage {
    let mut out = base.clone();
    for (i, mask) in masks.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let dense = mask.decode();
        let (h, w) = dense.size();
        let inside = |y: isize, x: isize| {
            y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && dense.get(y as usize, x as usize)
        };
        for (row, x0, x1) in mask.row_segments() {
            for x in x0..x1 {
                let (yi, xi) = (row as isize, x as isize);
                let edge = [(0, 1), (0, -1), (1, 0), (-1, 0)]
                    .iter()
                    .any(|(dy, dx)| !inside(yi + dy, xi + dx));
                let px = out.get_pixel_mut(x as u32, row as u32);
                for c in 0..3 {
                    px[c] = if edge {
                        colour[c]
                    } else {
                        ((u16::from(px[c]) * 55 + u16::from(colour[c]) * 45) / 100) as u8
                    };
                }
            }
        }
    }
    out
}

fn base_image(state: &SessionState, time: Time) -> ApiResult<RgbImage> {
    let size = state.session.image_size();
    match state.session.image_path(time) {
        Some(path) => Ok(read_rgb_image(path)?),
        None => Ok(false_colour(state.session.grid(time), size)),
    }
}

/// `ids` entries are proposal ids at `time`, or `t0:ID` / `t1:ID` for either image.
fn overlay_masks(state: &SessionState, time: Time, ids: &str) -> ApiResult<Vec<RleMask>> {
    ids.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (t, id) = match item.split_once(':') {
                Some((t, id)) => (parse::<Time>("ids", t)?, id),
                None => (time, item),
            };
            let id: u64 = parse("ids", id)?;
            state
                .session
                .proposal(t, id)
                .map(|p| p.mask.clone())
                .ok_or_else(|| ApiError::not_found(format!("no proposal {id} at {t}")))
        })
        .collect()
}

async fn overlay(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let state = session(&app, &id)?;
    let time = time_param(&q)?;
    let masks = overlay_masks(&state, time, q.get("ids").map_or("", String::as_str))?;
    let png = tokio::task::spawn_blocking(move || -> ApiResult<Vec<u8>> {
        let base = base_image(&state, time)?;
        let refs: Vec<&RleMask> = masks.iter().collect();
        Ok(encode_rgb_png(&render_overlay(&base, &refs))?)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(png_response(png))
}

async fn latent(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let state = session(&app, &id)?;
    let time = time_param(&q)?;
    let png = tokio::task::spawn_blocking(move || -> ApiResult<Vec<u8>> {
        let grid = state.session.grid(time);
        let basis = fit_pca(grid, 3)?;
        Ok(encode_rgb_png(&pca_rgb(grid, &basis)?.to_image())?)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(png_response(png))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{rect_mask, two_cluster_fixture};

    #[test]
    fn lru_evicts_oldest_untouched() {
        let app = AppState::new(ServiceConfig {
            capacity: 2,
            ..ServiceConfig::default()
        });
        let f = two_cluster_fixture();
        for id in ["a", "b"] {
            app.insert(SessionState::new(id.into(), f.session.clone()).unwrap());
        }
        assert!(app.get("a").is_some());
        app.insert(SessionState::new("c".into(), f.session.clone()).unwrap());
        assert_eq!(app.ids(), vec!["a".to_string(), "c".to_string()]);
    }

    #[test]
    fn overlay_draws_boundary_and_tint() {
        let base = RgbImage::from_pixel(6, 6, image::Rgb([100, 100, 100]));
        let m = rect_mask((6, 6), 1, 1, 4, 4);
        let out = render_overlay(&base, &[&m]);
        assert_eq!(out.get_pixel(1, 1).0, PALETTE[0]);
        assert_eq!(out.get_pixel(0, 0).0, [100, 100, 100]);
        let inner = out.get_pixel(2, 2).0;
        assert_ne!(inner, [100, 100, 100]);
        assert_ne!(inner, PALETTE[0]);
        assert_eq!(render_overlay(&base, &[]), base);
    }

    #[test]
    fn error_statuses() {
        assert_eq!(ApiError::from(Error::Format("x".into())).status, StatusCode::BAD_REQUEST);
        assert_eq!(ApiError::from(Error::ShapeMismatch("x".into())).status, StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(
            ApiError::from(Error::RankDeficient { requested: 3, available: 1 }).status,
            StatusCode::UNPROCESSABLE_ENTITY
        );
    }
}
