use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gradepipe_core::analytics::{write_verdicts, GradingVerdict, OcrVerdict};
use gradepipe_core::Score;
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

use crate::store::{ItemState, ReviewError, ReviewStore, ReviewVerdict};

pub const TOKEN_ENV: &str = "GRADEPIPE_REVIEW_TOKEN";
pub const DEFAULT_PORT: u16 = 8787;

#[derive(Debug, Clone, Default)]
pub struct ServerOptions {
    /// Bearer token required on API routes; `None` leaves them open.
    pub token: Option<String>,
    /// Directory that item image refs resolve against.
    pub image_root: Option<PathBuf>,
    /// Built review console to serve under /ui.
    pub ui_dir: Option<PathBuf>,
}

#[derive(Clone)]
struct AppState {
    store: Arc<ReviewStore>,
    token: Option<Arc<str>>,
    image_root: Option<Arc<PathBuf>>,
}

struct ApiError(StatusCode, &'static str, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1, "message": self.2}))).into_response()
    }
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let (status, kind) = match &e {
            ReviewError::NotFound(_) => (StatusCode::NOT_FOUND, "NotFound"),
            ReviewError::Conflict(_) => (StatusCode::CONFLICT, "Conflict"),
            ReviewError::Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "ValidationError"),
            ReviewError::Io { .. } | ReviewError::CorruptLog { .. } => {
                (StatusCode::INTERNAL_SERVER_ERROR, "StorageError")
            }
        };
        ApiError(status, kind, e.to_string())
    }
}

#[derive(Deserialize)]
struct QueueQuery {
    state: Option<String>,
}

async fn queue(
    State(app): State<AppState>,
    Query(q): Query<QueueQuery>,
) -> Result<impl IntoResponse, ApiError> {
    let filter = match q.state.as_deref().unwrap_or("open") {
        "open" => Some(ItemState::Open),
        "resolved" => Some(ItemState::Resolved),
        "all" => None,
        other => {
            return Err(ApiError(
                StatusCode::UNPROCESSABLE_ENTITY,
                "ValidationError",
                format!("state must be open, resolved or all, not `{other}`"),
            ))
        }
    };
    Ok(Json(app.store.queue(filter)))
}

async fn item(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(app.store.item(&id)?))
}

#[derive(Deserialize)]
struct VerdictRequest {
    reviewer_id: String,
    ocr_verdict: OcrVerdict,
    grading_verdict: GradingVerdict,
    reviewer_score: Score,
    #[serde(default)]
    note: String,
    #[serde(default)]
    timestamp: Option<String>,
}

async fn verdict(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<VerdictRequest>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(req) = body.map_err(|e| {
        ApiError(
            StatusCode::UNPROCESSABLE_ENTITY,
            "ValidationError",
            e.body_text(),
        )
    })?;
    let verdict = ReviewVerdict {
        reviewer_id: req.reviewer_id,
        ocr_verdict: req.ocr_verdict,
        grading_verdict: req.grading_verdict,
        reviewer_score: req.reviewer_score,
        note: req.note,
        timestamp: req.timestamp.unwrap_or_else(|| {
            chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
        }),
    };
    let store = app.store.clone();
    let resolved = tokio::task::spawn_blocking(move || store.resolve(&id, verdict))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))??;
    Ok(Json(resolved))
}

async fn stats(State(app): State<AppState>) -> impl IntoResponse {
    Json(app.store.stats())
}

async fn verdicts_csv(State(app): State<AppState>) -> Result<impl IntoResponse, ApiError> {
    let mut out = Vec::new();
    write_verdicts(&mut out, &app.store.verdicts())
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], out))
}

fn media_type(path: &std::path::Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

/// Serves only images listed on the item, so arbitrary paths are unreachable.
async fn image(
    State(app): State<AppState>,
    Path((id, n)): Path<(String, usize)>,
) -> Result<impl IntoResponse, ApiError> {
    let item = app.store.item(&id)?;
    let image_ref = item.image_refs.get(n).ok_or_else(|| {
        ApiError(
            StatusCode::NOT_FOUND,
            "NotFound",
            format!("item `{id}` has no image {n}"),
        )
    })?;
    let root = app.image_root.as_ref().ok_or_else(|| {
        ApiError(
            StatusCode::NOT_FOUND,
            "NotFound",
            "no image root configured".into(),
        )
    })?;
    let path = root.join(image_ref);
    let bytes = tokio::fs::read(&path).await.map_err(|e| {
        ApiError(
            StatusCode::NOT_FOUND,
            "NotFound",
            format!("{}: {e}", path.display()),
        )
    })?;
    Ok(([(header::CONTENT_TYPE, media_type(&path))], bytes))
}

async fn require_token(
    State(app): State<AppState>,
    headers: HeaderMap,
    request: Request,
    next: Next,
) -> Response {
    if let Some(token) = &app.token {
        let presented = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_ref()) {
            return ApiError(
                StatusCode::UNAUTHORIZED,
                "Unauthorized",
                "missing or wrong bearer token".into(),
            )
            .into_response();
        }
    }
    next.run(request).await
}

const UI_PLACEHOLDER: &str = "<!doctype html>\n<title>gradepipe review</title>\n\
<p>The review console is not built. The JSON API is available at \
<code>/queue</code>, <code>/items/{id}</code>, <code>/stats</code> and \
<code>/verdicts.csv</code>.</p>\n";

pub fn router(store: Arc<ReviewStore>, options: ServerOptions) -> Router {
    let state = AppState {
        store,
        token: options.token.map(Arc::from),
        image_root: options.image_root.map(Arc::new),
    };
    let api = Router::new()
        .route("/queue", get(queue))
        .route("/items/{id}", get(item))
        .route("/items/{id}/verdict", post(verdict))
        .route("/items/{id}/images/{n}", get(image))
        .route("/stats", get(stats))
        .route("/verdicts.csv", get(verdicts_csv))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state);
    let ui = match options.ui_dir {
        Some(dir) => Router::new().nest_service("/ui", ServeDir::new(dir)),
        None => Router::new().route("/ui", get(|| async { Html(UI_PLACEHOLDER) })),
    };
    api.merge(ui)
}

pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app).await
}
