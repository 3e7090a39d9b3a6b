//! HTTP API: classification with tag suggestions, the conflict queue and
//! decisions behind the adjudication UI, and annotation statistics.

use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::annotation::{AnnotationError, AnnotationStore, ConflictCase, Decision, Elaborator};
use crate::explainer::{explain_text, ExplainerConfig, TokenValue};
use crate::ingest::{classifier_text, clean_text};
use crate::llm::{LlmError, NegotiationTurn};
use crate::taxonomy::{report_from_histogram, CategoryHistogram, ChallengeCategory, Rounding};
use crate::trainer::ModelHandle;

pub const DEFAULT_PAGE_SIZE: usize = 50;

pub type SharedElaborator = Arc<dyn Elaborator + Send + Sync>;

#[derive(Clone)]
pub struct AppState {
    model: Option<ModelHandle>,
    store: Option<Arc<Mutex<AnnotationStore>>>,
    elaborator: Option<SharedElaborator>,
    api_token: Option<String>,
    workers: Arc<Semaphore>,
    explainer: ExplainerConfig,
}

impl AppState {
    pub fn new() -> Self {
        AppState {
            model: None,
            store: None,
            elaborator: None,
            api_token: None,
            workers: Arc::new(Semaphore::new(2)),
            explainer: ExplainerConfig::default(),
        }
    }

    pub fn with_model(mut self, model: ModelHandle) -> Self {
        self.model = Some(model);
        self
    }

    pub fn with_store(mut self, store: AnnotationStore) -> Self {
        self.store = Some(Arc::new(Mutex::new(store)));
        self
    }

    pub fn with_shared_store(mut self, store: Arc<Mutex<AnnotationStore>>) -> Self {
        self.store = Some(store);
        self
    }

    pub fn with_elaborator(mut self, llm: SharedElaborator) -> Self {
        self.elaborator = Some(llm);
        self
    }

    /// Bearer token required on mutating conflict endpoints.
    pub fn with_api_token(mut self, token: Option<String>) -> Self {
        self.api_token = token.filter(|t| !t.is_empty());
        self
    }

    /// Concurrent classification jobs.
    pub fn with_workers(mut self, n: usize) -> Self {
        self.workers = Arc::new(Semaphore::new(n.max(1)));
        self
    }

    pub fn with_explainer(mut self, cfg: ExplainerConfig) -> Self {
        self.explainer = cfg;
        self
    }
}

impl Default for AppState {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        ApiError(status, msg.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

impl From<AnnotationError> for ApiError {
    fn from(e: AnnotationError) -> Self {
        let status = match &e {
            AnnotationError::UnknownCase(_) | AnnotationError::UnknownPost(_) => StatusCode::NOT_FOUND,
            AnnotationError::AlreadyResolved(_) => StatusCode::CONFLICT,
            AnnotationError::InvalidDecision(_) => StatusCode::UNPROCESSABLE_ENTITY,
            AnnotationError::Llm { .. } => StatusCode::BAD_GATEWAY,
            AnnotationError::ExportBlocked(_) | AnnotationError::UnknownAnnotator(..) => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifyRequest {
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub label: ChallengeCategory,
    pub label_index: usize,
    pub confidence: f64,
    pub suggested_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_tokens: Option<Vec<TokenValue>>,
}

pub fn suggested_tag(category: ChallengeCategory) -> String {
    format!("qse-challenge:{}", category.name().to_lowercase().replace(' ', "-"))
}

#[derive(Debug, Deserialize)]
struct ExplainFlag {
    #[serde(default)]
    explain: Option<String>,
}

/// Number of attributed words returned with `?explain=1`.
const TOP_TOKENS: usize = 10;

async fn classify(
    State(state): State<AppState>,
    Query(flag): Query<ExplainFlag>,
    Json(req): Json<ClassifyRequest>,
) -> ApiResult<ClassifyResponse> {
    let model = state
        .model
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model not loaded"))?;
    let body = clean_text(&req.body);
    if body.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "body must not be empty"));
    }
    let text = classifier_text(&clean_text(&req.title), &body);
    let explain = matches!(flag.explain.as_deref(), Some("1" | "true" | "yes"));
    let _permit = state
        .workers
        .clone()
        .acquire_owned()
        .await
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "worker pool closed"))?;
    let explainer = state.explainer;
    let job = tokio::task::spawn_blocking(move || -> Result<ClassifyResponse, String> {
        let probs = model.predict_texts(&[text.as_str()]).map_err(|e| e.to_string())?[0];
        let index = crate::evaluator::argmax(&probs);
        let label = ChallengeCategory::from_index(index).map_err(|e| e.to_string())?;
        let top_tokens = if explain {
            let e = explain_text(&model, "request", &text, &explainer).map_err(|e| e.to_string())?;
            let mut words = e.words;
            words.sort_by(|a, b| b.value.abs().total_cmp(&a.value.abs()));
            words.truncate(TOP_TOKENS);
            Some(words)
        } else {
            None
        };
        Ok(ClassifyResponse {
            label,
            label_index: index,
            confidence: probs[index],
            suggested_tag: suggested_tag(label),
            top_tokens,
        })
    });
    let result = job
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))?;
    Ok(Json(result))
}

fn store(state: &AppState) -> Result<&Arc<Mutex<AnnotationStore>>, ApiError> {
    state
        .store
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "annotation store unavailable"))
}

fn lock(store: &Mutex<AnnotationStore>) -> Result<std::sync::MutexGuard<'_, AnnotationStore>, ApiError> {
    store
        .lock()
        .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "annotation store unavailable"))
}

fn authorize(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    let Some(token) = &state.api_token else {
        return Ok(());
    };
    let given = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if given == Some(token.as_str()) {
        Ok(())
    } else {
        Err(ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong bearer token"))
    }
}

#[derive(Debug, Deserialize)]
struct ConflictQuery {
    #[serde(default)]
    status: Option<String>,
    #[serde(default)]
    page: Option<usize>,
    #[serde(default)]
    page_size: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConflictPage {
    pub items: Vec<ConflictCase>,
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub pages: usize,
}

async fn list_conflicts(State(state): State<AppState>, Query(q): Query<ConflictQuery>) -> ApiResult<ConflictPage> {
    let store = store(&state)?;
    let filter = match q.status.as_deref().unwrap_or("open") {
        "open" => Some(true),
        "resolved" => Some(false),
        "all" => None,
        other => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                format!("unknown status {other:?} (open, resolved or all)"),
            ))
        }
    };
    let page_size = q.page_size.unwrap_or(DEFAULT_PAGE_SIZE).clamp(1, 1000);
    let page = q.page.unwrap_or(1).max(1);
    let guard = lock(store)?;
    // Cases are keyed by post id, so iteration order is already by post id.
    let matching: Vec<&ConflictCase> = guard
        .cases()
        .filter(|c| filter.is_none_or(|open| c.is_open() == open))
        .collect();
    let total = matching.len();
    let items = matching
        .into_iter()
        .skip((page - 1) * page_size)
        .take(page_size)
        .cloned()
        .collect();
    Ok(Json(ConflictPage {
        items,
        page,
        page_size,
        total,
        pages: total.div_ceil(page_size),
    }))
}

async fn get_conflict(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<ConflictCase> {
    let store = store(&state)?;
    let guard = lock(store)?;
    guard
        .case(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| AnnotationError::UnknownCase(id).into())
}

async fn decide(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    Json(decision): Json<Decision>,
) -> ApiResult<ConflictCase> {
    authorize(&state, &headers)?;
    let store = store(&state)?;
    // The store lock makes check-and-apply atomic, so of two racing
    // decisions on one case exactly one sees it open.
    let mut guard = lock(store)?;
    Ok(Json(guard.decide(&id, &decision)?))
}

async fn elaborate(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
) -> ApiResult<NegotiationTurn> {
    authorize(&state, &headers)?;
    let store = store(&state)?.clone();
    let llm = state
        .elaborator
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::BAD_GATEWAY, "no LLM configured"))?;
    let (case, title, body) = {
        let guard = lock(&store)?;
        let case = guard
            .case(&id)
            .cloned()
            .ok_or_else(|| AnnotationError::UnknownCase(id.clone()))?;
        if !case.is_open() {
            return Err(AnnotationError::AlreadyResolved(id).into());
        }
        let post = guard.post(&id).ok_or_else(|| AnnotationError::UnknownPost(id.clone()))?;
        (case, post.title.clone(), post.body_text.clone())
    };
    // The LLM call happens outside the lock; the turn is appended only if
    // the case is still open afterwards.
    let turn = tokio::task::spawn_blocking(move || llm.elaborate(&case, &title, &body))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e: LlmError| ApiError::new(StatusCode::BAD_GATEWAY, format!("LLM service failure: {e}")))?;
    let mut guard = lock(&store)?;
    guard.add_turn(&id, turn.clone())?;
    Ok(Json(turn))
}

async fn stats_agreement(State(state): State<AppState>) -> Result<Response, ApiError> {
    let store = store(&state)?;
    let guard = lock(store)?;
    let Some(pair) = guard.adjudication_pair().cloned() else {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "no annotator pair compared yet"));
    };
    Ok(Json(guard.agreement(&pair.a, &pair.b, pair.round)?).into_response())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrequencyResponse {
    pub histogram: CategoryHistogram,
    pub rows: Vec<FrequencyEntry>,
    pub open_cases: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrequencyEntry {
    pub category: ChallengeCategory,
    pub count: usize,
    pub percent: f64,
}

/// Category frequencies over the consensus labels (agreed posts plus
/// resolved cases).
async fn stats_frequencies(State(state): State<AppState>) -> ApiResult<FrequencyResponse> {
    let store = store(&state)?;
    let guard = lock(store)?;
    let labels = guard.final_labels();
    if labels.is_empty() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "no consensus labels yet"));
    }
    let histogram = CategoryHistogram::from_labels(labels.values().copied());
    let report = report_from_histogram(histogram.clone(), Rounding::default());
    Ok(Json(FrequencyResponse {
        histogram,
        rows: report
            .rows
            .iter()
            .map(|r| FrequencyEntry {
                category: r.category,
                count: r.count,
                percent: r.percent(),
            })
            .collect(),
        open_cases: guard.open_cases().len(),
    }))
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "model_loaded": state.model.is_some(),
        "store_attached": state.store.is_some(),
        "llm_configured": state.elaborator.is_some(),
    }))
}

/// Builds the router. `cors_origin` of `None` or `"*"` allows any origin.
pub fn router(state: AppState, cors_origin: Option<&str>) -> Router {
    let origin = match cors_origin {
        None | Some("*") => AllowOrigin::any(),
        Some(o) => match HeaderValue::from_str(o) {
            Ok(v) => AllowOrigin::exact(v),
            Err(_) => {
                log::warn!("ignoring invalid CORS origin {o:?}");
                AllowOrigin::any()
            }
        },
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
        .allow_headers([header::CONTENT_TYPE, header::AUTHORIZATION]);
    Router::new()
        .route("/health", get(health))
        .route("/classify", post(classify))
        .route("/conflicts", get(list_conflicts))
        .route("/conflicts/{id}", get(get_conflict))
        .route("/conflicts/{id}/decision", post(decide))
        .route("/conflicts/{id}/elaborate", post(elaborate))
        .route("/stats/agreement", get(stats_agreement))
        .route("/stats/frequencies", get(stats_frequencies))
        .layer(cors)
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: AppState, addr: std::net::SocketAddr, cors_origin: Option<&str>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, cors_origin)).await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tag_format() {
        assert_eq!(suggested_tag(ChallengeCategory::ApiUsage), "qse-challenge:api-usage");
        assert_eq!(suggested_tag(ChallengeCategory::Errors), "qse-challenge:errors");
    }

    #[test]
    fn error_statuses() {
        let s = |e: AnnotationError| ApiError::from(e).0;
        assert_eq!(s(AnnotationError::AlreadyResolved("x".into())), StatusCode::CONFLICT);
        assert_eq!(s(AnnotationError::InvalidDecision("x".into())), StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(s(AnnotationError::UnknownCase("x".into())), StatusCode::NOT_FOUND);
    }
}
