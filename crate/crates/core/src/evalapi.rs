//! REST evaluation API served under `/v1`.

use std::collections::BTreeMap;
use std::future::Future;
use std::net::SocketAddr;
use std::path::Path as FsPath;

use axum::body::{Body, Bytes};
use axum::extract::multipart::MultipartRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Path, RawQuery, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use tokio::io::AsyncWriteExt;

use crate::compute::{BackendConfig, Registry};
use crate::config::ServiceConfig;
use crate::experiment::{ExperimentId, ExperimentState, ParamChange};
use crate::manager::{BuildOutcome, BuildRequest, CreateRequest, Manager, ManagerConfig, ManagerError, RunRequest};
use crate::sysdef::SystemRef;

pub const USER_HEADER: &str = "x-sunrise-user";
pub const ANONYMOUS: &str = "anonymous";
/// Back-end used when no back-end file is configured.
pub const DEFAULT_LOCAL_SLOTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    UnknownSystem,
    UnknownExperiment,
    UnknownParameter,
    NotAFileParameter,
    KindMismatch,
    IllegalState,
    UnknownResult,
    BackendUnavailable,
    Timeout,
    ValidationFailed,
    Internal,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 11] = [
        ErrorCode::UnknownSystem,
        ErrorCode::UnknownExperiment,
        ErrorCode::UnknownParameter,
        ErrorCode::NotAFileParameter,
        ErrorCode::KindMismatch,
        ErrorCode::IllegalState,
        ErrorCode::UnknownResult,
        ErrorCode::BackendUnavailable,
        ErrorCode::Timeout,
        ErrorCode::ValidationFailed,
        ErrorCode::Internal,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorCode::UnknownSystem => "unknown_system",
            ErrorCode::UnknownExperiment => "unknown_experiment",
            ErrorCode::UnknownParameter => "unknown_parameter",
            ErrorCode::NotAFileParameter => "not_a_file_parameter",
            ErrorCode::KindMismatch => "kind_mismatch",
            ErrorCode::IllegalState => "illegal_state",
            ErrorCode::UnknownResult => "unknown_result",
            ErrorCode::BackendUnavailable => "backend_unavailable",
            ErrorCode::Timeout => "timeout",
            ErrorCode::ValidationFailed => "validation_failed",
            ErrorCode::Internal => "internal",
        }
    }
}

/// Error body `{"code","message","detail"}` with its HTTP status.
#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: ErrorCode,
    pub message: String,
    pub detail: Option<Value>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into(), detail: None }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = Some(detail);
        self
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, ErrorCode::ValidationFailed, message)
    }

    fn unknown_experiment(id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, ErrorCode::UnknownExperiment, format!("experiment `{id}` not found"))
            .with_detail(json!({ "experiment_id": id }))
    }
}

impl From<ManagerError> for ApiError {
    fn from(err: ManagerError) -> Self {
        let message = err.to_string();
        match err {
            ManagerError::UnknownSystem(system) => {
                ApiError::new(StatusCode::NOT_FOUND, ErrorCode::UnknownSystem, message).with_detail(json!(system))
            }
            ManagerError::UnknownExperiment(id) => ApiError::unknown_experiment(&id),
            ManagerError::UnknownParameter(name) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, ErrorCode::UnknownParameter, message)
                    .with_detail(json!({ "parameter": name }))
            }
            ManagerError::NotAFileParameter(name) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, ErrorCode::NotAFileParameter, message)
                    .with_detail(json!({ "parameter": name }))
            }
            ManagerError::KindMismatch { name, .. } => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, ErrorCode::KindMismatch, message)
                    .with_detail(json!({ "parameter": name }))
            }
            ManagerError::IllegalState { state, .. } => {
                ApiError::new(StatusCode::CONFLICT, ErrorCode::IllegalState, message).with_detail(json!({ "state": state }))
            }
            ManagerError::UnknownResult { name, declared } => {
                let reason = if declared { "artifact_missing" } else { "not_declared" };
                ApiError::new(StatusCode::NOT_FOUND, ErrorCode::UnknownResult, message)
                    .with_detail(json!({ "result": name, "declared": declared, "reason": reason }))
            }
            ManagerError::BackendUnavailable(_) => {
                ApiError::new(StatusCode::SERVICE_UNAVAILABLE, ErrorCode::BackendUnavailable, message)
            }
            ManagerError::Validation { detail, .. } => {
                let e = ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, ErrorCode::ValidationFailed, message);
                if detail.is_null() {
                    e
                } else {
                    e.with_detail(detail)
                }
            }
            ManagerError::Internal(_) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, ErrorCode::Internal, message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "code": self.code.as_str(), "message": self.message });
        if let Some(detail) = self.detail {
            body["detail"] = detail;
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// One row of the endpoint table behind `/v1/openapi.json`.
#[derive(Debug, Clone, Copy)]
pub struct Endpoint {
    pub method: &'static str,
    pub path: &'static str,
    pub summary: &'static str,
    pub success: u16,
}

pub const ENDPOINTS: &[Endpoint] = &[
    Endpoint { method: "get", path: "/v1/openapi.json", summary: "API description", success: 200 },
    Endpoint { method: "get", path: "/v1/systems", summary: "List catalog systems", success: 200 },
    Endpoint { method: "get", path: "/v1/systems/{name}/{version}", summary: "Full system definition", success: 200 },
    Endpoint { method: "post", path: "/v1/session", summary: "Create an experiment from a SysCfg", success: 201 },
    Endpoint { method: "get", path: "/v1/session", summary: "List experiments (filters: creator, status)", success: 200 },
    Endpoint { method: "get", path: "/v1/session/{id}", summary: "Full experiment document", success: 200 },
    Endpoint { method: "delete", path: "/v1/session/{id}", summary: "Purge a non-archived experiment", success: 204 },
    Endpoint { method: "patch", path: "/v1/session/{id}/parameters", summary: "Override parameter values", success: 200 },
    Endpoint { method: "post", path: "/v1/session/{id}/parameter", summary: "Upload a file parameter (multipart: name, file)", success: 204 },
    Endpoint { method: "post", path: "/v1/session/{id}/build", summary: "Build the system", success: 202 },
    Endpoint { method: "post", path: "/v1/session/{id}/run", summary: "Run the system", success: 202 },
    Endpoint { method: "get", path: "/v1/session/{id}/status", summary: "Experiment status", success: 200 },
    Endpoint { method: "get", path: "/v1/session/{id}/result/{name}", summary: "Download a result file", success: 200 },
    Endpoint { method: "get", path: "/v1/session/{id}/log", summary: "Combined job log", success: 200 },
    Endpoint { method: "post", path: "/v1/session/{id}/archive", summary: "Archive the experiment", success: 200 },
    Endpoint { method: "get", path: "/v1/session/{id}/archive", summary: "Download the archive bundle", success: 200 },
];

pub fn openapi() -> Value {
    let mut paths = serde_json::Map::new();
    for ep in ENDPOINTS {
        let entry = paths.entry(ep.path).or_insert_with(|| json!({}));
        let params: Vec<Value> = ep
            .path
            .split('/')
            .filter_map(|seg| seg.strip_prefix('{').and_then(|s| s.strip_suffix('}')))
            .map(|p| json!({ "name": p, "in": "path", "required": true, "schema": { "type": "string" } }))
            .collect();
        entry[ep.method] = json!({
            "summary": ep.summary,
            "parameters": params,
            "responses": {
                ep.success.to_string(): { "description": "success" },
                "default": { "description": "error", "content": { "application/json": { "schema": { "$ref": "#/components/schemas/ApiError" } } } }
            }
        });
    }
    let codes: Vec<&str> = ErrorCode::ALL.iter().map(|c| c.as_str()).collect();
    json!({
        "openapi": "3.0.3",
        "info": { "title": "SUNRISE Evaluation API", "version": "1" },
        "paths": paths,
        "components": { "schemas": { "ApiError": {
            "type": "object",
            "required": ["code", "message"],
            "properties": {
                "code": { "type": "string", "enum": codes },
                "message": { "type": "string" },
                "detail": {}
            }
        } } }
    })
}

#[derive(Clone)]
struct AppState {
    manager: Manager,
    token: Option<String>,
}

pub fn router(manager: Manager, auth_token: Option<String>) -> Router {
    let state = AppState { manager, token: auth_token };
    let v1 = Router::new()
        .route("/openapi.json", get(|| async { Json(openapi()) }))
        .route("/systems", get(list_systems))
        .route("/systems/{name}/{version}", get(get_system))
        .route("/session", post(create_session).get(list_sessions))
        .route("/session/{id}", get(get_session).delete(delete_session))
        .route("/session/{id}/parameters", axum::routing::patch(set_parameters))
        .route("/session/{id}/parameter", post(upload_parameter).layer(DefaultBodyLimit::disable()))
        .route("/session/{id}/build", post(build))
        .route("/session/{id}/run", post(run))
        .route("/session/{id}/status", get(status))
        .route("/session/{id}/result/{name}", get(result))
        .route("/session/{id}/log", get(log))
        .route("/session/{id}/archive", post(archive).get(download_archive))
        .method_not_allowed_fallback(|| async {
            ApiError::new(StatusCode::METHOD_NOT_ALLOWED, ErrorCode::ValidationFailed, "method not allowed")
        })
        .route_layer(middleware::from_fn_with_state(state.clone(), authenticate));
    Router::new()
        .nest("/v1", v1)
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, ErrorCode::ValidationFailed, "no such endpoint") })
        .with_state(state)
}

async fn authenticate(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, ErrorCode::ValidationFailed, "missing or invalid bearer token")
                .into_response();
        }
    }
    next.run(req).await
}

fn creator(headers: &HeaderMap) -> String {
    headers
        .get(USER_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .unwrap_or(ANONYMOUS)
        .to_string()
}

fn parse_id(raw: &str) -> ApiResult<ExperimentId> {
    raw.parse().map_err(|_| ApiError::unknown_experiment(raw))
}

/// Parses a JSON body; an empty body yields the default value.
fn parse_body<T: DeserializeOwned + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    parse_required(body)
}

/// Parses a JSON object body. Syntax errors are 400, anything that is
/// not an object of the expected shape is 422.
fn parse_required<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let invalid = |m: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, ErrorCode::ValidationFailed, m);
    let value: Value =
        serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed JSON body: {e}")))?;
    if !value.is_object() {
        return Err(invalid("request body must be a JSON object".into()));
    }
    serde_json::from_value(value).map_err(|e| invalid(e.to_string()))
}

async fn list_systems(State(s): State<AppState>) -> impl IntoResponse {
    Json(s.manager.systems())
}

async fn get_system(State(s): State<AppState>, Path((name, version)): Path<(String, String)>) -> ApiResult<Response> {
    let def = s.manager.system(&SystemRef { name, version })?;
    Ok(Json(def.to_json()).into_response())
}

async fn create_session(State(s): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let req: CreateRequest = parse_required(&body)?;
    let exp = s.manager.create(req, &creator(&headers)).await?;
    let location = format!("/v1/session/{}", exp.id);
    Ok((
        StatusCode::CREATED,
        [(header::LOCATION, location)],
        Json(json!({ "experiment_id": exp.id })),
    )
        .into_response())
}

async fn list_sessions(State(s): State<AppState>, RawQuery(query): RawQuery) -> ApiResult<Response> {
    let mut creator = None;
    let mut status = None;
    for (k, v) in form_urlencoded::parse(query.unwrap_or_default().as_bytes()) {
        match k.as_ref() {
            "creator" => creator = Some(v.into_owned()),
            "status" => {
                let st: ExperimentState = v.parse().map_err(|e: String| {
                    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, ErrorCode::ValidationFailed, e)
                        .with_detail(json!({ "field": "status" }))
                })?;
                status = Some(st);
            }
            _ => {}
        }
    }
    Ok(Json(s.manager.list(creator.as_deref(), status)).into_response())
}

async fn get_session(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let exp = s.manager.experiment(parse_id(&id)?)?;
    Ok(Json(&*exp).into_response())
}

async fn delete_session(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    s.manager.delete(parse_id(&id)?).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn set_parameters(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let id = parse_id(&id)?;
    let overrides: BTreeMap<String, Value> = parse_required(&body)?;
    let (state, change) = s.manager.set_parameters(id, &overrides).await?;
    let change = match change {
        ParamChange::None => "none",
        ParamChange::Run => "run",
        ParamChange::Build => "build",
    };
    Ok(Json(json!({ "status": state, "change": change })).into_response())
}

/// Upload-specific mapping: an unknown parameter name is a missing resource.
fn upload_error(err: ManagerError) -> ApiError {
    match err {
        ManagerError::UnknownParameter(name) => ApiError::new(
            StatusCode::NOT_FOUND,
            ErrorCode::UnknownParameter,
            format!("unknown parameter `{name}`"),
        )
        .with_detail(json!({ "parameter": name })),
        other => other.into(),
    }
}

async fn upload_parameter(
    State(s): State<AppState>,
    Path(id): Path<String>,
    multipart: Result<Multipart, MultipartRejection>,
) -> ApiResult<StatusCode> {
    let id = parse_id(&id)?;
    s.manager.experiment(id)?;
    let mut multipart = multipart.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let mut name: Option<String> = None;
    let mut staged = None;
    while let Some(mut field) = multipart.next_field().await.map_err(|e| ApiError::bad_request(e.body_text()))? {
        match field.name() {
            Some("name") => {
                let n = field.text().await.map_err(|e| ApiError::bad_request(e.body_text()))?;
                s.manager.check_upload(id, &n).map_err(upload_error)?;
                name = Some(n);
            }
            Some("file") => {
                let tmp = s.manager.upload_temp(id)?;
                let mut out = tokio::fs::File::from_std(
                    tmp.as_file().try_clone().map_err(|e| ApiError::from(ManagerError::from(e)))?,
                );
                while let Some(chunk) = field.chunk().await.map_err(|e| ApiError::bad_request(e.body_text()))? {
                    out.write_all(&chunk).await.map_err(|e| ApiError::from(ManagerError::from(e)))?;
                }
                out.flush().await.map_err(|e| ApiError::from(ManagerError::from(e)))?;
                staged = Some(tmp);
            }
            _ => {}
        }
    }
    let (Some(name), Some(tmp)) = (name, staged) else {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            ErrorCode::ValidationFailed,
            "multipart body needs a `name` field and a `file` field",
        ));
    };
    s.manager.commit_upload(id, &name, tmp).await.map_err(upload_error)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn build(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let id = parse_id(&id)?;
    let req: BuildRequest = parse_body(&body)?;
    Ok(match s.manager.build(id, req).await? {
        BuildOutcome::Submitted => (StatusCode::ACCEPTED, Json(json!({ "status": ExperimentState::Building }))).into_response(),
        BuildOutcome::NotRequired => (StatusCode::OK, Json(json!({ "status": ExperimentState::Built }))).into_response(),
    })
}

async fn run(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let id = parse_id(&id)?;
    let req: RunRequest = parse_body(&body)?;
    s.manager.run(id, req).await?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "status": ExperimentState::Running }))).into_response())
}

async fn status(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let st = s.manager.status(parse_id(&id)?)?;
    Ok(([(header::CACHE_CONTROL, "no-store")], Json(st)).into_response())
}

pub fn content_type_for(declared_type: &str) -> &'static str {
    match declared_type {
        "json" => "application/json",
        "txt" => "text/plain; charset=utf-8",
        _ => "application/octet-stream",
    }
}

async fn stream_file(path: &FsPath, content_type: &str, filename: &str) -> ApiResult<Response> {
    let file = tokio::fs::File::open(path).await.map_err(|e| ApiError::from(ManagerError::from(e)))?;
    let len = file.metadata().await.map_err(|e| ApiError::from(ManagerError::from(e)))?.len();
    let body = Body::from_stream(tokio_util::io::ReaderStream::new(file));
    let disposition = format!("attachment; filename=\"{}\"", filename.replace(['"', '\\'], "_"));
    let mut resp = Response::new(body);
    let h = resp.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_str(content_type).expect("static content type"));
    h.insert(header::CONTENT_LENGTH, HeaderValue::from(len));
    if let Ok(v) = HeaderValue::from_str(&disposition) {
        h.insert(header::CONTENT_DISPOSITION, v);
    }
    Ok(resp)
}

async fn result(State(s): State<AppState>, Path((id, name)): Path<(String, String)>) -> ApiResult<Response> {
    let file = s.manager.result(parse_id(&id)?, &name)?;
    stream_file(&file.path, content_type_for(&file.declared_type), &file.name).await
}

async fn log(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let text = s.manager.log(parse_id(&id)?).await?;
    Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8"), (header::CACHE_CONTROL, "no-store")], text).into_response())
}

async fn archive(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let id = parse_id(&id)?;
    s.manager.archive(id).await?;
    Ok(Json(json!({ "status": ExperimentState::Archived, "archive_url": format!("/v1/session/{id}/archive") })).into_response())
}

async fn download_archive(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let id = parse_id(&id)?;
    let path = s.manager.archive_file(id)?;
    stream_file(&path, "application/zip", &format!("{id}.zip")).await
}

/// Builds the compute registry and manager described by `config`.
pub fn build_manager(config: &ServiceConfig) -> Result<Manager, String> {
    let backends = match &config.backends_file {
        Some(path) => crate::compute::load_backend_configs(path)?,
        None => vec![BackendConfig::local("local", DEFAULT_LOCAL_SLOTS)],
    };
    let registry = Registry::from_configs(&backends, &config.data_dir.join("work")).map_err(|e| e.to_string())?;
    Manager::open(ManagerConfig::new(&config.data_dir, &config.catalog_dir), registry).map_err(|e| e.to_string())
}

/// Binds the listener, reports the bound address through `on_bound` and
/// serves until `shutdown` resolves.
pub async fn serve(
    config: ServiceConfig,
    on_bound: impl FnOnce(SocketAddr),
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), String> {
    let manager = build_manager(&config)?;
    let listener = tokio::net::TcpListener::bind(&config.listen)
        .await
        .map_err(|e| format!("cannot listen on {}: {e}", config.listen))?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    on_bound(addr);
    axum::serve(listener, router(manager, config.auth_token.clone()))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| e.to_string())
}
