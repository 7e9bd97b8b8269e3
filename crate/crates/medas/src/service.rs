//! HTTP service: pipelines, tasks, artifacts, datasets, studies, the tool
//! registry and validation, over on-disk JSON metadata.
//!
//! Data directory layout:
//!
//! ```text
//! <data>/store/            content-addressed artifacts
//! <data>/cache/ runs/      engine cache and run records
//! <data>/meta/tasks.json   every task, rewritten atomically on change
//! <data>/meta/pipelines/   one metadata file per stored pipeline
//! <data>/meta/scheduler_events.ndjson
//! <data>/meta/idempotency.json
//! <data>/studies/<id>/     study record and trials.csv
//! ```

use std::collections::BTreeMap;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Extension, Json, Router};
use medas_core::dataset::{DatasetItem, DatasetManifest};
use medas_core::graph::{PipelineGraph, ValidationReport};
use medas_core::hpo::Study;
use medas_core::scheduler::{
    Completion, FailureReason, Inventory, ResourceRequest, Scheduler, SchedulerError, Task, TaskId, TaskState,
};
use medas_core::{sha256_hex, MediaType, SemanticType};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::engine::{Engine, EngineError, RunOptions};
use crate::store::{atomic_write, sniff, StoreError};
use crate::study::{run_study, PipelineSource, StudyConfig, StudyRecord};
use crate::tools::Registry;

pub const DEFAULT_BIND_ADDR: &str = "127.0.0.1:8080";
pub const DEFAULT_PAGE_SIZE: usize = 100;
pub const MAX_PAGE_SIZE: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Account {
    pub account_id: String,
    pub token_sha256: String,
    pub quota: ResourceRequest,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TokensFile {
    pub accounts: Vec<Account>,
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub bind_addr: String,
    pub inventory: Inventory,
    pub accounts: Vec<Account>,
    /// Directory of extra external tool specs.
    pub tools_dir: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("CorruptMetadata: {path}: {reason}")]
    CorruptMetadata { path: PathBuf, reason: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn default_inventory() -> Inventory {
    let cores = std::thread::available_parallelism().map(|n| n.get() as u32).unwrap_or(1);
    Inventory::with_indexed_gpus(cores, 0, 16 * 1024)
}

impl ServiceConfig {
    /// Reads `MEDAS_DATA_DIR`, `MEDAS_BIND_ADDR`, `MEDAS_INVENTORY` (JSON)
    /// and `MEDAS_TOKENS_FILE`.
    pub fn from_env() -> Result<ServiceConfig, ServiceError> {
        let data_dir = std::env::var_os("MEDAS_DATA_DIR").map(PathBuf::from).unwrap_or_else(|| "medas-data".into());
        let bind_addr = std::env::var("MEDAS_BIND_ADDR").unwrap_or_else(|_| DEFAULT_BIND_ADDR.into());
        let inventory = match std::env::var("MEDAS_INVENTORY") {
            Ok(text) => serde_json::from_str(&text).map_err(|e| ServiceError::Config(format!("MEDAS_INVENTORY: {e}")))?,
            Err(_) => default_inventory(),
        };
        let accounts = match std::env::var_os("MEDAS_TOKENS_FILE") {
            Some(p) => load_tokens(Path::new(&p))?,
            None => Vec::new(),
        };
        Ok(ServiceConfig {
            data_dir,
            bind_addr,
            inventory,
            accounts,
            tools_dir: std::env::var_os("MEDAS_TOOLS_DIR").map(PathBuf::from),
        })
    }
}

pub fn load_tokens(path: &Path) -> Result<Vec<Account>, ServiceError> {
    let text = std::fs::read_to_string(path)?;
    let file: TokensFile =
        serde_json::from_str(&text).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
    Ok(file.accounts)
}

/// Account entry for a plain-text token.
pub fn account(account_id: &str, token: &str, quota: ResourceRequest) -> Account {
    Account {
        account_id: account_id.into(),
        token_sha256: sha256_hex(token.as_bytes()),
        quota,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredPipeline {
    pub pipeline_id: String,
    pub hash: String,
    pub owner: String,
    pub created_at: u64,
    /// Insertion sequence number, the tie-breaker for equal timestamps.
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub task: Task,
    pub pipeline_id: String,
    pub seed: u64,
    pub run_id: String,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct TasksFile {
    tasks: Vec<TaskEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IdempotentResponse {
    status: u16,
    body: serde_json::Value,
}

struct Inner {
    scheduler: Scheduler,
    entries: BTreeMap<TaskId, TaskEntry>,
    cancels: BTreeMap<TaskId, Arc<AtomicBool>>,
    pipelines: BTreeMap<String, StoredPipeline>,
    next_seq: u64,
    idempotency: BTreeMap<String, IdempotentResponse>,
    studies: BTreeMap<String, StudyMeta>,
    last_ts: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StudyMeta {
    owner: String,
    running: bool,
}

/// Shared service state. All scheduler mutations go through one mutex.
pub struct AppState {
    data_dir: PathBuf,
    engine: Engine,
    accounts: BTreeMap<String, Account>,
    inner: Mutex<Inner>,
    shutdown: AtomicBool,
}

fn now_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>, ServiceError> {
    match std::fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(|e| ServiceError::CorruptMetadata {
            path: path.into(),
            reason: e.to_string(),
        }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn meta_dir(data_dir: &Path) -> PathBuf {
    data_dir.join("meta")
}

/// Metadata files the service reads at startup.
fn metadata_files(data_dir: &Path) -> Vec<PathBuf> {
    let meta = meta_dir(data_dir);
    let mut files = vec![meta.join("tasks.json"), meta.join("idempotency.json")];
    for dir in [meta.join("pipelines")] {
        if let Ok(rd) = std::fs::read_dir(&dir) {
            let mut more: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).collect();
            more.sort();
            files.extend(more);
        }
    }
    if let Ok(rd) = std::fs::read_dir(data_dir.join("studies")) {
        let mut more: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path().join("study.json"))).collect();
        more.sort();
        files.extend(more);
    }
    files
}

/// Moves every unreadable metadata file to `<data>/quarantine/` and
/// returns the moved paths. Run while the service is stopped.
pub fn repair(data_dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let quarantine = data_dir.join("quarantine");
    let mut moved = Vec::new();
    for path in metadata_files(data_dir) {
        let Ok(bytes) = std::fs::read(&path) else { continue };
        if serde_json::from_slice::<serde_json::Value>(&bytes).is_ok() && typed_ok(&path, &bytes) {
            continue;
        }
        std::fs::create_dir_all(&quarantine)?;
        let rel = path.strip_prefix(data_dir).unwrap_or(&path).to_string_lossy().replace(['/', '\\'], "__");
        let dest = quarantine.join(format!("{rel}.{}", now_millis()));
        std::fs::rename(&path, &dest)?;
        moved.push(dest);
    }
    Ok(moved)
}

fn typed_ok(path: &Path, bytes: &[u8]) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    let parent = path.parent().and_then(|p| p.file_name()).and_then(|n| n.to_str()).unwrap_or("");
    match (parent, name) {
        (_, "tasks.json") => serde_json::from_slice::<TasksFile>(bytes).is_ok(),
        (_, "idempotency.json") => serde_json::from_slice::<BTreeMap<String, IdempotentResponse>>(bytes).is_ok(),
        ("pipelines", _) => serde_json::from_slice::<StoredPipeline>(bytes).is_ok(),
        (_, "study.json") => serde_json::from_slice::<StudyRecord>(bytes).is_ok(),
        _ => true,
    }
}

impl AppState {
    /// Loads or initializes the data directory. Tasks that were running when
    /// the previous process stopped become `Failed(Interrupted)` and queued
    /// successors are started.
    pub fn open(config: ServiceConfig) -> Result<Arc<AppState>, ServiceError> {
        let data_dir = config.data_dir.clone();
        let meta = meta_dir(&data_dir);
        std::fs::create_dir_all(meta.join("pipelines"))?;
        std::fs::create_dir_all(data_dir.join("studies"))?;
        config.inventory.check()?;
        let mut registry = Registry::builtin();
        if let Some(dir) = &config.tools_dir {
            registry.load_dir(dir).map_err(|e| ServiceError::Config(e.to_string()))?;
        }
        let engine = Engine::open(&data_dir, registry)?;

        let tasks: TasksFile = read_json(&meta.join("tasks.json"))?.unwrap_or_default();
        let idempotency: BTreeMap<String, IdempotentResponse> =
            read_json(&meta.join("idempotency.json"))?.unwrap_or_default();
        let mut pipelines = BTreeMap::new();
        for path in metadata_files(&data_dir).into_iter().filter(|p| p.parent() == Some(meta.join("pipelines").as_path())) {
            if let Some(p) = read_json::<StoredPipeline>(&path)? {
                pipelines.insert(p.pipeline_id.clone(), p);
            }
        }
        let mut studies = BTreeMap::new();
        for path in metadata_files(&data_dir).into_iter().filter(|p| p.ends_with("study.json")) {
            if let Some(rec) = read_json::<StudyRecord>(&path)? {
                studies.insert(
                    rec.study_id.clone(),
                    StudyMeta {
                        owner: rec.config.name.split('/').next().unwrap_or("").to_string(),
                        running: false,
                    },
                );
            }
        }
        for (id, m) in studies.iter_mut() {
            if let Ok(Some(owner)) = read_json::<StudyMeta>(&StudyRecord::dir(&data_dir, id).join("owner.json")) {
                m.owner = owner.owner;
            }
        }

        let accounts: BTreeMap<String, Account> =
            config.accounts.iter().map(|a| (a.account_id.clone(), a.clone())).collect();
        let quotas = accounts.iter().map(|(k, a)| (k.clone(), a.quota)).collect();
        let ts = now_millis();
        let (scheduler, interrupted, started) =
            Scheduler::restore(config.inventory.clone(), quotas, tasks.tasks.iter().map(|e| e.task.clone()).collect(), ts)?;
        let entries = tasks.tasks.into_iter().map(|e| (e.task.task_id, e)).collect();
        let next_seq = pipelines.values().map(|p: &StoredPipeline| p.seq + 1).max().unwrap_or(0);
        let state = Arc::new(AppState {
            data_dir,
            engine,
            accounts,
            inner: Mutex::new(Inner {
                scheduler,
                entries,
                cancels: BTreeMap::new(),
                pipelines,
                next_seq,
                idempotency,
                studies,
                last_ts: ts,
            }),
            shutdown: AtomicBool::new(false),
        });
        {
            let mut inner = state.inner.lock().expect("state lock");
            for id in &interrupted {
                eprintln!("task {id} was running at shutdown; marked Failed(Interrupted)");
            }
            state.sync_entries(&mut inner);
            state.persist_tasks(&mut inner)?;
            for id in started {
                state.spawn_task(&mut inner, id);
            }
        }
        Ok(state)
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    fn tick(inner: &mut Inner) -> u64 {
        inner.last_ts = now_millis().max(inner.last_ts + 1);
        inner.last_ts
    }

    fn authenticate(&self, headers: &HeaderMap) -> Option<String> {
        let value = headers.get(header::AUTHORIZATION)?.to_str().ok()?;
        let token = value.strip_prefix("Bearer ")?;
        let digest = sha256_hex(token.as_bytes());
        self.accounts.values().find(|a| a.token_sha256 == digest).map(|a| a.account_id.clone())
    }

    fn sync_entries(&self, inner: &mut Inner) {
        let Inner { scheduler, entries, .. } = inner;
        for (id, e) in entries.iter_mut() {
            if let Some(t) = scheduler.task(*id) {
                e.task = t.clone();
            }
        }
    }

    fn persist_tasks(&self, inner: &mut Inner) -> Result<(), ServiceError> {
        self.sync_entries(inner);
        let meta = meta_dir(&self.data_dir);
        let file = TasksFile {
            tasks: inner.entries.values().cloned().collect(),
        };
        atomic_write(&meta.join("tasks.json"), &serde_json::to_vec_pretty(&file).expect("tasks serialize"))?;
        let events = inner.scheduler.drain_events();
        if !events.is_empty() {
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(meta.join("scheduler_events.ndjson"))?;
            let mut buf = String::new();
            for e in events {
                buf.push_str(&serde_json::to_string(&e).expect("event serializes"));
                buf.push('\n');
            }
            f.write_all(buf.as_bytes())?;
        }
        Ok(())
    }

    fn spawn_task(self: &Arc<Self>, inner: &mut Inner, id: TaskId) {
        let Some(entry) = inner.entries.get(&id).cloned() else { return };
        let TaskState::Running(alloc) = &entry.task.state else { return };
        let cancel = Arc::new(AtomicBool::new(false));
        inner.cancels.insert(id, cancel.clone());
        let opts = RunOptions {
            max_workers: (alloc.request.cpu_cores as usize).max(1),
            seed: entry.seed,
            run_id: Some(entry.run_id.clone()),
            gpu_ids: alloc.gpu_ids.clone(),
            cancel,
            ..RunOptions::default()
        };
        let state = Arc::clone(self);
        std::thread::spawn(move || {
            let outcome = state.load_pipeline(&entry.pipeline_id).map_err(|e| e.message).and_then(|g| {
                state.engine.execute(&g, &opts).map_err(|e| e.to_string())
            });
            let completion = match outcome {
                Ok(r) if r.is_success() => Completion::Succeeded,
                Ok(r) => Completion::Failed(FailureReason::Execution(
                    r.nodes
                        .iter()
                        .find_map(|(id, n)| n.error.as_ref().map(|e| format!("{id}: {e}")))
                        .unwrap_or_else(|| format!("run {:?}", r.status)),
                )),
                Err(e) => Completion::Failed(FailureReason::Execution(e)),
            };
            state.complete(id, completion);
        });
    }

    fn complete(self: &Arc<Self>, id: TaskId, completion: Completion) {
        if self.shutdown.load(Ordering::SeqCst) {
            return;
        }
        let mut inner = self.inner.lock().expect("state lock");
        inner.cancels.remove(&id);
        let ts = Self::tick(&mut inner);
        let Ok(started) = inner.scheduler.on_completion(id, completion, ts) else {
            return;
        };
        if let Err(e) = self.persist_tasks(&mut inner) {
            eprintln!("failed to persist tasks: {e}");
        }
        for s in started {
            self.spawn_task(&mut inner, s);
        }
    }

    fn load_pipeline(&self, id: &str) -> Result<PipelineGraph, ApiError> {
        let body = self.pipeline_body(id)?;
        PipelineGraph::from_json(std::str::from_utf8(&body).unwrap_or(""))
            .map_err(|e| ApiError::internal(format!("CorruptMetadata: pipeline {id}: {e}")))
    }

    fn pipeline_body(&self, id: &str) -> Result<Vec<u8>, ApiError> {
        let hash = {
            let inner = self.inner.lock().expect("state lock");
            inner.pipelines.get(id).map(|p| p.hash.clone()).ok_or_else(|| ApiError::not_found("pipeline", id))?
        };
        self.engine.store().get_hash(&hash).map_err(ApiError::from)
    }

    /// Stops accepting completions from running tasks, as if the process
    /// had died. Used by tests that simulate a restart in-process.
    pub fn abandon(&self) {
        self.shutdown.store(true, Ordering::SeqCst);
        let inner = self.inner.lock().expect("state lock");
        for c in inner.cancels.values() {
            c.store(true, Ordering::SeqCst);
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub body: Option<serde_json::Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> ApiError {
        ApiError {
            status,
            code,
            message: message.into(),
            body: None,
        }
    }

    fn bad_request(message: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }

    fn not_found(kind: &str, id: &str) -> ApiError {
        ApiError::new(StatusCode::NOT_FOUND, "NotFound", format!("unknown {kind} {id}"))
    }

    fn internal(message: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message)
    }

    fn invalid(report: ValidationReport) -> ApiError {
        ApiError {
            body: Some(json!({ "error": "ValidationFailed", "diagnostics": report.diagnostics })),
            ..ApiError::new(StatusCode::BAD_REQUEST, "ValidationFailed", "pipeline is invalid")
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> ApiError {
        match e {
            StoreError::NotFound(h) => ApiError::not_found("artifact", &h),
            other => ApiError::internal(other.to_string()),
        }
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> ApiError {
        ApiError::internal(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = self
            .body
            .unwrap_or_else(|| json!({ "error": self.code, "message": self.message }));
        (self.status, Json(body)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

#[derive(Clone)]
struct Caller(String);

async fn auth(State(state): State<Arc<AppState>>, mut req: Request, next: Next) -> Response {
    match state.authenticate(req.headers()) {
        Some(account) => {
            req.extensions_mut().insert(Caller(account));
            next.run(req).await
        }
        None => ApiError::new(StatusCode::UNAUTHORIZED, "Unauthorized", "missing or invalid token").into_response(),
    }
}

/// Builds the route table.
pub fn router(state: Arc<AppState>) -> Router {
    let protected = Router::new()
        .route("/v1/tools", get(list_tools))
        .route("/v1/validate", post(validate))
        .route("/v1/pipelines", post(create_pipeline).get(list_pipelines))
        .route("/v1/pipelines/{id}", get(get_pipeline))
        .route("/v1/tasks", post(create_task).get(list_tasks))
        .route("/v1/tasks/{id}", get(get_task))
        .route("/v1/tasks/{id}/logs", get(task_logs))
        .route("/v1/tasks/{id}/kill", post(kill_task))
        .route("/v1/artifacts/{hash}", get(get_artifact))
        .route("/v1/datasets", post(upload_dataset))
        .route("/v1/studies", post(create_study))
        .route("/v1/studies/{id}", get(get_study))
        .route("/v1/studies/{id}/trials", get(study_trials))
        .route_layer(middleware::from_fn_with_state(state.clone(), auth));
    Router::new()
        .route("/v1/health", get(health))
        .merge(protected)
        .layer(DefaultBodyLimit::max(512 * 1024 * 1024))
        .with_state(state)
}

/// Every authenticated route as (method, path template).
pub const PROTECTED_ROUTES: &[(&str, &str)] = &[
    ("GET", "/v1/tools"),
    ("POST", "/v1/validate"),
    ("POST", "/v1/pipelines"),
    ("GET", "/v1/pipelines"),
    ("GET", "/v1/pipelines/{id}"),
    ("POST", "/v1/tasks"),
    ("GET", "/v1/tasks"),
    ("GET", "/v1/tasks/{id}"),
    ("GET", "/v1/tasks/{id}/logs"),
    ("POST", "/v1/tasks/{id}/kill"),
    ("GET", "/v1/artifacts/{hash}"),
    ("POST", "/v1/datasets"),
    ("POST", "/v1/studies"),
    ("GET", "/v1/studies/{id}"),
    ("GET", "/v1/studies/{id}/trials"),
];

/// Binds and serves until ctrl-c. The bound address is written to
/// `<data>/server.addr`.
pub async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let bind = config.bind_addr.clone();
    let state = AppState::open(config)?;
    let listener = tokio::net::TcpListener::bind(&bind).await?;
    let addr: SocketAddr = listener.local_addr()?;
    atomic_write(&state.data_dir().join("server.addr"), addr.to_string().as_bytes())?;
    eprintln!("medas service listening on http://{addr}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

fn idem_key(headers: &HeaderMap, account: &str, route: &str) -> Option<String> {
    let key = headers.get("idempotency-key")?.to_str().ok()?;
    Some(format!("{account}\n{route}\n{key}"))
}

fn replay(state: &AppState, key: &Option<String>) -> Option<Response> {
    let key = key.as_ref()?;
    let inner = state.inner.lock().expect("state lock");
    let r = inner.idempotency.get(key)?;
    Some((StatusCode::from_u16(r.status).unwrap_or(StatusCode::OK), Json(r.body.clone())).into_response())
}

fn remember(state: &AppState, inner: &mut Inner, key: &Option<String>, status: StatusCode, body: &serde_json::Value) {
    if let Some(k) = key {
        inner.idempotency.insert(
            k.clone(),
            IdempotentResponse {
                status: status.as_u16(),
                body: body.clone(),
            },
        );
        let path = meta_dir(&state.data_dir).join("idempotency.json");
        if let Err(e) = atomic_write(&path, &serde_json::to_vec(&inner.idempotency).expect("map serializes")) {
            eprintln!("failed to persist idempotency keys: {e}");
        }
    }
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn list_tools(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let tools: Vec<_> = state.engine.registry().catalog().iter().collect();
    let accepts: BTreeMap<&str, Vec<&str>> = SemanticType::ALL
        .iter()
        .map(|t| {
            (
                t.name(),
                SemanticType::ALL.iter().filter(|f| t.accepts(**f)).map(|f| f.name()).collect(),
            )
        })
        .collect();
    Json(json!({ "tools": tools, "lattice": { "version": 1, "accepts": accepts } }))
}

fn parse_pipeline(body: &[u8]) -> Result<PipelineGraph, ApiError> {
    let text = std::str::from_utf8(body).map_err(|_| ApiError::bad_request("body is not UTF-8"))?;
    PipelineGraph::from_json(text).map_err(|e| ApiError::bad_request(e.to_string()))
}

async fn validate(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let g = parse_pipeline(&body)?;
    let report = state.engine.validate(&g);
    let status = if report.is_ok() { StatusCode::OK } else { StatusCode::BAD_REQUEST };
    Ok((status, Json(json!({ "ok": report.is_ok(), "diagnostics": report.diagnostics }))).into_response())
}

async fn create_pipeline(
    State(state): State<Arc<AppState>>,
    Extension(Caller(account)): Extension<Caller>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let key = idem_key(&headers, &account, "POST /v1/pipelines");
    if let Some(r) = replay(&state, &key) {
        return Ok(r);
    }
    let g = parse_pipeline(&body)?;
    let report = state.engine.validate(&g);
    if !report.is_ok() {
        return Err(ApiError::invalid(report));
    }
    let canonical = g.to_canonical_json();
    let r = state.engine.store().put(canonical.as_bytes(), MediaType::JSON)?;
    let mut inner = state.inner.lock().expect("state lock");
    let stored = StoredPipeline {
        pipeline_id: format!("p-{}", uuid::Uuid::new_v4().simple()),
        hash: r.hash,
        owner: account,
        created_at: now_millis(),
        seq: inner.next_seq,
    };
    inner.next_seq += 1;
    let path = meta_dir(&state.data_dir).join("pipelines").join(format!("{}.json", stored.pipeline_id));
    atomic_write(&path, &serde_json::to_vec_pretty(&stored).expect("pipeline meta serializes"))
        .map_err(|e| ApiError::internal(e.to_string()))?;
    inner.pipelines.insert(stored.pipeline_id.clone(), stored.clone());
    let body = serde_json::to_value(&stored).expect("serializes");
    remember(&state, &mut inner, &key, StatusCode::CREATED, &body);
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

#[derive(Deserialize)]
struct Page {
    offset: Option<usize>,
    limit: Option<usize>,
}

async fn list_pipelines(
    State(state): State<Arc<AppState>>,
    Extension(Caller(account)): Extension<Caller>,
    Query(page): Query<Page>,
) -> Json<serde_json::Value> {
    let inner = state.inner.lock().expect("state lock");
    let mut all: Vec<&StoredPipeline> = inner.pipelines.values().filter(|p| p.owner == account).collect();
    all.sort_by(|a, b| (a.created_at, a.seq, &a.pipeline_id).cmp(&(b.created_at, b.seq, &b.pipeline_id)));
    let offset = page.offset.unwrap_or(0);
    let limit = page.limit.unwrap_or(DEFAULT_PAGE_SIZE).clamp(1, MAX_PAGE_SIZE);
    let items: Vec<&StoredPipeline> = all.iter().skip(offset).take(limit).copied().collect();
    let next = (offset + items.len() < all.len()).then_some(offset + items.len());
    Json(json!({ "pipelines": items, "total": all.len(), "next_offset": next }))
}

async fn get_pipeline(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let body = state.pipeline_body(&id)?;
    let hash = sha256_hex(&body);
    let g = PipelineGraph::from_json(std::str::from_utf8(&body).unwrap_or(""))
        .map_err(|e| ApiError::internal(format!("CorruptMetadata: {e}")))?;
    let valid = state.engine.validate(&g).is_ok();
    Ok((
        [
            (header::CONTENT_TYPE, "application/json".to_string()),
            (header::HeaderName::from_static("x-content-hash"), hash),
            (header::HeaderName::from_static("x-validation"), if valid { "ok" } else { "failed" }.to_string()),
        ],
        body,
    )
        .into_response())
}

#[derive(Deserialize)]
struct TaskRequest {
    pipeline_id: String,
    #[serde(default)]
    request: ResourceRequest,
    #[serde(default)]
    seed: u64,
}

fn task_view(state: &AppState, entry: &TaskEntry) -> serde_json::Value {
    let nodes = state
        .engine
        .load_record(&entry.run_id)
        .map(|r| serde_json::to_value(&r.nodes).expect("nodes serialize"))
        .unwrap_or_else(|_| json!({}));
    json!({
        "task": entry.task,
        "pipeline_id": entry.pipeline_id,
        "seed": entry.seed,
        "run_id": entry.run_id,
        "nodes": nodes,
    })
}

async fn create_task(
    State(state): State<Arc<AppState>>,
    Extension(Caller(account)): Extension<Caller>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let req: TaskRequest = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let key = headers.get("idempotency-key").and_then(|v| v.to_str().ok()).map(String::from);
    let status_of = |t: &Task| match t.state {
        TaskState::Failed(FailureReason::Unsatisfiable) => StatusCode::UNPROCESSABLE_ENTITY,
        _ => StatusCode::CREATED,
    };
    {
        let inner = state.inner.lock().expect("state lock");
        if let Some(k) = &key {
            if let Some(e) = inner
                .entries
                .values()
                .find(|e| e.task.account == account && e.idempotency_key.as_deref() == Some(k))
            {
                return Ok((status_of(&e.task), Json(task_view(&state, e))).into_response());
            }
        }
    }
    let g = state.load_pipeline(&req.pipeline_id)?;
    let report = state.engine.validate(&g);
    if !report.is_ok() {
        return Err(ApiError::invalid(report));
    }
    let mut inner = state.inner.lock().expect("state lock");
    let ts = AppState::tick(&mut inner);
    let id = inner
        .scheduler
        .submit(&account, &g.content_hash(), req.request, ts)
        .map_err(|e| ApiError::new(StatusCode::FORBIDDEN, "UnknownAccount", e.to_string()))?;
    let entry = TaskEntry {
        task: inner.scheduler.task(id).expect("just submitted").clone(),
        pipeline_id: req.pipeline_id,
        seed: req.seed,
        run_id: format!("task-{id}"),
        idempotency_key: key,
    };
    inner.entries.insert(id, entry);
    state.persist_tasks(&mut inner)?;
    state.spawn_task(&mut inner, id);
    let entry = inner.entries[&id].clone();
    Ok((status_of(&entry.task), Json(task_view(&state, &entry))).into_response())
}

async fn list_tasks(
    State(state): State<Arc<AppState>>,
    Extension(Caller(account)): Extension<Caller>,
) -> Json<serde_json::Value> {
    let inner = state.inner.lock().expect("state lock");
    let tasks: Vec<&Task> = inner.scheduler.tasks().filter(|t| t.account == account).collect();
    Json(json!({ "tasks": tasks }))
}

fn parse_task_id(id: &str) -> Result<TaskId, ApiError> {
    id.parse().map_err(|_| ApiError::not_found("task", id))
}

fn owned_entry(state: &AppState, account: &str, id: &str) -> Result<TaskEntry, ApiError> {
    let tid = parse_task_id(id)?;
    let mut inner = state.inner.lock().expect("state lock");
    state.sync_entries(&mut inner);
    inner
        .entries
        .get(&tid)
        .filter(|e| e.task.account == account)
        .cloned()
        .ok_or_else(|| ApiError::not_found("task", id))
}

async fn get_task(
    State(state): State<Arc<AppState>>,
    Extension(Caller(account)): Extension<Caller>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult {
    let entry = owned_entry(&state, &account, &id)?;
    Ok(Json(task_view(&state, &entry)).into_response())
}

#[derive(Deserialize)]
struct LogQuery {
    follow: Option<String>,
}

async fn task_logs(
    State(state): State<Arc<AppState>>,
    Extension(Caller(account)): Extension<Caller>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<LogQuery>,
) -> ApiResult {
    let entry = owned_entry(&state, &account, &id)?;
    let follow = matches!(q.follow.as_deref(), Some("1") | Some("true"));
    let path = state.engine.log_path(&entry.run_id);
    let tid = entry.task.task_id;
    let stream = futures::stream::unfold((0u64, false), move |(offset, done)| {
        let path = path.clone();
        let state = state.clone();
        async move {
            if done {
                return None;
            }
            loop {
                let terminal = {
                    let inner = state.inner.lock().expect("state lock");
                    inner.scheduler.task(tid).is_none_or(|t| t.state.is_terminal())
                };
                let chunk = read_complete_lines(&path, offset);
                if !chunk.is_empty() {
                    let next = offset + chunk.len() as u64;
                    return Some((Ok::<_, std::io::Error>(Bytes::from(chunk)), (next, false)));
                }
                if !follow || terminal {
                    return None;
                }
                tokio::time::sleep(Duration::from_millis(50)).await;
            }
        }
    });
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], Body::from_stream(stream)).into_response())
}

/// Bytes of whole lines past `offset`.
fn read_complete_lines(path: &Path, offset: u64) -> Vec<u8> {
    let Ok(bytes) = std::fs::read(path) else { return Vec::new() };
    let start = (offset as usize).min(bytes.len());
    let rest = &bytes[start..];
    match rest.iter().rposition(|b| *b == b'\n') {
        Some(i) => rest[..=i].to_vec(),
        None => Vec::new(),
    }
}

async fn kill_task(
    State(state): State<Arc<AppState>>,
    Extension(Caller(account)): Extension<Caller>,
    headers: HeaderMap,
    UrlPath(id): UrlPath<String>,
) -> ApiResult {
    let key = idem_key(&headers, &account, &format!("POST /v1/tasks/{id}/kill"));
    if let Some(r) = replay(&state, &key) {
        return Ok(r);
    }
    owned_entry(&state, &account, &id)?;
    let tid = parse_task_id(&id)?;
    let mut inner = state.inner.lock().expect("state lock");
    let ts = AppState::tick(&mut inner);
    let started = inner.scheduler.kill(tid, ts).map_err(|e| match e {
        SchedulerError::AlreadyTerminal(_) => ApiError::new(StatusCode::CONFLICT, "AlreadyTerminal", e.to_string()),
        other => ApiError::not_found("task", &other.to_string()),
    })?;
    if let Some(c) = inner.cancels.remove(&tid) {
        c.store(true, Ordering::SeqCst);
    }
    state.persist_tasks(&mut inner)?;
    for s in started {
        state.spawn_task(&mut inner, s);
    }
    let entry = inner.entries[&tid].clone();
    let body = task_view(&state, &entry);
    remember(&state, &mut inner, &key, StatusCode::OK, &body);
    Ok(Json(body).into_response())
}

async fn get_artifact(State(state): State<Arc<AppState>>, UrlPath(hash): UrlPath<String>) -> ApiResult {
    let r = state.engine.store().lookup(&hash)?;
    let bytes = state.engine.store().get(&r)?;
    Ok(([(header::CONTENT_TYPE, r.media.mime())], bytes).into_response())
}

async fn upload_dataset(
    State(state): State<Arc<AppState>>,
    Extension(Caller(account)): Extension<Caller>,
    headers: HeaderMap,
    mut multipart: Multipart,
) -> ApiResult {
    let key = idem_key(&headers, &account, "POST /v1/datasets");
    if let Some(r) = replay(&state, &key) {
        return Ok(r);
    }
    let mut items: BTreeMap<String, DatasetItem> = BTreeMap::new();
    while let Some(field) = multipart.next_field().await.map_err(|e| ApiError::bad_request(e.to_string()))? {
        let name = field.name().unwrap_or_default().to_string();
        let (item_id, role) = name
            .split_once('/')
            .filter(|(i, r)| !i.is_empty() && !r.is_empty())
            .ok_or_else(|| ApiError::bad_request(format!("field {name:?} is not <item_id>/<role>")))?;
        let (item_id, role) = (item_id.to_string(), role.to_string());
        let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.to_string()))?;
        let media = sniff(&bytes);
        if !matches!(media, MediaType::MDTensor | MediaType::PNG) {
            return Err(ApiError::bad_request(format!("{name}: expected an MDT1 tensor or PNG")));
        }
        let r = state.engine.store().put(&bytes, media)?;
        if media == MediaType::MDTensor {
            state.engine.store().get_tensor(&r).map_err(|e| ApiError::bad_request(format!("{name}: {e}")))?;
        }
        items
            .entry(item_id.clone())
            .or_insert_with(|| DatasetItem {
                item_id,
                roles: BTreeMap::new(),
            })
            .roles
            .insert(role, r);
    }
    let manifest = DatasetManifest {
        items: items.into_values().collect(),
    };
    if manifest.is_empty() {
        return Err(ApiError::bad_request("no dataset fields"));
    }
    manifest.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
    let r = state.engine.store().put_dataset(&manifest)?;
    let body = json!({ "dataset": r, "items": manifest.len() });
    let mut inner = state.inner.lock().expect("state lock");
    remember(&state, &mut inner, &key, StatusCode::CREATED, &body);
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

fn study_summary(rec: &StudyRecord, running: bool) -> serde_json::Value {
    json!({
        "study_id": rec.study_id,
        "name": rec.config.name,
        "state": if running { "running" } else if rec.study.is_closed() { "completed" } else { "stopped" },
        "trials": rec.study.trials,
        "best": rec.study.best(),
        "running_best": rec.study.running_best(),
        "runs": rec.runs,
    })
}

async fn create_study(
    State(state): State<Arc<AppState>>,
    Extension(Caller(account)): Extension<Caller>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let key = idem_key(&headers, &account, "POST /v1/studies");
    if let Some(r) = replay(&state, &key) {
        return Ok(r);
    }
    let mut config: StudyConfig = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    if let PipelineSource::Path(id) = &config.pipeline {
        let g = state.load_pipeline(&id.to_string_lossy())?;
        config.pipeline = PipelineSource::Inline(serde_json::from_str(&g.to_canonical_json()).expect("canonical JSON"));
    }
    config.check(&state.engine).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let space = config.search_space().map_err(|e| ApiError::bad_request(e.to_string()))?;
    let mut record = StudyRecord {
        study_id: format!("s-{}", uuid::Uuid::new_v4().simple()),
        study: Study::new(space, config.settings()),
        config,
        runs: Vec::new(),
    };
    record.save(&state.data_dir).map_err(|e| ApiError::internal(e.to_string()))?;
    let meta = StudyMeta {
        owner: account,
        running: true,
    };
    atomic_write(
        &StudyRecord::dir(&state.data_dir, &record.study_id).join("owner.json"),
        &serde_json::to_vec(&meta).expect("serializes"),
    )
    .map_err(|e| ApiError::internal(e.to_string()))?;
    let body = json!({ "study_id": record.study_id });
    {
        let mut inner = state.inner.lock().expect("state lock");
        inner.studies.insert(record.study_id.clone(), meta);
        remember(&state, &mut inner, &key, StatusCode::CREATED, &body);
    }
    let worker = state.clone();
    std::thread::spawn(move || {
        let id = record.study_id.clone();
        if let Err(e) = run_study(&worker.engine, &mut record, &RunOptions::default(), |_| {}) {
            eprintln!("study {id} stopped: {e}");
        }
        let mut inner = worker.inner.lock().expect("state lock");
        if let Some(m) = inner.studies.get_mut(&id) {
            m.running = false;
        }
    });
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

fn owned_study(state: &AppState, account: &str, id: &str) -> Result<(StudyRecord, bool), ApiError> {
    let running = {
        let inner = state.inner.lock().expect("state lock");
        let m = inner
            .studies
            .get(id)
            .filter(|m| m.owner == account)
            .ok_or_else(|| ApiError::not_found("study", id))?;
        m.running
    };
    let rec = StudyRecord::load(&state.data_dir, id).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok((rec, running))
}

async fn get_study(
    State(state): State<Arc<AppState>>,
    Extension(Caller(account)): Extension<Caller>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult {
    let (rec, running) = owned_study(&state, &account, &id)?;
    Ok(Json(study_summary(&rec, running)).into_response())
}

async fn study_trials(
    State(state): State<Arc<AppState>>,
    Extension(Caller(account)): Extension<Caller>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult {
    let (rec, _) = owned_study(&state, &account, &id)?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], rec.trials_csv()).into_response())
}
