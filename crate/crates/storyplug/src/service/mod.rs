//! HTTP service: plugin library, training and generation jobs, stories.
//!
//! | method | path | result |
//! |---|---|---|
//! | POST | `/plugins` | multipart field `file` (.cgcp); 201 metadata, 400 invalid, 409 duplicate name |
//! | GET | `/plugins`, `/plugins/{name}` | metadata |
//! | POST | `/jobs/train` | [`TrainBody`]; 202 job |
//! | POST | `/jobs/frame` | [`FrameBody`]; 202 job, 422 schema violation |
//! | GET | `/jobs/{id}` | job |
//! | GET | `/jobs/{id}/image`, `/jobs/{id}/diagnostics` | PNG / JSON; 409 until done |
//! | POST | `/stories` | story script; 201 `{id, title, frames}` |
//! | GET | `/stories/{id}` | the stored script |
//! | POST | `/jobs/story` | [`StoryJobBody`]; 202 job |
//! | GET | `/stories/{id}/frames` | manifest; 409 until rendered |
//! | GET | `/stories/{id}/frames/{frame}` | PNG |
//!
//! Errors are `{"error": {"code", "message"}}`, plus `field` and `line` for
//! schema violations.

pub mod store;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{Multipart, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use storyplug_core::finetune::{FineTuneConfig, StepRecord, TrainObserver};
use storyplug_core::inference::{check_request, generate_frame, EditSchedule, LayoutSpec};
use storyplug_core::plugin::{self, PluginMetadata};
use storyplug_core::{Backend, CharacterPlugin, GenerationRequest, ToyBackend};
use tokio::sync::Semaphore;

use crate::error::Error;
use crate::io;
use crate::pipeline;
use crate::story::{self, DiagnosticsFile, FrameSpec, SchemaViolation, StoryScript, SCHEMA_VERSION};
use store::{Job, JobKind, JobState, PluginEntry, Store, StoryEntry};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub root: PathBuf,
    /// Jobs that may run at once.
    pub workers: usize,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    backend: Arc<ToyBackend>,
    store: Mutex<Store>,
    permits: Arc<Semaphore>,
}

impl AppState {
    pub fn open(backend: ToyBackend, config: &ServiceConfig) -> crate::Result<Self> {
        let store = Store::open(&config.root)?;
        Ok(Self {
            inner: Arc::new(Inner {
                backend: Arc::new(backend),
                store: Mutex::new(store),
                permits: Arc::new(Semaphore::new(config.workers.max(1))),
            }),
        })
    }

    fn store(&self) -> MutexGuard<'_, Store> {
        self.inner.store.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn job(&self, id: &str) -> Option<Job> {
        self.store().index.jobs.get(id).cloned()
    }

    /// Recomputes a frame job's request hash from its stored inputs.
    pub fn verify_frame_job(&self, id: &str) -> Result<bool, ApiError> {
        let (_, hash, expected) = self.stored_frame_request(id)?;
        Ok(hash == expected)
    }

    /// The request rebuilt from a frame job's stored body, its hash, and the
    /// hash recorded at submission.
    fn stored_frame_request(&self, id: &str) -> Result<(GenerationRequest, String, String), ApiError> {
        let job = self.job(id).ok_or_else(|| ApiError::not_found("job", id))?;
        let (Some(body_ref), Some(expected)) = (job.request_ref, job.request_hash) else {
            return Err(ApiError::new(StatusCode::CONFLICT, "not_a_frame_job", format!("job `{id}` has no request")));
        };
        let stored = self.store().get(&body_ref)?;
        let body: FrameBody =
            serde_json::from_slice(&stored).map_err(|e| ApiError::internal(format!("stored request: {e}")))?;
        let (request, hash) = self.frame_inputs(&body)?;
        Ok((request, hash, expected))
    }

    fn plugins(&self, names: &[String]) -> Result<BTreeMap<String, CharacterPlugin>, ApiError> {
        let store = self.store();
        let mut out = BTreeMap::new();
        for name in names {
            if let Some(entry) = store.index.plugins.get(name) {
                let bytes = store.get(&entry.object)?;
                out.insert(name.clone(), plugin::deserialize(&bytes).map_err(Error::from)?);
            }
        }
        Ok(out)
    }

    fn frame_inputs(&self, body: &FrameBody) -> Result<(GenerationRequest, String), ApiError> {
        let script = body.as_script();
        script.check(&[]).map_err(|v| ApiError::schema(strip_frame_prefix(v)))?;
        let plugins = self.plugins(&body.characters)?;
        let request = story::frame_request(&script, &script.frames[0], &plugins)?;
        let hash = story::request_hash(&self.inner.backend.descriptor().backend_id, &request);
        Ok((request, hash))
    }

    fn update_job(&self, id: &str, f: impl FnOnce(&mut Job) -> crate::Result<()>) -> crate::Result<Job> {
        self.store().update_job(id, f)
    }

    fn fail(&self, id: &str, message: String) {
        let _ = self.update_job(id, |j| {
            if !j.state.is_terminal() {
                j.state = JobState::Failed;
                j.error_detail = Some(message);
            }
            Ok(())
        });
    }

    /// Queues `work` behind the worker pool. The closure runs on a blocking
    /// thread and returns the job's result object plus named artifacts.
    fn spawn<F>(&self, id: String, work: F)
    where
        F: FnOnce(&AppState) -> crate::Result<(String, BTreeMap<String, String>)> + Send + 'static,
    {
        let state = self.clone();
        tokio::spawn(async move {
            let Ok(_permit) = state.inner.permits.clone().acquire_owned().await else {
                state.fail(&id, "worker pool closed".into());
                return;
            };
            if let Err(e) = state.update_job(&id, |j| j.transition(JobState::Running)) {
                state.fail(&id, e.to_string());
                return;
            }
            let worker_state = state.clone();
            let outcome = tokio::task::spawn_blocking(move || work(&worker_state)).await;
            match outcome {
                Ok(Ok((result, artifacts))) => {
                    let done = state.update_job(&id, |j| {
                        j.result_ref = Some(result);
                        j.artifacts = artifacts;
                        j.transition(JobState::Done)
                    });
                    if let Err(e) = done {
                        state.fail(&id, e.to_string());
                    }
                }
                Ok(Err(e)) => state.fail(&id, format!("{}: {e}", e.code())),
                Err(e) => state.fail(&id, format!("worker panicked: {e}")),
            }
        });
    }
}

/// Error response with a status and the JSON error body.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: String,
    message: String,
    field: Option<String>,
    line: Option<usize>,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, code: code.into(), message: message.into(), field: None, line: None }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("no {what} `{id}`"))
    }

    fn internal(message: String) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    fn schema(v: SchemaViolation) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            code: "schema_violation".into(),
            message: v.message,
            field: Some(v.field),
            line: v.line,
        }
    }

    pub fn status(&self) -> StatusCode {
        self.status
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Schema(v) => return Self::schema(v.clone()),
            Error::PluginFormat(_) | Error::PluginInvalid { .. } | Error::Usage(_) => StatusCode::BAD_REQUEST,
            Error::Io { .. } | Error::Image { .. } | Error::Json { .. } | Error::Checkpoint(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self::new(status, e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "code": self.code, "message": self.message });
        if let Some(f) = self.field {
            body["field"] = json!(f);
        }
        if let Some(l) = self.line {
            body["line"] = json!(l);
        }
        (self.status, Json(json!({ "error": body }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> ApiResult<T> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let line = e.inner().line();
        ApiError::schema(SchemaViolation { line: Some(line), field, message: e.into_inner().to_string() })
    })
}

fn strip_frame_prefix(mut v: SchemaViolation) -> SchemaViolation {
    if let Some(rest) = v.field.strip_prefix("frames[0].") {
        v.field = rest.into();
    }
    v
}

/// One frame to render, with characters named by plugin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameBody {
    pub prompt: String,
    #[serde(default)]
    pub characters: Vec<String>,
    #[serde(default)]
    pub layout: LayoutSpec,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<EditSchedule>,
}

impl FrameBody {
    fn as_script(&self) -> StoryScript {
        StoryScript {
            schema_version: SCHEMA_VERSION,
            title: String::new(),
            style_suffix: None,
            steps: None,
            guidance_scale: None,
            schedule: None,
            frames: vec![FrameSpec {
                id: "frame".into(),
                prompt: self.prompt.clone(),
                characters: self.characters.clone(),
                layout: self.layout.clone(),
                seed: self.seed,
                steps: self.steps,
                guidance_scale: self.guidance_scale,
                schedule: self.schedule,
            }],
        }
    }
}

/// Fine-tune on a dataset directory on the server. Unset config fields take
/// the backend defaults; `plugin_name` also extracts and registers a plugin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBody {
    pub dataset: PathBuf,
    pub class_noun: String,
    pub seed: u64,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub plugin_name: Option<String>,
}

impl TrainBody {
    pub fn config(&self) -> FineTuneConfig {
        let d = FineTuneConfig::default();
        FineTuneConfig {
            lambda: self.lambda.unwrap_or(d.lambda),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            steps: self.steps.unwrap_or(d.steps),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            seed: self.seed,
            ..d
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoryJobBody {
    pub story_id: String,
    /// Frame-level threads inside the one job worker.
    #[serde(default = "one")]
    pub workers: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginInfo {
    #[serde(flatten)]
    pub metadata: PluginMetadata,
    pub rows: usize,
    pub width: usize,
    pub sha256: String,
}

impl PluginInfo {
    fn from_entry(e: &PluginEntry) -> Self {
        Self { metadata: e.metadata.clone(), rows: e.rows, width: e.width, sha256: e.object.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryInfo {
    pub id: String,
    pub title: String,
    pub frames: usize,
    pub warnings: Vec<String>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(json!({ "status": "ok" })) }))
        .route("/plugins", post(upload_plugin).get(list_plugins))
        .route("/plugins/{name}", get(get_plugin))
        .route("/jobs/train", post(submit_train))
        .route("/jobs/frame", post(submit_frame))
        .route("/jobs/story", post(submit_story_job))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/image", get(job_image))
        .route("/jobs/{id}/diagnostics", get(job_diagnostics))
        .route("/stories", post(create_story))
        .route("/stories/{id}", get(get_story))
        .route("/stories/{id}/frames", get(story_frames))
        .route("/stories/{id}/frames/{frame}", get(story_frame_image))
        .with_state(state)
}

/// Runs the service until ctrl-c.
pub async fn serve(state: AppState, addr: &str) -> crate::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Error::io(PathBuf::from(addr), e))?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io(PathBuf::from(addr), e))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

fn json_bytes(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

async fn upload_plugin(
    State(state): State<AppState>,
    mut multipart: Multipart,
) -> ApiResult<(StatusCode, Json<PluginInfo>)> {
    let mut bytes = None;
    while let Some(field) =
        multipart.next_field().await.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "multipart", e.to_string()))?
    {
        if field.name() == Some("file") {
            let data =
                field.bytes().await.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "multipart", e.to_string()))?;
            bytes = Some(data);
        }
    }
    let bytes = bytes.ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "multipart", "missing field `file`"))?;
    let p = plugin::deserialize(&bytes).map_err(Error::from)?;
    plugin::validate(&p, state.inner.backend.descriptor())
        .map_err(|violations| Error::PluginInvalid { name: p.name.clone(), violations })?;

    let mut store = state.store();
    if store.index.plugins.contains_key(&p.name) {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "duplicate_plugin",
            format!("plugin `{}` already exists", p.name),
        ));
    }
    let object = store.put(&bytes)?;
    let entry = PluginEntry { object, metadata: p.metadata(), rows: p.rows, width: p.width };
    store.index.plugins.insert(p.name.clone(), entry.clone());
    store.save()?;
    Ok((StatusCode::CREATED, Json(PluginInfo::from_entry(&entry))))
}

async fn list_plugins(State(state): State<AppState>) -> Json<Vec<PluginInfo>> {
    Json(state.store().index.plugins.values().map(PluginInfo::from_entry).collect())
}

async fn get_plugin(State(state): State<AppState>, UrlPath(name): UrlPath<String>) -> ApiResult<Json<PluginInfo>> {
    let store = state.store();
    let entry = store.index.plugins.get(&name).ok_or_else(|| ApiError::not_found("plugin", &name))?;
    Ok(Json(PluginInfo::from_entry(entry)))
}

/// Records progress at most ~100 times over a run.
struct ProgressObserver {
    state: AppState,
    job: String,
    steps: usize,
    every: usize,
}

impl TrainObserver for ProgressObserver {
    fn on_step(&mut self, record: &StepRecord) {
        let done = record.step + 1;
        if done.is_multiple_of(self.every) || done == self.steps {
            let p = done as f64 / self.steps as f64;
            let _ = self.state.update_job(&self.job, |j| {
                j.advance(p * 0.99);
                Ok(())
            });
        }
    }
}

async fn submit_train(State(state): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<Job>)> {
    let body: TrainBody = parse_body(&body)?;
    let config = body.config();
    config.validate().map_err(Error::from)?;
    if let Some(name) = &body.plugin_name {
        if state.store().index.plugins.contains_key(name) {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "duplicate_plugin",
                format!("plugin `{name}` already exists"),
            ));
        }
    }
    let job = {
        let mut store = state.store();
        let request_ref = store.put(&serde_json::to_vec(&body).expect("serializable"))?;
        let job = store.new_job(JobKind::Train)?;
        store.update_job(&job.id, |j| {
            j.request_ref = Some(request_ref);
            Ok(())
        })?
    };
    let id = job.id.clone();
    state.spawn(id.clone(), move |state| {
        let backend = state.inner.backend.clone();
        let mut observer =
            ProgressObserver { state: state.clone(), job: id, steps: config.steps, every: (config.steps / 100).max(1) };
        let ck = pipeline::train_on_dir(&*backend, &body.dataset, &body.class_noun, &config, None, &mut observer)?;
        let mut artifacts = BTreeMap::new();
        let ck_ref = state.store().put(&crate::checkpoint::serialize(&ck))?;
        artifacts.insert("checkpoint".into(), ck_ref.clone());
        artifacts.insert("loss_history".into(), state.store().put(&crate::checkpoint::loss_history_csv(&ck.history))?);
        if let Some(name) = &body.plugin_name {
            let p = pipeline::plugin_from_checkpoint(&*backend, &ck, name, pipeline::unix_now())?;
            let bytes = plugin::serialize(&p);
            let mut store = state.store();
            if store.index.plugins.contains_key(name) {
                return Err(Error::Usage(format!("plugin `{name}` already exists")));
            }
            let object = store.put(&bytes)?;
            artifacts.insert("plugin".into(), object.clone());
            store
                .index
                .plugins
                .insert(name.clone(), PluginEntry { object, metadata: p.metadata(), rows: p.rows, width: p.width });
            store.save()?;
        }
        Ok((ck_ref, artifacts))
    });
    Ok((StatusCode::ACCEPTED, Json(job)))
}

async fn submit_frame(State(state): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<Job>)> {
    let body: FrameBody = parse_body(&body)?;
    let (request, hash) = state.frame_inputs(&body)?;
    check_request(&*state.inner.backend, &request).map_err(Error::from)?;
    let job = {
        let mut store = state.store();
        let request_ref = store.put(&serde_json::to_vec(&body).expect("serializable"))?;
        let job = store.new_job(JobKind::Frame)?;
        store.update_job(&job.id, |j| {
            j.request_ref = Some(request_ref);
            j.request_hash = Some(hash.clone());
            Ok(())
        })?
    };
    let id = job.id.clone();
    state.spawn(id.clone(), move |state| {
        // Rebuild from what was stored, so the work matches the recorded hash.
        let (request, hash, expected) = state.stored_frame_request(&id).map_err(|e| Error::Usage(e.message))?;
        if hash != expected {
            return Err(Error::Usage("request hash does not match the stored request".into()));
        }
        let out = generate_frame(&*state.inner.backend, &request)?;
        let diagnostics =
            io::to_json_pretty(&DiagnosticsFile { id: id.clone(), request_hash: hash, diagnostics: out.diagnostics });
        let store = state.store();
        let image = store.put(&io::encode_png(&out.image))?;
        let mut artifacts = BTreeMap::new();
        artifacts.insert("image".into(), image.clone());
        artifacts.insert("diagnostics".into(), store.put(&diagnostics)?);
        Ok((image, artifacts))
    });
    Ok((StatusCode::ACCEPTED, Json(job)))
}

async fn get_job(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Job>> {
    state.job(&id).map(Json).ok_or_else(|| ApiError::not_found("job", &id))
}

fn job_artifact(state: &AppState, id: &str, name: &str) -> ApiResult<Vec<u8>> {
    let job = state.job(id).ok_or_else(|| ApiError::not_found("job", id))?;
    if job.state != JobState::Done {
        return Err(ApiError::new(StatusCode::CONFLICT, "not_done", format!("job `{id}` is {:?}", job.state)));
    }
    let object = job
        .artifacts
        .get(name)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("job `{id}` has no {name}")))?;
    Ok(state.store().get(object)?)
}

async fn job_image(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    Ok(png(job_artifact(&state, &id, "image")?))
}

async fn job_diagnostics(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    Ok(json_bytes(job_artifact(&state, &id, "diagnostics")?))
}

async fn create_story(State(state): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<StoryInfo>)> {
    let text = std::str::from_utf8(&body)
        .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "encoding", "script is not UTF-8"))?;
    let script = story::parse_script(text).map_err(ApiError::schema)?;
    // Canonical form, so the same script always gets the same id.
    let canonical = serde_json::to_vec(&script).expect("serializable");
    let mut store = state.store();
    let object = store.put(&canonical)?;
    let id = object[..16].to_string();
    store.index.stories.entry(id.clone()).or_insert_with(|| StoryEntry {
        object,
        title: script.title.clone(),
        manifest: None,
        frames: BTreeMap::new(),
    });
    store.save()?;
    let info = StoryInfo { id, title: script.title.clone(), frames: script.frames.len(), warnings: script.warnings() };
    Ok((StatusCode::CREATED, Json(info)))
}

fn load_story(state: &AppState, id: &str) -> ApiResult<(StoryEntry, StoryScript)> {
    let store = state.store();
    let entry = store.index.stories.get(id).cloned().ok_or_else(|| ApiError::not_found("story", id))?;
    let script = serde_json::from_slice(&store.get(&entry.object)?)
        .map_err(|e| ApiError::internal(format!("stored script: {e}")))?;
    Ok((entry, script))
}

async fn get_story(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<StoryScript>> {
    Ok(Json(load_story(&state, &id)?.1))
}

async fn submit_story_job(State(state): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<Job>)> {
    let body: StoryJobBody = parse_body(&body)?;
    let (_, script) = load_story(&state, &body.story_id)?;
    let names: Vec<String> = script.frames.iter().flat_map(|f| f.characters.iter().cloned()).collect();
    let plugins = state.plugins(&names)?;
    for f in &script.frames {
        let request = story::frame_request(&script, f, &plugins)?;
        check_request(&*state.inner.backend, &request).map_err(Error::from)?;
    }
    let job = {
        let mut store = state.store();
        let request_ref = store.put(&serde_json::to_vec(&body).expect("serializable"))?;
        let job = store.new_job(JobKind::Story)?;
        store.update_job(&job.id, |j| {
            j.request_ref = Some(request_ref);
            Ok(())
        })?
    };
    let story_id = body.story_id.clone();
    state.spawn(job.id.clone(), move |state| {
        let backend = state.inner.backend.clone();
        let frames = story::render_frames(&*backend, &script, &plugins, body.workers)?;
        let pngs: Vec<Vec<u8>> = frames.iter().map(|f| io::encode_png(&f.output.image)).collect();
        let manifest = story::manifest_for(&script, &backend.descriptor().backend_id, &frames, &pngs);
        let mut store = state.store();
        let mut frame_objects = BTreeMap::new();
        let mut artifacts = BTreeMap::new();
        for (f, png) in frames.iter().zip(&pngs) {
            frame_objects.insert(f.id.clone(), store.put(png)?);
            let diag = DiagnosticsFile {
                id: f.id.clone(),
                request_hash: f.request_hash.clone(),
                diagnostics: f.output.diagnostics.clone(),
            };
            artifacts.insert(format!("diagnostics/{}", f.id), store.put(&io::to_json_pretty(&diag))?);
        }
        let manifest_ref = store.put(&io::to_json_pretty(&manifest))?;
        artifacts.insert("manifest".into(), manifest_ref.clone());
        let entry = store
            .index
            .stories
            .get_mut(&story_id)
            .ok_or_else(|| Error::Usage(format!("story `{story_id}` vanished")))?;
        entry.manifest = Some(manifest_ref.clone());
        entry.frames = frame_objects;
        store.save()?;
        Ok((manifest_ref, artifacts))
    });
    Ok((StatusCode::ACCEPTED, Json(job)))
}

async fn story_frames(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let (entry, _) = load_story(&state, &id)?;
    let manifest = entry.manifest.ok_or_else(|| {
        ApiError::new(StatusCode::CONFLICT, "not_rendered", format!("story `{id}` has not been rendered"))
    })?;
    Ok(json_bytes(state.store().get(&manifest)?))
}

async fn story_frame_image(
    State(state): State<AppState>,
    UrlPath((id, frame)): UrlPath<(String, String)>,
) -> ApiResult<Response> {
    let (entry, _) = load_story(&state, &id)?;
    let object = entry.frames.get(&frame).ok_or_else(|| ApiError::not_found("frame", &frame))?;
    Ok(png(state.store().get(object)?))
}

/// The store directory a state was opened on.
pub fn store_root(state: &AppState) -> PathBuf {
    state.store().root().to_path_buf()
}
