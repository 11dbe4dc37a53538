//! Routes and handlers. Every response body is a JSON object carrying
//! `schema_version`; errors are `{schema_version, code, message, details?}`.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::rejection::{BytesRejection, JsonRejection};
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use trajkd_core::evaluation::{compare_kdbs, group_stats, CompareLevel, GroupStats, KdbComparison};
use trajkd_core::features::FeatureSpec;
use trajkd_core::kdb::KnowledgeDatabase;
use trajkd_core::pipeline::{
    replay, GroupingView, ManualPolicy, PipelineRecord, ReplayOptions, ReplayReport, Session, Step, StepOverride,
    StepPreview, StepReport,
};
use trajkd_core::trajectory::{content_id, ingest_csv, ExcludedTrajectory, IngestOptions, ObjectDatabase, ObjectId, RowDiagnostic};

use crate::config::ServiceConfig;
use crate::error::{ApiError, ServiceError};
use crate::projection::{project, View, ViewProjection};
use crate::store::{valid_id, DatasetMeta, SessionSnapshot, Store};

pub const API_SCHEMA_VERSION: u32 = 1;

type ApiResult<T> = Result<Json<Envelope<T>>, ApiError>;

#[derive(Debug, Serialize)]
pub struct Envelope<T> {
    pub schema_version: u32,
    #[serde(flatten)]
    pub body: T,
}

fn reply<T: Serialize>(body: T) -> ApiResult<T> {
    Ok(Json(Envelope {
        schema_version: API_SCHEMA_VERSION,
        body,
    }))
}

fn check_version(v: Option<u32>) -> Result<(), ApiError> {
    match v {
        Some(v) if v != API_SCHEMA_VERSION => Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "unsupported_schema_version",
            format!("schema_version {v} is not supported (expected {API_SCHEMA_VERSION})"),
        )),
        _ => Ok(()),
    }
}

fn json_body<T>(body: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    body.map(|Json(b)| b).map_err(ApiError::from)
}

/// Runs CPU-bound work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

struct SessionEntry {
    id: String,
    session: Session,
}

/// Shared service state. Each session sits behind its own lock so mutations
/// of one session are serialized without blocking the others.
pub struct AppState {
    config: ServiceConfig,
    store: Store,
    datasets: RwLock<HashMap<String, Arc<ObjectDatabase>>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<SessionEntry>>>>,
    next_session: AtomicU64,
}

impl AppState {
    /// Opens the data directory and restores persisted datasets and sessions.
    pub fn open(config: ServiceConfig) -> Result<Self, ServiceError> {
        let store = Store::open(&config.data_dir)?;
        let mut datasets = HashMap::new();
        for (meta, bytes) in store.load_datasets()? {
            let db = ingest_csv(&bytes, &ingest_options(Some(meta.db_id.clone()), meta.allow_incomplete))
                .map_err(|e| ServiceError::Restore {
                    what: format!("dataset {}", meta.db_id),
                    message: e.to_string(),
                })?
                .database;
            datasets.insert(meta.db_id, Arc::new(db));
        }
        let mut sessions = HashMap::new();
        let mut next = 1;
        for snap in store.load_sessions()? {
            let restore_err = |message: String| ServiceError::Restore {
                what: format!("session {}", snap.session_id),
                message,
            };
            let db = datasets
                .get(&snap.db_id)
                .cloned()
                .ok_or_else(|| restore_err(format!("dataset {} is missing", snap.db_id)))?;
            let session = Session::restore(db, &snap.record, snap.revision).map_err(|e| restore_err(e.to_string()))?;
            if let Some(n) = snap.session_id.strip_prefix("session-").and_then(|n| n.parse::<u64>().ok()) {
                next = next.max(n + 1);
            }
            sessions.insert(
                snap.session_id.clone(),
                Arc::new(Mutex::new(SessionEntry {
                    id: snap.session_id,
                    session,
                })),
            );
        }
        tracing::info!(datasets = datasets.len(), sessions = sessions.len(), "state restored");
        Ok(AppState {
            config,
            store,
            datasets: RwLock::new(datasets),
            sessions: RwLock::new(sessions),
            next_session: AtomicU64::new(next),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn dataset(&self, db_id: &str) -> Result<Arc<ObjectDatabase>, ApiError> {
        self.datasets
            .read()
            .expect("dataset map lock poisoned")
            .get(db_id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("dataset", db_id))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<SessionEntry>>, ApiError> {
        self.sessions
            .read()
            .expect("session map lock poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("session", id))
    }

    fn persist(&self, entry: &SessionEntry) -> Result<(), ApiError> {
        self.store
            .save_session(&SessionSnapshot {
                session_id: entry.id.clone(),
                db_id: entry.session.db().db_id().to_string(),
                revision: entry.session.revision(),
                record: entry.session.record().clone(),
            })
            .map_err(|e| ApiError::internal(format!("cannot persist session: {e}")))
    }
}

fn ingest_options(db_id: Option<String>, allow_incomplete: bool) -> IngestOptions {
    IngestOptions {
        db_id,
        allow_incomplete,
        ..IngestOptions::default()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_upload_bytes;
    Router::new()
        .route("/health", get(health))
        .route("/datasets", post(create_dataset).get(list_datasets))
        .route("/datasets/{db_id}", get(get_dataset))
        .route("/datasets/{db_id}/projection", post(get_projection))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/preview", post(preview_step))
        .route("/sessions/{id}/commit", post(commit_step))
        .route("/sessions/{id}/undo", post(undo_step))
        .route("/sessions/{id}/grouping", get(get_grouping))
        .route("/sessions/{id}/finalize", post(finalize))
        .route("/sessions/{id}/pipeline", get(export_pipeline))
        .route("/replay", post(import_and_replay))
        .route("/stats", post(get_group_stats))
        .route("/compare", post(compare))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Binds the configured address and serves until the process is stopped.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let listen = config.listen.clone();
    let state = Arc::new(AppState::open(config)?);
    let listener = tokio::net::TcpListener::bind(&listen).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await?;
    Ok(())
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
}

async fn health() -> ApiResult<Health> {
    reply(Health { status: "ok" })
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Debug, Default, Deserialize)]
struct UploadQuery {
    db_id: Option<String>,
    #[serde(default)]
    allow_incomplete: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub db_id: String,
    pub objects: usize,
    pub frame_min: u32,
    pub frame_max: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected_rows: Vec<RowDiagnostic>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded: Vec<ExcludedTrajectory>,
}

fn summary(db: &ObjectDatabase) -> DatasetSummary {
    let (frame_min, frame_max) = db.frame_range();
    DatasetSummary {
        db_id: db.db_id().to_string(),
        objects: db.len(),
        frame_min,
        frame_max,
        rejected_rows: Vec::new(),
        excluded: Vec::new(),
    }
}

async fn create_dataset(
    State(state): State<Arc<AppState>>,
    Query(query): Query<UploadQuery>,
    body: Result<Bytes, BytesRejection>,
) -> Result<(StatusCode, Json<Envelope<DatasetSummary>>), ApiError> {
    let body = body?;
    if let Some(id) = &query.db_id {
        if !valid_id(id) {
            return Err(ApiError::bad_request(format!("invalid dataset id {id:?}")));
        }
    }
    let st = state.clone();
    let summary = blocking(move || {
        let report = ingest_csv(&body, &ingest_options(query.db_id.clone(), query.allow_incomplete))?;
        let db = report.database;
        let mut datasets = st.datasets.write().expect("dataset map lock poisoned");
        if let Some(existing) = datasets.get(db.db_id()) {
            if content_id(existing) != content_id(&db) {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    "dataset_exists",
                    format!("dataset {} already exists with different content", db.db_id()),
                ));
            }
        } else {
            st.store
                .save_dataset(
                    &DatasetMeta {
                        db_id: db.db_id().to_string(),
                        allow_incomplete: query.allow_incomplete,
                    },
                    &body,
                )
                .map_err(|e| ApiError::internal(format!("cannot persist dataset: {e}")))?;
        }
        let mut out = summary(&db);
        out.rejected_rows = report.rejected_rows;
        out.excluded = report.excluded;
        datasets.entry(db.db_id().to_string()).or_insert_with(|| Arc::new(db));
        Ok(out)
    })
    .await?;
    tracing::info!(db_id = %summary.db_id, objects = summary.objects, "dataset ingested");
    Ok((
        StatusCode::CREATED,
        Json(Envelope {
            schema_version: API_SCHEMA_VERSION,
            body: summary,
        }),
    ))
}

#[derive(Serialize)]
struct DatasetList {
    datasets: Vec<DatasetSummary>,
}

async fn list_datasets(State(state): State<Arc<AppState>>) -> ApiResult<DatasetList> {
    let map = state.datasets.read().expect("dataset map lock poisoned");
    let mut datasets: Vec<DatasetSummary> = map.values().map(|db| summary(db)).collect();
    datasets.sort_by(|a, b| a.db_id.cmp(&b.db_id));
    reply(DatasetList { datasets })
}

async fn get_dataset(State(state): State<Arc<AppState>>, Path(db_id): Path<String>) -> ApiResult<DatasetSummary> {
    let db = state.dataset(&db_id)?;
    reply(summary(&db))
}

#[derive(Debug, Deserialize)]
struct ProjectionRequest {
    schema_version: Option<u32>,
    view: View,
    /// Points kept per trajectory; at least 2.
    max_points: usize,
    /// Objects to project; every object when absent.
    selection: Option<Vec<ObjectId>>,
    /// Session whose current grouping labels the polylines.
    session_id: Option<String>,
}

async fn get_projection(
    State(state): State<Arc<AppState>>,
    Path(db_id): Path<String>,
    body: Result<Json<ProjectionRequest>, JsonRejection>,
) -> ApiResult<ViewProjection> {
    let req = json_body(body)?;
    check_version(req.schema_version)?;
    if req.max_points < 2 {
        return Err(ApiError::bad_request("max_points must be at least 2"));
    }
    let db = state.dataset(&db_id)?;
    if let Some(unknown) = req.selection.iter().flatten().find(|id| !db.contains(id)) {
        return Err(ApiError::bad_request(format!("object {unknown} is not in dataset {db_id}")));
    }
    let groups = match &req.session_id {
        Some(sid) => {
            let entry = state.session(sid)?;
            let entry = entry.lock().expect("session lock poisoned");
            if entry.session.db().db_id() != db_id {
                return Err(ApiError::bad_request(format!("session {sid} is not over dataset {db_id}")));
            }
            Some(labels(&entry.session.finalize()))
        }
        None => None,
    };
    let projection = blocking(move || Ok(project(&db, req.view, req.max_points, req.selection.as_deref(), groups.as_ref()))).await?;
    reply(projection)
}

fn labels(kdb: &KnowledgeDatabase) -> BTreeMap<ObjectId, String> {
    kdb.object_ids()
        .into_iter()
        .filter_map(|id| kdb.placement(&id).map(|p| (id, p.label().to_string())))
        .collect()
}

// ---------------------------------------------------------------------------
// Sessions

#[derive(Debug, Deserialize)]
struct CreateSessionRequest {
    schema_version: Option<u32>,
    db_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub db_id: String,
    pub revision: u64,
    pub steps: usize,
}

fn session_summary(entry: &SessionEntry) -> SessionSummary {
    SessionSummary {
        session_id: entry.id.clone(),
        db_id: entry.session.db().db_id().to_string(),
        revision: entry.session.revision(),
        steps: entry.session.record().steps.len(),
    }
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CreateSessionRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<Envelope<SessionSummary>>), ApiError> {
    let req = json_body(body)?;
    check_version(req.schema_version)?;
    let db = state.dataset(&req.db_id)?;
    let id = format!("session-{:04}", state.next_session.fetch_add(1, Ordering::SeqCst));
    let entry = SessionEntry {
        id: id.clone(),
        session: Session::new(db),
    };
    state.persist(&entry)?;
    let out = session_summary(&entry);
    state
        .sessions
        .write()
        .expect("session map lock poisoned")
        .insert(id, Arc::new(Mutex::new(entry)));
    Ok((
        StatusCode::CREATED,
        Json(Envelope {
            schema_version: API_SCHEMA_VERSION,
            body: out,
        }),
    ))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<SessionSummary> {
    let entry = state.session(&id)?;
    let entry = entry.lock().expect("session lock poisoned");
    reply(session_summary(&entry))
}

#[derive(Debug, Deserialize)]
struct PreviewRequest {
    schema_version: Option<u32>,
    step: Step,
}

async fn preview_step(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<PreviewRequest>, JsonRejection>,
) -> ApiResult<StepPreview> {
    let req = json_body(body)?;
    check_version(req.schema_version)?;
    let entry = state.session(&id)?;
    let preview = blocking(move || {
        let entry = entry.lock().expect("session lock poisoned");
        Ok(entry.session.preview(req.step)?)
    })
    .await?;
    reply(preview)
}

#[derive(Debug, Deserialize)]
struct CommitRequest {
    schema_version: Option<u32>,
    step: Step,
    /// Revision the client's preview was computed against.
    expected_revision: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CommitResponse {
    pub session_id: String,
    pub revision: u64,
    pub step_id: String,
    pub report: StepReport,
    pub grouping: GroupingView,
}

async fn commit_step(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<CommitRequest>, JsonRejection>,
) -> ApiResult<CommitResponse> {
    let req = json_body(body)?;
    check_version(req.schema_version)?;
    let entry = state.session(&id)?;
    let st = state.clone();
    let out = blocking(move || {
        let mut entry = entry.lock().expect("session lock poisoned");
        if let Some(expected) = req.expected_revision {
            let current = entry.session.revision();
            if expected != current {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    "stale_revision",
                    format!("session is at revision {current}, not {expected}"),
                )
                .with_details(serde_json::json!({ "revision": current })));
            }
        }
        let report = entry.session.commit(req.step)?;
        st.persist(&entry)?;
        Ok(CommitResponse {
            session_id: entry.id.clone(),
            revision: entry.session.revision(),
            step_id: report.step_id.clone(),
            report,
            grouping: entry.session.grouping().view(),
        })
    })
    .await?;
    reply(out)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UndoResponse {
    pub session_id: String,
    pub revision: u64,
    pub undone: Step,
    pub grouping: GroupingView,
}

async fn undo_step(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<UndoResponse> {
    let entry = state.session(&id)?;
    let st = state.clone();
    let out = blocking(move || {
        let mut entry = entry.lock().expect("session lock poisoned");
        let undone = entry.session.undo()?;
        st.persist(&entry)?;
        Ok(UndoResponse {
            session_id: entry.id.clone(),
            revision: entry.session.revision(),
            undone,
            grouping: entry.session.grouping().view(),
        })
    })
    .await?;
    reply(out)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GroupingResponse {
    pub session_id: String,
    pub revision: u64,
    pub grouping: GroupingView,
}

async fn get_grouping(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<GroupingResponse> {
    let entry = state.session(&id)?;
    let entry = entry.lock().expect("session lock poisoned");
    reply(GroupingResponse {
        session_id: entry.id.clone(),
        revision: entry.session.revision(),
        grouping: entry.session.grouping().view(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct KdbExport {
    pub kdb: KnowledgeDatabase,
    /// The knowledge database in its CSV exchange format.
    pub kdb_csv: String,
}

fn kdb_export(kdb: KnowledgeDatabase) -> KdbExport {
    let kdb_csv = String::from_utf8(kdb.to_csv_bytes()).expect("kdb csv is utf-8");
    KdbExport { kdb, kdb_csv }
}

async fn finalize(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<KdbExport> {
    let entry = state.session(&id)?;
    let entry = entry.lock().expect("session lock poisoned");
    reply(kdb_export(entry.session.finalize()))
}

#[derive(Serialize)]
struct PipelineExport {
    record: PipelineRecord,
    pipeline_hash: String,
}

async fn export_pipeline(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<PipelineExport> {
    let entry = state.session(&id)?;
    let entry = entry.lock().expect("session lock poisoned");
    let record = entry.session.record().clone();
    reply(PipelineExport {
        pipeline_hash: record.digest(),
        record,
    })
}

// ---------------------------------------------------------------------------
// Replay and evaluation

#[derive(Debug, Deserialize)]
struct ReplayRequest {
    schema_version: Option<u32>,
    record: PipelineRecord,
    db_id: String,
    /// `step=path:value` strings.
    #[serde(default)]
    overrides: Vec<String>,
    #[serde(default)]
    manual_policy: ManualPolicy,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReplayResponse {
    pub report: ReplayReport,
    #[serde(flatten)]
    pub export: KdbExport,
}

async fn import_and_replay(
    State(state): State<Arc<AppState>>,
    body: Result<Json<ReplayRequest>, JsonRejection>,
) -> ApiResult<ReplayResponse> {
    let req = json_body(body)?;
    check_version(req.schema_version)?;
    let db = state.dataset(&req.db_id)?;
    let overrides = req
        .overrides
        .iter()
        .map(|o| StepOverride::parse(o))
        .collect::<Result<Vec<_>, _>>()?;
    let out = blocking(move || {
        let output = replay(
            &req.record,
            &db,
            &ReplayOptions {
                overrides,
                manual_policy: req.manual_policy,
            },
        )?;
        Ok(ReplayResponse {
            report: output.report,
            export: kdb_export(output.kdb),
        })
    })
    .await?;
    reply(out)
}

#[derive(Debug, Deserialize)]
struct StatsRequest {
    schema_version: Option<u32>,
    db_id: String,
    /// Grouping to evaluate; every object counts as unassigned when neither
    /// a session nor a kdb is given.
    session_id: Option<String>,
    kdb_csv: Option<String>,
    feature: FeatureSpec,
    bins: usize,
}

async fn get_group_stats(
    State(state): State<Arc<AppState>>,
    body: Result<Json<StatsRequest>, JsonRejection>,
) -> ApiResult<GroupStats> {
    let req = json_body(body)?;
    check_version(req.schema_version)?;
    let db = state.dataset(&req.db_id)?;
    let kdb = match (&req.session_id, &req.kdb_csv) {
        (Some(_), Some(_)) => return Err(ApiError::bad_request("give either session_id or kdb_csv, not both")),
        (Some(sid), None) => {
            let entry = state.session(sid)?;
            let entry = entry.lock().expect("session lock poisoned");
            entry.session.finalize()
        }
        (None, Some(csv)) => KnowledgeDatabase::read_csv(csv.as_bytes(), db.db_id())?,
        (None, None) => KnowledgeDatabase::all_unassigned(&db, ""),
    };
    let stats = blocking(move || Ok(group_stats(&db, &kdb, &req.feature, req.bins)?)).await?;
    reply(stats)
}

#[derive(Debug, Deserialize)]
struct CompareRequest {
    schema_version: Option<u32>,
    /// Knowledge databases in CSV exchange format.
    kdb_a: String,
    kdb_b: String,
    #[serde(default)]
    level: CompareLevel,
}

async fn compare(body: Result<Json<CompareRequest>, JsonRejection>) -> ApiResult<KdbComparison> {
    let req = json_body(body)?;
    check_version(req.schema_version)?;
    let a = KnowledgeDatabase::read_csv(req.kdb_a.as_bytes(), "a")?;
    let b = KnowledgeDatabase::read_csv(req.kdb_b.as_bytes(), "b")?;
    reply(compare_kdbs(&a, &b, req.level)?)
}
