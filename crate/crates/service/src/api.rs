//! HTTP API over the workflow engine, masks, images and training jobs.
//!
//! Every mutating endpoint appends exactly one workflow event (training jobs
//! aside, which live outside the log); GET endpoints append nothing.

use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use anyhow::{bail, Context};
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use rand::seq::SliceRandom;
use cxrseg_core::io::{decode_image, encode_mask_pgm, encode_mask_png, encode_pgm, encode_png, read_image};
use cxrseg_core::maskops::PostprocessConfig;
use cxrseg_core::rng::stream;
use cxrseg_core::workflow::{Decision, ReviewItem, Stage3Choice, Workflow, WorkflowConfig};
use cxrseg_core::{BinaryMask, Error, ModelConfig, Sample, TrainConfig};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::jobs::{JobKind, JobQueue};
use crate::pipeline::{load_mask, AnyModel};
use crate::state_dir::StateDir;

pub const REVIEWER_HEADER: &str = "x-reviewer";

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    pub state_dir: PathBuf,
    pub workflow: WorkflowConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub postprocess: PostprocessConfig,
    /// Proposal model; defaults to the last trained weights in the state dir.
    pub weights: Option<PathBuf>,
}

pub struct AppState {
    wf: Mutex<Workflow>,
    jobs: JobQueue,
    proposer: Arc<RwLock<Option<AnyModel>>>,
    dir: StateDir,
    opts: ServiceOptions,
}

impl AppState {
    pub fn open(opts: ServiceOptions) -> anyhow::Result<Arc<Self>> {
        let dir = StateDir::new(&opts.state_dir);
        let wf = dir.open(&opts.workflow)?;
        let weights = opts.weights.clone().or_else(|| Some(dir.current_weights()).filter(|p| p.exists()));
        let proposer = match weights {
            Some(p) => Some(AnyModel::load(&p, None)?),
            None => None,
        };
        Ok(Arc::new(Self {
            wf: Mutex::new(wf),
            jobs: JobQueue::new(),
            proposer: Arc::new(RwLock::new(proposer)),
            dir,
            opts,
        }))
    }

    /// Engine lock. A panicking handler cannot leave a half-applied event
    /// behind (events are validated before they mutate), so poisoning is
    /// recovered from.
    pub fn workflow(&self) -> MutexGuard<'_, Workflow> {
        self.wf.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn jobs(&self) -> &JobQueue {
        &self.jobs
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/queue", get(queue))
        .route("/api/progress", get(progress))
        .route("/api/items/{id}", get(item))
        .route("/api/items/{id}/decision", post(decision))
        .route("/api/items/{id}/md-resolve", post(md_resolve))
        .route("/api/items/{id}/verify", post(verify))
        .route("/api/images/{id}", get(image))
        .route("/api/masks/{*key}", get(mask))
        .route("/api/rounds/next", post(next_round))
        .route("/api/rounds/finalize", post(finalize))
        .route("/api/stage/advance", post(advance))
        .route("/api/stage3/{id}/proposals", get(stage3_proposals))
        .route("/api/stage3/{id}/select", post(stage3_select))
        .route("/api/jobs", get(list_jobs))
        .route("/api/jobs/train", post(train_job))
        .route("/api/jobs/{id}", get(job))
        .with_state(state)
}

/// Error body: `{"error": kind, "message": ..., "ids": [...]}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        Self { status, body: json!({ "error": kind, "message": message.into() }) }
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "malformed", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::NotFound(_) => Self::new(StatusCode::NOT_FOUND, "not_found", message),
            Error::State { ids, .. } => Self {
                status: StatusCode::CONFLICT,
                body: json!({ "error": "state", "message": message, "ids": ids }),
            },
            Error::Io { .. } | Error::Serde(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message),
            _ => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid", message),
        }
    }
}

impl From<anyhow::Error> for ApiError {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<Error>() {
            Ok(core) => core.into(),
            Err(e) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", format!("{e:#}")),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    let bytes: &[u8] = if body.iter().all(u8::is_ascii_whitespace) { b"{}" } else { body };
    serde_json::from_slice(bytes).map_err(|e| ApiError::unprocessable(format!("request body: {e}")))
}

fn reviewer(body: Option<String>, headers: &HeaderMap) -> ApiResult<String> {
    body.or_else(|| headers.get(REVIEWER_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string))
        .filter(|r| !r.trim().is_empty())
        .ok_or_else(|| ApiError::unprocessable(format!("reviewer missing from body and `{REVIEWER_HEADER}` header")))
}

/// Masks travel as base64 of a PGM or PNG file; nonzero pixels are foreground.
pub fn decode_mask_b64(text: &str) -> ApiResult<BinaryMask> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(text.trim())
        .map_err(|e| ApiError::unprocessable(format!("mask is not base64: {e}")))?;
    let img = decode_image(&bytes).map_err(|e| ApiError::unprocessable(format!("mask: {e}")))?;
    let data = img.data().iter().map(|&v| (v != 0) as u8).collect();
    Ok(BinaryMask::new(img.height(), img.width(), data)?)
}

pub fn encode_mask_b64(mask: &BinaryMask) -> String {
    base64::engine::general_purpose::STANDARD.encode(encode_mask_pgm(mask))
}

fn links(item: &ReviewItem) -> Value {
    let url = |k: &String| format!("/api/masks/{k}");
    json!({
        "image": format!("/api/images/{}", item.id),
        "mask": item.mask.as_ref().map(url),
        "final_mask": item.final_mask.as_ref().map(url),
        "proposals": item.proposals.iter().map(url).collect::<Vec<_>>(),
    })
}

#[derive(Deserialize)]
struct QueueQuery {
    limit: Option<usize>,
    offset: Option<usize>,
}

async fn queue(State(s): State<Arc<AppState>>, Query(q): Query<QueueQuery>) -> ApiResult<Json<Value>> {
    let wf = s.workflow();
    let all = wf.state().queue();
    let limit = q.limit.unwrap_or(50).min(1000);
    let offset = q.offset.unwrap_or(0);
    let page: Vec<Value> = all
        .iter()
        .skip(offset)
        .take(limit)
        .map(|it| json!({ "id": it.id, "class": it.class, "status": it.status, "round": it.round, "links": links(it) }))
        .collect();
    Ok(Json(json!({ "total": all.len(), "offset": offset, "limit": limit, "items": page })))
}

async fn progress(State(s): State<Arc<AppState>>) -> Json<Value> {
    Json(json!(s.workflow().state().progress()))
}

async fn item(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let wf = s.workflow();
    let it = wf.item(&id)?;
    Ok(Json(json!({ "item": it, "links": links(it) })))
}

#[derive(Deserialize, Default)]
struct FormatQuery {
    format: Option<String>,
}

fn image_response(pgm: Vec<u8>, png: impl FnOnce() -> cxrseg_core::Result<Vec<u8>>, format: Option<&str>) -> ApiResult<Response> {
    match format.unwrap_or("pgm") {
        "pgm" => Ok(([(header::CONTENT_TYPE, "image/x-portable-graymap")], pgm).into_response()),
        "png" => Ok(([(header::CONTENT_TYPE, "image/png")], png()?).into_response()),
        other => Err(ApiError::unprocessable(format!("unknown format `{other}`; use pgm or png"))),
    }
}

async fn mask(State(s): State<Arc<AppState>>, Path(key): Path<String>, Query(q): Query<FormatQuery>) -> ApiResult<Response> {
    let m = s.workflow().mask(&key)?;
    image_response(encode_mask_pgm(&m), || encode_mask_png(&m), q.format.as_deref())
}

async fn image(State(s): State<Arc<AppState>>, Path(id): Path<String>, Query(q): Query<FormatQuery>) -> ApiResult<Response> {
    let path = s.workflow().item(&id)?.image.clone();
    let img = read_image(&path)?;
    image_response(encode_pgm(&img), || encode_png(&img), q.format.as_deref())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DecisionBody {
    decision: Decision,
    reviewer: Option<String>,
    mask: Option<String>,
}

async fn decision(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let body: DecisionBody = parse_body(&body)?;
    let reviewer = reviewer(body.reviewer, &headers)?;
    let edited = body.mask.as_deref().map(decode_mask_b64).transpose()?;
    let mut wf = s.workflow();
    if wf.is_duplicate_decision(&id, body.decision, edited.as_ref()) {
        let it = wf.item(&id)?;
        return Ok((StatusCode::CONFLICT, Json(json!({ "duplicate": true, "item": it }))).into_response());
    }
    let it = wf.submit_decision(&id, body.decision, edited.as_ref(), &reviewer)?;
    Ok(Json(json!({ "duplicate": false, "item": it })).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MdBody {
    note: String,
    mask: String,
    reviewer: Option<String>,
}

async fn md_resolve(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let body: MdBody = parse_body(&body)?;
    let reviewer = reviewer(body.reviewer, &headers)?;
    let adjusted = decode_mask_b64(&body.mask)?;
    let mut wf = s.workflow();
    let it = wf.md_resolve(&id, &body.note, &adjusted, &reviewer)?;
    Ok(Json(json!({ "item": it })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VerifyBody {
    reviewer: Option<String>,
    note: Option<String>,
}

async fn verify(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let body: VerifyBody = parse_body(&body)?;
    let reviewer = reviewer(body.reviewer, &headers)?;
    let mut wf = s.workflow();
    let it = wf.md_verify(&id, &reviewer, body.note.as_deref())?;
    Ok(Json(json!({ "item": it })))
}

async fn next_round(State(s): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let proposer = s.proposer.read().unwrap_or_else(|e| e.into_inner()).clone();
    let Some(model) = proposer else {
        return Err(ApiError::new(StatusCode::CONFLICT, "state", "no proposal model loaded; train one first"));
    };
    let cfg = s.opts.postprocess;
    let mut wf = s.workflow();
    let ids = wf.next_batch(|it| {
        let img = read_image(&it.image)?;
        model.lung_mask(&img, &cfg).map_err(|e| match e.downcast::<Error>() {
            Ok(core) => core,
            Err(other) => Error::Format(format!("{other:#}")),
        })
    })?;
    let round = wf.state().round;
    Ok(Json(json!({ "round": round, "ids": ids })))
}

async fn finalize(State(s): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let job = s.workflow().finalize_round()?;
    Ok(Json(json!({ "job": job })))
}

async fn advance(State(s): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let stage = s.workflow().advance_stage()?;
    Ok(Json(json!({ "stage": stage })))
}

async fn stage3_proposals(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let wf = s.workflow();
    let it = wf.item(&id)?;
    if it.proposals.is_empty() {
        let message = format!("item `{id}` has no stage III proposals");
        return Err(Error::State { message, ids: vec![id.clone()] }.into());
    }
    let models = &wf.state().stage3_models;
    let proposals: Vec<Value> = it
        .proposals
        .iter()
        .enumerate()
        .map(|(k, key)| {
            json!({ "index": k + 1, "model": models.get(k), "mask": key, "url": format!("/api/masks/{key}") })
        })
        .collect();
    Ok(Json(json!({ "id": id, "status": it.status, "selected": it.selected_model, "proposals": proposals })))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ChoiceField {
    Index(u8),
    Word(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectBody {
    choice: Option<ChoiceField>,
    deny: Option<bool>,
    reviewer: Option<String>,
}

async fn stage3_select(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let body: SelectBody = parse_body(&body)?;
    let reviewer = reviewer(body.reviewer, &headers)?;
    let choice = match (body.choice, body.deny) {
        (Some(ChoiceField::Index(k)), None | Some(false)) => Stage3Choice::Model(k),
        (Some(ChoiceField::Word(w)), None) if w == "deny" => Stage3Choice::Deny,
        (None, Some(true)) => Stage3Choice::Deny,
        _ => return Err(ApiError::unprocessable("give either `choice` (1-6 or \"deny\") or `deny: true`")),
    };
    let mut wf = s.workflow();
    let it = wf.item(&id)?;
    if let Stage3Choice::Model(k) = choice {
        if it.status.is_terminal() && it.selected_model == Some(k) {
            return Ok((StatusCode::CONFLICT, Json(json!({ "duplicate": true, "item": it }))).into_response());
        }
    }
    let it = wf.stage3_select(&id, choice, &reviewer)?;
    Ok(Json(json!({ "duplicate": false, "item": it })).into_response())
}

async fn list_jobs(State(s): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({ "jobs": s.jobs.all() }))
}

async fn job(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let id: u64 = id.parse().map_err(|_| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("job `{id}`")))?;
    let status = s.jobs.get(id).ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("job {id}")))?;
    Ok(Json(json!(status)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainBody {
    epochs: Option<usize>,
    fine_tune: Option<bool>,
}

/// Trains a lung model on every mask in the repository; on success the
/// result becomes the proposal model for later rounds.
async fn train_job(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let body: TrainBody = parse_body(&body)?;
    if body.epochs == Some(0) {
        return Err(ApiError::unprocessable("epochs must be positive"));
    }
    let (records, fine_tune_default) = {
        let wf = s.workflow();
        let st = wf.state();
        let mut records: Vec<(String, PathBuf, MaskSource)> = Vec::new();
        for id in &st.repository {
            if let Some(it) = st.items.get(id) {
                if let Some(key) = &it.final_mask {
                    records.push((id.clone(), PathBuf::from(&it.image), MaskSource::Stored(wf.mask(key)?)));
                }
            }
        }
        for seed in s.dir.read_seeds()? {
            if st.seed_ids.contains(&seed.id) {
                if let Some(m) = seed.lung_mask.clone() {
                    records.push((seed.id.clone(), seed.image.clone(), MaskSource::File(m)));
                }
            }
        }
        (records, st.config.fine_tune)
    };
    let fine_tune = body.fine_tune.unwrap_or(fine_tune_default);
    let start = if fine_tune { s.proposer.read().unwrap_or_else(|e| e.into_inner()).clone() } else { None };
    let mut cfg = s.opts.train.clone();
    if let Some(e) = body.epochs {
        cfg.max_epochs = e;
    }
    let model_cfg = s.opts.model;
    let models_dir = s.dir.models();
    let current = s.dir.current_weights();
    let proposer = Arc::clone(&s.proposer);
    let status = s.jobs.submit(JobKind::Train, move |progress| {
        let mut samples = Vec::with_capacity(records.len());
        for (id, image, mask) in records {
            let img = read_image(&image)?;
            let mask = match mask {
                MaskSource::Stored(m) => m,
                MaskSource::File(p) => load_mask(&p, None)?,
            };
            samples.push(Sample::new(id, img, mask)?);
        }
        if samples.len() < 2 {
            bail!("need at least two masks in the repository, have {}", samples.len());
        }
        samples.shuffle(&mut stream(cfg.seed, &[0x6a_6f62]));
        let n_val = (samples.len() / 5).max(1);
        let (val, train) = samples.split_at(n_val);
        let model = match start {
            Some(m) => m,
            None => AnyModel::build(model_cfg, cfg.precision, cfg.seed)?,
        };
        let epochs = cfg.max_epochs as f64;
        let (trained, summary) = model.train(train, val, &cfg, |r| progress.set(r.epoch as f64 / epochs))?;
        std::fs::create_dir_all(&models_dir).with_context(|| format!("creating {}", models_dir.display()))?;
        let out = models_dir.join(format!("job-{}.segw", progress.id()));
        trained.save(&out)?;
        trained.save(&current)?;
        *proposer.write().unwrap_or_else(|e| e.into_inner()) = Some(trained);
        let last = summary.history.last().map(|r| r.val_dsc).unwrap_or(0.0);
        Ok(format!("{} (best epoch {}, val dsc {last:.4})", out.display(), summary.best_epoch))
    });
    Ok((StatusCode::ACCEPTED, Json(json!(status))).into_response())
}

enum MaskSource {
    Stored(BinaryMask),
    File(PathBuf),
}
