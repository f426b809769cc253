//! HTTP API over one run directory for the interactive repair console.
//!
//! One session per process. Mutations (edits, undo, jobs) are serialized
//! by the session lock; reads never wait for a running job.

use std::collections::HashMap;
use std::fs;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{Path, Query, State as AxumState};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::CorsLayer;

use morl_core::env::{default_config, rollout, stream, Action, Actor, EnvConfig, State};
use morl_core::imitation::BcConfig;
use morl_core::morl::{clone_program, evaluate_policy, Phase, RunDirectory, RunRecord};
use morl_core::persist::{write_atomic, write_json};
use morl_core::policy::{MlpArchitecture, MlpPolicy};
use morl_core::repair::{apply_edits, check_constraints, resolve_constraints, EditScript, StateSampler};
use morl_core::tree::{seed_programs, DecisionTreePolicy, TreeNode};
use morl_core::trpo::{train, TrpoConfig};
use morl_core::MorlError;

pub const MAX_UNDO: usize = 100;
pub const MAX_EPISODES: usize = 1000;
pub const MAX_POINTS_PER_EPISODE: usize = 200;
pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Idle,
    Imitating,
    Training,
}

#[derive(Debug)]
pub struct Session {
    pub program: DecisionTreePolicy,
    pub policy: Option<MlpPolicy>,
    pub status: SessionStatus,
    pub undo: Vec<(DecisionTreePolicy, EditScript)>,
    /// Count of applied mutations; each edit response carries the value it
    /// produced.
    pub revision: u64,
    jobs_run: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct JobInfo {
    pub id: u64,
    pub kind: &'static str,
    pub status: JobStatus,
    pub progress: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub struct AppState {
    pub run_dir: RunDirectory,
    pub env: EnvConfig,
    pub arch: MlpArchitecture,
    session: Mutex<Session>,
    jobs: Mutex<HashMap<u64, JobInfo>>,
    next_job: AtomicU64,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl AppState {
    fn session_dir(&self) -> PathBuf {
        self.run_dir.root.join("session")
    }

    fn program_path(&self) -> PathBuf {
        self.session_dir().join("program.tree")
    }

    fn policy_path(&self) -> PathBuf {
        self.session_dir().join("policy.json")
    }

    /// Load the session from `run_dir`: the saved session program, else the
    /// newest repaired or extracted program, else the worst seed program.
    /// The policy is the saved session policy or the newest checkpoint.
    pub fn open(run_dir: RunDirectory) -> Result<Arc<Self>, MorlError> {
        fs::create_dir_all(&run_dir.root).map_err(|e| MorlError::Io {
            path: run_dir.root.clone(),
            source: e,
        })?;
        let state = Self {
            run_dir,
            env: default_config(),
            arch: MlpArchitecture::default(),
            session: Mutex::new(Session {
                program: seed_programs().worst,
                policy: None,
                status: SessionStatus::Idle,
                undo: Vec::new(),
                revision: 0,
                jobs_run: 0,
            }),
            jobs: Mutex::new(HashMap::new()),
            next_job: AtomicU64::new(1),
        };
        let newest = |f: &dyn Fn(usize) -> PathBuf| (0..1000).map(f).take_while(|p| p.exists()).last();
        let program_file = Some(state.program_path())
            .filter(|p| p.exists())
            .or_else(|| newest(&|t| state.run_dir.repaired_program(t)))
            .or_else(|| newest(&|t| state.run_dir.program(t)));
        let policy_file = Some(state.policy_path())
            .filter(|p| p.exists())
            .or_else(|| newest(&|t| state.run_dir.checkpoint(t)));
        {
            let mut s = lock(&state.session);
            if let Some(path) = program_file {
                let text = fs::read_to_string(&path).map_err(|e| MorlError::Io { path: path.clone(), source: e })?;
                s.program = text.parse()?;
            }
            if let Some(path) = policy_file {
                s.policy = Some(MlpPolicy::load(&path)?);
            }
            state.persist_program(&s.program)?;
        }
        Ok(Arc::new(state))
    }

    fn persist_program(&self, program: &DecisionTreePolicy) -> Result<(), MorlError> {
        write_atomic(&self.program_path(), program.serialize_annotated().as_bytes())
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn busy() -> Self {
        Self::new(StatusCode::CONFLICT, "busy", "a job is running; wait for it to finish")
    }
}

impl From<MorlError> for ApiError {
    fn from(e: MorlError) -> Self {
        let (status, code) = match &e {
            MorlError::EditScript { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_edit"),
            MorlError::UnknownNode(_) => (StatusCode::UNPROCESSABLE_ENTITY, "unknown_node"),
            MorlError::KindMismatch { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "kind_mismatch"),
            MorlError::Syntax { .. } | MorlError::UnknownFeature { .. } | MorlError::MalformedTree(_) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "invalid_program")
            }
            MorlError::InvalidConfig(_) | MorlError::Json(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_request"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

fn parse_body<T: DeserializeOwned + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string()))
}

fn node_views(tree: &DecisionTreePolicy) -> Vec<Value> {
    let mut parent = vec![None; tree.nodes().len()];
    let mut depth = vec![0usize; tree.nodes().len()];
    for (id, n) in tree.nodes().iter().enumerate() {
        if let TreeNode::Internal { left, right, .. } = *n {
            for child in [left, right] {
                parent[child] = Some(id);
                depth[child] = depth[id] + 1;
            }
        }
    }
    tree.nodes()
        .iter()
        .enumerate()
        .map(|(id, n)| match *n {
            TreeNode::Internal {
                feature,
                threshold,
                left,
                right,
            } => json!({
                "id": id, "kind": "internal", "feature": feature, "threshold": threshold,
                "left": left, "right": right, "depth": depth[id], "parent": parent[id],
            }),
            TreeNode::Leaf { action } => json!({
                "id": id, "kind": "leaf", "action": action, "depth": depth[id], "parent": parent[id],
            }),
        })
        .collect()
}

fn program_view(s: &Session) -> Value {
    let stats = s.program.structural_stats();
    json!({
        "program": s.program.serialize(),
        "annotated": s.program.serialize_annotated(),
        "structural_stats": { "depth": stats.depth, "node_count": stats.node_count, "leaf_count": stats.leaf_count },
        "nodes": node_views(&s.program),
        "unreachable_leaves": s.program.unreachable_leaves_in(morl_core::tree::FEATURE_BOX),
        "undo_depth": s.undo.len(),
        "revision": s.revision,
        "status": s.status,
        "has_policy": s.policy.is_some(),
    })
}

async fn get_program(AxumState(app): AxumState<Arc<AppState>>) -> ApiResult {
    Ok(Json(program_view(&lock(&app.session))))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EditsRequest {
    edits: Vec<String>,
}

fn script_from_lines(lines: &[String]) -> Result<EditScript, ApiError> {
    Ok(EditScript::parse(&lines.join("\n"))?)
}

async fn post_edits(AxumState(app): AxumState<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: EditsRequest = parse_body(&body)?;
    let script = script_from_lines(&req.edits)?;
    if script.is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_edit", "no edits given"));
    }
    let mut s = lock(&app.session);
    if s.status != SessionStatus::Idle {
        return Err(ApiError::busy());
    }
    let next = apply_edits(&s.program, &script)?;
    app.persist_program(&next)?;
    let prev = std::mem::replace(&mut s.program, next);
    s.undo.push((prev, script));
    if s.undo.len() > MAX_UNDO {
        s.undo.remove(0);
    }
    s.revision += 1;
    Ok(Json(program_view(&s)))
}

async fn post_undo(AxumState(app): AxumState<Arc<AppState>>) -> ApiResult {
    let mut s = lock(&app.session);
    if s.status != SessionStatus::Idle {
        return Err(ApiError::busy());
    }
    let (prev, _) = s
        .undo
        .pop()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "nothing_to_undo", "undo stack is empty"))?;
    app.persist_program(&prev)?;
    s.program = prev;
    s.revision += 1;
    Ok(Json(program_view(&s)))
}

/// A program to inspect without touching the session: an explicit program
/// text, or the session program with staged edits applied.
#[derive(Debug, Default, Deserialize)]
struct Scratch {
    program: Option<String>,
    #[serde(default)]
    edits: Vec<String>,
}

impl Scratch {
    fn resolve(&self, current: &DecisionTreePolicy) -> Result<DecisionTreePolicy, ApiError> {
        let base = match &self.program {
            Some(text) => text.parse()?,
            None => current.clone(),
        };
        Ok(apply_edits(&base, &script_from_lines(&self.edits)?)?)
    }
}

#[derive(Debug, Default, Deserialize, PartialEq, Eq, Clone, Copy)]
#[serde(rename_all = "snake_case")]
enum Source {
    #[default]
    Program,
    Policy,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RolloutRequest {
    source: Source,
    episodes: usize,
    seed: u64,
    program: Option<String>,
    edits: Vec<String>,
}

impl Default for RolloutRequest {
    fn default() -> Self {
        Self {
            source: Source::Program,
            episodes: 10,
            seed: 0,
            program: None,
            edits: Vec::new(),
        }
    }
}

fn check_episodes(n: usize) -> Result<(), ApiError> {
    if n == 0 || n > MAX_EPISODES {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid_request",
            format!("episodes must be in 1..={MAX_EPISODES}"),
        ));
    }
    Ok(())
}

fn no_policy() -> ApiError {
    ApiError::new(StatusCode::CONFLICT, "no_policy", "no policy yet; run imitation first")
}

#[derive(Serialize)]
struct Point {
    state: State,
    action: Action,
}

fn run_rollouts(actor: &dyn Actor, env: &EnvConfig, episodes: usize, seed: u64) -> Value {
    let mut rng = stream(seed);
    let mut returns = Vec::with_capacity(episodes);
    let mut trajectories = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let traj = rollout(actor, env, &mut rng, env.max_episode_steps);
        returns.push(traj.total_return);
        let stride = traj.len().div_ceil(MAX_POINTS_PER_EPISODE).max(1);
        let points: Vec<Point> = traj
            .steps
            .iter()
            .step_by(stride)
            .map(|t| Point {
                state: t.state,
                action: t.action,
            })
            .collect();
        trajectories.push(points);
    }
    let (mean, std) = morl_core::synthesis::mean_std(&returns);
    json!({ "returns": returns, "mean": mean, "std": std, "trajectories": trajectories })
}

async fn post_rollout(AxumState(app): AxumState<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: RolloutRequest = parse_body(&body)?;
    check_episodes(req.episodes)?;
    let (program, policy) = {
        let s = lock(&app.session);
        let scratch = Scratch {
            program: req.program.clone(),
            edits: req.edits.clone(),
        };
        (scratch.resolve(&s.program)?, s.policy.clone())
    };
    let app2 = app.clone();
    let out = tokio::task::spawn_blocking(move || match req.source {
        Source::Program => Ok(run_rollouts(&program, &app2.env, req.episodes, req.seed)),
        Source::Policy => {
            let p = policy.ok_or_else(no_policy)?;
            Ok(run_rollouts(&p.greedy(), &app2.env, req.episodes, req.seed))
        }
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    out.map(Json)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CheckRequest {
    constraints: Vec<String>,
    sampler: StateSampler,
    program: Option<String>,
    edits: Vec<String>,
}

impl Default for CheckRequest {
    fn default() -> Self {
        Self {
            constraints: vec!["builtin".into()],
            sampler: StateSampler::default(),
            program: None,
            edits: Vec::new(),
        }
    }
}

async fn post_check(AxumState(app): AxumState<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: CheckRequest = parse_body(&body)?;
    let constraints = resolve_constraints(&req.constraints)?;
    let program = Scratch {
        program: req.program,
        edits: req.edits,
    }
    .resolve(&lock(&app.session).program)?;
    let reports = check_constraints(&program, &constraints, &req.sampler, &app.env);
    Ok(Json(json!({ "reports": reports })))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct EvaluateQuery {
    episodes: Option<usize>,
    seed: Option<u64>,
}

async fn get_evaluate(AxumState(app): AxumState<Arc<AppState>>, Query(q): Query<EvaluateQuery>) -> ApiResult {
    let episodes = q.episodes.unwrap_or(25);
    check_episodes(episodes)?;
    let seed = q.seed.unwrap_or(0);
    let (program, policy) = {
        let s = lock(&app.session);
        (s.program.clone(), s.policy.clone())
    };
    let env = app.env.clone();
    let out = tokio::task::spawn_blocking(move || -> Result<Value, MorlError> {
        let (pm, ps) = evaluate_policy(&program, &env, episodes, &mut stream(seed))?;
        let policy = match policy {
            Some(p) => {
                let (m, s) = evaluate_policy(&p.greedy(), &env, episodes, &mut stream(seed))?;
                json!({ "mean": m, "std": s })
            }
            None => Value::Null,
        };
        Ok(json!({ "program": { "mean": pm, "std": ps }, "policy": policy }))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(out))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct MetricsQuery {
    after: usize,
}

async fn get_metrics(AxumState(app): AxumState<Arc<AppState>>, Query(q): Query<MetricsQuery>) -> ApiResult {
    let records = app.run_dir.read_metrics(q.after)?;
    let next = q.after + records.len();
    Ok(Json(json!({ "records": records, "next": next })))
}

async fn get_job(AxumState(app): AxumState<Arc<AppState>>, Path(id): Path<u64>) -> ApiResult {
    let jobs = lock(&app.jobs);
    let job = jobs
        .get(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_job", format!("no job {id}")))?;
    Ok(Json(serde_json::to_value(job).expect("job info serializes")))
}

async fn get_status(AxumState(app): AxumState<Arc<AppState>>) -> ApiResult {
    let s = lock(&app.session);
    Ok(Json(json!({ "status": s.status, "revision": s.revision, "undo_depth": s.undo.len(), "has_policy": s.policy.is_some() })))
}

fn start_job(
    app: &Arc<AppState>,
    kind: &'static str,
    status: SessionStatus,
    work: impl FnOnce(&Arc<AppState>, u64, usize) -> Result<Value, MorlError> + Send + 'static,
) -> ApiResult {
    let job_index = {
        let mut s = lock(&app.session);
        if s.status != SessionStatus::Idle {
            return Err(ApiError::busy());
        }
        s.status = status;
        s.jobs_run += 1;
        s.jobs_run
    };
    let id = app.next_job.fetch_add(1, Ordering::SeqCst);
    lock(&app.jobs).insert(
        id,
        JobInfo {
            id,
            kind,
            status: JobStatus::Running,
            progress: 0.0,
            result: None,
            error: None,
        },
    );
    let app = app.clone();
    tokio::task::spawn_blocking(move || {
        let outcome = work(&app, id, job_index);
        lock(&app.session).status = SessionStatus::Idle;
        let mut jobs = lock(&app.jobs);
        let job = jobs.get_mut(&id).expect("job registered");
        match outcome {
            Ok(v) => {
                job.status = JobStatus::Succeeded;
                job.progress = 1.0;
                job.result = Some(v);
            }
            Err(e) => {
                log::warn!("job {id} failed: {e}");
                job.status = JobStatus::Failed;
                job.error = Some(e.to_string());
            }
        }
    });
    Ok(Json(json!({ "job_id": id })))
}

async fn post_imitate(AxumState(app): AxumState<Arc<AppState>>, body: Bytes) -> ApiResult {
    let mut merged = serde_json::to_value(BcConfig::default()).expect("config serializes");
    let overrides: Value = parse_body(&body)?;
    if let (Value::Object(base), Value::Object(o)) = (&mut merged, overrides) {
        base.extend(o);
    }
    let cfg: BcConfig = serde_json::from_value(merged).map_err(MorlError::from)?;
    cfg.validate()?;
    let program = lock(&app.session).program.clone();
    start_job(&app, "imitate", SessionStatus::Imitating, move |app, _, job_index| {
        let (policy, report) = clone_program(&program, &app.arch, &app.env, &cfg, cfg.seed)?;
        policy.save(&app.policy_path())?;
        write_json(&app.session_dir().join("bc_report.json"), &report)?;
        let eval = (report.cloned_policy_return, report.cloned_policy_return_std);
        app.run_dir.append(
            &RunRecord::new(job_index, Phase::Imitation, cfg.epochs, eval)
                .with("agreement", report.holdout_agreement)
                .with("final_loss", report.final_loss),
        )?;
        lock(&app.session).policy = Some(policy);
        Ok(json!({
            "holdout_agreement": report.holdout_agreement,
            "final_loss": report.final_loss,
            "cloned_policy_return": report.cloned_policy_return,
        }))
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainRequest {
    iterations: usize,
    seed: u64,
}

impl Default for TrainRequest {
    fn default() -> Self {
        Self { iterations: 5, seed: 0 }
    }
}

async fn post_train(AxumState(app): AxumState<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: TrainRequest = parse_body(&body)?;
    if req.iterations == 0 || req.iterations > 1000 {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", "iterations must be in 1..=1000"));
    }
    let policy = lock(&app.session).policy.clone().ok_or_else(no_policy)?;
    start_job(&app, "train", SessionStatus::Training, move |app, id, job_index| {
        let cfg = TrpoConfig::default();
        let mut failure = None;
        let params = train(&policy.params, &policy.arch, &app.env, &cfg, req.iterations, &mut stream(req.seed), &mut |r| {
            if let Err(e) = app.run_dir.append(&RunRecord::from_trpo(job_index, r)) {
                failure.get_or_insert(e);
            }
            if let Some(job) = lock(&app.jobs).get_mut(&id) {
                job.progress = (r.iteration + 1) as f64 / req.iterations as f64;
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        let trained = MlpPolicy {
            arch: policy.arch.clone(),
            params,
        };
        trained.save(&app.policy_path())?;
        lock(&app.session).policy = Some(trained);
        Ok(json!({ "iterations": req.iterations }))
    })
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/program", get(get_program))
        .route("/api/edits", post(post_edits))
        .route("/api/undo", post(post_undo))
        .route("/api/rollout", post(post_rollout))
        .route("/api/check", post(post_check))
        .route("/api/imitate", post(post_imitate))
        .route("/api/train", post(post_train))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/metrics", get(get_metrics))
        .route("/api/evaluate", get(get_evaluate))
        .route("/api/status", get(get_status))
        .layer(CorsLayer::permissive())
        .with_state(app)
}

/// Serve until ctrl-c.
pub async fn serve(run_dir: RunDirectory, addr: SocketAddr) -> Result<(), MorlError> {
    let app = AppState::open(run_dir)?;
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| MorlError::Io {
        path: PathBuf::from(addr.to_string()),
        source: e,
    })?;
    log::info!("listening on {}", listener.local_addr().map(|a| a.to_string()).unwrap_or_default());
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| MorlError::Io {
            path: PathBuf::from(addr.to_string()),
            source: e,
        })
}
