//! HTTP session service: a human plays the driver, the planner leads.
//!
//! Sessions live in memory. Each session is guarded by its own mutex; a
//! submit that finds the session busy is rejected with a conflict rather
//! than queued.

pub mod error;
pub mod session;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, TryLockError};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use stackdrive::learning::{adapt_driver, LearnConfig};
use stackdrive::{Action, Scenario, SolverConfig, UtilityTable};
use tower_http::services::ServeDir;

pub use error::{ApiError, ApiResult, ErrorBody};
pub use session::{Assistance, Awaiting, CreateSession, Session, SessionSummary, SessionView};

pub const DEFAULT_SCENARIO: &str = "default";
pub const DEFAULT_UTILITY: &str = "meta";

/// Body of `POST /sessions/{id}/action`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitAction {
    pub action: Action,
    /// Step the client believes it is acting on.
    #[serde(default)]
    pub t: Option<usize>,
}

/// Body of `POST /sessions/{id}/adapt`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptRequest {
    /// Table to adapt from; the session's own utility when absent.
    pub base: Option<String>,
    /// Overrides the configured adaptation seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptResponse {
    pub utility: String,
    pub decisions: usize,
}

type SessionCell = Arc<Mutex<Session>>;

pub struct Service {
    scenarios: BTreeMap<String, Scenario>,
    learning: LearnConfig,
    solver: SolverConfig,
    utilities: RwLock<BTreeMap<String, Arc<UtilityTable>>>,
    sessions: RwLock<BTreeMap<String, SessionCell>>,
    next_session: AtomicU64,
    next_table: AtomicU64,
}

impl Service {
    /// A service with one scenario named `default` and the built-in `zero` table.
    pub fn new(scenario: Scenario, learning: LearnConfig, solver: SolverConfig) -> Self {
        let zero = UtilityTable::for_scenario(&scenario);
        Self {
            scenarios: BTreeMap::from([(DEFAULT_SCENARIO.to_string(), scenario)]),
            learning,
            solver,
            utilities: RwLock::new(BTreeMap::from([("zero".to_string(), Arc::new(zero))])),
            sessions: RwLock::new(BTreeMap::new()),
            next_session: AtomicU64::new(1),
            next_table: AtomicU64::new(1),
        }
    }

    pub fn insert_scenario(&mut self, name: &str, s: Scenario) {
        self.scenarios.insert(name.to_string(), s);
    }

    pub fn insert_utility(&self, name: &str, table: UtilityTable) {
        self.utilities.write().expect("utility store").insert(name.to_string(), Arc::new(table));
    }

    pub fn utility(&self, name: &str) -> Option<Arc<UtilityTable>> {
        self.utilities.read().expect("utility store").get(name).cloned()
    }

    pub fn utility_names(&self) -> Vec<String> {
        self.utilities.read().expect("utility store").keys().cloned().collect()
    }

    /// Registers `meta.json` and `adapted/type_*.json` from a run directory
    /// as `meta` and `adapted/type_*`. Returns the names loaded.
    pub fn load_run_dir(&self, dir: &Path) -> stackdrive::Result<Vec<String>> {
        let mut loaded = Vec::new();
        let meta = dir.join("meta.json");
        if meta.exists() {
            self.insert_utility(DEFAULT_UTILITY, UtilityTable::load(&meta)?.0);
            loaded.push(DEFAULT_UTILITY.to_string());
        }
        if let Ok(entries) = std::fs::read_dir(dir.join("adapted")) {
            let mut paths: Vec<_> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
            paths.sort();
            for p in paths {
                let Some(stem) = p.file_stem().and_then(|s| s.to_str()) else { continue };
                if p.extension().is_some_and(|e| e == "json") {
                    let name = format!("adapted/{stem}");
                    self.insert_utility(&name, UtilityTable::load(&p)?.0);
                    loaded.push(name);
                }
            }
        }
        Ok(loaded)
    }

    fn session(&self, id: &str) -> ApiResult<SessionCell> {
        self.sessions.read().expect("session store").get(id).cloned().ok_or_else(|| ApiError::not_found(id))
    }

    pub fn create(&self, req: &CreateSession) -> ApiResult<SessionView> {
        let scenario_ref = req.scenario.clone().unwrap_or_else(|| DEFAULT_SCENARIO.to_string());
        let s = self.scenarios.get(&scenario_ref).ok_or_else(|| ApiError::unknown_scenario(&scenario_ref))?;
        let utility_ref = req.utility.clone().unwrap_or_else(|| DEFAULT_UTILITY.to_string());
        let table = self.utility(&utility_ref).ok_or_else(|| ApiError::unknown_utility(&utility_ref))?;
        let seed = req.seed.unwrap_or_else(rand::random);
        let id = format!("s{}", self.next_session.fetch_add(1, Ordering::Relaxed));
        let session =
            Session::start(id.clone(), scenario_ref, utility_ref, req, s, (*table).clone(), self.solver, seed)?;
        let view = session.view();
        self.sessions.write().expect("session store").insert(id, Arc::new(Mutex::new(session)));
        Ok(view)
    }

    pub fn list(&self) -> Vec<SessionSummary> {
        let cells: Vec<SessionCell> = self.sessions.read().expect("session store").values().cloned().collect();
        cells.iter().map(|c| lock(c).summary()).collect()
    }

    pub fn get(&self, id: &str) -> ApiResult<SessionView> {
        Ok(lock(&self.session(id)?).view())
    }

    pub fn delete(&self, id: &str) -> ApiResult<()> {
        self.sessions.write().expect("session store").remove(id).map(|_| ()).ok_or_else(|| ApiError::not_found(id))
    }

    pub fn assist(&self, id: &str) -> ApiResult<Assistance> {
        lock(&self.session(id)?).assistance()
    }

    /// Applies a driver action. A session already busy with another submit
    /// answers with a conflict.
    pub fn submit(&self, id: &str, req: &SubmitAction) -> ApiResult<SessionView> {
        let cell = self.session(id)?;
        let mut guard = match cell.try_lock() {
            Ok(g) => g,
            Err(TryLockError::WouldBlock) => return Err(ApiError::conflict("another action is being applied")),
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
        };
        guard.submit(req.action, req.t)?;
        Ok(guard.view())
    }

    /// Adapts a table to the session's decisions and registers it.
    pub fn adapt(&self, id: &str, req: &AdaptRequest) -> ApiResult<AdaptResponse> {
        let (data, scenario_ref, own) = {
            let cell = self.session(id)?;
            let session = lock(&cell);
            (session.history(), session.scenario_ref.clone(), session.utility_ref.clone())
        };
        if data.is_empty() {
            return Err(ApiError::no_decisions());
        }
        let base_ref = req.base.clone().unwrap_or(own);
        let base = self.utility(&base_ref).ok_or_else(|| ApiError::unknown_utility(&base_ref))?;
        let s = &self.scenarios[&scenario_ref];
        let mut cfg = self.learning.clone();
        if let Some(seed) = req.seed {
            cfg.seed = seed;
        }
        let table = adapt_driver(&base, &data, s, &cfg, &self.solver)?;
        let name = format!("adapted/{id}-{}", self.next_table.fetch_add(1, Ordering::Relaxed));
        self.insert_utility(&name, table);
        Ok(AdaptResponse { utility: name, decisions: data.len() })
    }
}

fn lock(cell: &SessionCell) -> std::sync::MutexGuard<'_, Session> {
    cell.lock().unwrap_or_else(|p| p.into_inner())
}

fn parse_body<T: DeserializeOwned + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::validation(e.to_string()))
}

/// Runs a blocking service call off the async executor.
async fn blocking<T, F>(svc: Arc<Service>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Service) -> ApiResult<T> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&svc)).await.map_err(|e| ApiError::internal(e.to_string()))?
}

async fn create_session(State(svc): State<Arc<Service>>, body: Bytes) -> ApiResult<(StatusCode, Json<SessionView>)> {
    let req: CreateSession = parse_body(&body)?;
    let view = blocking(svc, move |s| s.create(&req)).await?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn list_sessions(State(svc): State<Arc<Service>>) -> ApiResult<Json<Vec<SessionSummary>>> {
    blocking(svc, |s| Ok(s.list())).await.map(Json)
}

async fn get_session(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionView>> {
    blocking(svc, move |s| s.get(&id)).await.map(Json)
}

async fn delete_session(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> ApiResult<StatusCode> {
    svc.delete(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn submit_action(
    State(svc): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<SessionView>> {
    let req: SubmitAction = serde_json::from_slice(&body).map_err(|e| ApiError::validation(e.to_string()))?;
    blocking(svc, move |s| s.submit(&id, &req)).await.map(Json)
}

async fn get_assist(State(svc): State<Arc<Service>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Assistance>> {
    blocking(svc, move |s| s.assist(&id)).await.map(Json)
}

async fn adapt_session(
    State(svc): State<Arc<Service>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<AdaptResponse>)> {
    let req: AdaptRequest = parse_body(&body)?;
    let resp = blocking(svc, move |s| s.adapt(&id, &req)).await?;
    Ok((StatusCode::CREATED, Json(resp)))
}

async fn list_utilities(State(svc): State<Arc<Service>>) -> Json<Vec<String>> {
    Json(svc.utility_names())
}

/// The API routes, plus a static file fallback when `static_dir` is given.
pub fn router(svc: Arc<Service>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/action", post(submit_action))
        .route("/sessions/{id}/assist", get(get_assist))
        .route("/sessions/{id}/adapt", post(adapt_session))
        .route("/utilities", get(list_utilities))
        .with_state(svc);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}
