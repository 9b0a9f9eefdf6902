//! Session service for human demonstration collection.
//!
//! A participant plays an ordered list of levels from a stored task split.
//! Every observation sent over the wire has the session's blindfold applied;
//! the trajectories written to disk keep the unmasked renderings, exactly
//! like scripted datasets.
//!
//! Endpoints (all bodies JSON, every response carries `"schema":
//! "bldc-session-v1"`):
//!
//! | method | path                    | body                                              |
//! |--------|-------------------------|---------------------------------------------------|
//! | POST   | `/sessions`             | `{family, split_id, blindfold?, participant?, levels?, horizon?}` |
//! | POST   | `/sessions/{id}/action` | `{action}`                                        |
//! | GET    | `/sessions/{id}/state`  |                                                   |
//!
//! `levels` is `"train"`, `"test"`, `"all"` (default) or an explicit list of
//! task seeds from the split.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use bldc_core::{BlindfoldSpec, Family, Observation, SplitMix64, TaskSpec};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

mod error;
mod session;
pub mod store;

pub use error::ApiError;
pub use session::{LevelResult, Session};

pub const SCHEMA: &str = "bldc-session-v1";

/// Environment variable naming the data directory when no flag is given.
pub const DATA_DIR_ENV: &str = "BLDC_DATA_DIR";

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    data_dir: PathBuf,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    counter: AtomicU64,
    salt: u64,
}

impl AppState {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        let salt = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0);
        AppState {
            inner: Arc::new(Inner {
                data_dir: data_dir.into(),
                sessions: Mutex::new(HashMap::new()),
                counter: AtomicU64::new(0),
                salt,
            }),
        }
    }

    pub fn data_dir(&self) -> &std::path::Path {
        &self.inner.data_dir
    }

    fn fresh_id(&self) -> String {
        let n = self.inner.counter.fetch_add(1, Ordering::Relaxed);
        let token = SplitMix64::from_parts(self.inner.salt, n).next_u64();
        format!("{n:04}-{token:016x}")
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        let sessions = self.inner.sessions.lock().expect("session table poisoned");
        sessions
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown session '{id}'")))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/action", post(take_action))
        .route("/sessions/{id}/state", get(session_state))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, data_dir: PathBuf) -> std::io::Result<()> {
    let app = router(AppState::new(data_dir.clone()));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, data_dir = %data_dir.display(), "serving");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum LevelSelection {
    Named(String),
    Seeds(Vec<u64>),
}

#[derive(Debug, Clone, Deserialize)]
pub struct CreateSession {
    pub family: Family,
    pub split_id: String,
    #[serde(default)]
    pub blindfold: Option<String>,
    #[serde(default)]
    pub participant: Option<String>,
    #[serde(default)]
    pub levels: Option<LevelSelection>,
    #[serde(default)]
    pub horizon: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionCreated {
    pub schema: String,
    pub session_id: String,
    pub level_index: usize,
    pub level_count: usize,
    pub step: usize,
    pub action_count: usize,
    pub mask_channel: usize,
    pub blindfold: String,
    pub observation: Observation,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ActionRequest {
    pub action: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActionResponse {
    pub schema: String,
    /// View of the state the participant acts from next: the following
    /// level's first frame after a level ends, absent once the session is
    /// complete.
    pub observation: Option<Observation>,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
    pub level_advanced: bool,
    pub level_index: usize,
    pub session_complete: bool,
    pub step: usize,
    /// Written trajectory, relative to the data directory, when a level ended.
    pub trajectory: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionState {
    pub schema: String,
    pub session_id: String,
    pub participant: String,
    pub split_id: String,
    pub family: Family,
    pub blindfold: String,
    pub level_index: usize,
    pub level_count: usize,
    pub levels_done: usize,
    pub successes: usize,
    pub steps_per_level: Vec<usize>,
    pub step: usize,
    pub complete: bool,
}

fn select_levels(
    split: &bldc_core::TaskSplit,
    sel: Option<LevelSelection>,
) -> Result<Vec<TaskSpec>, ApiError> {
    Ok(match sel {
        None => split.train.iter().chain(&split.test).cloned().collect(),
        Some(LevelSelection::Named(name)) => match name.as_str() {
            "all" => split.train.iter().chain(&split.test).cloned().collect(),
            "train" => split.train.clone(),
            "test" => split.test.clone(),
            other => {
                return Err(ApiError::BadRequest(format!(
                    "unknown level selection '{other}' (train, test, all, or a seed list)"
                )))
            }
        },
        Some(LevelSelection::Seeds(seeds)) => seeds
            .iter()
            .map(|s| {
                split
                    .find(*s)
                    .cloned()
                    .ok_or_else(|| ApiError::BadRequest(format!("seed {s} is not in the split")))
            })
            .collect::<Result<_, _>>()?,
    })
}

async fn create_session(
    State(app): State<AppState>,
    Json(req): Json<CreateSession>,
) -> Result<Json<SessionCreated>, ApiError> {
    let split = store::load_split(app.data_dir(), &req.split_id)?;
    if split.params.family != req.family {
        return Err(ApiError::BadRequest(format!(
            "split '{}' holds {} tasks, not {}",
            req.split_id, split.params.family, req.family
        )));
    }
    let blindfold: BlindfoldSpec = match &req.blindfold {
        Some(text) => text.parse()?,
        None => BlindfoldSpec::None,
    };
    let levels = select_levels(&split, req.levels)?;
    let id = app.fresh_id();
    let session = Session::new(
        id.clone(),
        req.participant.unwrap_or_else(|| "anonymous".into()),
        req.split_id,
        split.split_seed,
        req.family,
        blindfold,
        levels,
        req.horizon.unwrap_or_else(|| req.family.default_horizon()),
    )?;
    let observation = session.masked_observation()?;
    let created = SessionCreated {
        schema: SCHEMA.into(),
        session_id: id.clone(),
        level_index: 0,
        level_count: session.level_count(),
        step: 0,
        action_count: req.family.action_count(),
        mask_channel: observation.layout().mask(),
        blindfold: session.blindfold.to_string(),
        observation,
    };
    tracing::info!(session = %id, participant = %session.participant, "session created");
    app.inner
        .sessions
        .lock()
        .expect("session table poisoned")
        .insert(id, Arc::new(Mutex::new(session)));
    Ok(Json(created))
}

async fn take_action(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<ActionRequest>,
) -> Result<Json<ActionResponse>, ApiError> {
    let handle = app.session(&id)?;
    // Held for the whole request: actions on one session are serialized,
    // including the trajectory write.
    let mut session = handle.lock().expect("session poisoned");
    let adv = session.act(req.action)?;
    let mut trajectory = None;
    if let Some(fin) = &adv.finished {
        let path = store::trajectory_path(app.data_dir(), &id, fin.level_index, fin.task_seed);
        store::save_trajectory(&path, &fin.dataset)?;
        let rel = path.strip_prefix(app.data_dir()).unwrap_or(&path);
        trajectory = Some(rel.to_string_lossy().into_owned());
    }
    let complete = session.complete();
    let observation = if complete { None } else { Some(session.masked_observation()?) };
    Ok(Json(ActionResponse {
        schema: SCHEMA.into(),
        observation,
        reward: adv.reward,
        done: adv.done,
        success: adv.success,
        level_advanced: adv.done && !complete,
        level_index: session.level_index(),
        session_complete: complete,
        step: if adv.done { 0 } else { session.step() },
        trajectory,
    }))
}

async fn session_state(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<SessionState>, ApiError> {
    let handle = app.session(&id)?;
    let s = handle.lock().expect("session poisoned");
    let results = s.results();
    Ok(Json(SessionState {
        schema: SCHEMA.into(),
        session_id: s.id.clone(),
        participant: s.participant.clone(),
        split_id: s.split_id.clone(),
        family: s.family,
        blindfold: s.blindfold.to_string(),
        level_index: s.level_index(),
        level_count: s.level_count(),
        levels_done: results.len(),
        successes: results.iter().filter(|r| r.success).count(),
        steps_per_level: results.iter().map(|r| r.steps).collect(),
        step: if s.complete() { 0 } else { s.step() },
        complete: s.complete(),
    }))
}
