//! Session-oriented query loop for live human feedback.
//!
//! A [`SessionStore`] owns many sessions, each behind its own mutex. Every
//! pending candidate carries a fresh nonce; feedback is accepted only with the
//! current nonce, so a retried or duplicated submission is rejected as stale.
//! With a backing directory, each session is written to `<id>.json` after
//! every transition and reloaded by [`SessionStore::open`].

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bo::Optimizer;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::experiment::{bo_config_for, prepare_seed, problem_of};
use crate::feedback::Human;
use crate::geometry::{Trajectory, Workspace};

/// Version of every payload produced here.
pub const SCHEMA_VERSION: u32 = 1;

/// Bandit feedback on the pending candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Feedback {
    /// Per-human entries: `F = complaints + lambda * sum(ratings)`.
    Itemized { complaints: u32, ratings: Vec<u32> },
    /// The total `F` directly.
    Aggregate { satisfaction: f64 },
}

impl Feedback {
    pub fn total(&self, lambda: f64, k: u32) -> Result<f64> {
        match self {
            Feedback::Itemized { complaints, ratings } => {
                if let Some(r) = ratings.iter().find(|&&r| r > k) {
                    return Err(Error::invalid("ratings", format!("{r} is outside 0..={k}")));
                }
                let sum: u32 = ratings.iter().sum();
                Ok(f64::from(*complaints) + lambda * f64::from(sum))
            }
            Feedback::Aggregate { satisfaction } => {
                if !(satisfaction.is_finite() && *satisfaction >= 0.0) {
                    return Err(Error::invalid("satisfaction", "must be a non-negative number"));
                }
                Ok(*satisfaction)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Submission {
    pub nonce: String,
    pub feedback: Feedback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pending,
    Complete,
}

/// What a client needs to show the current candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub schema_version: u32,
    pub session_id: String,
    pub status: Status,
    pub query_index: Option<usize>,
    pub nonce: Option<String>,
    /// Executed trajectory the human judges.
    pub trajectory: Option<Trajectory>,
    pub reference: Option<Trajectory>,
    pub workspace: Workspace,
    pub humans: Vec<Human>,
    pub k: u32,
    pub lambda: f64,
    pub n_query: usize,
    pub best_obj: Option<f64>,
    pub best_f: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub query_index: usize,
    pub status: Status,
    /// Empty for the pending candidate and for penalized proposals.
    pub satisfaction: Option<f64>,
    pub obj: Option<f64>,
    pub best_obj: Option<f64>,
    pub penalized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryView {
    pub schema_version: u32,
    pub session_id: String,
    pub status: Status,
    /// Labeled queries in order, then the pending candidate if any.
    pub records: Vec<HistoryRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Session {
    pub schema_version: u32,
    pub id: String,
    pub config: RunConfig,
    optimizer: Optimizer,
    nonce: Option<String>,
    pub created: u64,
    pub updated: u64,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn token() -> String {
    format!("{:032x}", rand::thread_rng().gen::<u128>())
}

impl Session {
    /// Build the optimizer for `cfg.bo.mode` and generate the first candidate.
    pub fn create(cfg: RunConfig, exec: Exec) -> Result<Self> {
        cfg.validate()?;
        let mode = cfg.bo.mode;
        let seed = cfg.bo.seed;
        let mut prep_cfg = cfg.clone();
        prep_cfg.experiment.modes = vec![mode];
        let prepared = prepare_seed(&prep_cfg, seed, exec)?;
        let bo = bo_config_for(&cfg, mode, cfg.bo.bias_enabled, seed);
        let latent = prepared.latent_for(mode)?.clone();
        let optimizer = Optimizer::new(problem_of(&cfg), bo, latent, prepared.anchors_for(mode), exec)?;
        let t = now();
        let mut s = Self {
            schema_version: SCHEMA_VERSION,
            id: token(),
            config: cfg,
            optimizer,
            nonce: None,
            created: t,
            updated: t,
        };
        s.refresh_nonce();
        Ok(s)
    }

    fn refresh_nonce(&mut self) {
        self.nonce = self.optimizer.pending().map(|_| token());
        self.updated = now();
    }

    pub fn is_complete(&self) -> bool {
        self.optimizer.is_finished()
    }

    pub fn candidate(&self) -> CandidateView {
        let pending = self.optimizer.pending();
        let best = self.optimizer.state().map(|s| s.best());
        let best_f = self
            .optimizer
            .records()
            .iter()
            .filter(|r| !r.penalized)
            .map(|r| r.satisfaction)
            .reduce(f64::min);
        CandidateView {
            schema_version: SCHEMA_VERSION,
            session_id: self.id.clone(),
            status: self.status(),
            query_index: pending.map(|c| c.query_index),
            nonce: self.nonce.clone(),
            trajectory: pending.map(|c| c.executed.clone()),
            reference: pending.map(|c| c.reference.clone()),
            workspace: self.config.workspace.clone(),
            humans: self.config.feedback.population.clone(),
            k: self.config.feedback.k,
            lambda: self.config.feedback.lambda,
            n_query: self.config.bo.n_query,
            best_obj: best.map(|r| r.obj),
            best_f,
        }
    }

    fn status(&self) -> Status {
        if self.is_complete() {
            Status::Complete
        } else {
            Status::Pending
        }
    }

    /// Accept feedback for the pending candidate and advance the loop.
    pub fn submit(&mut self, sub: &Submission) -> Result<CandidateView> {
        let current = self.nonce.as_deref().ok_or(Error::SessionComplete)?;
        if sub.nonce != current {
            return Err(Error::StaleNonce);
        }
        let f = sub
            .feedback
            .total(self.config.feedback.lambda, self.config.feedback.k)?;
        self.optimizer.submit(f)?;
        self.refresh_nonce();
        Ok(self.candidate())
    }

    pub fn history(&self) -> HistoryView {
        let mut best = f64::INFINITY;
        let mut records: Vec<HistoryRow> = self
            .optimizer
            .records()
            .iter()
            .map(|r| {
                best = best.min(r.obj);
                HistoryRow {
                    query_index: r.query_index,
                    status: Status::Complete,
                    satisfaction: (!r.penalized).then_some(r.satisfaction),
                    obj: Some(r.obj),
                    best_obj: Some(best),
                    penalized: r.penalized,
                }
            })
            .collect();
        if let Some(c) = self.optimizer.pending() {
            records.push(HistoryRow {
                query_index: c.query_index,
                status: Status::Pending,
                satisfaction: None,
                obj: None,
                best_obj: best.is_finite().then_some(best),
                penalized: false,
            });
        }
        HistoryView {
            schema_version: SCHEMA_VERSION,
            session_id: self.id.clone(),
            status: self.status(),
            records,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Parse {
            origin: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, exec: Exec) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut s: Session = serde_json::from_str(&text).map_err(|e| Error::Parse {
            origin: path.display().to_string(),
            reason: e.to_string(),
        })?;
        if s.schema_version != SCHEMA_VERSION {
            return Err(Error::Parse {
                origin: path.display().to_string(),
                reason: format!("unsupported schema version {}", s.schema_version),
            });
        }
        s.optimizer.set_exec(exec);
        Ok(s)
    }
}

/// Concurrent collection of sessions, optionally persisted to a directory.
#[derive(Debug, Default)]
pub struct SessionStore {
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    dir: Option<PathBuf>,
    exec: Exec,
}

impl SessionStore {
    pub fn in_memory(exec: Exec) -> Self {
        Self {
            sessions: RwLock::default(),
            dir: None,
            exec,
        }
    }

    /// Use `dir` for persistence, resuming every session already saved there.
    pub fn open(dir: impl Into<PathBuf>, exec: Exec) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut sessions = HashMap::new();
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.extension().is_some_and(|x| x == "json") {
                let s = Session::load(&path, exec)?;
                sessions.insert(s.id.clone(), Arc::new(Mutex::new(s)));
            }
        }
        Ok(Self {
            sessions: RwLock::new(sessions),
            dir: Some(dir),
            exec,
        })
    }

    fn persist(&self, s: &Session) -> Result<()> {
        match &self.dir {
            Some(dir) => s.save(&dir.join(format!("{}.json", s.id))),
            None => Ok(()),
        }
    }

    fn get(&self, id: &str) -> Result<Arc<Mutex<Session>>> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| Error::UnknownSession(id.to_string()))
    }

    pub fn create(&self, cfg: RunConfig) -> Result<CandidateView> {
        let s = Session::create(cfg, self.exec)?;
        self.persist(&s)?;
        let view = s.candidate();
        self.sessions
            .write()
            .expect("session map poisoned")
            .insert(s.id.clone(), Arc::new(Mutex::new(s)));
        Ok(view)
    }

    pub fn candidate(&self, id: &str) -> Result<CandidateView> {
        let s = self.get(id)?;
        let s = s.lock().expect("session poisoned");
        Ok(s.candidate())
    }

    /// Submissions to one session are serialized; exactly one per nonce wins.
    pub fn submit(&self, id: &str, sub: &Submission) -> Result<CandidateView> {
        let s = self.get(id)?;
        let mut s = s.lock().expect("session poisoned");
        let view = s.submit(sub)?;
        self.persist(&s)?;
        Ok(view)
    }

    pub fn history(&self, id: &str) -> Result<HistoryView> {
        let s = self.get(id)?;
        let s = s.lock().expect("session poisoned");
        Ok(s.history())
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .sessions
            .read()
            .expect("session map poisoned")
            .keys()
            .cloned()
            .collect();
        ids.sort();
        ids
    }
}
