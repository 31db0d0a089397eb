//! Materializing case directories and executing studies.
//!
//! A run is owned by a single coordinator thread. It starts cases through an
//! [`Executor`] with bounded parallelism, records every transition in
//! `events.jsonl`, and rewrites `status.json` after each one, so `status`
//! and `cancel` work from other processes while the run is in progress.

mod coordinator;
mod executor;
mod materialize;
mod store;
pub mod template;

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{StudyDir, StudyError};
use crate::paramspace::{CaseId, CaseRecord, CaseStatus, ExpandError, StudyConfig, TableError};

pub use coordinator::{run, start, start_with, RunHandle, RunOptions};
pub use executor::{Executor, JobExit, JobSpec, LocalExecutor, LocalJob};
pub use materialize::{materialize, MaterializeOptions};
pub use store::{lock_owner, read_events};

pub const STATUS_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Study(#[from] StudyError),
    #[error(transparent)]
    Expand(#[from] ExpandError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("case {case}: unresolved placeholder {{{{{placeholder}}}}} in {file}")]
    UnresolvedPlaceholder {
        case: CaseId,
        placeholder: String,
        file: String,
    },
    #[error("study directory {0} exists and is not empty (use --force to overwrite)")]
    StudyExists(PathBuf),
    #[error("template directory {0} does not exist")]
    MissingTemplate(PathBuf),
    #[error("unknown case `{case}` in study `{study}`")]
    UnknownCase { study: String, case: String },
    #[error("case {case} already finished ({status})")]
    AlreadyFinished { case: CaseId, status: CaseStatus },
    #[error("max_parallel must be at least 1")]
    InvalidParallelism,
    #[error("run coordinator stopped")]
    CoordinatorGone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    StudyStarted,
    CaseStarted,
    CaseFinished,
    CaseCancelled,
    StudyFinished,
}

/// One line of `events.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub time: DateTime<Utc>,
    /// Empty for study-level events.
    pub case_id: String,
    pub kind: EventKind,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseState {
    pub id: CaseId,
    pub status: CaseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
}

impl CaseState {
    fn pending(id: CaseId) -> CaseState {
        CaseState {
            id,
            status: CaseStatus::Pending,
            exit_code: None,
            detail: String::new(),
            started_at: None,
            finished_at: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    #[serde(rename = "Pending")]
    pub pending: usize,
    #[serde(rename = "Running")]
    pub running: usize,
    #[serde(rename = "Succeeded")]
    pub succeeded: usize,
    #[serde(rename = "Failed")]
    pub failed: usize,
    #[serde(rename = "Cancelled")]
    pub cancelled: usize,
}

impl StatusCounts {
    pub fn tally<'a>(statuses: impl IntoIterator<Item = &'a CaseStatus>) -> StatusCounts {
        let mut c = StatusCounts::default();
        for s in statuses {
            *c.slot(*s) += 1;
        }
        c
    }

    fn slot(&mut self, s: CaseStatus) -> &mut usize {
        match s {
            CaseStatus::Pending => &mut self.pending,
            CaseStatus::Running => &mut self.running,
            CaseStatus::Succeeded => &mut self.succeeded,
            CaseStatus::Failed => &mut self.failed,
            CaseStatus::Cancelled => &mut self.cancelled,
        }
    }

    pub fn get(&self, s: CaseStatus) -> usize {
        let mut copy = *self;
        *copy.slot(s)
    }

    pub fn total(&self) -> usize {
        self.pending + self.running + self.succeeded + self.failed + self.cancelled
    }

    /// CLI exit code: 0 all succeeded, 3 any failed, 4 any cancelled.
    /// Failures take precedence over cancellations.
    pub fn exit_code(&self) -> i32 {
        if self.failed > 0 {
            3
        } else if self.cancelled > 0 {
            4
        } else {
            0
        }
    }
}

/// Contents of `status.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusSnapshot {
    pub schema: u32,
    pub study: String,
    pub total: usize,
    pub counts: StatusCounts,
    pub latest_seq: u64,
    /// True while a run holds the study lock. Computed on read.
    #[serde(default)]
    pub active: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_parallel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
    pub cases: Vec<CaseState>,
}

impl StatusSnapshot {
    pub(crate) fn fresh(study: &str, cases: &[CaseRecord]) -> StatusSnapshot {
        let mut s = StatusSnapshot {
            schema: STATUS_SCHEMA,
            study: study.to_string(),
            total: 0,
            counts: StatusCounts::default(),
            latest_seq: 0,
            active: false,
            max_parallel: None,
            started_at: None,
            finished_at: None,
            cases: cases.iter().map(|c| CaseState::pending(c.id.clone())).collect(),
        };
        s.recount();
        s
    }

    pub(crate) fn recount(&mut self) {
        self.counts = StatusCounts::tally(self.cases.iter().map(|c| &c.status));
        self.total = self.cases.len();
    }

    pub fn case(&self, id: &str) -> Option<&CaseState> {
        self.cases.iter().find(|c| c.id.as_str() == id)
    }

    pub fn status_of(&self, id: &str) -> Option<CaseStatus> {
        self.case(id).map(|c| c.status)
    }
}

/// A completed (or in-progress) execution of a study.
#[derive(Debug, Clone)]
pub struct StudyRun {
    pub study: StudyConfig,
    pub cases: Vec<CaseRecord>,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    pub max_parallel: usize,
    /// Events emitted by this run, in order.
    pub events: Vec<EventRecord>,
}

impl StudyRun {
    pub fn counts(&self) -> StatusCounts {
        StatusCounts::tally(self.cases.iter().map(|c| &c.status))
    }

    pub fn exit_code(&self) -> i32 {
        self.counts().exit_code()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CancelOutcome {
    /// The case is now Cancelled.
    Cancelled,
    /// Termination of a running case has been requested; the status turns
    /// Cancelled once the process tree is gone.
    Cancelling,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CancelAck {
    pub case_id: CaseId,
    pub outcome: CancelOutcome,
}

/// Status snapshot of `<root>/<study>`; readable while a run is active.
pub fn status(root: &Path, study: &str) -> Result<StatusSnapshot, RunnerError> {
    let dir = StudyDir::open(root, study)?;
    study_status(&dir)
}

pub fn study_status(study: &StudyDir) -> Result<StatusSnapshot, RunnerError> {
    let mut snapshot = store::read_status(study)?;
    snapshot.latest_seq = snapshot.latest_seq.max(store::latest_seq(study)?);
    snapshot.active = store::lock_owner(study).is_some();
    Ok(snapshot)
}

/// Cancels a case from any process.
///
/// With a run in progress the request is handed to its coordinator through
/// the study's state directory; otherwise `status.json` is edited directly.
pub fn cancel(study: &StudyDir, case_id: &str) -> Result<CancelAck, RunnerError> {
    let snapshot = store::read_status(study)?;
    let state = snapshot
        .case(case_id)
        .ok_or_else(|| RunnerError::UnknownCase {
            study: study.name().to_string(),
            case: case_id.to_string(),
        })?;
    let ack = |outcome| CancelAck {
        case_id: state.id.clone(),
        outcome,
    };
    match state.status {
        CaseStatus::Succeeded | CaseStatus::Failed => {
            return Err(RunnerError::AlreadyFinished {
                case: state.id.clone(),
                status: state.status,
            })
        }
        CaseStatus::Cancelled => return Ok(ack(CancelOutcome::Cancelled)),
        CaseStatus::Pending | CaseStatus::Running => {}
    }

    match store::StudyLock::acquire(study) {
        Ok(_lock) => {
            // No run owns the study; re-read under the lock and edit in place.
            let mut snapshot = store::read_status(study)?;
            let idx = snapshot
                .cases
                .iter()
                .position(|c| c.id.as_str() == case_id)
                .expect("case present in locked snapshot");
            let current = snapshot.cases[idx].status;
            if matches!(current, CaseStatus::Succeeded | CaseStatus::Failed) {
                return Err(RunnerError::AlreadyFinished {
                    case: snapshot.cases[idx].id.clone(),
                    status: current,
                });
            }
            if current != CaseStatus::Cancelled {
                let mut log = store::EventLog::open(study)?;
                log.append(EventKind::CaseCancelled, case_id, "cancelled with no active run")?;
                let case = &mut snapshot.cases[idx];
                case.status = CaseStatus::Cancelled;
                case.finished_at = Some(Utc::now());
                snapshot.latest_seq = log.last_seq();
                snapshot.recount();
                store::write_status(study, &snapshot)?;
            }
            Ok(ack(CancelOutcome::Cancelled))
        }
        Err(StudyError::Locked { .. }) => {
            store::request_cancel(study, case_id)?;
            Ok(ack(if state.status == CaseStatus::Pending {
                CancelOutcome::Cancelled
            } else {
                CancelOutcome::Cancelling
            }))
        }
        Err(e) => Err(e.into()),
    }
}
