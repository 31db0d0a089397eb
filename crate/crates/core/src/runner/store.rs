//! File-backed run state: `status.json`, `events.jsonl`, the study lock and
//! cancel requests. Everything a second process needs to observe or steer a
//! run goes through these files.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::PathBuf;

use chrono::Utc;

use super::{EventKind, EventRecord, StatusSnapshot};
use crate::layout::{self, StudyDir, StudyError, EVENTS_FILE, STATUS_FILE};

pub(crate) fn read_status(study: &StudyDir) -> Result<StatusSnapshot, StudyError> {
    let path = study.file(STATUS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| StudyError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| StudyError::Corrupt {
        path,
        message: e.to_string(),
    })
}

pub(crate) fn write_status(study: &StudyDir, snapshot: &StatusSnapshot) -> Result<(), StudyError> {
    let mut bytes = serde_json::to_vec_pretty(snapshot).expect("snapshot serializes");
    bytes.push(b'\n');
    layout::write_atomic(&study.file(STATUS_FILE), &bytes)
}

/// Reads every complete record of `events.jsonl`. A trailing line without a
/// newline is an append in progress and is skipped.
pub fn read_events(study: &StudyDir) -> Result<Vec<EventRecord>, StudyError> {
    let path = study.file(EVENTS_FILE);
    let file = match File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(StudyError::io(&path, e)),
    };
    let mut reader = BufReader::new(file);
    let mut events = Vec::new();
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| StudyError::io(&path, e))?;
        if n == 0 || !line.ends_with('\n') {
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| StudyError::Corrupt {
            path: path.clone(),
            message: e.to_string(),
        })?;
        events.push(record);
    }
    Ok(events)
}

pub(crate) fn latest_seq(study: &StudyDir) -> Result<u64, StudyError> {
    Ok(read_events(study)?.last().map_or(0, |e| e.seq))
}

/// Appender for `events.jsonl`. Each record is written with a single
/// `write` on an `O_APPEND` descriptor.
pub(crate) struct EventLog {
    file: File,
    path: PathBuf,
    next_seq: u64,
}

impl EventLog {
    pub fn open(study: &StudyDir) -> Result<EventLog, StudyError> {
        let next_seq = latest_seq(study)? + 1;
        let path = study.file(EVENTS_FILE);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| StudyError::io(&path, e))?;
        Ok(EventLog {
            file,
            path,
            next_seq,
        })
    }

    pub fn append(
        &mut self,
        kind: EventKind,
        case_id: &str,
        detail: impl Into<String>,
    ) -> Result<EventRecord, StudyError> {
        let record = EventRecord {
            seq: self.next_seq,
            time: Utc::now(),
            case_id: case_id.to_string(),
            kind,
            detail: detail.into(),
        };
        let mut line = serde_json::to_vec(&record).expect("event serializes");
        line.push(b'\n');
        self.file
            .write_all(&line)
            .map_err(|e| StudyError::io(&self.path, e))?;
        self.next_seq += 1;
        Ok(record)
    }

    pub fn last_seq(&self) -> u64 {
        self.next_seq - 1
    }
}

/// Exclusive lock held for the duration of a run (and briefly by offline
/// status edits). The lock file stores the owner's PID so stale locks left
/// by crashed processes can be recovered.
pub(crate) struct StudyLock {
    path: PathBuf,
}

impl StudyLock {
    pub fn acquire(study: &StudyDir) -> Result<StudyLock, StudyError> {
        let dir = study.state_dir();
        fs::create_dir_all(&dir).map_err(|e| StudyError::io(&dir, e))?;
        let path = dir.join("lock");
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    let _ = write!(f, "{}", std::process::id());
                    return Ok(StudyLock { path });
                }
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    if let Some(pid) = lock_owner(study) {
                        return Err(StudyError::Locked {
                            study: study.name().to_string(),
                            pid,
                        });
                    }
                    let _ = fs::remove_file(&path);
                }
                Err(e) => return Err(StudyError::io(&path, e)),
            }
        }
        Err(StudyError::Locked {
            study: study.name().to_string(),
            pid: 0,
        })
    }
}

impl Drop for StudyLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// PID of the live process holding the study lock, if any.
pub fn lock_owner(study: &StudyDir) -> Option<u32> {
    let text = fs::read_to_string(study.state_dir().join("lock")).ok()?;
    let pid: u32 = text.trim().parse().ok()?;
    process_alive(pid).then_some(pid)
}

fn process_alive(pid: u32) -> bool {
    if pid == 0 {
        return false;
    }
    // Signal 0 performs the permission and existence checks only.
    let rc = unsafe { libc::kill(pid as libc::pid_t, 0) };
    rc == 0 || io::Error::last_os_error().raw_os_error() == Some(libc::EPERM)
}

fn cancel_dir(study: &StudyDir) -> PathBuf {
    study.state_dir().join("cancel")
}

pub(crate) fn request_cancel(study: &StudyDir, case_id: &str) -> Result<(), StudyError> {
    let dir = cancel_dir(study);
    fs::create_dir_all(&dir).map_err(|e| StudyError::io(&dir, e))?;
    let path = dir.join(case_id);
    fs::write(&path, b"").map_err(|e| StudyError::io(&path, e))
}

/// Removes and returns pending cancel requests, sorted by case ID.
pub(crate) fn take_cancel_requests(study: &StudyDir) -> Vec<String> {
    let dir = cancel_dir(study);
    let Ok(entries) = fs::read_dir(&dir) else {
        return Vec::new();
    };
    let mut ids: Vec<String> = entries
        .filter_map(Result::ok)
        .filter_map(|e| {
            let id = e.file_name().to_string_lossy().into_owned();
            fs::remove_file(e.path()).ok().map(|_| id)
        })
        .collect();
    ids.sort();
    ids
}
