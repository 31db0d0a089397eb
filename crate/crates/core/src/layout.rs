//! On-disk layout of a project root and the studies inside it.
//!
//! ```text
//! <root>/<study>/study.yaml        resolved study configuration
//! <root>/<study>/variation.csv     case ID -> parameter vector
//! <root>/<study>/status.json       latest status snapshot
//! <root>/<study>/events.jsonl      append-only event log
//! <root>/<study>/secondary.csv     merged secondary data
//! <root>/<study>/<id>/case.yaml    one directory per case
//! <root>/<study>/.labrun/          run lock and pending cancel requests
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::paramspace::{self, CaseRecord, StudyConfig, TableFormat};

pub const STUDY_FILE: &str = "study.yaml";
pub const STATUS_FILE: &str = "status.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const SECONDARY_FILE: &str = "secondary.csv";
pub const CASE_FILE: &str = "case.yaml";
pub const REPORT_FILE: &str = "report.html";
pub const SUMMARY_FILE: &str = "summary.json";
pub const COMPARISON_FILE: &str = "comparison.json";
pub const DESCRIPTION_FILE: &str = "description.md";
pub const STATE_DIR: &str = ".labrun";

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("unknown study `{0}`")]
    UnknownStudy(String),
    #[error("study `{study}` is locked by running process {pid}")]
    Locked { study: String, pid: u32 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

impl StudyError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> StudyError {
        StudyError::Io {
            path: path.into(),
            source,
        }
    }
}

/// A materialized study directory.
#[derive(Debug, Clone)]
pub struct StudyDir {
    name: String,
    path: PathBuf,
}

impl StudyDir {
    /// Opens `<root>/<name>`, which must contain a `study.yaml`.
    pub fn open(root: &Path, name: &str) -> Result<StudyDir, StudyError> {
        let path = root.join(name);
        if name.is_empty() || name.contains(['/', '\\']) || !path.join(STUDY_FILE).is_file() {
            return Err(StudyError::UnknownStudy(name.to_string()));
        }
        Ok(StudyDir {
            name: name.to_string(),
            path,
        })
    }

    /// Opens a study given either its name under `root` or a path to its
    /// directory.
    pub fn locate(root: &Path, name_or_path: &str) -> Result<StudyDir, StudyError> {
        let as_path = Path::new(name_or_path);
        if as_path.join(STUDY_FILE).is_file() {
            let dir = as_path.canonicalize().unwrap_or_else(|_| as_path.to_path_buf());
            let name = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            if let Some(parent) = dir.parent() {
                return StudyDir::open(parent, &name);
            }
        }
        StudyDir::open(root, name_or_path)
    }

    pub(crate) fn new_unchecked(root: &Path, name: &str) -> StudyDir {
        StudyDir {
            name: name.to_string(),
            path: root.join(name),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn root(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new("."))
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn case_dir(&self, id: &str) -> PathBuf {
        self.path.join(id)
    }

    pub fn state_dir(&self) -> PathBuf {
        self.path.join(STATE_DIR)
    }

    pub fn config(&self) -> Result<StudyConfig, StudyError> {
        let path = self.file(STUDY_FILE);
        let text = fs::read_to_string(&path).map_err(|e| StudyError::io(&path, e))?;
        paramspace::parse_study_config(&text).map_err(|e| StudyError::Corrupt {
            path,
            message: e.to_string(),
        })
    }

    /// Cases of the study with absolute directories. Statuses are `Pending`;
    /// use the runner's status snapshot for live statuses.
    pub fn cases(&self) -> Result<Vec<CaseRecord>, StudyError> {
        let config = self.config()?;
        let mut cases = paramspace::expand_with_limit(&config, usize::MAX).map_err(|e| {
            StudyError::Corrupt {
                path: self.file(STUDY_FILE),
                message: e.to_string(),
            }
        })?;
        for case in &mut cases {
            case.dir = self.case_dir(case.id.as_str());
        }
        Ok(cases)
    }

    /// Path of whichever variation table exists, CSV preferred.
    pub fn variation_table(&self) -> Option<(PathBuf, TableFormat)> {
        [TableFormat::Csv, TableFormat::Json, TableFormat::Yaml]
            .into_iter()
            .map(|f| (self.file(&f.file_name()), f))
            .find(|(p, _)| p.is_file())
    }
}

/// Names of all studies directly under `root`, sorted.
pub fn list_studies(root: &Path) -> Result<Vec<String>, StudyError> {
    let mut names = Vec::new();
    let entries = fs::read_dir(root).map_err(|e| StudyError::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| StudyError::io(root, e))?;
        if entry.path().join(STUDY_FILE).is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Writes `bytes` to `path` through a temporary file and a rename so
/// concurrent readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StudyError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| StudyError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| StudyError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| StudyError::io(path, e.error))?;
    Ok(())
}
