use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{compare_tables, CompareError, ComparisonReport, ComparisonSpec};
use crate::clock;
use crate::datastore::{self, SecondaryTable};
use crate::layout::{self, StudyDir, StudyError, COMPARISON_FILE, SECONDARY_FILE};

/// Stamp written next to a blessed reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub schema: u32,
    pub study: String,
    pub blessed_at: DateTime<Utc>,
    /// `git rev-parse HEAD` of the study directory, when it is in a
    /// repository.
    pub source_commit: Option<String>,
    pub sha256: String,
}

#[derive(Debug, Clone)]
pub struct BlessOutcome {
    pub reference: PathBuf,
    pub provenance: PathBuf,
    /// Where the previous reference was moved, if there was one.
    pub backup: Option<PathBuf>,
}

/// `<dir>/<study>.csv`.
pub fn reference_path(dir: &Path, study: &str) -> PathBuf {
    dir.join(format!("{study}.csv"))
}

fn provenance_path(dir: &Path, study: &str) -> PathBuf {
    dir.join(format!("{study}.provenance.json"))
}

fn numbered(path: &Path, n: u32) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(format!(".{n}"));
    PathBuf::from(s)
}

fn source_commit(dir: &Path) -> Option<String> {
    let out = Command::new("git")
        .arg("-C")
        .arg(dir)
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()?;
    if !out.status.success() {
        return None;
    }
    let commit = String::from_utf8(out.stdout).ok()?.trim().to_string();
    (!commit.is_empty()).then_some(commit)
}

/// Promotes the study's merged `secondary.csv` to the regression reference
/// in `reference_dir`. A previous reference is kept as `<study>.csv.N`
/// with the next free `N`.
pub fn bless(study: &StudyDir, reference_dir: &Path) -> Result<BlessOutcome, CompareError> {
    let source = study.file(SECONDARY_FILE);
    if !source.is_file() {
        return Err(CompareError::NoMergedTable(study.name().to_string()));
    }
    let bytes = fs::read(&source).map_err(|e| StudyError::io(&source, e))?;
    fs::create_dir_all(reference_dir).map_err(|e| StudyError::io(reference_dir, e))?;

    let reference = reference_path(reference_dir, study.name());
    let provenance = provenance_path(reference_dir, study.name());
    let mut backup = None;
    if reference.exists() {
        let n = (1..)
            .find(|&n| !numbered(&reference, n).exists())
            .expect("free backup number");
        let target = numbered(&reference, n);
        fs::rename(&reference, &target).map_err(|e| StudyError::io(&reference, e))?;
        if provenance.exists() {
            let p = numbered(&provenance, n);
            fs::rename(&provenance, &p).map_err(|e| StudyError::io(&provenance, e))?;
        }
        backup = Some(target);
    }

    layout::write_atomic(&reference, &bytes)?;
    let stamp = Provenance {
        schema: 1,
        study: study.name().to_string(),
        blessed_at: clock::now(),
        source_commit: source_commit(study.path()),
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    let mut json = serde_json::to_string_pretty(&stamp).expect("provenance serializes");
    json.push('\n');
    layout::write_atomic(&provenance, json.as_bytes())?;
    Ok(BlessOutcome {
        reference,
        provenance,
        backup,
    })
}

/// Compares the study's merged table against its blessed reference and
/// writes `comparison.json` into the study directory.
pub fn compare_study(
    study: &StudyDir,
    reference_dir: &Path,
    spec: &ComparisonSpec,
) -> Result<ComparisonReport, CompareError> {
    if !study.file(SECONDARY_FILE).is_file() {
        return Err(CompareError::NoMergedTable(study.name().to_string()));
    }
    let actual = datastore::read_study_table(study)?;
    let reference_file = reference_path(reference_dir, study.name());
    if !reference_file.is_file() {
        return Err(CompareError::NoReference(reference_file));
    }
    let config = study.config()?;
    let metadata: Vec<&str> = config.parameter_names().collect();
    let reference = SecondaryTable::read_csv_file(&reference_file, &metadata)?;
    let report = compare_tables(&actual, &reference, spec)?;
    layout::write_atomic(&study.file(COMPARISON_FILE), report.to_json().as_bytes())?;
    Ok(report)
}
