//! Secondary data tables.
//!
//! Per-case CSV outputs are collected into one study table in which every
//! row carries the case `ID` and its full parameter vector next to the
//! result columns, so any tabular tool can select subsets by metadata.

mod table;

use std::io;
use std::path::{Path, PathBuf};

use globset::{Glob, GlobSet, GlobSetBuilder};
use thiserror::Error;
use walkdir::WalkDir;

pub use table::{Column, ColumnRole, ColumnType, SecondaryTable};
use table::{cell_type, read_csv, TypeState};

use crate::layout::{self, StudyDir, StudyError, SECONDARY_FILE};
use crate::paramspace::{CaseId, CaseRecord, CaseStatus, ID_COLUMN};
use crate::runner;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("case {case}: no secondary data (no file matches {patterns:?})")]
    NoSecondaryData { case: CaseId, patterns: Vec<String> },
    #[error("schema mismatch in {file}: expected columns {expected:?}, found {found:?}")]
    SchemaMismatch {
        file: String,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("{file}: non-numeric value `{value}` in numeric column `{column}`")]
    NonNumeric {
        file: String,
        column: String,
        value: String,
    },
    #[error("result column `{column}` in {file} collides with a parameter or ID column")]
    ColumnCollision { file: String, column: String },
    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),
    #[error("row {row} has {found} cells, expected {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("missing header row")]
    MissingHeader,
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("no succeeded case with secondary data in study `{0}`")]
    NoSucceededCases(String),
    #[error("invalid output pattern `{pattern}`: {message}")]
    BadPattern { pattern: String, message: String },
    #[error("{file}: {message}")]
    InFile { file: String, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Study(#[from] StudyError),
}

impl DataError {
    pub(crate) fn io(path: &Path, e: io::Error) -> DataError {
        DataError::Study(StudyError::io(path, e))
    }

    fn in_file(self, path: &Path) -> DataError {
        match self {
            e @ (DataError::Study(_) | DataError::InFile { .. }) => e,
            other => DataError::InFile {
                file: path.display().to_string(),
                message: other.to_string(),
            },
        }
    }
}

pub(crate) fn glob_set(patterns: &[String]) -> Result<GlobSet, DataError> {
    let mut builder = GlobSetBuilder::new();
    for p in patterns {
        let glob = Glob::new(p).map_err(|e| DataError::BadPattern {
            pattern: p.clone(),
            message: e.to_string(),
        })?;
        builder.add(glob);
    }
    builder.build().map_err(|e| DataError::BadPattern {
        pattern: patterns.join(","),
        message: e.to_string(),
    })
}

/// Files under `dir` whose relative path matches `patterns`, sorted.
fn matching_files(dir: &Path, patterns: &GlobSet) -> Result<Vec<PathBuf>, DataError> {
    let mut out = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| DataError::io(dir, e.into()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("child of dir");
        if patterns.is_match(rel) {
            out.push(entry.path().to_path_buf());
        }
    }
    Ok(out)
}

/// Checks `rows` against column types established by earlier files and
/// widens them. A numeric column may not receive a non-numeric cell.
fn conform(
    types: &mut [TypeState],
    names: &[String],
    rows: &[Vec<String>],
    file: &str,
) -> Result<(), DataError> {
    for (i, state) in types.iter_mut().enumerate() {
        let established = state.get();
        for row in rows {
            let cell = &row[i];
            if established.is_some_and(ColumnType::is_numeric) && !cell_type(cell).is_numeric() {
                return Err(DataError::NonNumeric {
                    file: file.to_string(),
                    column: names[i].clone(),
                    value: cell.clone(),
                });
            }
            state.observe(cell);
        }
    }
    Ok(())
}

/// Reads a case's secondary CSV files and prepends `ID` and the parameter
/// vector to every row. All matched files must share one header.
pub fn read_case_secondary(
    case: &CaseRecord,
    outputs: &[String],
) -> Result<SecondaryTable, DataError> {
    let patterns = glob_set(outputs)?;
    let files = matching_files(&case.dir, &patterns)?;
    if files.is_empty() {
        return Err(DataError::NoSecondaryData {
            case: case.id.clone(),
            patterns: outputs.to_vec(),
        });
    }

    let mut header: Option<Vec<String>> = None;
    let mut types: Vec<TypeState> = Vec::new();
    let mut result_rows: Vec<Vec<String>> = Vec::new();
    for file in &files {
        let label = file.display().to_string();
        let bytes = std::fs::read(file).map_err(|e| DataError::io(file, e))?;
        let (names, rows) = read_csv(&bytes).map_err(|e| e.in_file(file))?;
        match &header {
            None => {
                if let Some(clash) = names
                    .iter()
                    .find(|n| n.as_str() == ID_COLUMN || case.params.contains_key(*n))
                {
                    return Err(DataError::ColumnCollision {
                        file: label,
                        column: clash.clone(),
                    });
                }
                types = vec![TypeState::default(); names.len()];
                header = Some(names.clone());
            }
            Some(expected) if *expected != names => {
                return Err(DataError::SchemaMismatch {
                    file: label,
                    expected: expected.clone(),
                    found: names,
                });
            }
            Some(_) => {}
        }
        conform(&mut types, &names, &rows, &label)?;
        result_rows.extend(rows);
    }

    let header = header.expect("at least one file");
    let metadata: Vec<(String, String)> = case
        .params
        .iter()
        .map(|(k, v)| (k.clone(), v.to_string()))
        .collect();
    let mut names = vec![ID_COLUMN.to_string()];
    names.extend(metadata.iter().map(|(k, _)| k.clone()));
    names.extend(header);
    let rows = result_rows
        .into_iter()
        .map(|results| {
            let mut row = Vec::with_capacity(names.len());
            row.push(case.id.to_string());
            row.extend(metadata.iter().map(|(_, v)| v.clone()));
            row.extend(results);
            row
        })
        .collect();
    let param_names: Vec<&str> = case.params.keys().map(String::as_str).collect();
    SecondaryTable::from_rows(names, rows, |n| table::role_for(n, &param_names))
}

/// Result of merging a study's secondary data.
#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub table: SecondaryTable,
    pub path: PathBuf,
    pub included: Vec<CaseId>,
    /// Cases left out because they did not succeed; Cancelled cases keep
    /// their files on disk but never enter the merged table.
    pub excluded: Vec<(CaseId, CaseStatus)>,
}

/// Concatenates the secondary data of every Succeeded case, in case-ID
/// order, and writes `secondary.csv` at the study root.
pub fn merge_study_table(study: &StudyDir) -> Result<MergeOutcome, DataError> {
    if let Some(pid) = runner::lock_owner(study) {
        return Err(StudyError::Locked {
            study: study.name().to_string(),
            pid,
        }
        .into());
    }
    let config = study.config()?;
    let snapshot = runner::study_status(study).map_err(|e| match e {
        runner::RunnerError::Study(s) => DataError::Study(s),
        other => DataError::Study(StudyError::Corrupt {
            path: study.path().to_path_buf(),
            message: other.to_string(),
        }),
    })?;

    let mut merged: Option<SecondaryTable> = None;
    let mut types: Vec<TypeState> = Vec::new();
    let mut included = Vec::new();
    let mut excluded = Vec::new();
    for case in study.cases()? {
        let status = snapshot
            .status_of(case.id.as_str())
            .unwrap_or(CaseStatus::Pending);
        if status != CaseStatus::Succeeded {
            excluded.push((case.id.clone(), status));
            continue;
        }
        let table = read_case_secondary(&case, &config.outputs)?;
        match &mut merged {
            None => {
                types = vec![TypeState::default(); table.columns().len()];
                let names: Vec<String> = table.column_names().map(str::to_string).collect();
                conform(&mut types, &names, table.rows(), case.id.as_str())?;
                merged = Some(table);
            }
            Some(acc) => {
                let expected: Vec<String> = acc.column_names().map(str::to_string).collect();
                let found: Vec<String> = table.column_names().map(str::to_string).collect();
                if expected != found {
                    return Err(DataError::SchemaMismatch {
                        file: format!("case {}", case.id),
                        expected,
                        found,
                    });
                }
                conform(&mut types, &found, table.rows(), &format!("case {}", case.id))?;
                acc.push_rows(table.rows().iter().cloned());
            }
        }
        included.push(case.id);
    }

    let mut table = merged.ok_or_else(|| DataError::NoSucceededCases(study.name().to_string()))?;
    let roles: Vec<ColumnRole> = table.columns().iter().map(|c| c.role).collect();
    table.set_types(types.iter().zip(roles).map(|(t, role)| {
        if role == ColumnRole::Id {
            ColumnType::String
        } else {
            t.resolve()
        }
    }));
    let path = study.file(SECONDARY_FILE);
    layout::write_atomic(&path, &table.to_csv())?;
    Ok(MergeOutcome {
        table,
        path,
        included,
        excluded,
    })
}

/// Reads a study's `secondary.csv`, assigning metadata roles from its
/// parameter names.
pub fn read_study_table(study: &StudyDir) -> Result<SecondaryTable, DataError> {
    let config = study.config()?;
    let metadata: Vec<&str> = config.parameter_names().collect();
    SecondaryTable::read_csv_file(&study.file(SECONDARY_FILE), &metadata)
}
