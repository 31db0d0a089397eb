use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::paramspace::ID_COLUMN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnRole {
    Id,
    Metadata,
    Result,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Integer,
    Decimal,
    String,
}

impl ColumnType {
    pub fn is_numeric(self) -> bool {
        matches!(self, ColumnType::Integer | ColumnType::Decimal)
    }
}

impl fmt::Display for ColumnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColumnType::Integer => "integer",
            ColumnType::Decimal => "decimal",
            ColumnType::String => "string",
        })
    }
}

pub(crate) fn cell_type(cell: &str) -> ColumnType {
    if cell.parse::<i64>().is_ok() {
        ColumnType::Integer
    } else if cell.parse::<f64>().is_ok() {
        ColumnType::Decimal
    } else {
        ColumnType::String
    }
}

/// Running type inference for one column: `None` until a cell is seen, then
/// widened integer → decimal → string.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub(crate) struct TypeState(Option<ColumnType>);

impl TypeState {
    pub fn observe(&mut self, cell: &str) {
        let t = cell_type(cell);
        self.0 = Some(self.0.map_or(t, |cur| cur.max(t)));
    }

    pub fn get(self) -> Option<ColumnType> {
        self.0
    }

    pub fn resolve(self) -> ColumnType {
        self.0.unwrap_or(ColumnType::String)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub role: ColumnRole,
    #[serde(rename = "type")]
    pub ty: ColumnType,
}

/// Tabular secondary data with the parameter vector repeated in every row.
///
/// Cells keep their exact source text; numeric interpretation happens on
/// access, so values such as `1.091560` are written back unchanged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecondaryTable {
    columns: Vec<Column>,
    rows: Vec<Vec<String>>,
}

impl SecondaryTable {
    /// Builds a table from named columns and rows, inferring column types
    /// from the cells. Roles come from `role_of`.
    pub fn from_rows(
        names: Vec<String>,
        rows: Vec<Vec<String>>,
        role_of: impl Fn(&str) -> ColumnRole,
    ) -> Result<SecondaryTable, DataError> {
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(DataError::DuplicateColumn(n.clone()));
            }
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != names.len() {
                return Err(DataError::RaggedRow {
                    row: i,
                    expected: names.len(),
                    found: row.len(),
                });
            }
        }
        let columns = names
            .into_iter()
            .enumerate()
            .map(|(i, name)| {
                let role = role_of(&name);
                let ty = if role == ColumnRole::Id {
                    ColumnType::String
                } else {
                    let mut state = TypeState::default();
                    rows.iter().for_each(|r| state.observe(&r[i]));
                    state.resolve()
                };
                Column { name, role, ty }
            })
            .collect();
        Ok(SecondaryTable { columns, rows })
    }

    pub fn empty_like(&self) -> SecondaryTable {
        SecondaryTable {
            columns: self.columns.clone(),
            rows: Vec::new(),
        }
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    pub fn names_with_role(&self, role: ColumnRole) -> Vec<&str> {
        self.columns
            .iter()
            .filter(|c| c.role == role)
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Cell text of `column` in every row.
    pub fn column_values(&self, column: &str) -> Option<Vec<&str>> {
        let i = self.column_index(column)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }

    /// Rows whose cells match every `(column, value)` pair. Numeric columns
    /// compare numerically, so `0.001` also matches `1e-3`.
    pub fn filter<S: AsRef<str>>(&self, predicate: &[(S, S)]) -> Result<SecondaryTable, DataError> {
        let mut tests = Vec::with_capacity(predicate.len());
        for (name, value) in predicate {
            let (name, value) = (name.as_ref(), value.as_ref());
            let i = self
                .column_index(name)
                .ok_or_else(|| DataError::UnknownColumn(name.to_string()))?;
            let numeric = if self.columns[i].ty.is_numeric() {
                value.parse::<f64>().ok()
            } else {
                None
            };
            tests.push((i, value.to_string(), numeric));
        }
        let rows = self
            .rows
            .iter()
            .filter(|row| {
                tests.iter().all(|(i, text, numeric)| match numeric {
                    Some(x) => row[*i].parse::<f64>().is_ok_and(|c| c == *x),
                    None => row[*i] == *text,
                })
            })
            .cloned()
            .collect();
        Ok(SecondaryTable {
            columns: self.columns.clone(),
            rows,
        })
    }

    pub(crate) fn push_rows(&mut self, rows: impl IntoIterator<Item = Vec<String>>) {
        self.rows.extend(rows);
    }

    pub(crate) fn set_types(&mut self, types: impl IntoIterator<Item = ColumnType>) {
        for (c, t) in self.columns.iter_mut().zip(types) {
            c.ty = t;
        }
    }

    /// Plain CSV: header row, comma separator, LF line endings, minimal
    /// quoting.
    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = crate::paramspace::csv_writer(Vec::new());
        w.write_record(self.column_names()).expect("write to Vec");
        for row in &self.rows {
            w.write_record(row).expect("write to Vec");
        }
        w.into_inner().expect("flush to Vec")
    }

    /// Parses CSV text; `ID` becomes the ID column and names in
    /// `metadata` become metadata columns, everything else is a result.
    pub fn from_csv(bytes: &[u8], metadata: &[&str]) -> Result<SecondaryTable, DataError> {
        let (names, rows) = read_csv(bytes)?;
        SecondaryTable::from_rows(names, rows, |n| role_for(n, metadata))
    }

    pub fn read_csv_file(path: &Path, metadata: &[&str]) -> Result<SecondaryTable, DataError> {
        let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
        SecondaryTable::from_csv(&bytes, metadata).map_err(|e| e.in_file(path))
    }
}

pub(crate) fn role_for(name: &str, metadata: &[&str]) -> ColumnRole {
    if name == ID_COLUMN {
        ColumnRole::Id
    } else if metadata.contains(&name) {
        ColumnRole::Metadata
    } else {
        ColumnRole::Result
    }
}

pub(crate) fn read_csv(bytes: &[u8]) -> Result<(Vec<String>, Vec<Vec<String>>), DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let names: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if names.is_empty() || names.iter().all(String::is_empty) {
        return Err(DataError::MissingHeader);
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        rows.push(record?.iter().map(str::to_string).collect());
    }
    Ok((names, rows))
}
