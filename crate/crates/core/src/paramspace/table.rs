use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use thiserror::Error;

use super::{CaseId, CaseRecord, Params, Value, ID_COLUMN};

#[derive(Debug, Error)]
pub enum TableError {
    #[error("empty study")]
    EmptyStudy,
    #[error("unsupported format `{0}` (expected csv, json or yaml)")]
    UnsupportedFormat(String),
    #[error("case {case} has parameters {got:?}, expected {expected:?}")]
    InconsistentParameters {
        case: CaseId,
        got: Vec<String>,
        expected: Vec<String>,
    },
    #[error("variation table has no `ID` column")]
    MissingId,
    #[error("row {row}: `ID` must be a string")]
    BadId { row: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("yaml: {0}")]
    Yaml(#[from] serde_yaml::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Json,
    Yaml,
}

impl TableFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TableFormat::Csv => "csv",
            TableFormat::Json => "json",
            TableFormat::Yaml => "yaml",
        }
    }

    pub fn file_name(self) -> String {
        format!("variation.{}", self.extension())
    }
}

impl FromStr for TableFormat {
    type Err = TableError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(TableFormat::Csv),
            "json" => Ok(TableFormat::Json),
            "yaml" | "yml" => Ok(TableFormat::Yaml),
            _ => Err(TableError::UnsupportedFormat(s.to_string())),
        }
    }
}

impl fmt::Display for TableFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

/// One row of a parsed variation table.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationRow {
    pub id: CaseId,
    pub params: Params,
}

pub(crate) fn csv_writer<W: std::io::Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

/// Serializes the case-ID → parameter-vector mapping.
///
/// Columns are `ID` followed by every parameter (varied then constants).
pub fn export_variation_table(
    cases: &[CaseRecord],
    format: TableFormat,
) -> Result<Vec<u8>, TableError> {
    let first = cases.first().ok_or(TableError::EmptyStudy)?;
    let names: Vec<&String> = first.params.keys().collect();
    for case in cases {
        if case.params.len() != names.len() || !case.params.keys().eq(names.iter().copied()) {
            return Err(TableError::InconsistentParameters {
                case: case.id.clone(),
                got: case.params.keys().cloned().collect(),
                expected: names.iter().map(|s| s.to_string()).collect(),
            });
        }
    }

    match format {
        TableFormat::Csv => {
            let mut w = csv_writer(Vec::new());
            w.write_record(std::iter::once(ID_COLUMN).chain(names.iter().map(|s| s.as_str())))?;
            for case in cases {
                let mut record = vec![case.id.to_string()];
                record.extend(case.params.values().map(Value::to_string));
                w.write_record(&record)?;
            }
            Ok(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?)
        }
        TableFormat::Json | TableFormat::Yaml => {
            let rows: Vec<IndexMap<&str, Value>> = cases
                .iter()
                .map(|case| {
                    let mut row = IndexMap::with_capacity(case.params.len() + 1);
                    row.insert(ID_COLUMN, Value::Str(case.id.to_string()));
                    for (k, v) in &case.params {
                        row.insert(k.as_str(), v.clone());
                    }
                    row
                })
                .collect();
            if format == TableFormat::Json {
                let mut bytes = serde_json::to_vec_pretty(&rows)?;
                bytes.push(b'\n');
                Ok(bytes)
            } else {
                Ok(serde_yaml::to_string(&rows)?.into_bytes())
            }
        }
    }
}

/// Parses a variation table back into ID → parameter vectors.
///
/// CSV cells are typed by [`Value::infer`]; JSON and YAML keep their native
/// scalar types.
pub fn parse_variation_table(
    bytes: &[u8],
    format: TableFormat,
) -> Result<Vec<VariationRow>, TableError> {
    let rows: Vec<IndexMap<String, Value>> = match format {
        TableFormat::Csv => {
            let mut r = csv::ReaderBuilder::new().from_reader(bytes);
            let headers = r.headers()?.clone();
            let mut rows = Vec::new();
            for record in r.records() {
                let record = record?;
                rows.push(
                    headers
                        .iter()
                        .zip(record.iter())
                        .map(|(h, cell)| {
                            let v = if h == ID_COLUMN {
                                Value::Str(cell.to_string())
                            } else {
                                Value::infer(cell)
                            };
                            (h.to_string(), v)
                        })
                        .collect(),
                );
            }
            rows
        }
        TableFormat::Json => serde_json::from_slice(bytes)?,
        TableFormat::Yaml => serde_yaml::from_slice(bytes)?,
    };

    rows.into_iter()
        .enumerate()
        .map(|(i, mut row)| {
            let id = match row.shift_remove(ID_COLUMN) {
                Some(Value::Str(s)) => CaseId::from(s),
                Some(_) => return Err(TableError::BadId { row: i }),
                None => return Err(TableError::MissingId),
            };
            Ok(VariationRow { id, params: row })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paramspace::{expand, parse_study_config};

    fn two_cases() -> Vec<CaseRecord> {
        let c = parse_study_config("name: s\nmode: zip\nvaried:\n  A: [1, 2]\n  B: [x, y]\ncommand: c\n")
            .unwrap();
        expand(&c).unwrap()
    }

    #[test]
    fn csv_layout() {
        let bytes = export_variation_table(&two_cases(), TableFormat::Csv).unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap(), "ID,A,B\n0000,1,x\n0001,2,y\n");
    }

    #[test]
    fn json_layout() {
        let bytes = export_variation_table(&two_cases(), TableFormat::Json).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        let list = v.as_array().unwrap();
        assert_eq!(list.len(), 2);
        for obj in list {
            let keys: Vec<&String> = obj.as_object().unwrap().keys().collect();
            assert_eq!(keys, ["ID", "A", "B"]);
        }
        assert_eq!(list[1]["ID"], "0001");
    }

    #[test]
    fn empty_study() {
        assert!(matches!(
            export_variation_table(&[], TableFormat::Csv),
            Err(TableError::EmptyStudy)
        ));
    }

    #[test]
    fn unsupported_format() {
        assert!(matches!(
            "xml".parse::<TableFormat>(),
            Err(TableError::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn quoted_strings_survive_csv() {
        let c = parse_study_config(
            "name: s\nvaried:\n  S: [0.0001, 0.001]\nconstants:\n  H: '10,10,10,10'\ncommand: c\n",
        )
        .unwrap();
        let cases = expand(&c).unwrap();
        let bytes = export_variation_table(&cases, TableFormat::Csv).unwrap();
        assert_eq!(
            String::from_utf8(bytes.clone()).unwrap(),
            "ID,S,H\n0000,0.0001,\"10,10,10,10\"\n0001,0.001,\"10,10,10,10\"\n"
        );
        let rows = parse_variation_table(&bytes, TableFormat::Csv).unwrap();
        assert_eq!(rows[0].params, cases[0].params);
    }
}
