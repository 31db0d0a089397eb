//! Tolerance-based regression comparison of secondary tables.
//!
//! Rows are matched on key columns, numeric cells pass when
//! `|a - r| <= abs_tol` or `|a - r| <= rel_tol * max(|r|, 1e-12)`, and
//! string cells must be equal. When both cells are plain decimals the
//! deviation is computed exactly, so `1.05` against `1.0` deviates by
//! exactly `0.05`.

mod bless;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rust_decimal::prelude::ToPrimitive;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bless::{bless, compare_study, reference_path, BlessOutcome, Provenance};

use crate::datastore::{ColumnRole, DataError, SecondaryTable};
use crate::layout::StudyError;

pub const REPORT_SCHEMA: u32 = 1;

/// Floor of the relative-deviation denominator.
pub fn epsilon() -> Decimal {
    Decimal::new(1, 12)
}

const EPSILON_F64: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CompareError {
    #[error("duplicate key {key} in {table} table")]
    DuplicateKey { table: &'static str, key: String },
    #[error("key column `{column}` absent from {table} table")]
    MissingKeyColumn { table: &'static str, column: String },
    #[error("{0} table is empty")]
    EmptyTable(&'static str),
    #[error("no key columns")]
    NoKeyColumns,
    #[error("invalid tolerance `{0}`: expected a non-negative number")]
    BadTolerance(String),
    #[error("tolerance given for unknown column `{0}`")]
    UnknownToleranceColumn(String),
    #[error("study `{0}` has no merged secondary table")]
    NoMergedTable(String),
    #[error("no reference at {0}")]
    NoReference(std::path::PathBuf),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Study(#[from] StudyError),
}

/// Absolute and relative tolerance pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tolerance {
    pub abs: Decimal,
    pub rel: Decimal,
}

impl Tolerance {
    pub fn new(abs: Decimal, rel: Decimal) -> Result<Tolerance, CompareError> {
        if abs.is_sign_negative() && !abs.is_zero() {
            return Err(CompareError::BadTolerance(abs.to_string()));
        }
        if rel.is_sign_negative() && !rel.is_zero() {
            return Err(CompareError::BadTolerance(rel.to_string()));
        }
        Ok(Tolerance { abs, rel })
    }

    /// Parses `abs,rel`.
    pub fn parse_pair(text: &str) -> Result<Tolerance, CompareError> {
        let (abs, rel) = text
            .split_once(',')
            .ok_or_else(|| CompareError::BadTolerance(text.to_string()))?;
        Tolerance::new(parse_tolerance(abs)?, parse_tolerance(rel)?)
    }
}

/// Parses one non-negative tolerance such as `0.01` or `1e-12`.
pub fn parse_tolerance(text: &str) -> Result<Decimal, CompareError> {
    let t = text.trim();
    let bad = || CompareError::BadTolerance(text.to_string());
    let d = parse_decimal(t).ok_or_else(bad)?;
    if d.is_sign_negative() && !d.is_zero() {
        return Err(bad());
    }
    Ok(d)
}

fn parse_decimal(text: &str) -> Option<Decimal> {
    // Gate on the float grammar so `inf`, `nan` and `1_0` are not decimals.
    if !text.parse::<f64>().is_ok_and(f64::is_finite) {
        return None;
    }
    if text.contains(['e', 'E']) {
        Decimal::from_scientific(text).ok()
    } else {
        Decimal::from_str(text).ok()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ComparisonSpec {
    /// Row-matching columns. `None` uses `ID` plus every metadata column
    /// of the reference, with repeated keys matched in order of
    /// appearance. Explicit keys must be unique in both tables.
    pub key_columns: Option<Vec<String>>,
    pub tolerance: Tolerance,
    pub per_column: IndexMap<String, Tolerance>,
    pub nan_equal: bool,
}

impl ComparisonSpec {
    pub fn with_tolerance(abs: Decimal, rel: Decimal) -> ComparisonSpec {
        ComparisonSpec {
            tolerance: Tolerance { abs, rel },
            ..ComparisonSpec::default()
        }
    }

    pub fn tolerance_for(&self, column: &str) -> Tolerance {
        self.per_column.get(column).copied().unwrap_or(self.tolerance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Pass => 0,
            Verdict::Fail => 2,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "Pass",
            Verdict::Fail => "Fail",
        })
    }
}

/// Key of one row: key-column values, plus the occurrence index when keys
/// repeat.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowKey {
    pub values: IndexMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occurrence: Option<usize>,
}

impl fmt::Display for RowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, (k, v)) in self.values.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{k}={v}")?;
        }
        if let Some(n) = self.occurrence {
            write!(f, ", #{n}")?;
        }
        f.write_str(")")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnReport {
    pub kind: ColumnKind,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_abs_deviation: f64,
    pub max_rel_deviation: f64,
    /// Row with the largest absolute deviation.
    pub worst_row: Option<RowKey>,
    pub failed_cells: usize,
    pub nan_mismatches: usize,
    pub string_mismatches: usize,
}

impl ColumnReport {
    fn new(kind: ColumnKind, tol: Tolerance) -> ColumnReport {
        ColumnReport {
            kind,
            abs_tol: tol.abs.to_f64().unwrap_or(f64::INFINITY),
            rel_tol: tol.rel.to_f64().unwrap_or(f64::INFINITY),
            max_abs_deviation: 0.0,
            max_rel_deviation: 0.0,
            worst_row: None,
            failed_cells: 0,
            nan_mismatches: 0,
            string_mismatches: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema: u32,
    pub verdict: Verdict,
    pub key_columns: Vec<String>,
    pub rows_compared: usize,
    /// Rows of the reference absent from the actual table.
    pub missing_rows: Vec<RowKey>,
    /// Rows of the actual table absent from the reference.
    pub extra_rows: Vec<RowKey>,
    pub missing_columns: Vec<String>,
    pub extra_columns: Vec<String>,
    pub columns: IndexMap<String, ColumnReport>,
}

impl ComparisonReport {
    pub fn max_abs_deviation(&self) -> f64 {
        self.columns
            .values()
            .map(|c| c.max_abs_deviation)
            .fold(0.0, f64::max)
    }

    pub fn max_rel_deviation(&self) -> f64 {
        self.columns
            .values()
            .map(|c| c.max_rel_deviation)
            .fold(0.0, f64::max)
    }

    pub fn is_structural_match(&self) -> bool {
        self.missing_rows.is_empty()
            && self.extra_rows.is_empty()
            && self.missing_columns.is_empty()
            && self.extra_columns.is_empty()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Short human-readable summary.
    pub fn render_text(&self) -> String {
        let mut out = format!(
            "verdict: {}\nrows compared: {}\n",
            self.verdict, self.rows_compared
        );
        for (label, rows) in [("missing row", &self.missing_rows), ("extra row", &self.extra_rows)] {
            for r in rows {
                out.push_str(&format!("{label}: {r}\n"));
            }
        }
        for c in &self.missing_columns {
            out.push_str(&format!("missing column: {c}\n"));
        }
        for c in &self.extra_columns {
            out.push_str(&format!("extra column: {c}\n"));
        }
        for (name, c) in &self.columns {
            let state = if c.failed_cells == 0 { "ok" } else { "FAIL" };
            match c.kind {
                ColumnKind::Numeric => {
                    out.push_str(&format!(
                        "{name}: {state} max_abs={:e} max_rel={:e} (abs_tol={:e}, rel_tol={:e})",
                        c.max_abs_deviation, c.max_rel_deviation, c.abs_tol, c.rel_tol
                    ));
                    if c.nan_mismatches > 0 {
                        out.push_str(&format!(" nan_mismatches={}", c.nan_mismatches));
                    }
                }
                ColumnKind::String => {
                    out.push_str(&format!("{name}: {state} mismatches={}", c.string_mismatches));
                }
            }
            if c.failed_cells > 0 {
                if let Some(w) = &c.worst_row {
                    out.push_str(&format!(" worst {w}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Deviation of one numeric cell pair.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Deviation {
    Exact { abs: Decimal, reference: Decimal },
    Float { abs: f64, reference: f64 },
    Nan { both: bool },
}

impl Deviation {
    fn of(actual: &str, reference: &str) -> Option<Deviation> {
        if let (Some(a), Some(r)) = (parse_decimal(actual), parse_decimal(reference)) {
            if let Some(diff) = a.checked_sub(r) {
                return Some(Deviation::Exact {
                    abs: diff.abs(),
                    reference: r,
                });
            }
        }
        let a: f64 = actual.trim().parse().ok()?;
        let r: f64 = reference.trim().parse().ok()?;
        if a.is_nan() || r.is_nan() {
            return Some(Deviation::Nan {
                both: a.is_nan() && r.is_nan(),
            });
        }
        let abs = if a == r { 0.0 } else { (a - r).abs() };
        Some(Deviation::Float { abs, reference: r })
    }

    fn abs_f64(self) -> f64 {
        match self {
            Deviation::Exact { abs, .. } => abs.to_f64().unwrap_or(f64::INFINITY),
            Deviation::Float { abs, .. } => abs,
            Deviation::Nan { .. } => 0.0,
        }
    }

    fn rel_f64(self) -> f64 {
        match self {
            Deviation::Exact { abs, reference } => {
                let denom = reference.abs().max(epsilon());
                match abs.checked_div(denom) {
                    Some(q) => q.to_f64().unwrap_or(f64::INFINITY),
                    None => abs.to_f64().unwrap_or(f64::INFINITY) / denom.to_f64().unwrap_or(1.0),
                }
            }
            Deviation::Float { abs, reference } => {
                if abs == 0.0 {
                    0.0
                } else {
                    abs / reference.abs().max(EPSILON_F64)
                }
            }
            Deviation::Nan { .. } => 0.0,
        }
    }

    fn within(self, tol: Tolerance, nan_equal: bool) -> bool {
        match self {
            Deviation::Exact { abs, reference } => {
                if abs <= tol.abs {
                    return true;
                }
                match tol.rel.checked_mul(reference.abs().max(epsilon())) {
                    Some(bound) => abs <= bound,
                    None => true,
                }
            }
            Deviation::Float { abs, reference } => {
                let abs_tol = tol.abs.to_f64().unwrap_or(f64::INFINITY);
                let rel_tol = tol.rel.to_f64().unwrap_or(f64::INFINITY);
                abs <= abs_tol || abs <= rel_tol * reference.abs().max(EPSILON_F64)
            }
            Deviation::Nan { both } => nan_equal && both,
        }
    }
}

struct Keyed {
    order: Vec<RowKey>,
    index: HashMap<(Vec<String>, Option<usize>), usize>,
}

fn key_cell(table: &SecondaryTable, col: usize, cell: &str) -> String {
    // Numeric key columns match by value, so `1e-3` meets `0.001`.
    if table.columns()[col].ty.is_numeric() {
        if let Ok(x) = cell.trim().parse::<f64>() {
            return format!("{x:?}");
        }
    }
    cell.to_string()
}

fn key_rows(
    table: &SecondaryTable,
    keys: &[String],
    which: &'static str,
    strict: bool,
) -> Result<Keyed, CompareError> {
    let cols: Vec<usize> = keys
        .iter()
        .map(|k| {
            table
                .column_index(k)
                .ok_or_else(|| CompareError::MissingKeyColumn {
                    table: which,
                    column: k.clone(),
                })
        })
        .collect::<Result<_, _>>()?;
    let mut seen: HashMap<Vec<String>, usize> = HashMap::new();
    let mut order = Vec::with_capacity(table.len());
    let mut index = HashMap::with_capacity(table.len());
    for (i, row) in table.rows().iter().enumerate() {
        let norm: Vec<String> = cols.iter().map(|&c| key_cell(table, c, &row[c])).collect();
        let count = seen.entry(norm.clone()).or_insert(0);
        let values: IndexMap<String, String> = keys
            .iter()
            .zip(&cols)
            .map(|(k, &c)| (k.clone(), row[c].clone()))
            .collect();
        if strict && *count > 0 {
            return Err(CompareError::DuplicateKey {
                table: which,
                key: RowKey {
                    values,
                    occurrence: None,
                }
                .to_string(),
            });
        }
        let key = RowKey {
            values,
            occurrence: (!strict).then_some(*count),
        };
        *count += 1;
        index.insert((norm, key.occurrence), i);
        order.push(key);
    }
    Ok(Keyed { order, index })
}

fn lookup_key(key: &RowKey, table: &SecondaryTable) -> (Vec<String>, Option<usize>) {
    let values = key
        .values
        .iter()
        .map(|(k, v)| {
            let col = table.column_index(k).expect("key column present");
            key_cell(table, col, v)
        })
        .collect();
    (values, key.occurrence)
}

/// Compares `actual` against `reference`.
pub fn compare_tables(
    actual: &SecondaryTable,
    reference: &SecondaryTable,
    spec: &ComparisonSpec,
) -> Result<ComparisonReport, CompareError> {
    if reference.is_empty() {
        return Err(CompareError::EmptyTable("reference"));
    }
    if actual.is_empty() {
        return Err(CompareError::EmptyTable("actual"));
    }
    for t in [spec.tolerance].iter().chain(spec.per_column.values()) {
        Tolerance::new(t.abs, t.rel)?;
    }
    for name in spec.per_column.keys() {
        if reference.column_index(name).is_none() && actual.column_index(name).is_none() {
            return Err(CompareError::UnknownToleranceColumn(name.clone()));
        }
    }

    let (keys, strict) = match &spec.key_columns {
        Some(keys) => (keys.clone(), true),
        None => {
            let mut keys: Vec<String> = reference
                .names_with_role(ColumnRole::Id)
                .into_iter()
                .map(str::to_string)
                .collect();
            keys.extend(
                reference
                    .names_with_role(ColumnRole::Metadata)
                    .into_iter()
                    .map(str::to_string),
            );
            (keys, false)
        }
    };
    if keys.is_empty() {
        return Err(CompareError::NoKeyColumns);
    }
    let ref_rows = key_rows(reference, &keys, "reference", strict)?;
    let act_rows = key_rows(actual, &keys, "actual", strict)?;

    let missing_columns: Vec<String> = reference
        .column_names()
        .filter(|c| actual.column_index(c).is_none())
        .map(str::to_string)
        .collect();
    let extra_columns: Vec<String> = actual
        .column_names()
        .filter(|c| reference.column_index(c).is_none())
        .map(str::to_string)
        .collect();

    // Value columns: shared, non-key, in reference order.
    let mut columns: IndexMap<String, ColumnReport> = IndexMap::new();
    let mut value_cols = Vec::new();
    for col in reference.columns() {
        if keys.contains(&col.name) {
            continue;
        }
        let Some(ai) = actual.column_index(&col.name) else {
            continue;
        };
        let ri = reference.column_index(&col.name).expect("own column");
        let kind = if col.ty.is_numeric() {
            ColumnKind::Numeric
        } else {
            ColumnKind::String
        };
        let tol = spec.tolerance_for(&col.name);
        columns.insert(col.name.clone(), ColumnReport::new(kind, tol));
        value_cols.push((col.name.clone(), ri, ai, kind, tol));
    }

    let mut missing_rows = Vec::new();
    let mut rows_compared = 0;
    let mut matched = vec![false; actual.len()];
    for (ri_row, key) in ref_rows.order.iter().enumerate() {
        let Some(&ai_row) = act_rows.index.get(&lookup_key(key, reference)) else {
            missing_rows.push(key.clone());
            continue;
        };
        matched[ai_row] = true;
        rows_compared += 1;
        let r_row = &reference.rows()[ri_row];
        let a_row = &actual.rows()[ai_row];
        for (name, ri, ai, kind, tol) in &value_cols {
            let report = columns.get_mut(name).expect("column report");
            let (a, r) = (&a_row[*ai], &r_row[*ri]);
            let deviation = match kind {
                ColumnKind::Numeric => Deviation::of(a, r),
                ColumnKind::String => None,
            };
            match deviation {
                Some(dev) => {
                    let abs = dev.abs_f64();
                    let rel = dev.rel_f64();
                    if report.worst_row.is_none() || abs > report.max_abs_deviation {
                        report.worst_row = Some(key.clone());
                    }
                    report.max_abs_deviation = report.max_abs_deviation.max(abs);
                    report.max_rel_deviation = report.max_rel_deviation.max(rel);
                    if !dev.within(*tol, spec.nan_equal) {
                        report.failed_cells += 1;
                        if matches!(dev, Deviation::Nan { .. }) {
                            report.nan_mismatches += 1;
                        }
                    }
                }
                None => {
                    if a != r {
                        report.failed_cells += 1;
                        report.string_mismatches += 1;
                        if report.worst_row.is_none() {
                            report.worst_row = Some(key.clone());
                        }
                    }
                }
            }
        }
    }
    let extra_rows: Vec<RowKey> = act_rows
        .order
        .iter()
        .zip(&matched)
        .filter(|(_, m)| !**m)
        .map(|(k, _)| k.clone())
        .collect();

    let mut report = ComparisonReport {
        schema: REPORT_SCHEMA,
        verdict: Verdict::Pass,
        key_columns: keys,
        rows_compared,
        missing_rows,
        extra_rows,
        missing_columns,
        extra_columns,
        columns,
    };
    let cells_ok = report.columns.values().all(|c| c.failed_cells == 0);
    if !(cells_ok && report.is_structural_match()) {
        report.verdict = Verdict::Fail;
    }
    Ok(report)
}
