//! Static study reports.
//!
//! `report.html` is a single self-contained file (inline CSS and SVG, no
//! scripts, no external assets) regenerated from the study files on every
//! call. `summary.json` carries the same status and verdict in machine
//! form together with SHA-256 sums of the inputs.

pub(crate) mod html;
mod svg;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock;
use crate::compare::{ComparisonReport, Verdict};
use crate::datastore::{DataError, SecondaryTable};
use crate::layout::{
    self, StudyDir, StudyError, COMPARISON_FILE, DESCRIPTION_FILE, REPORT_FILE, SECONDARY_FILE,
    STATUS_FILE, STUDY_FILE, SUMMARY_FILE,
};
use crate::paramspace::{CaseStatus, ID_COLUMN};
use crate::runner::{self, StatusCounts, StatusSnapshot};

pub const SUMMARY_SCHEMA: u32 = 1;
pub const INDEX_FILE: &str = "index.html";

/// Rows of the secondary table shown inline; the full table is linked.
const TABLE_ROW_LIMIT: usize = 500;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("invalid chart spec `{0}`: expected X:Y or X:Y:GROUP")]
    BadChartSpec(String),
    #[error("chart {chart}: unknown column `{column}`")]
    UnknownColumn { chart: String, column: String },
    #[error("chart {chart}: column `{column}` is not numeric")]
    NonNumericColumn { chart: String, column: String },
    #[error("no study reports under {0}")]
    NoReports(PathBuf),
    #[error("{0}")]
    Status(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Study(#[from] StudyError),
}

/// `y` against `x`, one line per distinct value of `group`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChartSpec {
    pub x: String,
    pub y: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

impl fmt::Display for ChartSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.x, self.y)?;
        if let Some(g) = &self.group {
            write!(f, ":{g}")?;
        }
        Ok(())
    }
}

impl FromStr for ChartSpec {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(ReportError::BadChartSpec(s.to_string()));
        }
        match parts.as_slice() {
            [x, y] => Ok(ChartSpec {
                x: x.to_string(),
                y: y.to_string(),
                group: None,
            }),
            [x, y, g] => Ok(ChartSpec {
                x: x.to_string(),
                y: y.to_string(),
                group: Some(g.to_string()),
            }),
            _ => Err(ReportError::BadChartSpec(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReportOptions {
    pub charts: Vec<ChartSpec>,
    /// Timestamp printed in the report; defaults to [`clock::now`].
    pub generated_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartSummary {
    pub x: String,
    pub y: String,
    pub group: Option<String>,
    /// Point count per group, in legend order.
    pub series: IndexMap<String, usize>,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: u32,
    pub study: String,
    pub generated_at: String,
    pub total: usize,
    pub counts: StatusCounts,
    pub secondary_rows: Option<usize>,
    pub comparison: Option<Verdict>,
    pub charts: Vec<ChartSummary>,
    /// SHA-256 of each input file, keyed by study-relative path.
    pub inputs: IndexMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct ReportOutcome {
    pub html: PathBuf,
    pub summary_path: PathBuf,
    pub summary: Summary,
}

struct Inputs {
    name: String,
    description: Option<String>,
    status: StatusSnapshot,
    variation: Option<(String, Vec<String>, Vec<Vec<String>>)>,
    secondary: Option<SecondaryTable>,
    comparison: Option<ComparisonReport>,
    checksums: IndexMap<String, String>,
}

fn read_optional(path: &Path) -> Result<Option<Vec<u8>>, StudyError> {
    match fs::read(path) {
        Ok(b) => Ok(Some(b)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(StudyError::io(path, e)),
    }
}

fn load_inputs(study: &StudyDir) -> Result<Inputs, ReportError> {
    let mut checksums = IndexMap::new();
    let mut track = |name: &str, bytes: &[u8]| {
        checksums.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
    };

    let config_bytes = fs::read(study.file(STUDY_FILE)).map_err(|e| StudyError::io(study.file(STUDY_FILE), e))?;
    track(STUDY_FILE, &config_bytes);
    let config = study.config()?;

    let status = runner::study_status(study).map_err(|e| ReportError::Status(e.to_string()))?;
    if let Some(b) = read_optional(&study.file(STATUS_FILE))? {
        track(STATUS_FILE, &b);
    }

    let variation = match study.variation_table() {
        Some((path, format)) => {
            let bytes = fs::read(&path).map_err(|e| StudyError::io(&path, e))?;
            let file = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            track(&file, &bytes);
            let rows = crate::paramspace::parse_variation_table(&bytes, format)
                .map_err(|e| StudyError::Corrupt {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
            let mut header = vec![ID_COLUMN.to_string()];
            header.extend(config.parameter_names().map(str::to_string));
            let body = rows
                .into_iter()
                .map(|r| {
                    let mut row = vec![r.id.to_string()];
                    row.extend(r.params.values().map(|v| v.to_string()));
                    row
                })
                .collect();
            Some((file, header, body))
        }
        None => None,
    };

    let secondary = match read_optional(&study.file(SECONDARY_FILE))? {
        Some(bytes) => {
            track(SECONDARY_FILE, &bytes);
            let metadata: Vec<&str> = config.parameter_names().collect();
            Some(SecondaryTable::from_csv(&bytes, &metadata)?)
        }
        None => None,
    };

    let comparison = match read_optional(&study.file(COMPARISON_FILE))? {
        Some(bytes) => {
            track(COMPARISON_FILE, &bytes);
            Some(serde_json::from_slice(&bytes).map_err(|e| StudyError::Corrupt {
                path: study.file(COMPARISON_FILE),
                message: e.to_string(),
            })?)
        }
        None => None,
    };

    let description = match read_optional(&study.file(DESCRIPTION_FILE))? {
        Some(bytes) => {
            track(DESCRIPTION_FILE, &bytes);
            Some(String::from_utf8_lossy(&bytes).into_owned())
        }
        None => None,
    };

    Ok(Inputs {
        name: study.name().to_string(),
        description,
        status,
        variation,
        secondary,
        comparison,
        checksums,
    })
}

fn numeric_column(table: &SecondaryTable, chart: &ChartSpec, column: &str) -> Result<usize, ReportError> {
    let idx = table
        .column_index(column)
        .ok_or_else(|| ReportError::UnknownColumn {
            chart: chart.to_string(),
            column: column.to_string(),
        })?;
    if !table.columns()[idx].ty.is_numeric() {
        return Err(ReportError::NonNumericColumn {
            chart: chart.to_string(),
            column: column.to_string(),
        });
    }
    Ok(idx)
}

/// Series of a chart: rows grouped by the group column in order of first
/// appearance, each sorted by x. Rows with a non-finite x or y are left
/// out.
fn chart_series(table: &SecondaryTable, chart: &ChartSpec) -> Result<Vec<svg::Series>, ReportError> {
    let xi = numeric_column(table, chart, &chart.x)?;
    let yi = numeric_column(table, chart, &chart.y)?;
    let gi = match &chart.group {
        Some(g) => Some(table.column_index(g).ok_or_else(|| ReportError::UnknownColumn {
            chart: chart.to_string(),
            column: g.clone(),
        })?),
        None => None,
    };
    let mut groups: IndexMap<String, Vec<(f64, f64)>> = IndexMap::new();
    for row in table.rows() {
        let label = match gi {
            Some(g) => format!("{} = {}", table.columns()[g].name, row[g]),
            None => chart.y.clone(),
        };
        let entry = groups.entry(label).or_default();
        let (Ok(x), Ok(y)) = (row[xi].parse::<f64>(), row[yi].parse::<f64>()) else {
            continue;
        };
        if x.is_finite() && y.is_finite() {
            entry.push((x, y));
        }
    }
    Ok(groups
        .into_iter()
        .map(|(label, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            svg::Series { label, points }
        })
        .collect())
}

fn status_badge(status: CaseStatus) -> String {
    html::badge(status.as_str(), status.as_str())
}

fn counts_line(counts: &StatusCounts) -> String {
    CaseStatus::ALL
        .iter()
        .filter(|s| counts.get(**s) > 0)
        .map(|s| format!("{} {}", status_badge(*s), counts.get(*s)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn render(inputs: &Inputs, charts: &[ChartSpec], generated_at: &str) -> Result<(String, Vec<ChartSummary>), ReportError> {
    use html::escape;
    let mut body = format!("<h1>{}</h1>\n", escape(&inputs.name));
    body.push_str(&format!(
        "<p class=\"note\">Generated {}</p>\n",
        escape(generated_at)
    ));

    if let Some(d) = &inputs.description {
        body.push_str("<h2>Description</h2>\n");
        body.push_str(&html::description(d));
    }

    body.push_str("<h2>Status</h2>\n");
    body.push_str(&format!(
        "<p>{} cases: {}</p>\n",
        inputs.status.total,
        counts_line(&inputs.status.counts)
    ));
    body.push_str(&html::table(
        &["ID", "status", "exit", "detail"],
        inputs.status.cases.iter().map(|c| {
            vec![
                escape(c.id.as_str()),
                status_badge(c.status),
                c.exit_code.map(|e| e.to_string()).unwrap_or_default(),
                escape(&c.detail),
            ]
        }),
    ));

    if let Some(cmp) = &inputs.comparison {
        body.push_str("<h2>Regression comparison</h2>\n");
        let v = cmp.verdict.to_string();
        body.push_str(&format!("<p>Verdict: {}</p>\n", html::badge(&v, &v)));
        body.push_str(&html::table(
            &["column", "max abs deviation", "max rel deviation", "abs tol", "rel tol", "failed cells"],
            cmp.columns.iter().map(|(name, c)| {
                vec![
                    escape(name),
                    format!("{:e}", c.max_abs_deviation),
                    format!("{:e}", c.max_rel_deviation),
                    format!("{:e}", c.abs_tol),
                    format!("{:e}", c.rel_tol),
                    c.failed_cells.to_string(),
                ]
            }),
        ));
        let structural: Vec<String> = cmp
            .missing_rows
            .iter()
            .map(|r| format!("missing row {r}"))
            .chain(cmp.extra_rows.iter().map(|r| format!("extra row {r}")))
            .chain(cmp.missing_columns.iter().map(|c| format!("missing column {c}")))
            .chain(cmp.extra_columns.iter().map(|c| format!("extra column {c}")))
            .collect();
        if !structural.is_empty() {
            body.push_str("<ul>\n");
            for s in structural {
                body.push_str(&format!("<li>{}</li>\n", escape(&s)));
            }
            body.push_str("</ul>\n");
        }
    }

    let mut summaries = Vec::new();
    match &inputs.secondary {
        Some(table) => {
            for chart in charts {
                let series = chart_series(table, chart)?;
                summaries.push(ChartSummary {
                    x: chart.x.clone(),
                    y: chart.y.clone(),
                    group: chart.group.clone(),
                    series: series.iter().map(|s| (s.label.clone(), s.points.len())).collect(),
                });
                body.push_str(&format!("<h2>{} vs {}</h2>\n", escape(&chart.y), escape(&chart.x)));
                body.push_str(&svg::line_chart(&chart.to_string(), &chart.x, &chart.y, &series));
            }
            body.push_str(&format!(
                "<h2>Secondary data</h2>\n<p><a href=\"{SECONDARY_FILE}\">{SECONDARY_FILE}</a>, {} rows</p>\n",
                table.len()
            ));
            let left_out: Vec<String> = inputs
                .status
                .cases
                .iter()
                .filter(|c| c.status != CaseStatus::Succeeded)
                .map(|c| format!("{} ({})", c.id.as_str(), c.status))
                .collect();
            if !left_out.is_empty() {
                body.push_str(&format!(
                    "<p class=\"note excluded\">not in the merged table: {}</p>\n",
                    escape(&left_out.join(", "))
                ));
            }
            let shown = table.rows().iter().take(TABLE_ROW_LIMIT).map(|r| r.iter().map(|c| escape(c)).collect());
            let names: Vec<&str> = table.column_names().collect();
            body.push_str(&html::table(&names, shown));
            if table.len() > TABLE_ROW_LIMIT {
                body.push_str(&format!(
                    "<p class=\"note\">first {TABLE_ROW_LIMIT} of {} rows shown</p>\n",
                    table.len()
                ));
            }
        }
        None => body.push_str("<h2>Secondary data</h2>\n<p class=\"note\">no secondary data</p>\n"),
    }

    if let Some((file, header, rows)) = &inputs.variation {
        body.push_str(&format!(
            "<h2>Variation table</h2>\n<p><a href=\"{0}\">{0}</a></p>\n",
            escape(file)
        ));
        body.push_str(&html::table(
            header,
            rows.iter().map(|r| r.iter().map(|c| escape(c)).collect()),
        ));
    }

    Ok((html::page(&format!("{} report", inputs.name), &body), summaries))
}

/// Writes `report.html` and `summary.json` into the study directory.
pub fn generate_study_report(study: &StudyDir, options: &ReportOptions) -> Result<ReportOutcome, ReportError> {
    let inputs = load_inputs(study)?;
    let generated_at = options
        .generated_at
        .unwrap_or_else(clock::now)
        .to_rfc3339_opts(SecondsFormat::Secs, true);
    let (page, charts) = render(&inputs, &options.charts, &generated_at)?;
    let summary = Summary {
        schema: SUMMARY_SCHEMA,
        study: inputs.name.clone(),
        generated_at,
        total: inputs.status.total,
        counts: inputs.status.counts,
        secondary_rows: inputs.secondary.as_ref().map(SecondaryTable::len),
        comparison: inputs.comparison.as_ref().map(|c| c.verdict),
        charts,
        inputs: inputs.checksums,
    };
    let html_path = study.file(REPORT_FILE);
    layout::write_atomic(&html_path, page.as_bytes())?;
    let summary_path = study.file(SUMMARY_FILE);
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    layout::write_atomic(&summary_path, json.as_bytes())?;
    Ok(ReportOutcome {
        html: html_path,
        summary_path,
        summary,
    })
}

/// Writes `<root>/index.html` linking every study that has a report.
/// The page carries no timestamp, so unchanged inputs give identical
/// bytes.
pub fn generate_index(root: &Path) -> Result<PathBuf, ReportError> {
    use html::escape;
    let mut rows = Vec::new();
    for name in layout::list_studies(root)? {
        let study = StudyDir::open(root, &name)?;
        if !study.file(REPORT_FILE).is_file() {
            continue;
        }
        let status = runner::study_status(&study).map_err(|e| ReportError::Status(e.to_string()))?;
        let verdict = match read_optional(&study.file(COMPARISON_FILE))? {
            Some(bytes) => serde_json::from_slice::<ComparisonReport>(&bytes)
                .map(|c| {
                    let v = c.verdict.to_string();
                    html::badge(&v, &v)
                })
                .unwrap_or_default(),
            None => String::new(),
        };
        rows.push(vec![
            format!(
                "<a href=\"{0}/{REPORT_FILE}\">{0}</a>",
                escape(&name)
            ),
            status.total.to_string(),
            counts_line(&status.counts),
            verdict,
        ]);
    }
    if rows.is_empty() {
        return Err(ReportError::NoReports(root.to_path_buf()));
    }
    let mut body = String::from("<h1>Studies</h1>\n");
    body.push_str(&html::table(&["study", "cases", "status", "regression"], rows));
    let path = root.join(INDEX_FILE);
    layout::write_atomic(&path, html::page("Studies", &body).as_bytes())?;
    Ok(path)
}
