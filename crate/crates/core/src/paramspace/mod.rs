//! Study configurations and their expansion into uniquely identified cases.
//!
//! Expansion iterates varied parameters in declaration order with the
//! last-declared parameter varying fastest. Case IDs are ascending decimal
//! integers zero-padded to at least four digits.

mod config;
mod table;
mod value;

use std::fmt;
use std::path::PathBuf;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{parse_study_config, ConfigError, Mode, StudyConfig};
pub use table::{
    export_variation_table, parse_variation_table, TableError, TableFormat, VariationRow,
};
pub use value::Value;
pub(crate) use table::csv_writer;

/// Name of the case-ID column in every exported table.
pub const ID_COLUMN: &str = "ID";

/// Default cap on the number of cases a single study may expand to.
pub const DEFAULT_MAX_CASES: usize = 100_000;

/// Ordered parameter vector of one case.
pub type Params = IndexMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CaseId(String);

impl CaseId {
    pub fn new(index: usize, width: usize) -> CaseId {
        CaseId(format!("{index:0width$}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for CaseId {
    fn from(s: &str) -> Self {
        CaseId(s.to_string())
    }
}

impl From<String> for CaseId {
    fn from(s: String) -> Self {
        CaseId(s)
    }
}

impl AsRef<str> for CaseId {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CaseStatus {
    Pending,
    Running,
    Succeeded,
    Failed,
    Cancelled,
}

impl CaseStatus {
    pub const ALL: [CaseStatus; 5] = [
        CaseStatus::Pending,
        CaseStatus::Running,
        CaseStatus::Succeeded,
        CaseStatus::Failed,
        CaseStatus::Cancelled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            CaseStatus::Succeeded | CaseStatus::Failed | CaseStatus::Cancelled
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CaseStatus::Pending => "Pending",
            CaseStatus::Running => "Running",
            CaseStatus::Succeeded => "Succeeded",
            CaseStatus::Failed => "Failed",
            CaseStatus::Cancelled => "Cancelled",
        }
    }
}

impl fmt::Display for CaseStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One simulation case of a study.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub id: CaseId,
    pub params: Params,
    /// Case directory; relative to the study root until materialized.
    pub dir: PathBuf,
    pub status: CaseStatus,
}

#[derive(Debug, Error, PartialEq)]
pub enum ExpandError {
    #[error("study expands to {count} cases, more than the allowed maximum of {max}")]
    TooManyCases { count: u128, max: usize },
}

/// Number of cases a config expands to, without materializing them.
pub fn case_count(config: &StudyConfig) -> u128 {
    match config.mode {
        Mode::Cartesian => config
            .varied
            .values()
            .map(|v| v.len() as u128)
            .try_fold(1u128, |acc, n| acc.checked_mul(n))
            .unwrap_or(u128::MAX),
        Mode::Zip => config.varied.values().next().map_or(1, |v| v.len() as u128),
    }
}

pub fn id_width(count: usize) -> usize {
    let last = count.saturating_sub(1);
    let digits = if last == 0 { 1 } else { last.ilog10() as usize + 1 };
    digits.max(4)
}

/// Expands a study into its ordered list of cases, using [`DEFAULT_MAX_CASES`].
pub fn expand(config: &StudyConfig) -> Result<Vec<CaseRecord>, ExpandError> {
    expand_with_limit(config, DEFAULT_MAX_CASES)
}

pub fn expand_with_limit(
    config: &StudyConfig,
    max_cases: usize,
) -> Result<Vec<CaseRecord>, ExpandError> {
    let count = case_count(config);
    if count > max_cases as u128 {
        return Err(ExpandError::TooManyCases {
            count,
            max: max_cases,
        });
    }
    let count = count as usize;
    let width = id_width(count);
    let lists: Vec<(&String, &Vec<Value>)> = config.varied.iter().collect();

    let cases = (0..count)
        .map(|index| {
            let mut params = Params::with_capacity(lists.len() + config.constants.len());
            match config.mode {
                Mode::Cartesian => {
                    // Mixed-radix decomposition; the last list is the fastest digit.
                    let mut rest = index;
                    let mut picks = vec![0usize; lists.len()];
                    for (slot, (_, values)) in picks.iter_mut().zip(&lists).rev() {
                        *slot = rest % values.len();
                        rest /= values.len();
                    }
                    for ((name, values), pick) in lists.iter().zip(picks) {
                        params.insert((*name).clone(), values[pick].clone());
                    }
                }
                Mode::Zip => {
                    for (name, values) in &lists {
                        params.insert((*name).clone(), values[index].clone());
                    }
                }
            }
            for (name, value) in &config.constants {
                params.insert(name.clone(), value.clone());
            }
            let id = CaseId::new(index, width);
            CaseRecord {
                dir: PathBuf::from(id.as_str()),
                id,
                params,
                status: CaseStatus::Pending,
            }
        })
        .collect();
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> StudyConfig {
        parse_study_config(text).unwrap()
    }

    fn vector(case: &CaseRecord) -> Vec<String> {
        case.params.values().map(ToString::to_string).collect()
    }

    #[test]
    fn cartesian_order_last_fastest() {
        let c = cfg("name: s\nvaried:\n  A: [1, 2]\n  B: [x, y]\ncommand: c\n");
        let cases = expand(&c).unwrap();
        let got: Vec<(String, Vec<String>)> = cases
            .iter()
            .map(|k| (k.id.to_string(), vector(k)))
            .collect();
        let want = [
            ("0000", ["1", "x"]),
            ("0001", ["1", "y"]),
            ("0002", ["2", "x"]),
            ("0003", ["2", "y"]),
        ];
        assert_eq!(got.len(), 4);
        for ((id, v), (wid, wv)) in got.iter().zip(want) {
            assert_eq!(id, wid);
            assert_eq!(v, &wv);
        }
    }

    #[test]
    fn zip_pairs_positionally() {
        let c = cfg("name: s\nmode: zip\nvaried:\n  A: [1, 2]\n  B: [10, 20]\ncommand: c\n");
        let cases = expand(&c).unwrap();
        assert_eq!(cases.len(), 2);
        assert_eq!(cases[0].id.as_str(), "0000");
        assert_eq!(vector(&cases[0]), ["1", "10"]);
        assert_eq!(vector(&cases[1]), ["2", "20"]);
    }

    #[test]
    fn hyperparameter_study_vectors() {
        let c = cfg(concat!(
            "name: nn\n",
            "varied:\n  OPTIMIZER_STEP: [0.0001, 0.001]\n",
            "constants:\n  HIDDEN_LAYERS: '10,10,10,10'\n  MAX_ITERATIONS: 3000\n  DELTA_X: 0.0625\n",
            "command: c\n"
        ));
        let cases = expand(&c).unwrap();
        assert_eq!(cases.len(), 2);
        for (case, step) in cases.iter().zip(["0.0001", "0.001"]) {
            assert_eq!(case.params["HIDDEN_LAYERS"].to_string(), "10,10,10,10");
            assert_eq!(case.params["OPTIMIZER_STEP"].to_string(), step);
            assert_eq!(case.params["MAX_ITERATIONS"].to_string(), "3000");
            assert_eq!(case.params["DELTA_X"].to_string(), "0.0625");
        }
    }

    #[test]
    fn no_varied_parameters_is_one_case() {
        let c = cfg("name: s\nconstants:\n  A: 1\ncommand: c\n");
        let cases = expand(&c).unwrap();
        assert_eq!(cases.len(), 1);
        assert_eq!(cases[0].params["A"], Value::Int(1));
    }

    #[test]
    fn case_cap() {
        let c = cfg("name: s\nvaried:\n  A: [1, 2, 3]\n  B: [1, 2, 3]\ncommand: c\n");
        assert_eq!(
            expand_with_limit(&c, 8),
            Err(ExpandError::TooManyCases { count: 9, max: 8 })
        );
        assert_eq!(expand_with_limit(&c, 9).unwrap().len(), 9);
    }

    #[test]
    fn id_width_grows_past_four_digits() {
        assert_eq!(id_width(1), 4);
        assert_eq!(id_width(10_000), 4);
        assert_eq!(id_width(10_001), 5);
        assert_eq!(CaseId::new(7, 4).as_str(), "0007");
    }
}
