use std::fmt;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use indexmap::IndexMap;
use regex::Regex;
use serde::de::{Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Value, ID_COLUMN};

static PARAM_NAME: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[A-Za-z_][A-Za-z0-9_]*$").unwrap());
static STUDY_NAME: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$").unwrap());

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("syntax error: {0}")]
    SyntaxUnpositioned(String),
    #[error("missing command")]
    MissingCommand,
    #[error("missing study name")]
    MissingName,
    #[error("invalid study name `{0}`: use letters, digits, `_`, `.` and `-`")]
    InvalidStudyName(String),
    #[error("invalid parameter name `{0}`: must match [A-Za-z_][A-Za-z0-9_]*")]
    InvalidParameterName(String),
    #[error("parameter name `{0}` is reserved")]
    ReservedName(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("empty value list for parameter `{0}`")]
    EmptyValues(String),
    #[error("zip-mode length mismatch: `{first}` has {first_len} values but `{other}` has {other_len}")]
    ZipLengthMismatch {
        first: String,
        first_len: usize,
        other: String,
        other_len: usize,
    },
    #[error("parameter `{0}` has a non-finite decimal value")]
    NonFinite(String),
    #[error("cannot read study file {path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Cartesian,
    Zip,
}

/// Declarative description of one parameter study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyConfig {
    pub name: String,
    pub mode: Mode,
    pub varied: IndexMap<String, Vec<Value>>,
    pub constants: IndexMap<String, Value>,
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template_dir: Option<PathBuf>,
    pub outputs: Vec<String>,
    pub primary_globs: Vec<String>,
}

impl StudyConfig {
    /// All parameter names: varied parameters in declaration order, then
    /// constants in declaration order.
    pub fn parameter_names(&self) -> impl Iterator<Item = &str> {
        self.varied
            .keys()
            .chain(self.constants.keys())
            .map(String::as_str)
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("study config serializes")
    }

    /// Reads a study file, resolving `template_dir` against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<StudyConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut config = parse_study_config(&text)?;
        if let Some(dir) = &config.template_dir {
            if dir.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                config.template_dir = Some(base.join(dir));
            }
        }
        Ok(config)
    }
}

/// Map entries in document order, duplicates kept so they can be reported.
struct Pairs<V>(Vec<(String, V)>);

impl<V> Default for Pairs<V> {
    fn default() -> Self {
        Pairs(Vec::new())
    }
}

impl<'de, V: Deserialize<'de>> Deserialize<'de> for Pairs<V> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct PairsVisitor<V>(PhantomData<V>);

        impl<'de, V: Deserialize<'de>> Visitor<'de> for PairsVisitor<V> {
            type Value = Pairs<V>;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a mapping of parameter names")
            }

            fn visit_unit<E: serde::de::Error>(self) -> Result<Self::Value, E> {
                Ok(Pairs(Vec::new()))
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, V>()? {
                    out.push((k, v));
                }
                Ok(Pairs(out))
            }
        }

        deserializer.deserialize_map(PairsVisitor(PhantomData))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStudy {
    name: Option<String>,
    #[serde(default)]
    mode: Mode,
    #[serde(default)]
    varied: Pairs<Vec<Value>>,
    #[serde(default)]
    constants: Pairs<Value>,
    command: Option<String>,
    template_dir: Option<PathBuf>,
    #[serde(default)]
    outputs: Vec<String>,
    #[serde(default)]
    primary_globs: Vec<String>,
}

/// Parses and validates a study file.
pub fn parse_study_config(text: &str) -> Result<StudyConfig, ConfigError> {
    let raw: RawStudy = serde_yaml::from_str(text).map_err(|e| match e.location() {
        Some(loc) => ConfigError::Syntax {
            line: loc.line(),
            column: loc.column(),
            message: e.to_string(),
        },
        None => ConfigError::SyntaxUnpositioned(e.to_string()),
    })?;

    let name = raw.name.ok_or(ConfigError::MissingName)?;
    if !STUDY_NAME.is_match(&name) {
        return Err(ConfigError::InvalidStudyName(name));
    }
    let command = raw
        .command
        .filter(|c| !c.trim().is_empty())
        .ok_or(ConfigError::MissingCommand)?;

    let mut seen = std::collections::HashSet::new();
    let names = raw
        .varied
        .0
        .iter()
        .map(|(k, _)| k)
        .chain(raw.constants.0.iter().map(|(k, _)| k));
    for n in names {
        if !PARAM_NAME.is_match(n) {
            return Err(ConfigError::InvalidParameterName(n.clone()));
        }
        if n == ID_COLUMN {
            return Err(ConfigError::ReservedName(n.clone()));
        }
        if !seen.insert(n.clone()) {
            return Err(ConfigError::DuplicateParameter(n.clone()));
        }
    }

    for (k, values) in &raw.varied.0 {
        if values.is_empty() {
            return Err(ConfigError::EmptyValues(k.clone()));
        }
        if !values.iter().all(Value::is_finite) {
            return Err(ConfigError::NonFinite(k.clone()));
        }
    }
    for (k, v) in &raw.constants.0 {
        if !v.is_finite() {
            return Err(ConfigError::NonFinite(k.clone()));
        }
    }

    if raw.mode == Mode::Zip {
        if let Some((first, first_values)) = raw.varied.0.first() {
            for (other, values) in &raw.varied.0[1..] {
                if values.len() != first_values.len() {
                    return Err(ConfigError::ZipLengthMismatch {
                        first: first.clone(),
                        first_len: first_values.len(),
                        other: other.clone(),
                        other_len: values.len(),
                    });
                }
            }
        }
    }

    Ok(StudyConfig {
        name,
        mode: raw.mode,
        varied: raw.varied.0.into_iter().collect(),
        constants: raw.constants.0.into_iter().collect(),
        command,
        template_dir: raw.template_dir,
        outputs: raw.outputs,
        primary_globs: raw.primary_globs,
    })
}
