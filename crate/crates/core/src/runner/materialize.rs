use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use walkdir::WalkDir;

use super::template;
use super::{store, RunnerError, StatusSnapshot};
use crate::layout::{StudyDir, StudyError, CASE_FILE, EVENTS_FILE, STUDY_FILE};
use crate::paramspace::{
    self, export_variation_table, CaseRecord, StudyConfig, TableFormat, Value, DEFAULT_MAX_CASES,
    ID_COLUMN,
};

#[derive(Debug, Clone)]
pub struct MaterializeOptions {
    /// Replace an existing non-empty study directory.
    pub force: bool,
    pub max_cases: usize,
    pub table_format: TableFormat,
}

impl Default for MaterializeOptions {
    fn default() -> Self {
        MaterializeOptions {
            force: false,
            max_cases: DEFAULT_MAX_CASES,
            table_format: TableFormat::Csv,
        }
    }
}

enum TemplateFile {
    Text { rel: PathBuf, text: String },
    Binary { rel: PathBuf, bytes: Vec<u8> },
}

fn read_template(dir: &Path) -> Result<Vec<TemplateFile>, RunnerError> {
    if !dir.is_dir() {
        return Err(RunnerError::MissingTemplate(dir.to_path_buf()));
    }
    let mut files = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            StudyError::io(path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(dir)
            .expect("walkdir yields children")
            .to_path_buf();
        let bytes = fs::read(entry.path()).map_err(|e| StudyError::io(entry.path(), e))?;
        files.push(match String::from_utf8(bytes) {
            Ok(text) => TemplateFile::Text { rel, text },
            Err(e) => TemplateFile::Binary {
                rel,
                bytes: e.into_bytes(),
            },
        });
    }
    Ok(files)
}

fn case_yaml(case: &CaseRecord) -> String {
    let mut doc: IndexMap<&str, serde_yaml::Value> = IndexMap::new();
    doc.insert(ID_COLUMN, serde_yaml::Value::String(case.id.to_string()));
    let params: IndexMap<&str, &Value> = case.params.iter().map(|(k, v)| (k.as_str(), v)).collect();
    doc.insert("params", serde_yaml::to_value(params).expect("params serialize"));
    serde_yaml::to_string(&doc).expect("case.yaml serializes")
}

/// Creates `root/<study>/<id>/` for every case.
///
/// Template files are copied with `{{NAME}}` placeholders substituted; each
/// case directory also receives a `case.yaml`. The study root gets the
/// resolved `study.yaml`, the variation table and an all-Pending
/// `status.json`. Every placeholder is checked before anything is written.
pub fn materialize(
    config: &StudyConfig,
    root: &Path,
    options: &MaterializeOptions,
) -> Result<Vec<CaseRecord>, RunnerError> {
    let mut cases = paramspace::expand_with_limit(config, options.max_cases)?;
    let template = match &config.template_dir {
        Some(dir) => read_template(dir)?,
        None => Vec::new(),
    };

    for case in &cases {
        let missing = |placeholder: String, file: &str| RunnerError::UnresolvedPlaceholder {
            case: case.id.clone(),
            placeholder,
            file: file.to_string(),
        };
        template::render(&config.command, &case.params).map_err(|p| missing(p, "command"))?;
        for file in &template {
            if let TemplateFile::Text { rel, text } = file {
                template::render(text, &case.params)
                    .map_err(|p| missing(p, &rel.display().to_string()))?;
            }
        }
    }

    let study = StudyDir::new_unchecked(root, &config.name);
    let dir = study.path();
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| StudyError::io(dir, e))?
            .next()
            .is_some();
        if non_empty {
            if !options.force {
                return Err(RunnerError::StudyExists(dir.to_path_buf()));
            }
            if let Some(pid) = store::lock_owner(&study) {
                return Err(StudyError::Locked {
                    study: config.name.clone(),
                    pid,
                }
                .into());
            }
            fs::remove_dir_all(dir).map_err(|e| StudyError::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| StudyError::io(dir, e))?;

    let mut resolved = config.clone();
    if let Some(t) = &resolved.template_dir {
        resolved.template_dir = Some(fs::canonicalize(t).map_err(|e| StudyError::io(t, e))?);
    }
    write(&study.file(STUDY_FILE), resolved.to_yaml().as_bytes())?;

    for case in &mut cases {
        let case_dir = study.case_dir(case.id.as_str());
        fs::create_dir_all(&case_dir).map_err(|e| StudyError::io(&case_dir, e))?;
        for file in &template {
            let (rel, bytes) = match file {
                TemplateFile::Text { rel, text } => (
                    rel,
                    template::render(text, &case.params)
                        .expect("placeholders checked")
                        .into_bytes(),
                ),
                TemplateFile::Binary { rel, bytes } => (rel, bytes.clone()),
            };
            let target = case_dir.join(rel);
            if let Some(parent) = target.parent() {
                fs::create_dir_all(parent).map_err(|e| StudyError::io(parent, e))?;
            }
            write(&target, &bytes)?;
            copy_permissions(&config.template_dir.as_ref().unwrap().join(rel), &target)?;
        }
        write(&case_dir.join(CASE_FILE), case_yaml(case).as_bytes())?;
        case.dir = case_dir;
    }

    let table = export_variation_table(&cases, options.table_format)?;
    write(&study.file(&options.table_format.file_name()), &table)?;
    store::write_status(&study, &StatusSnapshot::fresh(&config.name, &cases))?;
    write(&study.file(EVENTS_FILE), b"")?;
    Ok(cases)
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), StudyError> {
    fs::write(path, bytes).map_err(|e| StudyError::io(path, e))
}

fn copy_permissions(from: &Path, to: &Path) -> Result<(), StudyError> {
    let perms = fs::metadata(from)
        .map_err(|e| StudyError::io(from, e))?
        .permissions();
    fs::set_permissions(to, perms).map_err(|e| StudyError::io(to, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paramspace::parse_study_config;

    fn study_with_template(template: &Path, command: &str) -> StudyConfig {
        let mut c = parse_study_config(&format!(
            "name: demo\nvaried:\n  A: [1, 2]\n  B: [x, y]\nconstants:\n  DELTA_X: 0.0625\ncommand: '{command}'\n"
        ))
        .unwrap();
        c.template_dir = Some(template.to_path_buf());
        c
    }

    #[test]
    fn substitutes_templates_and_writes_case_files() {
        let tmp = tempfile::tempdir().unwrap();
        let template = tmp.path().join("tpl");
        fs::create_dir_all(template.join("sub")).unwrap();
        fs::write(template.join("input.txt"), "dx={{DELTA_X}}").unwrap();
        fs::write(template.join("sub/b.txt"), "b={{B}}").unwrap();
        fs::write(template.join("blob.bin"), [0xff, 0xfe, 0x00]).unwrap();
        let root = tmp.path().join("root");
        let config = study_with_template(&template, "true");

        let cases = materialize(&config, &root, &MaterializeOptions::default()).unwrap();
        assert_eq!(cases.len(), 4);
        for (i, case) in cases.iter().enumerate() {
            let id = format!("{i:04}");
            let dir = root.join("demo").join(&id);
            assert_eq!(case.dir, dir);
            assert!(dir.join("case.yaml").is_file());
            assert_eq!(fs::read_to_string(dir.join("input.txt")).unwrap(), "dx=0.0625");
            assert_eq!(fs::read(dir.join("blob.bin")).unwrap(), [0xff, 0xfe, 0x00]);
        }
        assert_eq!(
            fs::read_to_string(root.join("demo/0001/sub/b.txt")).unwrap(),
            "b=y"
        );
        let case_yaml = fs::read_to_string(root.join("demo/0000/case.yaml")).unwrap();
        assert!(case_yaml.starts_with("ID: '0000'\nparams:\n  A: 1\n"), "{case_yaml}");
        assert!(root.join("demo/variation.csv").is_file());

        let status = crate::runner::status(&root, "demo").unwrap();
        assert_eq!(status.counts.pending, 4);
        assert_eq!(status.total, 4);
        assert_eq!(status.latest_seq, 0);
    }

    #[test]
    fn unresolved_placeholder_names_case_and_placeholder() {
        let tmp = tempfile::tempdir().unwrap();
        let template = tmp.path().join("tpl");
        fs::create_dir_all(&template).unwrap();
        fs::write(template.join("input.txt"), "{{MISSING}}").unwrap();
        let root = tmp.path().join("root");
        let err = materialize(
            &study_with_template(&template, "true"),
            &root,
            &MaterializeOptions::default(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("{{MISSING}}") && msg.contains("0000"), "{msg}");
        assert!(!root.join("demo").exists());
    }

    #[test]
    fn unresolved_placeholder_in_command() {
        let tmp = tempfile::tempdir().unwrap();
        let mut config = study_with_template(tmp.path(), "run {{NOPE}}");
        config.template_dir = None;
        let err = materialize(&config, tmp.path(), &MaterializeOptions::default()).unwrap_err();
        assert!(matches!(err, RunnerError::UnresolvedPlaceholder { ref placeholder, .. } if placeholder == "NOPE"));
    }

    #[test]
    fn refuses_to_overwrite_without_force() {
        let tmp = tempfile::tempdir().unwrap();
        let mut config = study_with_template(tmp.path(), "true");
        config.template_dir = None;
        let opts = MaterializeOptions::default();
        materialize(&config, tmp.path(), &opts).unwrap();
        assert!(matches!(
            materialize(&config, tmp.path(), &opts),
            Err(RunnerError::StudyExists(_))
        ));
        let forced = MaterializeOptions {
            force: true,
            ..MaterializeOptions::default()
        };
        assert_eq!(materialize(&config, tmp.path(), &forced).unwrap().len(), 4);
    }

    #[test]
    fn unknown_study() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            crate::runner::status(tmp.path(), "nope"),
            Err(RunnerError::Study(StudyError::UnknownStudy(_)))
        ));
    }
}
