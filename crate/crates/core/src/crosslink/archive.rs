use std::fs;
use std::io::{self, Read, Write};
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::{Compression, GzBuilder};
use globset::GlobSet;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use super::CrosslinkError;
use crate::datastore::glob_set;
use crate::layout::{StudyDir, StudyError, SECONDARY_FILE, STATE_DIR};

/// Archives above this size trigger a warning.
pub const DEFAULT_SIZE_WARNING: u64 = 1_000_000_000;

#[derive(Debug, Clone)]
pub struct ArchiveOptions {
    /// Excluded in addition to each study's own `primary_globs`.
    pub extra_excludes: Vec<String>,
    pub size_warning: u64,
}

impl Default for ArchiveOptions {
    fn default() -> Self {
        ArchiveOptions {
            extra_excludes: Vec::new(),
            size_warning: DEFAULT_SIZE_WARNING,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArchiveOutcome {
    pub path: PathBuf,
    /// `<archive>.sha256`, in `sha256sum` format.
    pub checksum_file: PathBuf,
    pub sha256: String,
    pub size: u64,
    /// Archived paths, in archive order.
    pub entries: Vec<String>,
    /// Study-relative paths left out because they matched a primary glob.
    pub excluded: Vec<String>,
    pub warnings: Vec<String>,
}

/// True if `rel` (relative to the study directory) matches `globs` as a
/// study-relative path, as a path inside its case directory, or by file
/// name alone.
pub fn is_primary(rel: &Path, globs: &GlobSet) -> bool {
    if globs.is_match(rel) {
        return true;
    }
    let mut components = rel.components();
    components.next();
    let in_case = components.as_path();
    if !in_case.as_os_str().is_empty() && globs.is_match(in_case) {
        return true;
    }
    rel.file_name().is_some_and(|n| globs.is_match(n))
}

struct Item {
    archive_path: String,
    source: PathBuf,
    dir: bool,
    executable: bool,
}

fn collect(study: &StudyDir, globs: &GlobSet) -> Result<(Vec<Item>, Vec<String>), CrosslinkError> {
    let mut items = Vec::new();
    let mut excluded = Vec::new();
    let base = study.path();
    let walker = WalkDir::new(base)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| e.depth() != 1 || e.file_name() != STATE_DIR);
    for entry in walker {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(base).to_path_buf();
            StudyError::io(path, e.into())
        })?;
        let rel = entry.path().strip_prefix(base).expect("walkdir child");
        let ft = entry.file_type();
        if ft.is_symlink() {
            continue;
        }
        if !ft.is_dir() && is_primary(rel, globs) {
            excluded.push(rel.to_string_lossy().into_owned());
            continue;
        }
        let mut archive_path = PathBuf::from(study.name());
        archive_path.push(rel);
        let mode = entry
            .metadata()
            .map_err(|e| StudyError::io(entry.path(), e.into()))?
            .permissions()
            .mode();
        items.push(Item {
            archive_path: archive_path.to_string_lossy().into_owned(),
            source: entry.path().to_path_buf(),
            dir: ft.is_dir(),
            executable: mode & 0o111 != 0,
        });
    }
    Ok((items, excluded))
}

fn header(size: u64, dir: bool, executable: bool) -> tar::Header {
    let mut h = tar::Header::new_gnu();
    h.set_entry_type(if dir {
        tar::EntryType::Directory
    } else {
        tar::EntryType::Regular
    });
    h.set_size(size);
    h.set_mode(if dir || executable { 0o755 } else { 0o644 });
    h.set_mtime(0);
    h.set_uid(0);
    h.set_gid(0);
    h
}

/// Writes a deterministic `tar.gz` of the secondary data of `studies`:
/// the complete study directories minus files matching primary globs and
/// the run-state directory. Entries are sorted and carry zeroed owners
/// and timestamps, so identical inputs give identical bytes.
pub fn build_secondary_archive(
    studies: &[StudyDir],
    out: &Path,
    options: &ArchiveOptions,
) -> Result<ArchiveOutcome, CrosslinkError> {
    if studies.is_empty() {
        return Err(CrosslinkError::NoStudies);
    }
    let mut sorted: Vec<&StudyDir> = studies.iter().collect();
    sorted.sort_by(|a, b| a.name().cmp(b.name()));

    let mut all_globs = Vec::new();
    let mut plan = Vec::new();
    let mut excluded = Vec::new();
    for study in &sorted {
        if !study.file(SECONDARY_FILE).is_file() {
            return Err(CrosslinkError::NoSecondary(study.name().to_string()));
        }
        let mut patterns = study.config()?.primary_globs;
        patterns.extend(options.extra_excludes.iter().cloned());
        let globs = glob_set(&patterns)?;
        let (items, skipped) = collect(study, &globs)?;
        excluded.extend(skipped.into_iter().map(|p| format!("{}/{p}", study.name())));
        plan.push((study.path().to_path_buf(), globs, items));
        all_globs.push(patterns);
    }

    let mut gz = Vec::new();
    {
        let encoder = GzBuilder::new()
            .mtime(0)
            .operating_system(255)
            .write(&mut gz, Compression::default());
        let mut builder = tar::Builder::new(encoder);
        builder.mode(tar::HeaderMode::Deterministic);
        for (_, _, items) in &plan {
            for item in items {
                let io_err = |e: io::Error| StudyError::io(&item.source, e);
                if item.dir {
                    let mut h = header(0, true, true);
                    builder
                        .append_data(&mut h, &item.archive_path, io::empty())
                        .map_err(io_err)?;
                } else {
                    let data = fs::read(&item.source).map_err(io_err)?;
                    let mut h = header(data.len() as u64, false, item.executable);
                    builder
                        .append_data(&mut h, &item.archive_path, data.as_slice())
                        .map_err(io_err)?;
                }
            }
        }
        let encoder = builder.into_inner().map_err(|e| StudyError::io(out, e))?;
        encoder.finish().map_err(|e| StudyError::io(out, e))?;
    }

    // Exhaustive post-build check: nothing in the archive may match a
    // primary glob of its study.
    let entries = list_entries(&gz).map_err(|e| StudyError::io(out, e))?;
    let mut violations = Vec::new();
    for path in &entries {
        let p = Path::new(path);
        let mut comps = p.components();
        let study_name = comps.next().map(|c| c.as_os_str().to_string_lossy().into_owned());
        let rel = comps.as_path();
        let idx = sorted.iter().position(|s| Some(s.name()) == study_name.as_deref());
        match idx {
            Some(i) if rel.as_os_str().is_empty() || !is_primary(rel, &plan[i].1) => {}
            _ => violations.push(path.clone()),
        }
    }
    if !violations.is_empty() {
        return Err(CrosslinkError::ExclusionViolation(violations));
    }

    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| StudyError::io(parent, e))?;
    }
    fs::write(out, &gz).map_err(|e| StudyError::io(out, e))?;
    let sha256 = hex::encode(Sha256::digest(&gz));
    let checksum_file = {
        let mut s = out.as_os_str().to_owned();
        s.push(".sha256");
        PathBuf::from(s)
    };
    let file_name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut f = fs::File::create(&checksum_file).map_err(|e| StudyError::io(&checksum_file, e))?;
    writeln!(f, "{sha256}  {file_name}").map_err(|e| StudyError::io(&checksum_file, e))?;

    let size = gz.len() as u64;
    let mut warnings = Vec::new();
    if size > options.size_warning {
        let msg = format!(
            "archive {} is {size} bytes, above the {} byte guideline for secondary data",
            out.display(),
            options.size_warning
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(ArchiveOutcome {
        path: out.to_path_buf(),
        checksum_file,
        sha256,
        size,
        entries,
        excluded,
        warnings,
    })
}

/// Paths stored in a `tar.gz`, in archive order.
pub fn list_entries(gz: &[u8]) -> io::Result<Vec<String>> {
    let mut tar_bytes = Vec::new();
    GzDecoder::new(gz).read_to_end(&mut tar_bytes)?;
    let mut archive = tar::Archive::new(tar_bytes.as_slice());
    let mut out = Vec::new();
    for entry in archive.entries()? {
        let entry = entry?;
        let path = entry.path()?.to_string_lossy().trim_end_matches('/').to_string();
        out.push(path);
    }
    Ok(out)
}
