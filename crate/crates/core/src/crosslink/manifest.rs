use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize, Serializer};
use sha2::{Digest, Sha256};

use super::pid::{is_valid_pid, normalize_pid};
use super::tag::{parse_tag, TagParts};
use super::CrosslinkError;
use crate::layout::{self, StudyError};

pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Report,
    CodeSnapshot,
    Data,
    Container,
    Repository,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::Report,
        Role::CodeSnapshot,
        Role::Data,
        Role::Container,
        Role::Repository,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Report => "report",
            Role::CodeSnapshot => "code-snapshot",
            Role::Data => "data",
            Role::Container => "container",
            Role::Repository => "repository",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown role `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactEntry {
    pub role: Role,
    pub pid: String,
    pub version: String,
    /// SHA-256 of the local file; empty for external PIDs.
    #[serde(default)]
    pub checksum: String,
    /// Local file, relative to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    /// PIDs of other entries, or the git tag.
    #[serde(default)]
    pub references: Vec<String>,
}

impl ArtifactEntry {
    pub fn references_pid(&self, pid: &str) -> bool {
        let target = normalize_pid(pid);
        self.references.iter().any(|r| normalize_pid(r) == target)
    }

    pub fn references_tag(&self, tag: &TagParts) -> bool {
        let tag = tag.to_string();
        self.references.iter().any(|r| r.trim().eq_ignore_ascii_case(&tag))
    }
}

/// `manifest.yaml`: the PIDs of one publication milestone and the links
/// between them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactManifest {
    pub schema: u32,
    pub git_tag: TagParts,
    /// Commit the tag pointed to when the manifest was built.
    pub commit: String,
    pub entries: Vec<ArtifactEntry>,
}

impl ArtifactManifest {
    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("manifest serializes")
    }

    pub fn from_yaml(text: &str) -> Result<ArtifactManifest, CrosslinkError> {
        let m: ArtifactManifest =
            serde_yaml::from_str(text).map_err(|e| CrosslinkError::Manifest(e.to_string()))?;
        if m.schema != MANIFEST_SCHEMA {
            return Err(CrosslinkError::Manifest(format!(
                "unsupported schema {} (expected {MANIFEST_SCHEMA})",
                m.schema
            )));
        }
        check_commit(&m.commit)?;
        for e in &m.entries {
            if !is_valid_pid(&e.pid) {
                return Err(CrosslinkError::InvalidPid {
                    role: e.role,
                    pid: e.pid.clone(),
                });
            }
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<ArtifactManifest, CrosslinkError> {
        let text = fs::read_to_string(path).map_err(|e| StudyError::io(path, e))?;
        ArtifactManifest::from_yaml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), CrosslinkError> {
        Ok(layout::write_atomic(path, self.to_yaml().as_bytes())?)
    }

    pub fn entries_with(&self, role: Role) -> impl Iterator<Item = &ArtifactEntry> {
        self.entries.iter().filter(move |e| e.role == role)
    }
}

fn check_commit(commit: &str) -> Result<(), CrosslinkError> {
    let ok = (7..=64).contains(&commit.len()) && commit.bytes().all(|b| b.is_ascii_hexdigit());
    if ok {
        Ok(())
    } else {
        Err(CrosslinkError::InvalidCommit(commit.to_string()))
    }
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut file = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    io::copy(&mut file, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone)]
pub struct ArtifactInput {
    pub role: Role,
    pub pid: String,
    pub path: Option<PathBuf>,
    /// Defaults to the tag's stage, e.g. `revision-1`.
    pub version: Option<String>,
    pub references: Vec<String>,
}

impl ArtifactInput {
    pub fn new(role: Role, pid: impl Into<String>) -> ArtifactInput {
        ArtifactInput {
            role,
            pid: pid.into(),
            path: None,
            version: None,
            references: Vec::new(),
        }
    }

    pub fn with_path(mut self, path: impl Into<PathBuf>) -> ArtifactInput {
        self.path = Some(path.into());
        self
    }
}

#[derive(Debug, Clone)]
pub struct ManifestInputs {
    pub git_tag: String,
    pub commit: String,
    pub entries: Vec<ArtifactInput>,
    /// Add every required cross-link edge automatically.
    pub link: bool,
}

fn relative_to(path: &Path, base: &Path) -> String {
    let abs = fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
    let base = fs::canonicalize(base).unwrap_or_else(|_| base.to_path_buf());
    match abs.strip_prefix(&base) {
        Ok(rel) => rel.to_string_lossy().into_owned(),
        Err(_) => abs.to_string_lossy().into_owned(),
    }
}

/// Builds a milestone manifest. Local files are checksummed and their paths
/// stored relative to `base_dir`, where the manifest will be written.
pub fn build_manifest(
    inputs: &ManifestInputs,
    base_dir: &Path,
) -> Result<ArtifactManifest, CrosslinkError> {
    let tag = parse_tag(&inputs.git_tag)?;
    check_commit(&inputs.commit)?;
    let tag_text = tag.to_string();

    let count = |role| inputs.entries.iter().filter(|e| e.role == role).count();
    if count(Role::Report) > 1 {
        return Err(CrosslinkError::DuplicateRole(Role::Report));
    }
    for role in [Role::Report, Role::CodeSnapshot, Role::Data] {
        if count(role) == 0 {
            return Err(CrosslinkError::MissingRole(role));
        }
    }

    let mut seen = BTreeSet::new();
    let mut entries = Vec::with_capacity(inputs.entries.len());
    for input in &inputs.entries {
        if !is_valid_pid(&input.pid) {
            return Err(CrosslinkError::InvalidPid {
                role: input.role,
                pid: input.pid.clone(),
            });
        }
        if !seen.insert(normalize_pid(&input.pid)) {
            return Err(CrosslinkError::DuplicatePid(input.pid.clone()));
        }
        for r in &input.references {
            if !is_valid_pid(r) && !r.trim().eq_ignore_ascii_case(&tag_text) {
                return Err(CrosslinkError::InvalidReference(r.clone()));
            }
        }
        let (checksum, path) = match &input.path {
            Some(p) => {
                if !p.is_file() {
                    return Err(CrosslinkError::MissingFile(p.clone()));
                }
                let sum = sha256_file(p).map_err(|e| StudyError::io(p, e))?;
                (sum, Some(relative_to(p, base_dir)))
            }
            None => (String::new(), None),
        };
        entries.push(ArtifactEntry {
            role: input.role,
            pid: input.pid.clone(),
            version: input
                .version
                .clone()
                .unwrap_or_else(|| tag.stage.to_string()),
            checksum,
            path,
            references: input.references.clone(),
        });
    }

    let mut manifest = ArtifactManifest {
        schema: MANIFEST_SCHEMA,
        git_tag: tag,
        commit: inputs.commit.to_ascii_lowercase(),
        entries,
    };
    if inputs.link {
        add_required_links(&mut manifest);
    }
    Ok(manifest)
}

fn add_required_links(m: &mut ArtifactManifest) {
    let tag = m.git_tag.to_string();
    let edges = required_edges(m);
    for edge in edges {
        let entry = &mut m.entries[edge.from_index];
        let target = match &edge.to_pid {
            Some(pid) => pid.clone(),
            None => tag.clone(),
        };
        if !entry.references.contains(&target) {
            entry.references.push(target);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkTarget {
    Role(Role),
    GitTag,
}

impl fmt::Display for LinkTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinkTarget::Role(r) => r.fmt(f),
            LinkTarget::GitTag => f.write_str("git-tag"),
        }
    }
}

impl Serialize for LinkTarget {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// A required reference that is absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MissingLink {
    pub from: Role,
    pub to: LinkTarget,
    pub from_pid: String,
    pub to_pid: Option<String>,
}

impl fmt::Display for MissingLink {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({} → {})", self.from, self.to)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LinkVerdict {
    Complete,
    Incomplete,
}

impl LinkVerdict {
    pub fn exit_code(self) -> i32 {
        match self {
            LinkVerdict::Complete => 0,
            LinkVerdict::Incomplete => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LinkReport {
    pub verdict: LinkVerdict,
    pub missing: Vec<MissingLink>,
    /// Structural problems such as a missing report entry.
    pub problems: Vec<String>,
}

impl LinkReport {
    /// `(from, to)` role pairs of the missing links.
    pub fn missing_pairs(&self) -> Vec<(Role, LinkTarget)> {
        self.missing.iter().map(|m| (m.from, m.to)).collect()
    }
}

struct Edge {
    from_index: usize,
    to: LinkTarget,
    to_pid: Option<String>,
}

/// Edges a milestone manifest must contain: the report references every
/// code snapshot and data item, each of those references the report, a
/// container references the report, and report, code snapshots and data
/// all mention the git tag.
fn required_edges(m: &ArtifactManifest) -> Vec<Edge> {
    let pids = |role| -> Vec<String> { m.entries_with(role).map(|e| e.pid.clone()).collect() };
    let reports = pids(Role::Report);
    let mut edges = Vec::new();
    for (i, e) in m.entries.iter().enumerate() {
        let mut to_role = |role: Role, targets: &[String]| {
            for pid in targets {
                edges.push(Edge {
                    from_index: i,
                    to: LinkTarget::Role(role),
                    to_pid: Some(pid.clone()),
                });
            }
        };
        match e.role {
            Role::Report => {
                to_role(Role::CodeSnapshot, &pids(Role::CodeSnapshot));
                to_role(Role::Data, &pids(Role::Data));
            }
            Role::CodeSnapshot | Role::Data | Role::Container => to_role(Role::Report, &reports),
            Role::Repository => {}
        }
        if matches!(e.role, Role::Report | Role::CodeSnapshot | Role::Data) {
            edges.push(Edge {
                from_index: i,
                to: LinkTarget::GitTag,
                to_pid: None,
            });
        }
    }
    edges
}

/// Checks the three-way cross-linking of a manifest.
pub fn verify_links(m: &ArtifactManifest) -> LinkReport {
    let mut problems = Vec::new();
    let reports = m.entries_with(Role::Report).count();
    if reports != 1 {
        problems.push(format!("expected exactly one report entry, found {reports}"));
    }
    for role in [Role::CodeSnapshot, Role::Data] {
        if m.entries_with(role).next().is_none() {
            problems.push(format!("no {role} entry"));
        }
    }
    let missing: Vec<MissingLink> = required_edges(m)
        .into_iter()
        .filter(|edge| {
            let entry = &m.entries[edge.from_index];
            match &edge.to_pid {
                Some(pid) => !entry.references_pid(pid),
                None => !entry.references_tag(&m.git_tag),
            }
        })
        .map(|edge| {
            let entry = &m.entries[edge.from_index];
            MissingLink {
                from: entry.role,
                to: edge.to,
                from_pid: entry.pid.clone(),
                to_pid: edge.to_pid,
            }
        })
        .collect();
    let verdict = if missing.is_empty() && problems.is_empty() {
        LinkVerdict::Complete
    } else {
        LinkVerdict::Incomplete
    };
    LinkReport {
        verdict,
        missing,
        problems,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChecksumProblem {
    pub pid: String,
    pub path: String,
    /// `missing` or `mismatch`.
    pub kind: &'static str,
}

/// Re-hashes every entry that records a local path and checksum. Relative
/// paths resolve against `base_dir`.
pub fn verify_checksums(m: &ArtifactManifest, base_dir: &Path) -> Vec<ChecksumProblem> {
    let mut problems = Vec::new();
    for e in &m.entries {
        let (Some(path), false) = (&e.path, e.checksum.is_empty()) else {
            continue;
        };
        let full = base_dir.join(path);
        let kind = match sha256_file(&full) {
            Ok(sum) if sum.eq_ignore_ascii_case(&e.checksum) => continue,
            Ok(_) => "mismatch",
            Err(_) => "missing",
        };
        problems.push(ChecksumProblem {
            pid: e.pid.clone(),
            path: path.clone(),
            kind,
        });
    }
    problems
}

#[cfg(test)]
mod tests {
    use super::*;

    const REPORT: &str = "https://doi.org/10.48328/tudatalib-921.2";
    const CODE: &str = "10.48328/tudatalib-920";
    const DATA: &str = "10.48328/tudatalib-919";
    const COMMIT: &str = "0123456789abcdef0123456789abcdef01234567";

    fn inputs(dir: &Path, link: bool) -> ManifestInputs {
        fs::write(dir.join("code.tar.gz"), b"code").unwrap();
        fs::write(dir.join("data.tar.gz"), b"data").unwrap();
        ManifestInputs {
            git_tag: "ccs-jcp-submission".into(),
            commit: COMMIT.into(),
            entries: vec![
                ArtifactInput::new(Role::Report, REPORT),
                ArtifactInput::new(Role::CodeSnapshot, CODE).with_path(dir.join("code.tar.gz")),
                ArtifactInput::new(Role::Data, DATA).with_path(dir.join("data.tar.gz")),
            ],
            link,
        }
    }

    #[test]
    fn builds_linked_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        let m = build_manifest(&inputs(tmp.path(), true), tmp.path()).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.entries[1].path.as_deref(), Some("code.tar.gz"));
        assert_eq!(m.entries[1].checksum, hex::encode(Sha256::digest(b"code")));
        assert_eq!(m.entries[0].checksum, "");
        assert_eq!(m.entries[0].version, "submission");
        let report = verify_links(&m);
        assert_eq!(report.verdict, LinkVerdict::Complete, "{report:?}");
        assert!(verify_checksums(&m, tmp.path()).is_empty());

        let back = ArtifactManifest::from_yaml(&m.to_yaml()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn unlinked_manifest_lists_every_edge() {
        let tmp = tempfile::tempdir().unwrap();
        let m = build_manifest(&inputs(tmp.path(), false), tmp.path()).unwrap();
        let r = verify_links(&m);
        assert_eq!(r.verdict, LinkVerdict::Incomplete);
        let pairs = r.missing_pairs();
        assert_eq!(pairs.len(), 7);
        assert!(pairs.contains(&(Role::Data, LinkTarget::Role(Role::Report))));
        assert!(pairs.contains(&(Role::Report, LinkTarget::GitTag)));
    }

    #[test]
    fn doi_spelling_does_not_matter_for_links() {
        let tmp = tempfile::tempdir().unwrap();
        let mut m = build_manifest(&inputs(tmp.path(), true), tmp.path()).unwrap();
        let data = m.entries.iter_mut().find(|e| e.role == Role::Data).unwrap();
        data.references = vec!["doi:10.48328/TUDATALIB-921.2".into(), "ccs-jcp-submission".into()];
        assert_eq!(verify_links(&m).verdict, LinkVerdict::Complete);
    }

    #[test]
    fn build_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let mut bad_tag = inputs(tmp.path(), true);
        bad_tag.git_tag = "ccs--submission".into();
        assert!(matches!(build_manifest(&bad_tag, tmp.path()), Err(CrosslinkError::Tag(_))));

        let mut missing = inputs(tmp.path(), true);
        missing.entries[2].path = Some(tmp.path().join("absent.tar.gz"));
        let err = build_manifest(&missing, tmp.path()).unwrap_err();
        assert!(err.to_string().contains("missing file"), "{err}");

        let mut bad_doi = inputs(tmp.path(), true);
        bad_doi.entries[0].pid = "10.12/x".into();
        assert!(matches!(
            build_manifest(&bad_doi, tmp.path()),
            Err(CrosslinkError::InvalidPid { .. })
        ));

        let mut two_reports = inputs(tmp.path(), true);
        two_reports.entries.push(ArtifactInput::new(Role::Report, "https://example.org/r2"));
        assert!(matches!(
            build_manifest(&two_reports, tmp.path()),
            Err(CrosslinkError::DuplicateRole(Role::Report))
        ));
    }

    #[test]
    fn checksum_mismatch_detected() {
        let tmp = tempfile::tempdir().unwrap();
        let m = build_manifest(&inputs(tmp.path(), true), tmp.path()).unwrap();
        fs::write(tmp.path().join("data.tar.gz"), b"changed").unwrap();
        fs::remove_file(tmp.path().join("code.tar.gz")).unwrap();
        let kinds: Vec<&str> = verify_checksums(&m, tmp.path()).iter().map(|p| p.kind).collect();
        assert_eq!(kinds, ["missing", "mismatch"]);
    }
}
