//! Persistent-identifier cross-linking for publication milestones.
//!
//! Milestone tags follow `idea-venue-stage[-suffix]`. A `manifest.yaml`
//! records the PIDs of the report, code snapshot and data of one milestone
//! and the references between them; [`verify_links`] checks that the three
//! artifacts point at each other and at the tag. Secondary-data archives
//! are deterministic `tar.gz` files without primary data.

mod archive;
mod manifest;
mod pid;
mod tag;

use std::path::PathBuf;

use thiserror::Error;

pub use archive::{
    build_secondary_archive, is_primary, list_entries, ArchiveOptions, ArchiveOutcome,
    DEFAULT_SIZE_WARNING,
};
pub use manifest::{
    build_manifest, sha256_file, verify_checksums, verify_links, ArtifactEntry, ArtifactInput,
    ArtifactManifest, ChecksumProblem, LinkReport, LinkTarget, LinkVerdict, ManifestInputs,
    MissingLink, Role, MANIFEST_SCHEMA,
};
pub use pid::{doi_of, is_valid_pid, normalize_pid};
pub use tag::{parse_tag, Stage, TagError, TagParts};

use crate::datastore::DataError;
use crate::layout::StudyError;

#[derive(Debug, Error)]
pub enum CrosslinkError {
    #[error(transparent)]
    Tag(#[from] TagError),
    #[error("invalid PID for {role} entry: `{pid}` (expected a DOI 10.NNNN/suffix or an http(s) URL)")]
    InvalidPid { role: Role, pid: String },
    #[error("invalid reference `{0}`: expected a PID or the git tag")]
    InvalidReference(String),
    #[error("duplicate PID `{0}`")]
    DuplicatePid(String),
    #[error("invalid commit id `{0}`")]
    InvalidCommit(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("more than one {0} entry")]
    DuplicateRole(Role),
    #[error("no {0} entry")]
    MissingRole(Role),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("no studies to archive")]
    NoStudies,
    #[error("study `{0}` has no merged secondary.csv")]
    NoSecondary(String),
    #[error("archive contains primary data: {0:?}")]
    ExclusionViolation(Vec<String>),
    #[error(transparent)]
    Pattern(#[from] DataError),
    #[error(transparent)]
    Study(#[from] StudyError),
}
