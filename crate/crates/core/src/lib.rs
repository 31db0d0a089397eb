//! Parameter-study orchestration and research-data tooling.
//!
//! The crate is organised by workflow stage: [`paramspace`] expands study
//! files into cases, [`runner`] materializes and executes them,
//! [`datastore`] merges per-case secondary data into metadata-carrying
//! tables, [`compare`] checks those tables against blessed references,
//! [`report`] renders static HTML, [`crosslink`] builds PID manifests and
//! publication archives, and [`recipelint`] checks container recipes.

pub mod clock;
pub mod compare;
pub mod crosslink;
pub mod datastore;
pub mod layout;
pub mod paramspace;
pub mod recipelint;
pub mod report;
pub mod runner;
