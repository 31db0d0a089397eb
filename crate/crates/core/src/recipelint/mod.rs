//! Reproducibility checks for Apptainer/Singularity definition files.
//!
//! | rule | severity | finding |
//! |------|----------|---------|
//! | R1 | error | base image without a version tag or digest |
//! | R2 | warning | `%files` copies from the local build context |
//! | R3 | warning | package install without version pins |
//! | R4 | warning | `git clone` without a tag or commit pin |
//!
//! R3 and R4 are token heuristics over `%post`.

mod shell;

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::Serialize;
use thiserror::Error;

use shell::{commands, Command};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecipeError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("missing `Bootstrap:` header")]
    MissingBootstrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Rule {
    R1,
    R2,
    R3,
    R4,
}

impl Rule {
    pub fn severity(self) -> Severity {
        match self {
            Rule::R1 => Severity::Error,
            _ => Severity::Warning,
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Warning => "warning",
            Severity::Error => "error",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LintFinding {
    pub rule: Rule,
    pub severity: Severity,
    /// 1-based.
    pub line: usize,
    pub message: String,
    pub excerpt: String,
}

impl fmt::Display for LintFinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} {}: {} | {}",
            self.line, self.severity, self.rule, self.message, self.excerpt
        )
    }
}

/// 0 without findings, 1 for warnings only, 2 if any error.
pub fn exit_code(findings: &[LintFinding]) -> i32 {
    match findings.iter().map(|f| f.severity).max() {
        None => 0,
        Some(Severity::Warning) => 1,
        Some(Severity::Error) => 2,
    }
}

fn finding(rule: Rule, line: usize, message: String, excerpt: &str) -> LintFinding {
    LintFinding {
        rule,
        severity: rule.severity(),
        line,
        message,
        excerpt: excerpt.trim().to_string(),
    }
}

struct Section<'a> {
    name: String,
    args: String,
    /// (1-based line number, text)
    body: Vec<(usize, &'a str)>,
}

struct Header<'a> {
    bootstrap: Option<(usize, &'a str)>,
    from: Option<(usize, &'a str, &'a str)>,
}

fn section_start(line: &str) -> Option<(String, String)> {
    let rest = line.strip_prefix('%')?;
    let name_len = rest
        .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .unwrap_or(rest.len());
    if name_len == 0 {
        return None;
    }
    Some((
        rest[..name_len].to_ascii_lowercase(),
        rest[name_len..].trim().to_string(),
    ))
}

fn header_key(line: &str) -> Option<(&str, &str)> {
    let (key, value) = line.split_once(':')?;
    let key = key.trim();
    if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return None;
    }
    Some((key, value.trim()))
}

/// Splits a recipe into headers (one per build stage) and sections.
fn parse(text: &str) -> Result<(Vec<Header<'_>>, Vec<Section<'_>>), RecipeError> {
    let mut headers = vec![Header {
        bootstrap: None,
        from: None,
    }];
    let mut sections: Vec<Section> = Vec::new();
    let mut in_header = true;
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim();
        if raw.contains('\0') {
            return Err(RecipeError::Syntax {
                line: n,
                message: "binary content".into(),
            });
        }
        if raw.starts_with('%') {
            if let Some((name, args)) = section_start(raw) {
                sections.push(Section {
                    name,
                    args,
                    body: Vec::new(),
                });
                in_header = false;
                continue;
            }
        }
        // A Bootstrap line after sections starts the next build stage.
        if let Some((key, value)) = header_key(line) {
            if key.eq_ignore_ascii_case("bootstrap") && (in_header || raw == line) {
                if !in_header || headers.last().is_some_and(|h| h.bootstrap.is_some()) {
                    headers.push(Header {
                        bootstrap: None,
                        from: None,
                    });
                }
                headers.last_mut().expect("header").bootstrap = Some((n, value));
                in_header = true;
                continue;
            }
        }
        if in_header {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match header_key(line) {
                Some((key, value)) => {
                    if key.eq_ignore_ascii_case("from") {
                        headers.last_mut().expect("header").from = Some((n, value, raw));
                    }
                }
                None => {
                    return Err(RecipeError::Syntax {
                        line: n,
                        message: format!("expected `Key: value` header, found `{line}`"),
                    })
                }
            }
        } else if let Some(s) = sections.last_mut() {
            s.body.push((n, raw));
        }
    }
    if headers.iter().all(|h| h.bootstrap.is_none()) {
        return Err(RecipeError::MissingBootstrap);
    }
    Ok((headers, sections))
}

fn digest_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^sha256:[0-9a-f]{64}$").expect("valid regex"))
}

/// Problem with a base image reference, if any.
fn base_image_problem(image: &str) -> Option<String> {
    if image.is_empty() {
        return Some("unpinned base image: empty `From:`".into());
    }
    if let Some((_, digest)) = image.split_once('@') {
        if digest_regex().is_match(digest) {
            return None;
        }
        return Some(format!("unpinned base image: malformed digest `{digest}`"));
    }
    let last = image.rsplit('/').next().unwrap_or(image);
    match last.split_once(':') {
        None => Some(format!(
            "unpinned base image `{image}`: add a version tag or digest"
        )),
        Some((_, "")) => Some(format!("unpinned base image `{image}`: empty tag")),
        Some((_, "latest")) => Some(format!(
            "unpinned base image `{image}`: `latest` is not a version pin"
        )),
        Some(_) => None,
    }
}

/// Bootstrap agents whose `From:` names a registry image.
const REGISTRY_AGENTS: [&str; 6] = [
    "docker",
    "library",
    "oras",
    "shub",
    "docker-daemon",
    "docker-archive",
];

fn lint_headers(headers: &[Header], out: &mut Vec<LintFinding>) {
    for h in headers {
        let Some((bline, agent)) = h.bootstrap else {
            continue;
        };
        if !REGISTRY_AGENTS.contains(&agent.to_ascii_lowercase().as_str()) {
            continue;
        }
        match h.from {
            Some((line, image, raw)) => {
                if let Some(msg) = base_image_problem(image) {
                    out.push(finding(Rule::R1, line, msg, raw));
                }
            }
            None => out.push(finding(
                Rule::R1,
                bline,
                "unpinned base image: `From:` missing".into(),
                &format!("Bootstrap: {agent}"),
            )),
        }
    }
}

fn lint_files(section: &Section, out: &mut Vec<LintFinding>) {
    // `%files from <stage>` copies between build stages, not from the host.
    if section.args.split_whitespace().next() == Some("from") {
        return;
    }
    for &(line, raw) in &section.body {
        let text = raw.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let source = text.split_whitespace().next().unwrap_or(text);
        out.push(finding(
            Rule::R2,
            line,
            format!(
                "copies `{source}` from the local build context; recipes should only use data from online resources"
            ),
            raw,
        ));
    }
}

/// Package arguments of an install command and whether each is pinned.
fn unpinned_packages(cmd: &Command) -> Option<(String, Vec<String>)> {
    let words: Vec<&str> = cmd.words.iter().map(String::as_str).collect();
    let (tool, rest) = manager_invocation(&words)?;
    let mut unpinned = Vec::new();
    let mut skip_next = false;
    let value_flags: &[&str] = match tool {
        "pip" => &[
            "-r", "--requirement", "-c", "--constraint", "-e", "--editable", "-i",
            "--index-url", "--extra-index-url", "-f", "--find-links", "-t", "--target",
            "--prefix", "--root", "--src",
        ],
        "conda" => &["-c", "--channel", "-n", "--name", "-p", "--prefix", "--file"],
        "apt" | "yum" => &["-o", "--option", "-t", "--target-release", "--setopt", "--enablerepo", "--disablerepo"],
        "apk" => &["-X", "--repository", "-t", "--virtual"],
        "npm" => &["--prefix", "--registry"],
        "cargo" => &["--root", "--git", "--branch", "--path", "--target"],
        _ => &[],
    };
    if tool == "cargo" && rest.iter().any(|w| matches!(*w, "--version" | "--vers" | "--tag" | "--rev")) {
        return None;
    }
    for w in rest {
        if skip_next {
            skip_next = false;
            continue;
        }
        if value_flags.contains(w) {
            skip_next = true;
            continue;
        }
        if w.starts_with('-') || w.starts_with('$') {
            continue;
        }
        if tool == "spack" && (w.starts_with(['+', '~', '%', '^']) || w.contains('=')) {
            continue;
        }
        // Local files and URLs are not registry packages.
        if w.starts_with('.') || w.starts_with('/') || w.ends_with(".deb") || w.ends_with(".rpm") || w.ends_with(".whl") {
            continue;
        }
        let pinned = match tool {
            "apt" | "conda" | "apk" => w.contains('='),
            "yum" => w.contains('=') || version_suffix(w),
            "pip" => w.contains("==") || w.contains("===") || (w.contains("://") && w.contains('@')),
            "npm" => w.rfind('@').is_some_and(|i| i > 0),
            "spack" | "cargo" => w.contains('@'),
            _ => true,
        };
        if !pinned && !w.contains("://") {
            unpinned.push(w.to_string());
        }
    }
    (!unpinned.is_empty()).then(|| (tool.to_string(), unpinned))
}

/// `name-1.2.3` style suffix used by yum/dnf.
fn version_suffix(pkg: &str) -> bool {
    pkg.char_indices()
        .any(|(i, c)| c == '-' && pkg[i + 1..].starts_with(|d: char| d.is_ascii_digit()))
}

fn manager_invocation<'a>(words: &'a [&'a str]) -> Option<(&'static str, &'a [&'a str])> {
    let sub = |i: usize, verbs: &[&str]| -> Option<usize> {
        words[i + 1..]
            .iter()
            .position(|w| verbs.contains(w))
            .map(|p| i + 1 + p + 1)
            .filter(|&start| words[i + 1..start - 1].iter().all(|w| w.starts_with('-')))
    };
    let first = *words.first()?;
    let base = first.rsplit('/').next().unwrap_or(first);
    let (tool, start) = match base {
        "apt-get" | "apt" | "aptitude" => ("apt", sub(0, &["install"])?),
        "yum" | "dnf" | "microdnf" | "zypper" => ("yum", sub(0, &["install", "in"])?),
        "apk" => ("apk", sub(0, &["add"])?),
        "conda" | "mamba" | "micromamba" => ("conda", sub(0, &["install", "create"])?),
        "npm" => ("npm", sub(0, &["install", "i", "add"])?),
        "spack" => ("spack", sub(0, &["install", "add"])?),
        "cargo" => ("cargo", sub(0, &["install"])?),
        b if b.starts_with("pip") => ("pip", sub(0, &["install"])?),
        b if b.starts_with("python") => {
            let m = words.iter().position(|w| *w == "-m")?;
            if !words.get(m + 1)?.starts_with("pip") {
                return None;
            }
            ("pip", sub(m + 1, &["install"])?)
        }
        _ => return None,
    };
    Some((tool, &words[start..]))
}

const MOVING_REFS: [&str; 5] = ["main", "master", "develop", "trunk", "head"];

fn git_subcommand(words: &[String]) -> Option<(&str, &[String])> {
    let first = words.first()?;
    if first.rsplit('/').next() != Some("git") {
        return None;
    }
    let mut i = 1;
    while i < words.len() {
        match words[i].as_str() {
            "-C" | "-c" | "--git-dir" | "--work-tree" => i += 2,
            w if w.starts_with('-') => i += 1,
            w => return Some((w, &words[i + 1..])),
        }
    }
    None
}

fn pinned_clone(args: &[String]) -> bool {
    let mut iter = args.iter();
    while let Some(a) = iter.next() {
        let branch = if a == "-b" || a == "--branch" {
            iter.next().map(String::as_str)
        } else {
            a.strip_prefix("--branch=")
        };
        if let Some(b) = branch {
            return !MOVING_REFS.contains(&b.to_ascii_lowercase().as_str());
        }
    }
    false
}

fn is_pinning_checkout(sub: &str, args: &[String]) -> bool {
    let refs: Vec<&str> = args
        .iter()
        .map(String::as_str)
        .filter(|a| !a.starts_with('-'))
        .collect();
    match sub {
        "checkout" | "switch" | "reset" => {
            if args.iter().any(|a| a == "-b" || a == "-B" || a == "-c") {
                return false;
            }
            refs.first()
                .is_some_and(|r| !MOVING_REFS.contains(&r.to_ascii_lowercase().as_str()))
        }
        _ => false,
    }
}

fn lint_post(section: &Section, out: &mut Vec<LintFinding>) {
    let cmds = commands(&section.body);
    for (idx, cmd) in cmds.iter().enumerate() {
        if let Some((tool, pkgs)) = unpinned_packages(cmd) {
            out.push(finding(
                Rule::R3,
                cmd.line,
                format!("{tool} install without version pin: {}", pkgs.join(", ")),
                &cmd.text,
            ));
        }
        if let Some(("clone", args)) = git_subcommand(&cmd.words) {
            let later_checkout = cmds[idx + 1..].iter().any(|c| {
                git_subcommand(&c.words).is_some_and(|(s, a)| is_pinning_checkout(s, a))
            });
            if !pinned_clone(args) && !later_checkout {
                out.push(finding(
                    Rule::R4,
                    cmd.line,
                    "git clone without a tag or commit pin".into(),
                    &cmd.text,
                ));
            }
        }
    }
}

/// Lints a definition file. Findings are ordered by line.
pub fn lint_recipe(text: &str) -> Result<Vec<LintFinding>, RecipeError> {
    let (headers, sections) = parse(text)?;
    let mut out = Vec::new();
    lint_headers(&headers, &mut out);
    for s in &sections {
        match s.name.as_str() {
            "files" => lint_files(s, &mut out),
            "post" | "appinstall" => lint_post(s, &mut out),
            _ => {}
        }
    }
    out.sort_by_key(|f| (f.line, f.rule));
    Ok(out)
}
