//! `labrun` command-line interface.
//!
//! Exit codes: 0 success; 2 a failed check (compare Fail, verify-links
//! Incomplete, invalid tag, lint errors); 1 lint warnings only; 3 a run with
//! failed cases; 4 a run with cancelled cases; 64 usage errors; 70 other
//! errors.

use std::collections::HashMap;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::{Command as Process, ExitCode};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use labrun_api::ApiConfig;
use labrun_core::compare::{self, ComparisonSpec, Tolerance};
use labrun_core::crosslink::{self, ArchiveOptions, ArtifactInput, ArtifactManifest, ManifestInputs, Role};
use labrun_core::datastore;
use labrun_core::layout::StudyDir;
use labrun_core::paramspace::{CaseStatus, StudyConfig, TableFormat};
use labrun_core::recipelint;
use labrun_core::report::{self, ChartSpec, ReportOptions};
use labrun_core::runner::{self, MaterializeOptions, RunOptions};

const EXIT_USAGE: u8 = 64;
const EXIT_SOFTWARE: u8 = 70;

#[derive(Debug, Parser)]
#[command(name = "labrun", version, about = "Parameter studies with reproducible secondary data")]
struct Cli {
    /// Project root holding the study directories.
    #[arg(long, global = true, env = "LABRUN_ROOT", default_value = ".")]
    root: PathBuf,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Create one directory per case from a study file.
    Materialize {
        study_file: PathBuf,
        /// Replace an existing study directory.
        #[arg(long)]
        force: bool,
        /// Format of the variation table.
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// Refuse studies with more cases than this.
        #[arg(long, default_value_t = labrun_core::paramspace::DEFAULT_MAX_CASES)]
        max_cases: usize,
    },
    /// Execute the cases of a study.
    Run {
        study: String,
        #[arg(long)]
        max_parallel: Option<usize>,
        /// Run every case again, not only Pending ones.
        #[arg(long)]
        reset: bool,
        /// Seconds between the termination signal and the kill on cancel.
        #[arg(long, default_value_t = 5.0)]
        grace: f64,
    },
    /// Cancel a Pending or Running case.
    Cancel { study: String, case_id: String },
    /// Show case statuses.
    Status {
        study: String,
        #[arg(long)]
        json: bool,
    },
    /// Merge per-case outputs into the study's secondary.csv.
    #[command(alias = "merge")]
    Collect { study: String },
    /// Compare secondary.csv against the blessed reference.
    Compare(CompareArgs),
    /// Make the current secondary.csv the reference.
    Bless {
        study: String,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Write report.html and summary.json for a study, or the index page.
    Report {
        #[arg(required_unless_present = "index")]
        study: Option<String>,
        /// X:Y or X:Y:GROUP column names.
        #[arg(long = "chart")]
        charts: Vec<ChartSpec>,
        /// Write index.html linking every study report.
        #[arg(long, conflicts_with = "study")]
        index: bool,
    },
    /// Git tag naming scheme.
    Tag {
        #[command(subcommand)]
        command: TagCommand,
    },
    /// Milestone artifact manifests.
    Manifest {
        #[command(subcommand)]
        command: ManifestCommand,
    },
    /// Check the cross-references of a manifest.
    VerifyLinks {
        manifest: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Deterministic tar.gz of the secondary data of studies.
    Archive {
        #[arg(required = true)]
        studies: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Additional glob to exclude (repeatable).
        #[arg(long = "exclude")]
        excludes: Vec<String>,
        /// Warn when the archive exceeds this many bytes.
        #[arg(long, default_value_t = crosslink::DEFAULT_SIZE_WARNING)]
        warn_size: u64,
    },
    /// Check a container recipe for reproducibility problems.
    LintRecipe {
        file: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Serve the JSON API (and dashboard assets).
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
        /// Require `Authorization: Bearer <token>` on API requests.
        #[arg(long, env = "LABRUN_TOKEN", hide_env_values = true)]
        token: Option<String>,
        /// Directory with dashboard assets to serve at `/`.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        /// Default long-poll timeout for /api/events, in seconds.
        #[arg(long, default_value_t = 25.0)]
        poll_timeout: f64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    Yaml,
}

impl From<Format> for TableFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => TableFormat::Csv,
            Format::Json => TableFormat::Json,
            Format::Yaml => TableFormat::Yaml,
        }
    }
}

#[derive(Debug, Args)]
struct CompareArgs {
    study: String,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long, default_value = "0")]
    abs_tol: String,
    #[arg(long, default_value = "0")]
    rel_tol: String,
    /// Per-column tolerance COL=abs,rel (repeatable).
    #[arg(long = "col")]
    columns: Vec<String>,
    /// Key column (repeatable); must be unique in both tables.
    #[arg(long = "key")]
    keys: Vec<String>,
    /// Treat NaN as equal to NaN.
    #[arg(long)]
    nan_equal: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Subcommand)]
enum TagCommand {
    /// Validate a tag name and show its parts.
    Check { name: String },
}

#[derive(Debug, Subcommand)]
enum ManifestCommand {
    /// Write a manifest from artifact PIDs.
    Build {
        /// Milestone git tag, e.g. ccs-jcp-revision-1.
        #[arg(long)]
        tag: String,
        /// Commit the tag points to; `git rev-parse HEAD` by default.
        #[arg(long)]
        commit: Option<String>,
        /// ROLE=PID or ROLE=PID@PATH, ROLE one of report, code-snapshot,
        /// data, container, repository (repeatable).
        #[arg(long = "artifact", required = true)]
        artifacts: Vec<String>,
        /// Leave references empty instead of adding every required link.
        #[arg(long)]
        no_link: bool,
        #[arg(long, default_value = "manifest.yaml")]
        out: PathBuf,
    },
}

fn open_study(root: &Path, name: &str) -> Result<StudyDir> {
    Ok(StudyDir::locate(root, name)?)
}

fn materialize(root: &Path, file: &Path, force: bool, format: Format, max_cases: usize) -> Result<u8> {
    let config = StudyConfig::load(file)?;
    let options = MaterializeOptions {
        force,
        max_cases,
        table_format: format.into(),
    };
    let cases = runner::materialize(&config, root, &options)?;
    println!(
        "materialized {} cases into {}",
        cases.len(),
        root.join(&config.name).display()
    );
    Ok(0)
}

fn run_study(study: &StudyDir, max_parallel: Option<usize>, reset: bool, grace: f64) -> Result<u8> {
    if !(grace.is_finite() && grace >= 0.0) {
        bail!("--grace must be a non-negative number of seconds");
    }
    let mut options = RunOptions {
        reset,
        grace: Duration::from_secs_f64(grace),
        ..RunOptions::default()
    };
    if let Some(n) = max_parallel {
        options.max_parallel = n;
    }
    let handle = runner::start(study, options)?;
    let mut seen: HashMap<String, CaseStatus> = HashMap::new();
    loop {
        let finished = handle.is_finished();
        for case in handle.snapshot().cases {
            let id = case.id.as_str().to_string();
            if case.status.is_terminal() && seen.get(&id) != Some(&case.status) {
                match case.exit_code {
                    Some(code) if case.status == CaseStatus::Failed => {
                        println!("{id} {} (exit {code})", case.status)
                    }
                    _ => println!("{id} {}", case.status),
                }
                seen.insert(id, case.status);
            }
        }
        if finished {
            break;
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    let run = handle.wait()?;
    let c = run.counts();
    println!(
        "{}: {} Succeeded, {} Failed, {} Cancelled, {} Pending",
        study.name(),
        c.succeeded,
        c.failed,
        c.cancelled,
        c.pending
    );
    Ok(run.exit_code() as u8)
}

fn status(study: &StudyDir, json: bool) -> Result<u8> {
    let snapshot = runner::study_status(study)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&snapshot)?);
        return Ok(0);
    }
    println!(
        "{}: {} cases{}",
        snapshot.study,
        snapshot.total,
        if snapshot.active { ", run in progress" } else { "" }
    );
    for case in &snapshot.cases {
        let exit = case.exit_code.map(|c| format!(" exit {c}")).unwrap_or_default();
        let detail = if case.detail.is_empty() {
            String::new()
        } else {
            format!("  {}", case.detail)
        };
        println!("  {} {}{exit}{detail}", case.id.as_str(), case.status);
    }
    let c = snapshot.counts;
    println!(
        "Pending {} Running {} Succeeded {} Failed {} Cancelled {}",
        c.pending, c.running, c.succeeded, c.failed, c.cancelled
    );
    Ok(0)
}

fn collect(study: &StudyDir) -> Result<u8> {
    let merged = datastore::merge_study_table(study)?;
    println!(
        "{}: {} rows from {} cases",
        merged.path.display(),
        merged.table.len(),
        merged.included.len()
    );
    for (id, status) in &merged.excluded {
        println!("  excluded {} ({status})", id.as_str());
    }
    Ok(0)
}

fn compare_cmd(root: &Path, args: &CompareArgs) -> Result<u8> {
    let study = open_study(root, &args.study)?;
    let tolerance = Tolerance::new(
        compare::parse_tolerance(&args.abs_tol)?,
        compare::parse_tolerance(&args.rel_tol)?,
    )?;
    let mut spec = ComparisonSpec {
        tolerance,
        nan_equal: args.nan_equal,
        ..ComparisonSpec::default()
    };
    if !args.keys.is_empty() {
        spec.key_columns = Some(args.keys.clone());
    }
    for col in &args.columns {
        let (name, pair) = col
            .split_once('=')
            .ok_or_else(|| anyhow!("--col expects COL=abs,rel, got `{col}`"))?;
        spec.per_column.insert(name.to_string(), Tolerance::parse_pair(pair)?);
    }
    let report = compare::compare_study(&study, &args.reference, &spec)?;
    if args.json {
        print!("{}", report.to_json());
    } else {
        print!("{}", report.render_text());
    }
    Ok(report.verdict.exit_code() as u8)
}

fn bless(root: &Path, study: &str, reference: &Path) -> Result<u8> {
    let study = open_study(root, study)?;
    let outcome = compare::bless(&study, reference)?;
    println!("blessed {}", outcome.reference.display());
    if let Some(b) = outcome.backup {
        println!("previous reference kept as {}", b.display());
    }
    Ok(0)
}

fn report_cmd(root: &Path, study: Option<&str>, charts: Vec<ChartSpec>, index: bool) -> Result<u8> {
    if index {
        let path = report::generate_index(root)?;
        println!("{}", path.display());
        return Ok(0);
    }
    let name = study.ok_or_else(|| anyhow!("a study or --index is required"))?;
    let study = open_study(root, name)?;
    let outcome = report::generate_study_report(
        &study,
        &ReportOptions {
            charts,
            generated_at: None,
        },
    )?;
    println!("{}", outcome.html.display());
    Ok(0)
}

fn tag_check(name: &str) -> Result<u8> {
    match crosslink::parse_tag(name) {
        Ok(tag) => {
            println!("idea:  {}", tag.idea);
            println!("venue: {}", tag.venue);
            println!("stage: {}", tag.stage);
            if let Some(s) = &tag.suffix {
                println!("suffix: {s}");
            }
            Ok(0)
        }
        Err(e) => {
            eprintln!("{e}");
            Ok(2)
        }
    }
}

fn parse_artifact(text: &str) -> Result<ArtifactInput> {
    let (role, rest) = text
        .split_once('=')
        .ok_or_else(|| anyhow!("--artifact expects ROLE=PID[@PATH], got `{text}`"))?;
    let role: Role = role
        .parse()
        .map_err(|_| anyhow!("unknown role `{role}` in `{text}`"))?;
    Ok(match rest.rsplit_once('@') {
        Some((pid, path)) => ArtifactInput::new(role, pid).with_path(path),
        None => ArtifactInput::new(role, rest),
    })
}

fn head_commit() -> Result<String> {
    let out = Process::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .context("running git rev-parse HEAD")?;
    if !out.status.success() {
        bail!("not in a git repository; pass --commit");
    }
    Ok(String::from_utf8(out.stdout)?.trim().to_string())
}

fn manifest_build(tag: &str, commit: Option<String>, artifacts: &[String], no_link: bool, out: &Path) -> Result<u8> {
    let entries = artifacts
        .iter()
        .map(|a| parse_artifact(a))
        .collect::<Result<Vec<_>>>()?;
    let commit = match commit {
        Some(c) => c,
        None => head_commit()?,
    };
    let inputs = ManifestInputs {
        git_tag: tag.to_string(),
        commit,
        entries,
        link: !no_link,
    };
    let base = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let manifest = crosslink::build_manifest(&inputs, &base)?;
    manifest.save(out)?;
    println!("{} ({} entries)", out.display(), manifest.entries.len());
    Ok(0)
}

fn verify_links(path: &Path, json: bool) -> Result<u8> {
    let manifest = ArtifactManifest::load(path)?;
    let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let links = crosslink::verify_links(&manifest);
    let checksums = crosslink::verify_checksums(&manifest, base);
    let code = if checksums.is_empty() { links.verdict.exit_code() } else { 2 };
    if json {
        let value = serde_json::json!({
            "schema": 1,
            "verdict": links.verdict,
            "missing": links.missing,
            "problems": links.problems,
            "checksums": checksums,
        });
        println!("{}", serde_json::to_string_pretty(&value)?);
    } else {
        println!("{:?}", links.verdict);
        for m in &links.missing {
            println!("  missing {m}: {} does not reference {}", m.from_pid, m.to_pid.as_deref().unwrap_or("the git tag"));
        }
        for p in &links.problems {
            println!("  {p}");
        }
        for c in &checksums {
            println!("  checksum {}: {} ({})", c.kind, c.path, c.pid);
        }
    }
    Ok(code as u8)
}

fn archive(root: &Path, names: &[String], out: &Path, excludes: Vec<String>, warn_size: u64) -> Result<u8> {
    let studies = names
        .iter()
        .map(|n| open_study(root, n))
        .collect::<Result<Vec<_>>>()?;
    let outcome = crosslink::build_secondary_archive(
        &studies,
        out,
        &ArchiveOptions {
            extra_excludes: excludes,
            size_warning: warn_size,
        },
    )?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "{} ({} entries, {} bytes, {} excluded)\nsha256 {}",
        outcome.path.display(),
        outcome.entries.len(),
        outcome.size,
        outcome.excluded.len(),
        outcome.sha256
    );
    Ok(0)
}

fn lint(file: &Path, json: bool) -> Result<u8> {
    let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let findings = recipelint::lint_recipe(&text).with_context(|| file.display().to_string())?;
    if json {
        println!("{}", serde_json::to_string_pretty(&findings)?);
    } else {
        for f in &findings {
            println!("{}:{f}", file.display());
        }
    }
    Ok(recipelint::exit_code(&findings) as u8)
}

fn serve(config: ApiConfig) -> Result<u8> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async {
        let server = labrun_api::bind(&config).await?;
        println!("serving {} on http://{}", config.root.display(), server.local_addr());
        server
            .run_until(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(0)
    })
}

fn dispatch(cli: Cli) -> Result<u8> {
    let root = cli.root;
    match cli.command {
        Command::Materialize {
            study_file,
            force,
            format,
            max_cases,
        } => materialize(&root, &study_file, force, format, max_cases),
        Command::Run {
            study,
            max_parallel,
            reset,
            grace,
        } => run_study(&open_study(&root, &study)?, max_parallel, reset, grace),
        Command::Cancel { study, case_id } => {
            let ack = runner::cancel(&open_study(&root, &study)?, &case_id)?;
            println!("{} {:?}", ack.case_id.as_str(), ack.outcome);
            Ok(0)
        }
        Command::Status { study, json } => status(&open_study(&root, &study)?, json),
        Command::Collect { study } => collect(&open_study(&root, &study)?),
        Command::Compare(args) => compare_cmd(&root, &args),
        Command::Bless { study, reference } => bless(&root, &study, &reference),
        Command::Report { study, charts, index } => report_cmd(&root, study.as_deref(), charts, index),
        Command::Tag {
            command: TagCommand::Check { name },
        } => tag_check(&name),
        Command::Manifest {
            command:
                ManifestCommand::Build {
                    tag,
                    commit,
                    artifacts,
                    no_link,
                    out,
                },
        } => manifest_build(&tag, commit, &artifacts, no_link, &out),
        Command::VerifyLinks { manifest, json } => verify_links(&manifest, json),
        Command::Archive {
            studies,
            out,
            excludes,
            warn_size,
        } => archive(&root, &studies, &out, excludes, warn_size),
        Command::LintRecipe { file, json } => lint(&file, json),
        Command::Serve {
            port,
            bind,
            token,
            static_dir,
            poll_timeout,
        } => {
            if !(poll_timeout.is_finite() && poll_timeout > 0.0) {
                bail!("--poll-timeout must be a positive number of seconds");
            }
            let mut config = ApiConfig::new(root, SocketAddr::new(bind, port));
            config.token = token.filter(|t| !t.is_empty());
            config.static_dir = static_dir;
            config.poll_timeout = Duration::from_secs_f64(poll_timeout);
            serve(config)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("labrun: {e:#}");
            ExitCode::from(EXIT_SOFTWARE)
        }
    }
}
