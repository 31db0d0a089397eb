//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufReader};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use labrun_core::compare::{compare_tables, parse_tolerance, CompareError, ComparisonSpec, Tolerance, Verdict};
use labrun_core::crosslink::{list_entries, parse_tag, ArtifactManifest, Role, Stage};
use labrun_core::datastore::SecondaryTable;
use labrun_core::layout::StudyDir;
use labrun_core::paramspace::{
    case_count, expand, export_variation_table, parse_study_config, parse_variation_table, TableFormat, Value,
};
use labrun_core::runner::{self, EventKind};
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use serde_json::Value as Json;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

/// Converts any displayable error into a criterion failure.
trait OrFail<T> {
    fn or_fail(self, what: &str) -> Result<T, String>;
}

impl<T, E: std::fmt::Display> OrFail<T> for Result<T, E> {
    fn or_fail(self, what: &str) -> Result<T, String> {
        self.map_err(|e| format!("{what}: {e}"))
    }
}

impl<T> OrFail<T> for Option<T> {
    fn or_fail(self, what: &str) -> Result<T, String> {
        self.ok_or_else(|| what.to_string())
    }
}

const PAPER_ROWS: [(&str, &str, &str); 8] = [
    ("0.0001", "1", "1.091560"),
    ("0.0001", "2", "1.082970"),
    ("0.0001", "3", "1.077200"),
    ("0.0001", "4", "1.072650"),
    ("0.001", "1", "0.992354"),
    ("0.001", "2", "0.991959"),
    ("0.001", "3", "0.995102"),
    ("0.001", "4", "0.996143"),
];

const FIXED_EPOCH: &str = "1700000000";

struct Ctx {
    labrun: PathBuf,
    path_env: OsString,
    demos: PathBuf,
    /// Project root shared by the demo-based criteria.
    project: PathBuf,
    scratch: PathBuf,
}

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Run {
    fn describe(&self) -> String {
        format!("exit {} stdout {:?} stderr {:?}", self.code, self.stdout.trim(), self.stderr.trim())
    }
}

impl Ctx {
    fn command(&self, root: &Path, args: &[&str]) -> Command {
        let mut cmd = Command::new(&self.labrun);
        cmd.arg("--root")
            .arg(root)
            .args(args)
            .env("PATH", &self.path_env)
            .env_remove("SOURCE_DATE_EPOCH")
            .env_remove("LABRUN_ROOT")
            .env_remove("LABRUN_TOKEN");
        cmd
    }

    fn run_in(&self, root: &Path, args: &[&str], envs: &[(&str, &str)]) -> Run {
        let mut cmd = self.command(root, args);
        for (k, v) in envs {
            cmd.env(k, v);
        }
        let out = cmd.output().expect("labrun starts");
        Run {
            code: out.status.code().unwrap_or(-1),
            stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        }
    }

    fn run(&self, args: &[&str]) -> Run {
        self.run_in(&self.project, args, &[])
    }

    fn demo(&self, rel: &str) -> String {
        self.demos.join(rel).to_string_lossy().into_owned()
    }

    fn scratch_dir(&self, name: &str) -> PathBuf {
        let dir = self.scratch.join(name);
        fs::create_dir_all(&dir).unwrap();
        dir
    }
}

fn expect_code(run: &Run, code: i32, what: &str) -> Result<(), String> {
    ensure!(run.code == code, "{what}: expected exit {code}, got {}", run.describe());
    Ok(())
}

fn pipeline_step(ctx: &Ctx, args: &[&str]) -> Result<(), String> {
    expect_code(&ctx.run(args), 0, &args.join(" "))
}

fn table_reproduction(ctx: &Ctx) -> Outcome {
    let start = Instant::now();
    pipeline_step(ctx, &["materialize", &ctx.demo("hyperparam/study.yaml")])?;
    pipeline_step(ctx, &["run", "hyperparam", "--max-parallel", "2"])?;
    pipeline_step(ctx, &["collect", "hyperparam"])?;
    let elapsed = start.elapsed();

    let text = fs::read_to_string(ctx.project.join("hyperparam/secondary.csv")).or_fail("reading secondary.csv")?;
    let lines: Vec<&str> = text.lines().collect();
    let mut expected = vec!["ID,OPTIMIZER_STEP,HIDDEN_LAYERS,MAX_ITERATIONS,DELTA_X,EPOCH,TRAINING_MSE".to_string()];
    for (i, (step, epoch, mse)) in PAPER_ROWS.iter().enumerate() {
        let id = if i < 4 { "0000" } else { "0001" };
        expected.push(format!("{id},{step},\"10,10,10,10\",3000,0.0625,{epoch},{mse}"));
    }
    ensure!(lines == expected, "merged table differs:\n{text}");
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("8 rows equal as text, {:.2} s", elapsed.as_secs_f64()))
}

fn poly(x: f64) -> f64 {
    3.0 * x.powi(4) - 2.0 * x.powi(3) + x - 5.0
}

fn poly_derivative(x: f64) -> f64 {
    12.0 * x.powi(3) - 6.0 * x.powi(2) + 1.0
}

/// Independent check of the committed reference values.
fn check_fdiff_reference(path: &Path) -> Result<usize, String> {
    let text = fs::read_to_string(path).or_fail("reading reference")?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().or_fail("empty reference")?.split(',').collect();
    ensure!(
        header == ["ID", "SCHEME", "STEP", "X", "FD_DERIVATIVE", "EXACT_DERIVATIVE", "ABS_ERROR"],
        "unexpected reference header {header:?}"
    );
    let mut rows = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let num = |i: usize| f[i].parse::<f64>().map_err(|e| format!("{line}: {e}"));
        let (h, x, fd, exact, err) = (num(2)?, num(3)?, num(4)?, num(5)?, num(6)?);
        let oracle = match f[1] {
            "forward" => (poly(x + h) - poly(x)) / h,
            "backward" => (poly(x) - poly(x - h)) / h,
            "central" => (poly(x + h) - poly(x - h)) / (2.0 * h),
            other => return Err(format!("unknown scheme {other}")),
        };
        ensure!((fd - oracle).abs() < 1e-9, "{line}: oracle derivative {oracle}");
        ensure!((exact - poly_derivative(x)).abs() < 1e-12, "{line}: exact derivative");
        ensure!((err - (fd - exact).abs()).abs() < 1e-15, "{line}: abs error column");
        rows += 1;
    }
    Ok(rows)
}

fn finite_difference_pipeline(ctx: &Ctx) -> Outcome {
    let reference = ctx.demos.join("fdiff/reference");
    let rows = check_fdiff_reference(&reference.join("fdiff.csv"))?;

    let start = Instant::now();
    pipeline_step(ctx, &["materialize", &ctx.demo("fdiff/study.yaml")])?;
    pipeline_step(ctx, &["run", "fdiff"])?;
    pipeline_step(ctx, &["collect", "fdiff"])?;
    let reference_arg = reference.to_string_lossy().into_owned();
    pipeline_step(ctx, &["compare", "fdiff", "--reference", &reference_arg, "--abs-tol", "1e-12"])?;
    pipeline_step(ctx, &["report", "fdiff", "--chart", "X:ABS_ERROR:SCHEME"])?;
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "pipeline took {elapsed:?}");

    // Perturb one reference value by 1e-3.
    let perturbed = ctx.scratch_dir("perturbed");
    let text = fs::read_to_string(reference.join("fdiff.csv")).or_fail("reading reference")?;
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut cells: Vec<String> = lines[5].split(',').map(str::to_string).collect();
    let v: f64 = cells[4].parse().or_fail("reference cell")?;
    cells[4] = format!("{}", v + 1e-3);
    lines[5] = cells.join(",");
    fs::write(perturbed.join("fdiff.csv"), lines.join("\n") + "\n").or_fail("writing perturbed reference")?;
    let perturbed_arg = perturbed.to_string_lossy().into_owned();
    let run = ctx.run(&["compare", "fdiff", "--reference", &perturbed_arg, "--abs-tol", "1e-12", "--json"]);
    expect_code(&run, 2, "compare against perturbed reference")?;
    let report: Json = serde_json::from_str(&run.stdout).or_fail("comparison JSON")?;
    let col = &report["columns"]["FD_DERIVATIVE"];
    let dev = col["max_abs_deviation"].as_f64().or_fail("max_abs_deviation")?;
    ensure!((dev - 1e-3).abs() < 1e-9, "deviation {dev}");
    ensure!(col["failed_cells"] == 1, "failed cells {}", col["failed_cells"]);
    Ok(format!(
        "{rows} reference rows checked against an independent oracle, pipeline {:.2} s, perturbed reference exits 2",
        elapsed.as_secs_f64()
    ))
}

fn prop_config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(cases)
    }
}

#[derive(Debug, Clone)]
enum Gen {
    Int(i64),
    Eighths(i64),
    Bool(bool),
    Word(String),
}

impl Gen {
    fn yaml(&self) -> String {
        match self {
            Gen::Int(n) => n.to_string(),
            Gen::Eighths(n) => format!("{:?}", *n as f64 / 8.0),
            Gen::Bool(b) => b.to_string(),
            Gen::Word(w) => format!("'{w}'"),
        }
    }

    fn value(&self) -> Value {
        match self {
            Gen::Int(n) => Value::Int(*n),
            Gen::Eighths(n) => Value::Float(*n as f64 / 8.0),
            Gen::Bool(b) => Value::Bool(*b),
            Gen::Word(w) => Value::Str(w.clone()),
        }
    }
}

fn gen_value() -> impl Strategy<Value = Gen> {
    prop_oneof![
        any::<i32>().prop_map(|n| Gen::Int(n as i64)),
        (-4000i64..4000).prop_map(Gen::Eighths),
        any::<bool>().prop_map(Gen::Bool),
        "[a-z]{1,6}"
            .prop_filter("reads as a keyword", |w| !["true", "false", "inf", "nan", "null"].contains(&w.as_str()))
            .prop_map(Gen::Word),
    ]
}

#[derive(Debug, Clone)]
struct GenStudy {
    zip: bool,
    varied: Vec<(String, Vec<Gen>)>,
    constants: Vec<(String, Gen)>,
}

impl GenStudy {
    fn yaml(&self) -> String {
        let mut s = format!("name: prop\nmode: {}\ncommand: 'true'\n", if self.zip { "zip" } else { "cartesian" });
        if !self.varied.is_empty() {
            s.push_str("varied:\n");
            for (name, values) in &self.varied {
                let vs: Vec<String> = values.iter().map(Gen::yaml).collect();
                s.push_str(&format!("  {name}: [{}]\n", vs.join(", ")));
            }
        }
        if !self.constants.is_empty() {
            s.push_str("constants:\n");
            for (name, v) in &self.constants {
                s.push_str(&format!("  {name}: {}\n", v.yaml()));
            }
        }
        s
    }

    /// Parameter vectors by nested loops, first varied parameter outermost.
    fn oracle(&self) -> Vec<Vec<(String, Value)>> {
        let mut rows: Vec<Vec<(String, Value)>> = vec![Vec::new()];
        if self.zip {
            let n = self.varied.first().map_or(1, |(_, v)| v.len());
            rows = (0..n)
                .map(|i| self.varied.iter().map(|(k, v)| (k.clone(), v[i].value())).collect())
                .collect();
        } else {
            for (name, values) in &self.varied {
                let mut next = Vec::new();
                for row in &rows {
                    for v in values {
                        let mut r = row.clone();
                        r.push((name.clone(), v.value()));
                        next.push(r);
                    }
                }
                rows = next;
            }
        }
        for row in &mut rows {
            row.extend(self.constants.iter().map(|(k, v)| (k.clone(), v.value())));
        }
        rows
    }
}

const NAMES: [&str; 7] = ["ALPHA", "BETA", "GAMMA", "DELTA_X", "EPS", "ZETA", "STEP"];

fn gen_study() -> impl Strategy<Value = GenStudy> {
    (0usize..4, 0usize..3, any::<bool>(), Just(()).prop_perturb(|_, mut rng| {
        let mut names = NAMES.to_vec();
        for i in (1..names.len()).rev() {
            names.swap(i, rng.random_range(0..=i));
        }
        names
    }))
    .prop_flat_map(|(n_varied, n_const, zip, names)| {
        let lens = if zip {
            (1usize..6).prop_map(move |l| vec![l; n_varied]).boxed()
        } else {
            proptest::collection::vec(1usize..5, n_varied).boxed()
        };
        let names: Vec<String> = names[..n_varied + n_const].iter().map(|s| s.to_string()).collect();
        (Just(names), lens, Just(zip), Just(n_varied))
    })
    .prop_flat_map(|(names, lens, zip, n_varied)| {
        let varied: Vec<_> = lens
            .into_iter()
            .map(|l| proptest::collection::vec(gen_value(), l))
            .collect();
        let consts = proptest::collection::vec(gen_value(), names.len() - n_varied);
        (Just(names), varied, consts, Just(zip))
    })
    .prop_map(|(names, varied_vals, const_vals, zip)| {
        let n_varied = varied_vals.len();
        GenStudy {
            zip,
            varied: names[..n_varied].iter().cloned().zip(varied_vals).collect(),
            constants: names[n_varied..].iter().cloned().zip(const_vals).collect(),
        }
    })
}

fn same(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Float(x), Value::Float(y)) => x == y,
        _ => a == b,
    }
}

fn expansion_laws(_: &Ctx) -> Outcome {
    const CASES: u32 = 256;
    let start = Instant::now();
    let mut runner = TestRunner::new(prop_config(CASES));
    runner
        .run(&gen_study(), |g| {
            let config = parse_study_config(&g.yaml()).map_err(|e| TestCaseError::fail(format!("{e}\n{}", g.yaml())))?;
            let cases = expand(&config).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let expected = g.oracle();
            let count = if g.zip {
                g.varied.first().map_or(1, |(_, v)| v.len())
            } else {
                g.varied.iter().map(|(_, v)| v.len()).product()
            };
            prop_assert_eq!(cases.len(), count);
            prop_assert_eq!(case_count(&config), count as u128);
            prop_assert_eq!(&expand(&config).unwrap(), &cases, "expansion is not deterministic");
            let width = 4.max(count.saturating_sub(1).to_string().len());
            for (i, (case, row)) in cases.iter().zip(&expected).enumerate() {
                prop_assert_eq!(case.id.as_str(), format!("{i:0width$}"));
                let got: Vec<(String, Value)> = case.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
                prop_assert_eq!(&got, row);
            }
            for format in [TableFormat::Csv, TableFormat::Json, TableFormat::Yaml] {
                let bytes = export_variation_table(&cases, format).map_err(|e| TestCaseError::fail(e.to_string()))?;
                let rows = parse_variation_table(&bytes, format).map_err(|e| TestCaseError::fail(e.to_string()))?;
                prop_assert_eq!(rows.len(), cases.len());
                for (row, case) in rows.iter().zip(&cases) {
                    prop_assert_eq!(&row.id, &case.id);
                    prop_assert!(row.params.keys().eq(case.params.keys()));
                    for (a, b) in row.params.values().zip(case.params.values()) {
                        prop_assert!(same(a, b), "{:?}: {:?} != {:?}", format, a, b);
                    }
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "suite took {elapsed:?}");
    Ok(format!("{CASES} random configs, {:.2} s", elapsed.as_secs_f64()))
}

fn milli(n: i64) -> String {
    let sign = if n < 0 { "-" } else { "" };
    format!("{sign}{}.{:03}", n.abs() / 1000, n.abs() % 1000)
}

fn milli_table(values: &[i64]) -> SecondaryTable {
    let mut csv = String::from("ID,STEP,V\n");
    for (i, v) in values.iter().enumerate() {
        csv.push_str(&format!("{:04},0.001,{}\n", i, milli(*v)));
    }
    SecondaryTable::from_csv(csv.as_bytes(), &["STEP"]).unwrap()
}

fn abs_spec(tol_milli: i64) -> ComparisonSpec {
    let abs = parse_tolerance(&milli(tol_milli)).unwrap();
    let rel = parse_tolerance("0").unwrap();
    ComparisonSpec {
        tolerance: Tolerance::new(abs, rel).unwrap(),
        ..ComparisonSpec::default()
    }
}

fn compare_properties(_: &Ctx) -> Outcome {
    let mut runner = TestRunner::new(prop_config(256));
    let strategy = proptest::collection::vec((-50_000i64..50_000, -3000i64..3000), 1..12)
        .prop_flat_map(|rows| (Just(rows), 0i64..3000, 0i64..3000));
    runner
        .run(&strategy, |(rows, t1, t2)| {
            let reference: Vec<i64> = rows.iter().map(|r| r.0).collect();
            let actual: Vec<i64> = rows.iter().map(|r| r.0 + r.1).collect();
            let (r, a) = (milli_table(&reference), milli_table(&actual));

            let same = compare_tables(&r, &r, &abs_spec(0)).unwrap();
            prop_assert_eq!(same.verdict, Verdict::Pass);
            prop_assert_eq!(same.max_abs_deviation(), 0.0);

            let (lo, hi) = (t1.min(t2), t1.max(t2));
            let at_lo = compare_tables(&a, &r, &abs_spec(lo)).unwrap().verdict;
            let at_hi = compare_tables(&a, &r, &abs_spec(hi)).unwrap().verdict;
            let oracle = |tol: i64| {
                if rows.iter().all(|r| r.1.abs() <= tol) {
                    Verdict::Pass
                } else {
                    Verdict::Fail
                }
            };
            prop_assert_eq!(at_lo, oracle(lo));
            prop_assert_eq!(at_hi, oracle(hi));
            prop_assert!(!(at_lo == Verdict::Pass && at_hi == Verdict::Fail), "not monotone");
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    let table = |v: &str| SecondaryTable::from_csv(format!("ID,V\n0000,{v}\n").as_bytes(), &[]).unwrap();
    let nan_spec = |nan_equal| ComparisonSpec {
        nan_equal,
        ..ComparisonSpec::default()
    };
    let verdict = |a: &str, r: &str, eq: bool| compare_tables(&table(a), &table(r), &nan_spec(eq)).unwrap().verdict;
    ensure!(verdict("NaN", "NaN", false) == Verdict::Fail, "NaN vs NaN passes without nan_equal");
    ensure!(verdict("NaN", "NaN", true) == Verdict::Pass, "NaN vs NaN fails with nan_equal");
    ensure!(verdict("NaN", "1.0", true) == Verdict::Fail, "NaN vs number passes");

    let dup = SecondaryTable::from_csv(b"ID,K,V\n0000,1,2.0\n0001,1,3.0\n", &[]).unwrap();
    let keyed = ComparisonSpec {
        key_columns: Some(vec!["K".into()]),
        ..ComparisonSpec::default()
    };
    let err = compare_tables(&dup, &dup, &keyed);
    ensure!(matches!(err, Err(CompareError::DuplicateKey { .. })), "duplicate key accepted: {err:?}");

    let worked = compare_tables(&table("1.05"), &table("1.0"), &ComparisonSpec::default()).unwrap();
    // (1.05 − 1.0) / max(|1.0|, 1e-12), exactly 0.05 in decimal.
    ensure!(worked.max_rel_deviation() == 0.05, "rel deviation {}", worked.max_rel_deviation());
    Ok("reflexivity, oracle verdicts and monotonicity over 256 tables; NaN policy; duplicate key rejected; 1.0 vs 1.05 gives 0.05".into())
}

fn status_json(ctx: &Ctx, root: &Path, study: &str) -> Result<Json, String> {
    let run = ctx.run_in(root, &["status", study, "--json"], &[]);
    expect_code(&run, 0, "status")?;
    serde_json::from_str(&run.stdout).or_fail("status JSON")
}

fn case_status(status: &Json, id: &str) -> String {
    status["cases"]
        .as_array()
        .and_then(|cases| cases.iter().find(|c| c["id"] == id))
        .and_then(|c| c["status"].as_str())
        .unwrap_or("")
        .to_string()
}

fn wait_until(limit: Duration, mut cond: impl FnMut() -> Result<bool, String>) -> Result<(), String> {
    let start = Instant::now();
    while !cond()? {
        ensure!(start.elapsed() < limit, "condition not reached within {limit:?}");
        thread::sleep(Duration::from_millis(25));
    }
    Ok(())
}

fn write_study(dir: &Path, name: &str, yaml: &str) -> String {
    let path = dir.join(format!("{name}.yaml"));
    fs::write(&path, yaml).unwrap();
    path.to_string_lossy().into_owned()
}

fn runner_behavior(ctx: &Ctx) -> Outcome {
    let root = ctx.scratch_dir("runner");
    let file = write_study(
        &ctx.scratch,
        "sleepy",
        "name: sleepy\nvaried:\n  A: [1, 2, 3, 4, 5, 6]\ncommand: 'if [ {{A}} = 2 ]; then sleep 30; else sleep 0.3; fi'\n",
    );
    expect_code(&ctx.run_in(&root, &["materialize", &file], &[]), 0, "materialize")?;
    let mut child = ctx
        .command(&root, &["run", "sleepy", "--max-parallel", "2", "--grace", "1"])
        .stdout(Stdio::null())
        .spawn()
        .or_fail("starting run")?;
    wait_until(Duration::from_secs(10), || {
        Ok(case_status(&status_json(ctx, &root, "sleepy")?, "0001") == "Running")
    })?;
    expect_code(&ctx.run_in(&root, &["cancel", "sleepy", "0001"], &[]), 0, "cancel")?;
    let code = child.wait().or_fail("waiting for run")?.code();
    ensure!(code == Some(4), "run with a cancelled case exited {code:?}");

    let status = status_json(ctx, &root, "sleepy")?;
    let counts = &status["counts"];
    ensure!(
        counts["Succeeded"] == 5 && counts["Cancelled"] == 1 && status["total"] == 6,
        "final counts {counts}"
    );
    let study = StudyDir::open(&root, "sleepy").or_fail("opening study")?;
    let events = runner::read_events(&study).or_fail("reading events")?;
    let mut running = BTreeSet::new();
    let mut peak = 0;
    for e in &events {
        match e.kind {
            EventKind::CaseStarted => {
                running.insert(e.case_id.clone());
                peak = peak.max(running.len());
            }
            EventKind::CaseFinished | EventKind::CaseCancelled => {
                running.remove(&e.case_id);
            }
            _ => {}
        }
    }
    ensure!(peak <= 2, "{peak} cases ran concurrently");
    ensure!(
        events.iter().enumerate().all(|(i, e)| e.seq == i as u64 + 1),
        "event sequence has gaps"
    );

    let file = write_study(
        &ctx.scratch,
        "flaky",
        "name: flaky\nvaried:\n  A: [1, 2, 3]\ncommand: 'if [ {{A}} = 1 ]; then exit 1; fi; sleep 0.2'\n",
    );
    expect_code(&ctx.run_in(&root, &["materialize", &file], &[]), 0, "materialize")?;
    let run = ctx.run_in(&root, &["run", "flaky", "--max-parallel", "1"], &[]);
    expect_code(&run, 3, "run with a failing case")?;
    let status = status_json(ctx, &root, "flaky")?;
    ensure!(
        status["counts"]["Failed"] == 1 && status["counts"]["Succeeded"] == 2,
        "flaky counts {}",
        status["counts"]
    );
    Ok(format!(
        "peak concurrency {peak} of 2, cancel gives Succeeded 5 / Cancelled 1 (exit 4), failing case gives exit 3 with 2 others Succeeded"
    ))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) {
    for entry in fs::read_dir(dir).unwrap().flatten() {
        let path = entry.path();
        if path.is_dir() {
            walk(&path, out);
        } else {
            out.push(path);
        }
    }
}

fn archive_and_links(ctx: &Ctx) -> Outcome {
    let out = ctx.scratch_dir("archive");
    let mut on_disk = Vec::new();
    for study in ["hyperparam", "fdiff"] {
        walk(&ctx.project.join(study), &mut on_disk);
    }
    let primary_on_disk = on_disk.iter().filter(|p| p.extension().is_some_and(|e| e == "dat")).count();
    ensure!(primary_on_disk > 0, "demo studies produced no primary data");

    let mut bytes = Vec::new();
    for name in ["first.tar.gz", "second.tar.gz"] {
        let target = out.join(name).to_string_lossy().into_owned();
        pipeline_step(ctx, &["archive", "hyperparam", "fdiff", "--out", &target])?;
        bytes.push(fs::read(out.join(name)).or_fail("reading archive")?);
    }
    ensure!(bytes[0] == bytes[1], "two builds differ");
    let entries = list_entries(&bytes[0]).or_fail("listing archive")?;
    let primary: Vec<&String> = entries.iter().filter(|e| e.ends_with(".dat")).collect();
    ensure!(primary.is_empty(), "archive contains primary data {primary:?}");
    for must in ["hyperparam/secondary.csv", "fdiff/secondary.csv", "hyperparam/0000/training.csv"] {
        ensure!(entries.iter().any(|e| e == must), "archive lacks {must}");
    }

    let report = "10.5281/zenodo.7000001";
    let manifest_path = out.join("manifest.yaml");
    let build = ctx
        .command(
            &ctx.project,
            &[
                "manifest",
                "build",
                "--tag",
                "ccs-jcp-revision-1",
                "--commit",
                "0123456789abcdef0123456789abcdef01234567",
                "--artifact",
                &format!("report={report}"),
                "--artifact",
                "code-snapshot=10.5281/zenodo.7000002",
                "--artifact",
                "data=10.5281/zenodo.7000003@first.tar.gz",
                "--artifact",
                "container=https://doi.org/10.5281/zenodo.7000004",
                "--out",
                "manifest.yaml",
            ],
        )
        .current_dir(&out)
        .output()
        .or_fail("manifest build")?;
    ensure!(build.status.success(), "manifest build failed: {}", String::from_utf8_lossy(&build.stderr));

    let manifest_arg = manifest_path.to_string_lossy().into_owned();
    let complete = ctx.run(&["verify-links", &manifest_arg]);
    expect_code(&complete, 0, "verify-links on the full manifest")?;
    ensure!(complete.stdout.starts_with("Complete"), "{}", complete.describe());

    let mut manifest = ArtifactManifest::load(&manifest_path).or_fail("loading manifest")?;
    for e in manifest.entries.iter_mut().filter(|e| e.role == Role::Data) {
        e.references.retain(|r| r != report);
    }
    manifest.save(&manifest_path).or_fail("saving manifest")?;
    let incomplete = ctx.run(&["verify-links", &manifest_arg, "--json"]);
    expect_code(&incomplete, 2, "verify-links without data -> report")?;
    let v: Json = serde_json::from_str(&incomplete.stdout).or_fail("verify-links JSON")?;
    let missing: Vec<(String, String)> = v["missing"]
        .as_array()
        .or_fail("missing list")?
        .iter()
        .map(|m| (m["from"].as_str().unwrap_or("").into(), m["to"].as_str().unwrap_or("").into()))
        .collect();
    ensure!(v["verdict"] == "Incomplete", "verdict {}", v["verdict"]);
    ensure!(missing == [("data".to_string(), "report".to_string())], "missing links {missing:?}");
    let text = ctx.run(&["verify-links", &manifest_arg]);
    ensure!(text.stdout.contains("(data → report)"), "{}", text.describe());
    Ok(format!(
        "{} entries, {primary_on_disk} primary files on disk and none archived, byte-identical rebuild; Complete, then Incomplete naming (data → report)",
        entries.len()
    ))
}

fn tag_grammar(ctx: &Ctx) -> Outcome {
    let segment = "[a-z0-9][a-z0-9_.]{0,7}";
    let stage = prop_oneof![
        Just(("submission".to_string(), Stage::Submission)),
        Just(("accepted".to_string(), Stage::Accepted)),
        Just(("internal".to_string(), Stage::Internal)),
        (1u32..10_000).prop_map(|n| (format!("revision-{n}"), Stage::Revision(n))),
    ];
    let strategy = (segment, segment, stage, proptest::option::of(proptest::collection::vec(segment, 1..3)));
    let mut runner = TestRunner::new(prop_config(512));
    runner
        .run(&strategy, |(idea, venue, (stage_text, stage), suffix)| {
            let suffix = suffix.map(|s| s.join("-"));
            let mut text = format!("{idea}-{venue}-{stage_text}");
            if let Some(s) = &suffix {
                text.push('-');
                text.push_str(s);
            }
            let parts = parse_tag(&text).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(&parts.idea, &idea);
            prop_assert_eq!(&parts.venue, &venue);
            prop_assert_eq!(parts.stage, stage);
            prop_assert_eq!(&parts.suffix, &suffix);
            prop_assert_eq!(parts.to_string(), text.clone());
            prop_assert_eq!(parse_tag(&text.to_ascii_uppercase()).unwrap(), parts);
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    let submission = parse_tag("ccs-jcp-submission").or_fail("ccs-jcp-submission")?;
    ensure!(
        (submission.idea.as_str(), submission.venue.as_str(), submission.stage) == ("ccs", "jcp", Stage::Submission),
        "{submission:?}"
    );
    let revision = parse_tag("ccs-jcp-revision-2").or_fail("ccs-jcp-revision-2")?;
    ensure!(revision.stage == Stage::Revision(2), "{revision:?}");
    let err = parse_tag("ccs--submission").err().or_fail("ccs--submission accepted")?;
    ensure!(err.to_string().contains("empty segment"), "error {err}");

    expect_code(&ctx.run(&["tag", "check", "ccs-jcp-revision-2"]), 0, "tag check valid")?;
    let bad = ctx.run(&["tag", "check", "ccs--submission"]);
    expect_code(&bad, 2, "tag check invalid")?;
    ensure!(bad.stderr.contains("empty segment"), "{}", bad.describe());
    Ok("512 generated tags round-trip; fixed vectors parse; ccs--submission rejected with empty segment".into())
}

fn line_of(text: &str, needle: &str) -> usize {
    text.lines().position(|l| l.contains(needle)).map_or(0, |i| i + 1)
}

fn recipe_linter(ctx: &Ctx) -> Outcome {
    let clean = ctx.run(&["lint-recipe", &ctx.demo("recipes/clean.def"), "--json"]);
    expect_code(&clean, 0, "clean recipe")?;
    let findings: Json = serde_json::from_str(&clean.stdout).or_fail("lint JSON")?;
    ensure!(findings == serde_json::json!([]), "clean recipe findings {findings}");

    let dirty_path = ctx.demo("recipes/dirty.def");
    let text = fs::read_to_string(&dirty_path).or_fail("reading dirty recipe")?;
    let dirty = ctx.run(&["lint-recipe", &dirty_path, "--json"]);
    expect_code(&dirty, 2, "dirty recipe")?;
    let findings: Json = serde_json::from_str(&dirty.stdout).or_fail("lint JSON")?;
    let got: BTreeSet<(String, String, u64)> = findings
        .as_array()
        .or_fail("findings array")?
        .iter()
        .map(|f| {
            (
                f["rule"].as_str().unwrap_or("").to_string(),
                f["severity"].as_str().unwrap_or("").to_string(),
                f["line"].as_u64().unwrap_or(0),
            )
        })
        .collect();
    let expected: BTreeSet<(String, String, u64)> = [
        ("R1", "error", line_of(&text, "From: ubuntu:latest")),
        ("R2", "warning", line_of(&text, "./data/training_set.h5")),
        ("R3", "warning", line_of(&text, "apt-get install")),
    ]
    .into_iter()
    .map(|(r, s, l)| (r.to_string(), s.to_string(), l as u64))
    .collect();
    ensure!(findings.as_array().map_or(0, Vec::len) == 3, "expected exactly 3 findings: {findings}");
    ensure!(got == expected, "findings {got:?}, expected {expected:?}");
    Ok(format!("clean: none; dirty: {got:?}"))
}

fn polylines(html: &str) -> Vec<(String, usize)> {
    html.split("<polyline").skip(1).map(|chunk| {
        let tag = &chunk[..chunk.find('>').unwrap_or(chunk.len())];
        let attr = |name: &str| {
            let key = format!("{name}=\"");
            tag.find(&key).map(|i| {
                let rest = &tag[i + key.len()..];
                rest[..rest.find('"').unwrap_or(rest.len())].to_string()
            })
        };
        let points = attr("points").unwrap_or_default();
        (attr("data-group").unwrap_or_default(), points.split_whitespace().count())
    })
    .collect()
}

fn report_determinism(ctx: &Ctx) -> Outcome {
    let args = ["report", "hyperparam", "--chart", "EPOCH:TRAINING_MSE:OPTIMIZER_STEP"];
    let html_path = ctx.project.join("hyperparam/report.html");
    let mut pages = Vec::new();
    for _ in 0..2 {
        let run = ctx.run_in(&ctx.project, &args, &[("SOURCE_DATE_EPOCH", FIXED_EPOCH)]);
        expect_code(&run, 0, "report")?;
        pages.push(fs::read(&html_path).or_fail("reading report")?);
    }
    ensure!(pages[0] == pages[1], "two generations differ");
    let html = String::from_utf8(pages.remove(0)).or_fail("report is not UTF-8")?;
    ensure!(!html.contains("http://") && !html.contains("https://"), "report references external URLs");

    // Oracle: rows per OPTIMIZER_STEP in the merged table.
    let csv = fs::read_to_string(ctx.project.join("hyperparam/secondary.csv")).or_fail("reading secondary.csv")?;
    let mut groups: BTreeMap<String, usize> = BTreeMap::new();
    for line in csv.lines().skip(1) {
        let step = line.split(',').nth(1).unwrap_or("").to_string();
        *groups.entry(step).or_default() += 1;
    }
    let lines = polylines(&html);
    ensure!(lines.len() == groups.len(), "{} polylines for {} groups", lines.len(), groups.len());
    for (step, count) in &groups {
        let found = lines.iter().find(|(g, _)| g.ends_with(&format!("= {step}")));
        ensure!(found.map(|f| f.1) == Some(*count), "group {step}: polyline {found:?}, expected {count} points");
    }
    let idx = ctx.run(&["report", "--index"]);
    expect_code(&idx, 0, "report --index")?;
    Ok(format!(
        "byte-identical with a fixed clock, no external URLs, polylines {:?}",
        lines.iter().map(|l| l.1).collect::<Vec<_>>()
    ))
}

struct Served {
    child: Child,
    base: String,
}

impl Drop for Served {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn serve(ctx: &Ctx, root: &Path, extra: &[&str]) -> Result<Served, String> {
    let mut args = vec!["serve", "--port", "0", "--poll-timeout", "5"];
    args.extend_from_slice(extra);
    let mut child = ctx
        .command(root, &args)
        .stdout(Stdio::piped())
        .spawn()
        .or_fail("starting server")?;
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .or_fail("reading server banner")?;
    let base = line
        .split_whitespace()
        .last()
        .filter(|u| u.starts_with("http"))
        .or_fail(&format!("unexpected banner {line:?}"))?
        .to_string();
    Ok(Served { child, base })
}

fn get(client: &reqwest::blocking::Client, url: &str) -> Result<(u16, Json), String> {
    let r = client.get(url).send().or_fail(url)?;
    let status = r.status().as_u16();
    Ok((status, r.json().or_fail(url)?))
}

fn seqs(body: &Json) -> Vec<u64> {
    body["events"]
        .as_array()
        .map(|a| a.iter().filter_map(|e| e["seq"].as_u64()).collect())
        .unwrap_or_default()
}

fn api_contract(ctx: &Ctx) -> Outcome {
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(30))
        .build()
        .or_fail("http client")?;

    let empty = ctx.scratch_dir("api-empty");
    let server = serve(ctx, &empty, &[])?;
    let (status, body) = get(&client, &format!("{}/api/studies", server.base))?;
    ensure!(status == 200 && body == serde_json::json!([]), "empty listing {status} {body}");
    drop(server);

    let root = ctx.scratch_dir("api");
    let file = write_study(
        &ctx.scratch,
        "live",
        "name: live\nvaried:\n  A: [1, 2, 3]\ncommand: 'if [ {{A}} = 2 ]; then sleep 30; else sleep 0.2; fi'\n",
    );
    expect_code(&ctx.run_in(&root, &["materialize", &file], &[]), 0, "materialize")?;
    let server = serve(ctx, &root, &[])?;
    let base = server.base.clone();
    let mut run = ctx
        .command(&root, &["run", "live", "--max-parallel", "2", "--grace", "1"])
        .stdout(Stdio::null())
        .spawn()
        .or_fail("starting run")?;

    let cases_url = format!("{base}/api/studies/live/cases");
    let status_of = |body: &Json, id: &str| {
        body["cases"]
            .as_array()
            .and_then(|c| c.iter().find(|c| c["id"] == id))
            .map(|c| c["status"].as_str().unwrap_or("").to_string())
            .unwrap_or_default()
    };
    wait_until(Duration::from_secs(10), || {
        let (_, body) = get(&client, &cases_url)?;
        Ok(status_of(&body, "0000") == "Succeeded" && status_of(&body, "0001") == "Running")
    })?;

    let (status, listing) = get(&client, &format!("{base}/api/studies"))?;
    ensure!(status == 200 && listing[0]["name"] == "live", "listing {listing}");

    let (_, all) = get(&client, &format!("{base}/api/events?since=0&timeout=0"))?;
    let all_seqs = seqs(&all);
    ensure!(
        !all_seqs.is_empty() && all_seqs.iter().enumerate().all(|(i, s)| *s == i as u64 + 1),
        "events since 0: {all_seqs:?}"
    );
    let latest = *all_seqs.last().unwrap();
    for since in 0..=latest {
        let (_, body) = get(&client, &format!("{base}/api/events?study=live&since={since}&timeout=0"))?;
        // Case 0002 may append events between requests.
        let upto = body["latest_seq"].as_u64().unwrap_or(0);
        ensure!(upto >= latest, "latest_seq went back from {latest} to {upto}");
        let expected: Vec<u64> = (since + 1..=upto).collect();
        ensure!(seqs(&body) == expected, "since={since}: {:?}", seqs(&body));
    }

    // A long poll from the newest cursor returns once the cancel lands.
    let poll_client = client.clone();
    let poll_url = format!("{base}/api/events?study=live&since={latest}&timeout=10");
    let poll = thread::spawn(move || get(&poll_client, &poll_url));
    thread::sleep(Duration::from_millis(200));

    let r = client
        .post(format!("{base}/api/studies/live/cases/0001/cancel"))
        .send()
        .or_fail("cancel request")?;
    ensure!(r.status().as_u16() == 202, "cancel Running: {}", r.status());
    wait_until(Duration::from_secs(5), || {
        let (_, body) = get(&client, &cases_url)?;
        Ok(status_of(&body, "0001") == "Cancelled")
    })?;
    let (_, polled) = poll.join().map_err(|_| "long poll panicked".to_string())??;
    let new = seqs(&polled);
    ensure!(!new.is_empty() && new.iter().all(|s| *s > latest), "long poll returned {new:?}");
    ensure!(new.windows(2).all(|w| w[0] < w[1]), "long poll out of order {new:?}");

    let r = client
        .post(format!("{base}/api/studies/live/cases/0000/cancel"))
        .send()
        .or_fail("cancel request")?;
    let code = r.status().as_u16();
    let body: Json = r.json().or_fail("409 body")?;
    ensure!(code == 409, "cancel Succeeded: {code}");
    ensure!(body["error"].as_str().unwrap_or("").contains("already finished"), "409 body {body}");
    let unknown = client
        .post(format!("{base}/api/studies/live/cases/0007/cancel"))
        .send()
        .or_fail("cancel request")?
        .status()
        .as_u16();
    ensure!(unknown == 404, "cancel unknown case: {unknown}");
    let exit = run.wait().or_fail("waiting for run")?.code();
    ensure!(exit == Some(4), "run exited {exit:?}");
    drop(server);

    let server = serve(ctx, &root, &["--token", "s3cret"])?;
    let url = format!("{}/api/studies", server.base);
    let none = client.get(&url).send().or_fail("request")?.status().as_u16();
    let wrong = client.get(&url).bearer_auth("guess").send().or_fail("request")?.status().as_u16();
    let right = client.get(&url).bearer_auth("s3cret").send().or_fail("request")?.status().as_u16();
    ensure!((none, wrong, right) == (401, 401, 200), "token statuses {none}/{wrong}/{right}");
    Ok(format!(
        "empty listing [], cursor monotone over {latest} events, long poll woke on cancel, cancel 202 then Cancelled, 409 already finished, 404 unknown case, 401 without/with wrong token"
    ))
}

type Criterion = fn(&Ctx) -> Outcome;

fn main() -> ExitCode {
    // `cargo test -- --list` and filters are not meaningful for this target.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let tmp = tempfile::tempdir().expect("temp dir");
    let labrun = PathBuf::from(env!("CARGO_BIN_EXE_labrun"));
    let fdiff = PathBuf::from(env!("CARGO_BIN_EXE_labrun-fdiff"));
    let mut paths = vec![fdiff.parent().unwrap().to_path_buf()];
    paths.extend(std::env::split_paths(&std::env::var_os("PATH").unwrap_or_default()));
    let ctx = Ctx {
        labrun,
        path_env: std::env::join_paths(paths).expect("PATH"),
        demos: PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/demos")),
        project: tmp.path().join("project"),
        scratch: tmp.path().join("scratch"),
    };
    fs::create_dir_all(&ctx.project).unwrap();
    fs::create_dir_all(&ctx.scratch).unwrap();

    let criteria: [(&str, Criterion); 10] = [
        ("table reproduction", table_reproduction),
        ("finite-difference pipeline", finite_difference_pipeline),
        ("expansion laws", expansion_laws),
        ("compare properties", compare_properties),
        ("runner behavior", runner_behavior),
        ("archive soundness and link verification", archive_and_links),
        ("tag grammar", tag_grammar),
        ("recipe linter", recipe_linter),
        ("report determinism", report_determinism),
        ("api contract", api_contract),
    ];

    let default_hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let mut failures = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(|| check(&ctx))).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name} ({secs:.2} s): {detail}"),
            Err(reason) => {
                failures += 1;
                println!("FAIL {name} ({secs:.2} s): {reason}");
            }
        }
    }
    panic::set_hook(default_hook);
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
