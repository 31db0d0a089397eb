use std::fs;
use std::net::SocketAddr;
use std::path::Path;
use std::time::{Duration, Instant};

use labrun_api::{bind, ApiConfig};
use labrun_core::datastore;
use labrun_core::layout::StudyDir;
use labrun_core::paramspace::parse_study_config;
use labrun_core::runner::{self, materialize, MaterializeOptions, RunOptions};
use reqwest::StatusCode;
use serde_json::Value;

fn setup(root: &Path, yaml: &str) -> StudyDir {
    let config = parse_study_config(yaml).unwrap();
    materialize(&config, root, &MaterializeOptions::default()).unwrap();
    StudyDir::open(root, &config.name).unwrap()
}

fn quick_run(study: &StudyDir) {
    let opts = RunOptions {
        max_parallel: 2,
        poll_interval: Duration::from_millis(10),
        ..RunOptions::default()
    };
    runner::run(study, opts).unwrap();
}

async fn start(config: ApiConfig) -> String {
    let server = bind(&config).await.unwrap();
    let addr = server.local_addr();
    tokio::spawn(server.run());
    format!("http://{addr}")
}

fn config(root: &Path) -> ApiConfig {
    let mut c = ApiConfig::new(root, SocketAddr::from(([127, 0, 0, 1], 0)));
    c.poll_timeout = Duration::from_secs(2);
    c
}

async fn get_json(url: &str) -> (StatusCode, Value) {
    let r = reqwest::get(url).await.unwrap();
    let status = r.status();
    (status, r.json().await.unwrap())
}

#[tokio::test]
async fn empty_project_lists_no_studies() {
    let tmp = tempfile::tempdir().unwrap();
    let base = start(config(tmp.path())).await;
    let (status, body) = get_json(&format!("{base}/api/studies")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, serde_json::json!([]));
}

#[tokio::test]
async fn study_views() {
    let tmp = tempfile::tempdir().unwrap();
    let study = setup(
        tmp.path(),
        "name: s\nvaried:\n  STEP: [0.1, 0.2]\nconstants:\n  N: 3\noutputs: ['out.csv']\n\
         command: 'printf \"I,Y\\n1,{{STEP}}\\n2,{{N}}\\n\" > out.csv'\n",
    );
    quick_run(&study);
    datastore::merge_study_table(&study).unwrap();
    let base = start(config(tmp.path())).await;

    let (_, list) = get_json(&format!("{base}/api/studies")).await;
    assert_eq!(list[0]["name"], "s");
    assert_eq!(list[0]["counts"]["Succeeded"], 2);
    assert_eq!(list[0]["has_secondary"], true);

    let (status, detail) = get_json(&format!("{base}/api/studies/s")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(detail["varied"], serde_json::json!(["STEP"]));
    assert_eq!(detail["constants"], serde_json::json!(["N"]));
    assert_eq!(detail["total"], 2);

    let (_, cases) = get_json(&format!("{base}/api/studies/s/cases")).await;
    let cases = cases["cases"].as_array().unwrap();
    assert_eq!(cases.len(), 2);
    assert_eq!(cases[1]["id"], "0001");
    assert_eq!(cases[1]["status"], "Succeeded");
    assert_eq!(cases[1]["params"]["STEP"], 0.2);

    let (_, table) = get_json(&format!("{base}/api/studies/s/secondary")).await;
    assert_eq!(table["partition"]["id"], serde_json::json!(["ID"]));
    assert_eq!(table["partition"]["metadata"], serde_json::json!(["STEP", "N"]));
    assert_eq!(table["partition"]["results"], serde_json::json!(["I", "Y"]));
    assert_eq!(table["columns"][0]["role"], "id");
    assert_eq!(table["columns"][4]["type"], "decimal");
    assert_eq!(table["rows"].as_array().unwrap().len(), 4);

    let (_, filtered) = get_json(&format!("{base}/api/studies/s/secondary?STEP=0.2")).await;
    let rows = filtered["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r[0] == "0001"));

    let (status, _) = get_json(&format!("{base}/api/studies/s/secondary?NOPE=1")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, body) = get_json(&format!("{base}/api/studies/missing")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body["error"].as_str().unwrap().contains("missing"));
}

#[tokio::test]
async fn secondary_absent_is_404() {
    let tmp = tempfile::tempdir().unwrap();
    setup(tmp.path(), "name: s\nvaried:\n  A: [1]\ncommand: 'true'\n");
    let base = start(config(tmp.path())).await;
    let (status, _) = get_json(&format!("{base}/api/studies/s/secondary")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn events_since_cursor() {
    let tmp = tempfile::tempdir().unwrap();
    let study = setup(tmp.path(), "name: e\nvaried:\n  A: [1, 2, 3]\ncommand: 'true'\n");
    quick_run(&study);
    let base = start(config(tmp.path())).await;

    let (_, all) = get_json(&format!("{base}/api/events?since=0")).await;
    let all = all["events"].as_array().unwrap().clone();
    assert_eq!(all.len(), 8);
    for since in 0..=8u64 {
        let (_, body) = get_json(&format!("{base}/api/events?study=e&since={since}&timeout=0")).await;
        let seqs: Vec<u64> = body["events"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| e["seq"].as_u64().unwrap())
            .collect();
        let expected: Vec<u64> = (since + 1..=8).collect();
        assert_eq!(seqs, expected, "since={since}");
        assert_eq!(body["latest_seq"], 8);
    }
}

#[tokio::test]
async fn events_long_poll_times_out_empty() {
    let tmp = tempfile::tempdir().unwrap();
    setup(tmp.path(), "name: e\nvaried:\n  A: [1]\ncommand: 'true'\n");
    let base = start(config(tmp.path())).await;
    let t = Instant::now();
    let (status, body) = get_json(&format!("{base}/api/events?since=0&timeout=0.3")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(t.elapsed() >= Duration::from_millis(300));
    assert_eq!(body["events"], serde_json::json!([]));
}

#[tokio::test]
async fn events_need_study_with_several() {
    let tmp = tempfile::tempdir().unwrap();
    setup(tmp.path(), "name: a\nvaried:\n  A: [1]\ncommand: 'true'\n");
    setup(tmp.path(), "name: b\nvaried:\n  A: [1]\ncommand: 'true'\n");
    let base = start(config(tmp.path())).await;
    let (status, _) = get_json(&format!("{base}/api/events?timeout=0")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = get_json(&format!("{base}/api/events?study=b&timeout=0")).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn cancel_running_then_finished() {
    let tmp = tempfile::tempdir().unwrap();
    let study = setup(tmp.path(), "name: c\nvaried:\n  T: [0, 30]\ncommand: 'sleep {{T}}'\n");
    let handle = runner::start(
        &study,
        RunOptions {
            max_parallel: 2,
            poll_interval: Duration::from_millis(10),
            ..RunOptions::default()
        },
    )
    .unwrap();
    let base = start(config(tmp.path())).await;
    let client = reqwest::Client::new();

    // Wait for the short case to finish and the long one to run.
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        let (_, cases) = get_json(&format!("{base}/api/studies/c/cases")).await;
        if cases["cases"][0]["status"] == "Succeeded" && cases["cases"][1]["status"] == "Running" {
            break;
        }
        assert!(Instant::now() < deadline, "cases never reached the expected state");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }

    let r = client
        .post(format!("{base}/api/studies/c/cases/0001/cancel"))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::ACCEPTED);

    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        let (_, cases) = get_json(&format!("{base}/api/studies/c/cases")).await;
        if cases["cases"][1]["status"] == "Cancelled" {
            break;
        }
        assert!(Instant::now() < deadline, "case never became Cancelled");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }

    let r = client
        .post(format!("{base}/api/studies/c/cases/0000/cancel"))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::CONFLICT);
    let body: Value = r.json().await.unwrap();
    assert!(body["error"].as_str().unwrap().contains("already finished"));

    let r = client
        .post(format!("{base}/api/studies/c/cases/0007/cancel"))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);

    let run = tokio::task::spawn_blocking(move || handle.wait().unwrap()).await.unwrap();
    assert_eq!(run.counts().cancelled, 1);
    assert_eq!(run.counts().succeeded, 1);
}

#[tokio::test]
async fn token_required_when_configured() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = config(tmp.path());
    c.token = Some("s3cret".into());
    let base = start(c).await;
    let client = reqwest::Client::new();
    let url = format!("{base}/api/studies");

    assert_eq!(client.get(&url).send().await.unwrap().status(), StatusCode::UNAUTHORIZED);
    let wrong = client.get(&url).bearer_auth("nope").send().await.unwrap();
    assert_eq!(wrong.status(), StatusCode::UNAUTHORIZED);
    let right = client.get(&url).bearer_auth("s3cret").send().await.unwrap();
    assert_eq!(right.status(), StatusCode::OK);
}

#[tokio::test]
async fn serves_static_dir_or_builtin_page() {
    let tmp = tempfile::tempdir().unwrap();
    let base = start(config(tmp.path())).await;
    let page = reqwest::get(format!("{base}/")).await.unwrap().text().await.unwrap();
    assert!(page.contains("/api/studies"));

    let assets = tempfile::tempdir().unwrap();
    fs::write(assets.path().join("index.html"), "<p>dashboard</p>").unwrap();
    let mut c = config(tmp.path());
    c.static_dir = Some(assets.path().to_path_buf());
    let base = start(c).await;
    let page = reqwest::get(format!("{base}/")).await.unwrap().text().await.unwrap();
    assert_eq!(page, "<p>dashboard</p>");
    let (status, _) = get_json(&format!("{base}/api/studies")).await;
    assert_eq!(status, StatusCode::OK);
}
