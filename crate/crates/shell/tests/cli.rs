use std::process::Command;

fn townhall() -> Command {
    Command::new(env!("CARGO_BIN_EXE_townhall"))
}

#[test]
fn analyze_missing_file_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = townhall()
        .args(["analyze", "--responses", "does-not-exist.jsonl", "--out"])
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does-not-exist.jsonl"));
}

#[test]
fn serve_missing_study_exits_nonzero() {
    let out = townhall().args(["serve", "--study", "nope.json", "--stub-provider", "--port", "0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_then_analyze() {
    let tmp = tempfile::tempdir().unwrap();
    let status = townhall()
        .current_dir(tmp.path())
        .env_remove("CIVIC_RESPONSE_STORE")
        .env_remove("CIVIC_DEMOGRAPHIC_STORE")
        .args(["simulate", "--bots", "8", "--seed", "3", "--export", "ex"])
        .status()
        .unwrap();
    assert!(status.success());
    for f in ["responses.jsonl", "responses.csv", "demographics.jsonl", "audit.jsonl"] {
        assert!(tmp.path().join("ex").join(f).exists(), "{f}");
    }
    let status = townhall()
        .current_dir(tmp.path())
        .args(["analyze", "--responses", "ex/responses.jsonl", "--demographics", "ex/demographics.jsonl"])
        .args(["--audit", "ex/audit.jsonl", "--out", "rep", "--resamples", "200"])
        .status()
        .unwrap();
    assert!(status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("rep/report.json")).unwrap()).unwrap();
    assert_eq!(report["completed_sessions"], 8);
    let md = std::fs::read_to_string(tmp.path().join("rep/report.md")).unwrap();
    assert!(md.contains("## Sample"));

    // the store directories work as input too
    let status = townhall()
        .current_dir(tmp.path())
        .args(["analyze", "--responses", "data/responses", "--demographics", "data/demographics", "--out", "rep2"])
        .args(["--resamples", "200"])
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn analyze_with_no_completed_sessions_fails() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("empty.jsonl"), "").unwrap();
    let out = townhall()
        .current_dir(tmp.path())
        .args(["analyze", "--responses", "empty.jsonl", "--out", "rep"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no completed sessions"));
}

#[test]
fn serve_answers_health_and_stops_on_interrupt() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let study = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures/lausanne_6block.study.json");
    let mut child = townhall()
        .env_remove("CIVIC_RESPONSE_STORE")
        .env_remove("CIVIC_DEMOGRAPHIC_STORE")
        .args(["serve", "--study", study, "--stub-provider", "--port", &port.to_string()])
        .spawn()
        .unwrap();
    let url = format!("http://127.0.0.1:{port}/health");
    let mut body = None;
    for _ in 0..100 {
        if let Ok(r) = reqwest::blocking::get(&url) {
            body = Some(r.text().unwrap());
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(50));
    }
    assert_eq!(body.as_deref(), Some(r#"{"status":"ok"}"#));
    Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap();
    let status = child.wait().unwrap();
    assert!(status.success(), "{status:?}");
}
