mod common;

use std::path::Path;

use common::Harness;
use serde_json::Value;
use sunrise_core::experiment::{ExperimentId, ExperimentState};

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

async fn sunrise(endpoint: &str, args: &[&str]) -> Out {
    let out = tokio::process::Command::new(env!("CARGO_BIN_EXE_sunrise"))
        .arg("--endpoint")
        .arg(endpoint)
        .args(args)
        .env_remove("SUNRISE_AUTH_TOKEN")
        .env_remove("SUNRISE_USER")
        .output()
        .await
        .unwrap();
    Out {
        code: out.status.code().unwrap(),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn endpoint(h: &Harness) -> String {
    format!("http://{}", h.addr)
}

#[tokio::test(flavor = "multi_thread")]
async fn systems_table_and_connection_errors() {
    let h = Harness::start().await;
    let out = sunrise(&endpoint(&h), &["systems"]).await;
    assert_eq!(out.code, 0, "{}", out.stderr);
    let lines: Vec<&str> = out.stdout.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("NAME"));
    let cols: Vec<&str> = lines[2].split("  ").map(str::trim).filter(|c| !c.is_empty()).collect();
    assert_eq!(cols, ["toy prebuilt", "2.0", "no build step"]);

    let empty = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(empty.path().join("systems")).unwrap();
    let svc = common::ServiceProcess::spawn(&empty.path().join("data"), &empty.path().join("systems"));
    let out = sunrise(&svc.endpoint, &["systems"]).await;
    assert_eq!(out.code, 0);
    assert_eq!(out.stdout.lines().count(), 1);
    drop(svc);

    let out = sunrise("http://127.0.0.1:1", &["systems"]).await;
    assert_eq!(out.code, 2);
    assert!(out.stderr.starts_with("error: "), "{}", out.stderr);
    let out = sunrise(&endpoint(&h), &["status", "not-a-uuid"]).await;
    assert_eq!(out.code, 2);
    let out = sunrise(&endpoint(&h), &["create", "toy", "1", "--set", "run_time_ms=fast"]).await;
    assert_eq!(out.code, 2);
}

#[tokio::test(flavor = "multi_thread")]
async fn workflow_commands() {
    let h = Harness::start().await;
    let ep = endpoint(&h);
    let out = sunrise(&ep, &["--user", "dana", "create", "toy", "1", "--set", "run_time_ms=500", "--description", "cli"]).await;
    assert_eq!(out.code, 0, "{}", out.stderr);
    let id: ExperimentId = out.stdout.trim().parse().unwrap();
    let exp = h.manager.experiment(id).unwrap();
    assert_eq!(exp.meta.creator, "dana");
    assert_eq!(exp.cfg.run_parameters["run_time_ms"].to_json(), 500);
    let id = id.to_string();

    let out = sunrise(&ep, &["run", &id]).await;
    assert_eq!(out.code, 1);
    assert!(out.stderr.contains("illegal_state"), "{}", out.stderr);

    let dir = tempfile::tempdir().unwrap();
    let app = dir.path().join("app.bin");
    std::fs::write(&app, "4").unwrap();
    assert_eq!(sunrise(&ep, &["upload", &id, "app", app.to_str().unwrap()]).await.code, 0);
    let out = sunrise(&ep, &["upload", &id, "run_time_ms", app.to_str().unwrap()]).await;
    assert_eq!(out.code, 1);
    assert!(out.stderr.contains("not_a_file_parameter"));

    let out = sunrise(&ep, &["build", &id, "--wait"]).await;
    assert_eq!(out.code, 0, "{}", out.stderr);
    let st: Value = serde_json::from_str(&out.stdout).unwrap();
    assert_eq!(st["status"], "built");

    let out = sunrise(&ep, &["set", &id, "run_time_ms=50", "verbose=true"]).await;
    assert_eq!(out.code, 0, "{}", out.stderr);
    assert_eq!(serde_json::from_str::<Value>(&out.stdout).unwrap()["status"], "built");

    let out = sunrise(&ep, &["run", &id, "--set", "run_time_ms=3000"]).await;
    assert_eq!(out.code, 0, "{}", out.stderr);
    let out = sunrise(&ep, &["status", &id, "--wait", "--wait-timeout", "0.2"]).await;
    assert_eq!(out.code, 3, "{}", out.stderr);
    let out = sunrise(&ep, &["status", &id, "--wait"]).await;
    assert_eq!(out.code, 0, "{}", out.stderr);
    assert_eq!(serde_json::from_str::<Value>(&out.stdout).unwrap()["status"], "completed");

    let out = sunrise(&ep, &["result", &id, "metrics"]).await;
    assert_eq!(out.code, 0);
    let metrics: Value = serde_json::from_str(&out.stdout).unwrap();
    assert_eq!(metrics["speedup"], 4);
    let vcd = dir.path().join("trace.vcd");
    assert_eq!(sunrise(&ep, &["result", &id, "trace", "--out", vcd.to_str().unwrap()]).await.code, 0);
    assert!(std::fs::read_to_string(&vcd).unwrap().starts_with("$timescale"));
    let out = sunrise(&ep, &["result", &id, "missing"]).await;
    assert_eq!(out.code, 1);
    assert!(out.stderr.contains("unknown_result"));

    assert_eq!(sunrise(&ep, &["log", &id]).await.code, 0);
    let out = sunrise(&ep, &["list", "--creator", "dana", "--status", "completed"]).await;
    let list: Vec<Value> = serde_json::from_str(&out.stdout).unwrap();
    assert_eq!(list.len(), 1);

    let zip = dir.path().join("bundle.zip");
    let out = sunrise(&ep, &["archive", &id, "--out", zip.to_str().unwrap()]).await;
    assert_eq!(out.code, 0, "{}", out.stderr);
    let bytes = std::fs::read(&zip).unwrap();
    assert!(common::zip_entry(&bytes, "manifest.json").is_some());
    let out = sunrise(&ep, &["delete", &id]).await;
    assert_eq!(out.code, 1);
    assert!(out.stderr.contains("illegal_state"));
}

#[tokio::test(flavor = "multi_thread")]
async fn failed_run_exits_one() {
    let h = Harness::start().await;
    let ep = endpoint(&h);
    let id = sunrise(&ep, &["create", "toy", "1"]).await.stdout.trim().to_string();
    assert_eq!(sunrise(&ep, &["build", &id, "--wait"]).await.code, 0);
    // No app uploaded: the toy run fails.
    let out = sunrise(&ep, &["run", &id, "--wait"]).await;
    assert_eq!(out.code, 1, "{}", out.stdout);
    assert_eq!(h.manager.status(id.parse().unwrap()).unwrap().status, ExperimentState::RunFailed);
    assert_eq!(sunrise(&ep, &["delete", &id]).await.code, 0);
}

fn write_apps(dir: &Path, metrics: &[&str]) {
    std::fs::create_dir_all(dir).unwrap();
    for (i, m) in metrics.iter().enumerate() {
        std::fs::write(dir.join(format!("app{i:02}")), m).unwrap();
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn bench_reports_geometric_mean() {
    let h = Harness::start().await;
    let ep = endpoint(&h);
    let dir = tempfile::tempdir().unwrap();
    let apps = dir.path().join("apps");
    write_apps(&apps, &["2", "8"]);
    let args = [
        "bench", "toy", "1", "--apps", apps.to_str().unwrap(), "--param", "app", "--metric", "metrics:/speedup",
        "--parallel", "2", "--set", "run_time_ms=10",
    ];
    let out = sunrise(&ep, &args).await;
    assert_eq!(out.code, 0, "{}", out.stderr);
    let report: Value = serde_json::from_str(&out.stdout).unwrap();
    assert_eq!(report["score"], 4.0);
    assert_eq!(report["succeeded"], 2);
    assert_eq!(report["failed"], 0);
    assert!(out.stderr.contains("app00"));

    // A non-numeric metric fails that app only.
    write_apps(&apps, &["2", "8", "oops"]);
    let out = sunrise(&ep, &args).await;
    assert_eq!(out.code, 1);
    let report: Value = serde_json::from_str(&out.stdout).unwrap();
    assert_eq!(report["succeeded"], 2);
    assert_eq!(report["failed"], 1);
    assert_eq!(report["failures"][0]["app"], "app02");
    assert_eq!(report["score"], 4.0);

    let out = sunrise(&ep, &["bench", "toy", "1", "--apps", apps.to_str().unwrap(), "--param", "run_time_ms", "--metric", "metrics:/speedup"]).await;
    assert_eq!(out.code, 2, "{}", out.stderr);
    let out = sunrise(&ep, &["bench", "toy", "1", "--apps", apps.to_str().unwrap(), "--param", "app", "--metric", "nothing:/x"]).await;
    assert_eq!(out.code, 2, "{}", out.stderr);
}
