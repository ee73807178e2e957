//! Container back-end against an in-process fake engine that executes
//! "containers" as local shell processes rooted in a scratch directory.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::http::{Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use serde_json::{json, Value};
use sunrise_core::compute::{BackendConfig, BackendKind, Registry};
use sunrise_core::experiment::ExperimentState;
use sunrise_core::manager::{BuildRequest, CreateRequest, Manager, ManagerConfig, RunRequest};

const WORKDIR: &str = "/work";

#[derive(Default)]
struct Container {
    cmd: Vec<String>,
    env: Vec<String>,
    root: PathBuf,
    child: Option<tokio::process::Child>,
    pid: Option<i32>,
    exit: Option<i32>,
    killed: bool,
}

#[derive(Default)]
struct Engine {
    scratch: PathBuf,
    next: usize,
    pulled: Vec<String>,
    containers: HashMap<String, Container>,
    removed: Vec<String>,
    requests: Vec<String>,
}

type Shared = Arc<Mutex<Engine>>;

fn query(uri: &Uri) -> BTreeMap<String, String> {
    form_urlencoded::parse(uri.query().unwrap_or("").as_bytes()).into_owned().collect()
}

fn host_path(root: &Path, container_path: &str) -> PathBuf {
    root.join(container_path.trim_start_matches('/'))
}

fn tar_of(path: &Path) -> Vec<u8> {
    let mut b = tar::Builder::new(Vec::new());
    let name = path.file_name().unwrap();
    if path.is_dir() {
        b.append_dir_all(name, path).unwrap();
    } else {
        b.append_path_with_name(path, name).unwrap();
    }
    b.into_inner().unwrap()
}

fn frame(payload: &[u8]) -> Vec<u8> {
    let mut v = vec![1, 0, 0, 0];
    v.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    v.extend_from_slice(payload);
    v
}

async fn handle(engine: Shared, method: Method, uri: Uri, body: Bytes) -> Response {
    let path = uri.path().strip_prefix("/v1.43").unwrap_or("").to_string();
    let segs: Vec<&str> = path.trim_start_matches('/').split('/').collect();
    engine.lock().unwrap().requests.push(format!("{method} {path}"));
    match (method.as_str(), segs.as_slice()) {
        ("GET", ["_ping"]) => "OK".into_response(),
        ("POST", ["images", "create"]) => {
            let image = query(&uri).get("fromImage").cloned().unwrap_or_default();
            engine.lock().unwrap().pulled.push(image);
            "{\"status\":\"pulled\"}\n".into_response()
        }
        ("POST", ["containers", "create"]) => {
            let spec: Value = serde_json::from_slice(&body).unwrap();
            let image = spec["Image"].as_str().unwrap().to_string();
            let mut e = engine.lock().unwrap();
            if image.starts_with("remote/") && !e.pulled.contains(&image) {
                return (StatusCode::NOT_FOUND, Json(json!({"message": "no such image"}))).into_response();
            }
            e.next += 1;
            let id = format!("c{}", e.next);
            let root = e.scratch.join(&id);
            std::fs::create_dir_all(host_path(&root, WORKDIR)).unwrap();
            let strings = |v: &Value| v.as_array().unwrap().iter().map(|s| s.as_str().unwrap().to_string()).collect();
            e.containers.insert(
                id.clone(),
                Container { cmd: strings(&spec["Cmd"]), env: strings(&spec["Env"]), root, ..Default::default() },
            );
            (StatusCode::CREATED, Json(json!({"Id": id}))).into_response()
        }
        ("GET", ["containers", id, "json"]) => Json(json!({"Id": id, "Config": {"WorkingDir": WORKDIR}})).into_response(),
        ("PUT", ["containers", id, "archive"]) => {
            let dest = query(&uri)["path"].clone();
            let root = engine.lock().unwrap().containers[*id].root.clone();
            tar::Archive::new(&body[..]).unpack(host_path(&root, &dest)).unwrap();
            StatusCode::OK.into_response()
        }
        ("GET", ["containers", id, "archive"]) => {
            let p = query(&uri)["path"].clone();
            let root = engine.lock().unwrap().containers[*id].root.clone();
            let host = host_path(&root, &p);
            if !host.exists() {
                return (StatusCode::NOT_FOUND, Json(json!({"message": "no such path"}))).into_response();
            }
            tar_of(&host).into_response()
        }
        ("POST", ["containers", id, "start"]) => {
            let mut e = engine.lock().unwrap();
            let c = e.containers.get_mut(*id).unwrap();
            let log = std::fs::File::create(c.root.join("container.log")).unwrap();
            let mut cmd = tokio::process::Command::new(&c.cmd[0]);
            cmd.args(&c.cmd[1..])
                .current_dir(host_path(&c.root, WORKDIR))
                .env_clear()
                .env("PATH", std::env::var("PATH").unwrap())
                .stdout(Stdio::from(log.try_clone().unwrap()))
                .stderr(Stdio::from(log))
                .process_group(0);
            for kv in &c.env {
                let (k, v) = kv.split_once('=').unwrap();
                cmd.env(k, v);
            }
            let child = cmd.spawn().unwrap();
            c.pid = child.id().map(|p| p as i32);
            c.child = Some(child);
            StatusCode::NO_CONTENT.into_response()
        }
        ("POST", ["containers", id, "wait"]) => {
            let mut child = engine.lock().unwrap().containers.get_mut(*id).unwrap().child.take();
            let code = match child.as_mut() {
                Some(ch) => ch.wait().await.unwrap().code().unwrap_or(137),
                None => engine.lock().unwrap().containers[*id].exit.unwrap_or(0),
            };
            engine.lock().unwrap().containers.get_mut(*id).unwrap().exit = Some(code);
            Json(json!({"StatusCode": code})).into_response()
        }
        ("POST", ["containers", id, "kill"]) => {
            let mut e = engine.lock().unwrap();
            let c = e.containers.get_mut(*id).unwrap();
            c.killed = true;
            if let Some(pid) = c.pid {
                unsafe { libc::killpg(pid, libc::SIGKILL) };
            }
            StatusCode::NO_CONTENT.into_response()
        }
        ("GET", ["containers", id, "logs"]) => {
            let root = engine.lock().unwrap().containers[*id].root.clone();
            let bytes = std::fs::read(root.join("container.log")).unwrap_or_default();
            frame(&bytes).into_response()
        }
        ("DELETE", ["containers", id]) => {
            let mut e = engine.lock().unwrap();
            if e.containers.remove(*id).is_none() {
                return StatusCode::NOT_FOUND.into_response();
            }
            e.removed.push(id.to_string());
            StatusCode::NO_CONTENT.into_response()
        }
        _ => (StatusCode::NOT_FOUND, Json(json!({"message": format!("unhandled {method} {path}")}))).into_response(),
    }
}

use axum::Json;

async fn start_engine(scratch: PathBuf) -> (String, Shared) {
    let engine: Shared = Arc::new(Mutex::new(Engine { scratch, ..Default::default() }));
    let state = engine.clone();
    let app = Router::new().fallback(move |method: Method, uri: Uri, body: Bytes| {
        let engine = state.clone();
        async move { handle(engine, method, uri, body).await }
    });
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("tcp://{addr}"), engine)
}

fn container_manager(root: &Path, endpoint: &str, image: &str) -> Manager {
    let catalog = root.join("systems");
    std::fs::create_dir_all(&catalog).unwrap();
    let mut def = common::toy_def();
    def["docker_image"] = json!(image);
    std::fs::write(catalog.join("toy.json"), def.to_string()).unwrap();
    let backend = BackendConfig {
        name: "engine".into(),
        kind: BackendKind::ContainerEngine,
        endpoint: Some(endpoint.into()),
        max_concurrent_jobs: 2.try_into().unwrap(),
        work_dir: None,
        api_version: None,
        container_workdir: None,
    };
    let registry = Registry::from_configs(&[backend], &root.join("work")).unwrap();
    let mut cfg = ManagerConfig::new(root.join("data"), catalog);
    cfg.poll_interval = Duration::from_millis(10);
    Manager::open(cfg, registry).unwrap()
}

async fn settle(m: &Manager, id: sunrise_core::experiment::ExperimentId) -> ExperimentState {
    for _ in 0..1000 {
        let st = m.status(id).unwrap();
        let s = st.status;
        if !s.is_busy() {
            if s.to_string().ends_with("failed") {
                eprintln!("{s}: {:?}\n{}", st.message, m.log(id).await.unwrap());
            }
            return s;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("job did not settle");
}

async fn upload(m: &Manager, id: sunrise_core::experiment::ExperimentId, param: &str, bytes: &[u8]) {
    let mut tmp = m.upload_temp(id).unwrap();
    std::io::Write::write_all(&mut tmp, bytes).unwrap();
    m.commit_upload(id, param, tmp).await.unwrap();
}

#[tokio::test]
async fn workflow_through_engine_api() {
    let dir = tempfile::tempdir().unwrap();
    let (endpoint, engine) = start_engine(dir.path().join("engine")).await;
    let m = container_manager(dir.path(), &endpoint, "remote/toy:1");

    let id = m.create(CreateRequest { system: common::toy_ref(), ..Default::default() }, "u").await.unwrap().id;
    upload(&m, id, "lib", b"LIB").await;
    m.build(id, BuildRequest::default()).await.unwrap();
    assert_eq!(settle(&m, id).await, ExperimentState::Built);

    upload(&m, id, "app", b"2.5").await;
    let req = RunRequest { run_parameters: BTreeMap::from([("run_time_ms".into(), json!(50))]), ..Default::default() };
    m.run(id, req).await.unwrap();
    assert_eq!(settle(&m, id).await, ExperimentState::Completed);

    let metrics = std::fs::read(m.result(id, "metrics").unwrap().path).unwrap();
    let v: Value = serde_json::from_slice(&metrics).unwrap();
    assert_eq!(v, json!({"marker": "built LIB", "speedup": 2.5}));
    let trace = std::fs::read(m.result(id, "trace").unwrap().path).unwrap();
    assert!(trace.starts_with(b"$timescale"));
    let cfg: Value = serde_json::from_slice(&std::fs::read(m.result(id, "config").unwrap().path).unwrap()).unwrap();
    assert_eq!(cfg["run_parameters"]["run_time_ms"], 50);
    assert_eq!(cfg["run_parameters"]["app"]["value"], "params/app");

    let e = engine.lock().unwrap();
    assert_eq!(e.pulled, vec!["remote/toy:1".to_string()]);
    assert!(e.containers.is_empty(), "containers left behind");
    assert_eq!(e.removed.len(), 2);
    assert!(e.requests.iter().any(|r| r.starts_with("PUT /containers/")));
    assert!(e.requests.iter().any(|r| r.starts_with("POST /containers/") && r.ends_with("/wait")));
}

#[tokio::test]
async fn engine_container_spec_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    let (endpoint, engine) = start_engine(dir.path().join("engine")).await;
    let m = container_manager(dir.path(), &endpoint, "local/toy:1");

    let id = m.create(CreateRequest { system: common::toy_ref(), ..Default::default() }, "u").await.unwrap().id;
    m.build(id, BuildRequest::default()).await.unwrap();
    assert_eq!(settle(&m, id).await, ExperimentState::Built);
    {
        let e = engine.lock().unwrap();
        assert!(e.pulled.is_empty());
        let create = e.requests.iter().filter(|r| r.as_str() == "POST /containers/create").count();
        assert_eq!(create, 1);
    }

    // No upload for `app`: the default in-image path does not exist, so
    // the command fails and the run is marked failed.
    m.run(id, RunRequest::default()).await.unwrap();
    assert_eq!(settle(&m, id).await, ExperimentState::RunFailed);
    let msg = m.status(id).unwrap().message.unwrap();
    assert!(msg.contains("exited with code"), "{msg}");
    assert!(m.log(id).await.unwrap().contains("params/app"));

    upload(&m, id, "app", b"1").await;
    let req = RunRequest {
        timeout_s: Some(0.3),
        run_parameters: BTreeMap::from([("run_time_ms".into(), json!(5000))]),
    };
    let t = std::time::Instant::now();
    m.run(id, req).await.unwrap();
    assert_eq!(settle(&m, id).await, ExperimentState::RunFailed);
    assert!(t.elapsed() < Duration::from_secs(3));
    assert_eq!(m.status(id).unwrap().message.as_deref(), Some("timed out"));
    assert!(engine.lock().unwrap().containers.is_empty());
}

#[tokio::test]
async fn unreachable_engine_is_backend_unavailable() {
    let dir = tempfile::tempdir().unwrap();
    let m = container_manager(dir.path(), "tcp://127.0.0.1:1", "x");
    let id = m.create(CreateRequest { system: common::toy_ref(), ..Default::default() }, "u").await.unwrap().id;
    let err = m.build(id, BuildRequest::default()).await.unwrap_err();
    assert!(matches!(err, sunrise_core::manager::ManagerError::BackendUnavailable(_)), "{err:?}");
    assert_eq!(m.status(id).unwrap().status, ExperimentState::Created);
}
