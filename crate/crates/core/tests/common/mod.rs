#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use sunrise_core::client::Client;
use sunrise_core::compute::{BackendConfig, Registry};
use sunrise_core::experiment::{ExperimentId, ExperimentState};
use sunrise_core::manager::{Manager, ManagerConfig, StatusResponse};
use sunrise_core::sysdef::SystemRef;
use tempfile::TempDir;

/// Reads `run_time_ms` from the staged syscfg.json, sleeps that long and
/// writes a metrics document, a VCD trace and a copy of its configuration.
pub const TOY_RUN: &str = concat!(
    r#"ms=$(sed -n 's/^ *"run_time_ms": *\([0-9][0-9]*\).*/\1/p' syscfg.json) && "#,
    r#"sleep $((ms / 1000)).$(printf %03d $((ms % 1000))) && "#,
    r#"mkdir -p out && cp syscfg.json out/syscfg.json && "#,
    r#"app=$(cat params/app) && "#,
    r#"printf '{"marker": "%s", "speedup": %s}\n' "$(cat marker.txt)" "$app" > out/metrics.json && "#,
    r#"printf '$timescale 1ns $end\n$var wire 1 ! clk $end\n$enddefinitions $end\n#0\n0!\n#5\n1!\n' > out/trace.vcd"#,
);

pub const TOY_BUILD: &str = "sleep 0.2 && echo \"built $(cat params/lib 2>/dev/null)\" > marker.txt";

pub fn toy_def() -> Value {
    json!({
        "name": "toy",
        "version": "1",
        "documentation": {"summary": "toy simulator"},
        "docker_image": "toy:latest",
        "build_command": TOY_BUILD,
        "run_command": TOY_RUN,
        "build_parameters": {
            "opt": "-O2",
            "lib": {"value": "lib/none", "is_file": true}
        },
        "run_parameters": {
            "run_time_ms": 100,
            "verbose": false,
            "app": {"value": "apps/default", "is_file": true}
        },
        "results": {
            "metrics": {"path": "out/metrics.json", "type": "json"},
            "trace": {"path": "out/trace.vcd", "type": "vcd"},
            "config": {"path": "out/syscfg.json", "type": "json"},
            "missing": {"path": "out/never.txt", "type": "txt"}
        }
    })
}

pub fn prebuilt_def() -> Value {
    json!({
        "name": "toy prebuilt",
        "version": "2.0",
        "documentation": {"summary": "no build step"},
        "docker_image": "toy:prebuilt",
        "run_command": "echo run > out.txt",
        "build_parameters": {},
        "run_parameters": {},
        "results": {"out": {"path": "out.txt", "type": "txt"}}
    })
}

pub fn toy_ref() -> SystemRef {
    SystemRef { name: "toy".into(), version: "1".into() }
}

pub fn prebuilt_ref() -> SystemRef {
    SystemRef { name: "toy prebuilt".into(), version: "2.0".into() }
}

pub fn write_catalog(dir: &Path) -> PathBuf {
    let catalog = dir.join("systems");
    std::fs::create_dir_all(&catalog).unwrap();
    std::fs::write(catalog.join("toy.json"), serde_json::to_string_pretty(&toy_def()).unwrap()).unwrap();
    std::fs::write(catalog.join("prebuilt.json"), serde_json::to_string_pretty(&prebuilt_def()).unwrap()).unwrap();
    catalog
}

/// In-process service bound to an ephemeral port.
pub struct Harness {
    pub dir: TempDir,
    pub addr: SocketAddr,
    pub manager: Manager,
    server: tokio::task::JoinHandle<()>,
}

impl Harness {
    pub async fn start() -> Harness {
        Self::start_with(64, None).await
    }

    pub async fn start_with(slots: usize, token: Option<&str>) -> Harness {
        let dir = tempfile::tempdir().unwrap();
        let catalog = write_catalog(dir.path());
        let manager = open_manager(dir.path(), &catalog, slots);
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let app = sunrise_core::evalapi::router(manager.clone(), token.map(str::to_string));
        let server = tokio::spawn(async move {
            axum::serve(listener, app).await.unwrap();
        });
        Harness { dir, addr, manager, server }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    pub fn client(&self) -> Client {
        Client::new(&format!("http://{}", self.addr)).unwrap()
    }

    pub fn data_dir(&self) -> PathBuf {
        self.dir.path().join("data")
    }
}

impl Drop for Harness {
    fn drop(&mut self) {
        self.server.abort();
    }
}

pub fn open_manager(root: &Path, catalog: &Path, slots: usize) -> Manager {
    let registry = Registry::from_configs(&[BackendConfig::local("local", slots)], &root.join("work")).unwrap();
    let mut cfg = ManagerConfig::new(root.join("data"), catalog);
    cfg.poll_interval = Duration::from_millis(10);
    Manager::open(cfg, registry).unwrap()
}

pub async fn settle(client: &Client, id: ExperimentId, limit: Duration) -> StatusResponse {
    let start = Instant::now();
    loop {
        let st = client.status(id).await.unwrap();
        if !st.status.is_busy() {
            return st;
        }
        assert!(start.elapsed() < limit, "still {} after {:?}", st.status, limit);
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
}

/// Polls status every few milliseconds until the experiment settles and
/// returns the de-duplicated sequence of observed states.
pub async fn trace_until_settled(client: &Client, id: ExperimentId, limit: Duration) -> Vec<ExperimentState> {
    let start = Instant::now();
    let mut seen = Vec::new();
    loop {
        let st = client.status(id).await.unwrap().status;
        if seen.last() != Some(&st) {
            seen.push(st);
        }
        if !st.is_busy() {
            return seen;
        }
        assert!(start.elapsed() < limit, "still {st} after {limit:?}");
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}

/// `sunrise serve` running as a child process.
pub struct ServiceProcess {
    child: Child,
    // Held open so later writes to stdout never hit a closed pipe.
    _stdout: BufReader<std::process::ChildStdout>,
    pub endpoint: String,
}

impl ServiceProcess {
    pub fn spawn(data_dir: &Path, catalog_dir: &Path) -> ServiceProcess {
        let mut child = Command::new(env!("CARGO_BIN_EXE_sunrise"))
            .args(["serve", "--listen", "127.0.0.1:0", "--data-dir"])
            .arg(data_dir)
            .arg("--catalog-dir")
            .arg(catalog_dir)
            .env_remove("SUNRISE_AUTH_TOKEN")
            .env_remove("SUNRISE_LISTEN")
            .env("RUST_LOG", "warn")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .expect("spawn sunrise serve");
        let stdout = child.stdout.take().unwrap();
        let mut reader = BufReader::new(stdout);
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let endpoint = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
            .to_string();
        ServiceProcess { child, _stdout: reader, endpoint }
    }

    pub fn client(&self) -> Client {
        Client::new(&self.endpoint).unwrap()
    }

    /// SIGKILL, no chance to flush or clean up.
    pub fn kill9(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }
}

impl Drop for ServiceProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Reads one entry of a ZIP file.
pub fn zip_entry(zip_bytes: &[u8], name: &str) -> Option<Vec<u8>> {
    use std::io::Read;
    let mut archive = zip::ZipArchive::new(std::io::Cursor::new(zip_bytes)).unwrap();
    let mut f = archive.by_name(name).ok()?;
    let mut out = Vec::new();
    f.read_to_end(&mut out).unwrap();
    Some(out)
}

pub fn zip_names(zip_bytes: &[u8]) -> Vec<String> {
    let archive = zip::ZipArchive::new(std::io::Cursor::new(zip_bytes)).unwrap();
    archive.file_names().map(str::to_string).collect()
}
