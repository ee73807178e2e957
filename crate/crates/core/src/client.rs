//! Async client for the evaluation API.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use reqwest::{Method, Url};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use crate::experiment::{Experiment, ExperimentId, ExperimentState, ExperimentSummary};
use crate::manager::{CreateRequest, RunRequest, StatusResponse, SystemSummary};
use crate::sysdef::{parse_sysdef, SysDef, SystemRef};

pub const DEFAULT_ENDPOINT: &str = "http://127.0.0.1:8080";

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("cannot reach {endpoint}: {reason}")]
    Connection { endpoint: String, reason: String },
    #[error("{code}: {message}")]
    Api { status: u16, code: String, message: String, detail: Option<Value> },
    #[error("unexpected response: {0}")]
    Protocol(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl ClientError {
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api { code, .. } => Some(code),
            _ => None,
        }
    }
}

/// Outcome of waiting for a job to settle.
#[derive(Debug)]
pub enum WaitOutcome {
    Settled(StatusResponse),
    TimedOut(StatusResponse),
}

#[derive(Debug, Clone)]
pub struct Client {
    base: Url,
    http: reqwest::Client,
    token: Option<String>,
    user: Option<String>,
}

impl Client {
    pub fn new(endpoint: &str) -> Result<Self, ClientError> {
        let base = Url::parse(endpoint).map_err(|e| ClientError::Connection {
            endpoint: endpoint.to_string(),
            reason: format!("invalid endpoint URL: {e}"),
        })?;
        if base.cannot_be_a_base() {
            return Err(ClientError::Connection { endpoint: endpoint.into(), reason: "invalid endpoint URL".into() });
        }
        Ok(Client { base, http: reqwest::Client::new(), token: None, user: None })
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token.filter(|t| !t.is_empty());
        self
    }

    pub fn with_user(mut self, user: Option<String>) -> Self {
        self.user = user;
        self
    }

    pub fn endpoint(&self) -> &str {
        self.base.as_str()
    }

    fn url(&self, segments: &[&str]) -> Url {
        let mut url = self.base.clone();
        {
            let mut path = url.path_segments_mut().expect("base URL checked in new");
            path.pop_if_empty();
            path.push("v1");
            path.extend(segments);
        }
        url
    }

    fn request(&self, method: Method, url: Url) -> reqwest::RequestBuilder {
        let mut rb = self.http.request(method, url);
        if let Some(t) = &self.token {
            rb = rb.bearer_auth(t);
        }
        if let Some(u) = &self.user {
            rb = rb.header(crate::evalapi::USER_HEADER, u);
        }
        rb
    }

    async fn send(&self, rb: reqwest::RequestBuilder) -> Result<reqwest::Response, ClientError> {
        let resp = rb.send().await.map_err(|e| ClientError::Connection {
            endpoint: self.base.to_string(),
            reason: e.to_string(),
        })?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status().as_u16();
        let body: Value = resp.json().await.unwrap_or(Value::Null);
        match (body["code"].as_str(), body["message"].as_str()) {
            (Some(code), Some(message)) => Err(ClientError::Api {
                status,
                code: code.to_string(),
                message: message.to_string(),
                detail: body.get("detail").cloned(),
            }),
            _ => Err(ClientError::Protocol(format!("HTTP {status} without an error body"))),
        }
    }

    async fn json<T: DeserializeOwned>(&self, rb: reqwest::RequestBuilder) -> Result<T, ClientError> {
        let resp = self.send(rb).await?;
        resp.json().await.map_err(|e| ClientError::Protocol(e.to_string()))
    }

    pub async fn systems(&self) -> Result<Vec<SystemSummary>, ClientError> {
        self.json(self.request(Method::GET, self.url(&["systems"]))).await
    }

    pub async fn system(&self, system: &SystemRef) -> Result<SysDef, ClientError> {
        let resp = self.send(self.request(Method::GET, self.url(&["systems", &system.name, &system.version]))).await?;
        let text = resp.text().await.map_err(|e| ClientError::Protocol(e.to_string()))?;
        parse_sysdef(&text).map_err(|e| ClientError::Protocol(e.to_string()))
    }

    pub async fn create(&self, req: &CreateRequest) -> Result<ExperimentId, ClientError> {
        let body: Value = self.json(self.request(Method::POST, self.url(&["session"])).json(req)).await?;
        body["experiment_id"]
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ClientError::Protocol(format!("no experiment id in {body}")))
    }

    pub async fn list(
        &self,
        creator: Option<&str>,
        status: Option<ExperimentState>,
    ) -> Result<Vec<ExperimentSummary>, ClientError> {
        let mut url = self.url(&["session"]);
        {
            let mut q = url.query_pairs_mut();
            if let Some(c) = creator {
                q.append_pair("creator", c);
            }
            if let Some(s) = status {
                q.append_pair("status", s.as_str());
            }
        }
        if url.query() == Some("") {
            url.set_query(None);
        }
        self.json(self.request(Method::GET, url)).await
    }

    pub async fn experiment(&self, id: ExperimentId) -> Result<Experiment, ClientError> {
        self.json(self.request(Method::GET, self.url(&["session", &id.to_string()]))).await
    }

    pub async fn set_parameters(&self, id: ExperimentId, overrides: &BTreeMap<String, Value>) -> Result<Value, ClientError> {
        let url = self.url(&["session", &id.to_string(), "parameters"]);
        self.json(self.request(Method::PATCH, url).json(overrides)).await
    }

    pub async fn upload_bytes(&self, id: ExperimentId, name: &str, filename: &str, bytes: Vec<u8>) -> Result<(), ClientError> {
        let part = reqwest::multipart::Part::bytes(bytes).file_name(filename.to_string());
        let form = reqwest::multipart::Form::new().text("name", name.to_string()).part("file", part);
        let url = self.url(&["session", &id.to_string(), "parameter"]);
        self.send(self.request(Method::POST, url).multipart(form)).await?;
        Ok(())
    }

    pub async fn upload(&self, id: ExperimentId, name: &str, file: &Path) -> Result<(), ClientError> {
        let bytes = tokio::fs::read(file).await?;
        let filename = file.file_name().and_then(|n| n.to_str()).unwrap_or(name).to_string();
        self.upload_bytes(id, name, &filename, bytes).await
    }

    /// Returns the status reported by the server (`building`, or `built`
    /// for systems without a build step).
    pub async fn build(&self, id: ExperimentId, timeout_s: Option<f64>) -> Result<ExperimentState, ClientError> {
        let url = self.url(&["session", &id.to_string(), "build"]);
        let body = match timeout_s {
            Some(t) => json!({ "timeout_s": t }),
            None => json!({}),
        };
        let v: Value = self.json(self.request(Method::POST, url).json(&body)).await?;
        serde_json::from_value(v["status"].clone()).map_err(|e| ClientError::Protocol(e.to_string()))
    }

    pub async fn run(&self, id: ExperimentId, req: &RunRequest) -> Result<(), ClientError> {
        let url = self.url(&["session", &id.to_string(), "run"]);
        self.send(self.request(Method::POST, url).json(req)).await?;
        Ok(())
    }

    pub async fn status(&self, id: ExperimentId) -> Result<StatusResponse, ClientError> {
        self.json(self.request(Method::GET, self.url(&["session", &id.to_string(), "status"]))).await
    }

    /// Polls until the experiment is neither building nor running.
    pub async fn wait(&self, id: ExperimentId, interval: Duration, limit: Option<Duration>) -> Result<WaitOutcome, ClientError> {
        let start = Instant::now();
        loop {
            let st = self.status(id).await?;
            if !st.status.is_busy() {
                return Ok(WaitOutcome::Settled(st));
            }
            if limit.is_some_and(|l| start.elapsed() >= l) {
                return Ok(WaitOutcome::TimedOut(st));
            }
            tokio::time::sleep(interval).await;
        }
    }

    pub async fn result(&self, id: ExperimentId, name: &str) -> Result<Vec<u8>, ClientError> {
        let url = self.url(&["session", &id.to_string(), "result", name]);
        let resp = self.send(self.request(Method::GET, url)).await?;
        Ok(resp.bytes().await.map_err(|e| ClientError::Protocol(e.to_string()))?.to_vec())
    }

    async fn download(&self, url: Url, out: &Path) -> Result<u64, ClientError> {
        use tokio::io::AsyncWriteExt;
        let mut resp = self.send(self.request(Method::GET, url)).await?;
        let mut file = tokio::fs::File::create(out).await?;
        let mut n = 0u64;
        while let Some(chunk) = resp.chunk().await.map_err(|e| ClientError::Protocol(e.to_string()))? {
            file.write_all(&chunk).await?;
            n += chunk.len() as u64;
        }
        file.flush().await?;
        Ok(n)
    }

    pub async fn result_to_file(&self, id: ExperimentId, name: &str, out: &Path) -> Result<u64, ClientError> {
        self.download(self.url(&["session", &id.to_string(), "result", name]), out).await
    }

    pub async fn log(&self, id: ExperimentId) -> Result<String, ClientError> {
        let resp = self.send(self.request(Method::GET, self.url(&["session", &id.to_string(), "log"]))).await?;
        resp.text().await.map_err(|e| ClientError::Protocol(e.to_string()))
    }

    pub async fn archive(&self, id: ExperimentId) -> Result<Value, ClientError> {
        self.json(self.request(Method::POST, self.url(&["session", &id.to_string(), "archive"]))).await
    }

    pub async fn archive_to_file(&self, id: ExperimentId, out: &Path) -> Result<u64, ClientError> {
        self.download(self.url(&["session", &id.to_string(), "archive"]), out).await
    }

    pub async fn delete(&self, id: ExperimentId) -> Result<(), ClientError> {
        self.send(self.request(Method::DELETE, self.url(&["session", &id.to_string()]))).await?;
        Ok(())
    }

    /// Raw GET relative to `/v1`, for callers that need headers or status.
    pub async fn get_raw(&self, segments: &[&str]) -> Result<reqwest::Response, ClientError> {
        self.request(Method::GET, self.url(segments)).send().await.map_err(|e| ClientError::Connection {
            endpoint: self.base.to_string(),
            reason: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn urls_encode_segments() {
        let c = Client::new("http://h:1/prefix/").unwrap();
        let u = c.url(&["systems", "AGRA RISC-V", "1.0"]);
        assert_eq!(u.as_str(), "http://h:1/prefix/v1/systems/AGRA%20RISC-V/1.0");
        let c = Client::new("http://h:1").unwrap();
        assert_eq!(c.url(&["session"]).as_str(), "http://h:1/v1/session");
        assert!(Client::new("not a url").is_err());
    }
}
