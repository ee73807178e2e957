//! Minimal client for a container engine's remote HTTP API (Docker Engine
//! API compatible). Speaks HTTP/1.1 over TCP (`http://` / `tcp://`) or a
//! Unix socket (`unix://`), one connection per request.

use std::collections::BTreeMap;
use std::path::PathBuf;

use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::{Method, Request, StatusCode};
use hyper_util::rt::TokioIo;
use serde_json::{json, Value};

pub const DEFAULT_API_VERSION: &str = "v1.43";

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid engine endpoint `{0}`")]
    BadEndpoint(String),
    #[error("cannot reach engine: {0}")]
    Connect(String),
    #[error("engine protocol error: {0}")]
    Protocol(String),
    #[error("engine returned {status}: {message}")]
    Api { status: u16, message: String },
    #[error("image `{0}` not found")]
    NoSuchImage(String),
}

#[derive(Debug, Clone)]
enum Transport {
    Tcp { authority: String },
    Unix { path: PathBuf },
}

#[derive(Debug, Clone)]
pub struct EngineClient {
    endpoint: String,
    transport: Transport,
    api_version: String,
}

/// Parameters for creating one job container.
#[derive(Debug, Clone, Default)]
pub struct ContainerSpec {
    pub image: String,
    pub command: String,
    pub working_dir: Option<String>,
    pub env: Vec<(String, String)>,
    pub labels: BTreeMap<String, String>,
}

fn query_escape(s: &str) -> String {
    form_urlencoded::byte_serialize(s.as_bytes()).collect()
}

impl EngineClient {
    pub fn new(endpoint: &str, api_version: Option<&str>) -> Result<Self, EngineError> {
        let transport = if let Some(path) = endpoint.strip_prefix("unix://") {
            Transport::Unix { path: PathBuf::from(path) }
        } else if let Some(rest) = endpoint.strip_prefix("tcp://").or_else(|| endpoint.strip_prefix("http://")) {
            let authority = rest.trim_end_matches('/').to_string();
            if authority.is_empty() || authority.contains('/') {
                return Err(EngineError::BadEndpoint(endpoint.to_string()));
            }
            Transport::Tcp { authority }
        } else {
            return Err(EngineError::BadEndpoint(endpoint.to_string()));
        };
        let api_version = api_version.unwrap_or(DEFAULT_API_VERSION).trim_start_matches('/').to_string();
        Ok(EngineClient { endpoint: endpoint.to_string(), transport, api_version })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    async fn request(
        &self,
        method: Method,
        path_and_query: &str,
        body: Option<(&str, Bytes)>,
    ) -> Result<(StatusCode, Bytes), EngineError> {
        let uri = format!("/{}{}", self.api_version, path_and_query);
        let host = match &self.transport {
            Transport::Tcp { authority } => authority.clone(),
            Transport::Unix { .. } => "localhost".to_string(),
        };
        let mut builder = Request::builder().method(method).uri(&uri).header(hyper::header::HOST, host);
        let payload = match body {
            Some((content_type, bytes)) => {
                builder = builder.header(hyper::header::CONTENT_TYPE, content_type);
                bytes
            }
            None => Bytes::new(),
        };
        let req = builder
            .body(Full::new(payload))
            .map_err(|e| EngineError::Protocol(e.to_string()))?;

        let resp = match &self.transport {
            Transport::Tcp { authority } => {
                let stream = tokio::net::TcpStream::connect(authority)
                    .await
                    .map_err(|e| EngineError::Connect(format!("{authority}: {e}")))?;
                send(TokioIo::new(stream), req).await?
            }
            Transport::Unix { path } => {
                let stream = tokio::net::UnixStream::connect(path)
                    .await
                    .map_err(|e| EngineError::Connect(format!("{}: {e}", path.display())))?;
                send(TokioIo::new(stream), req).await?
            }
        };
        Ok(resp)
    }

    async fn expect(
        &self,
        method: Method,
        path: &str,
        body: Option<(&str, Bytes)>,
        ok: &[u16],
    ) -> Result<Bytes, EngineError> {
        let (status, bytes) = self.request(method, path, body).await?;
        if ok.contains(&status.as_u16()) {
            Ok(bytes)
        } else {
            Err(api_error(status, &bytes))
        }
    }

    pub async fn ping(&self) -> Result<(), EngineError> {
        self.expect(Method::GET, "/_ping", None, &[200]).await.map(|_| ())
    }

    pub async fn create_container(&self, spec: &ContainerSpec) -> Result<String, EngineError> {
        let mut body = json!({
            "Image": spec.image,
            "Cmd": ["sh", "-c", spec.command],
            "Env": spec.env.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>(),
            "Labels": spec.labels,
            "Tty": false,
            "AttachStdin": false,
            "AttachStdout": false,
            "AttachStderr": false,
            "OpenStdin": false,
        });
        if let Some(dir) = &spec.working_dir {
            body["WorkingDir"] = Value::String(dir.clone());
        }
        let (status, bytes) = self
            .request(Method::POST, "/containers/create", Some(("application/json", Bytes::from(body.to_string()))))
            .await?;
        match status.as_u16() {
            200 | 201 => {
                let v: Value = serde_json::from_slice(&bytes).map_err(|e| EngineError::Protocol(e.to_string()))?;
                v["Id"]
                    .as_str()
                    .map(str::to_string)
                    .ok_or_else(|| EngineError::Protocol("create response lacks Id".into()))
            }
            404 => Err(EngineError::NoSuchImage(spec.image.clone())),
            _ => Err(api_error(status, &bytes)),
        }
    }

    pub async fn pull_image(&self, image: &str) -> Result<(), EngineError> {
        let path = format!("/images/create?fromImage={}", query_escape(image));
        let bytes = self.expect(Method::POST, &path, None, &[200]).await?;
        // Progress is streamed as JSON lines; failures arrive in-band.
        for line in bytes.split(|b| *b == b'\n').filter(|l| !l.is_empty()) {
            if let Ok(v) = serde_json::from_slice::<Value>(line) {
                if let Some(err) = v.get("error").and_then(Value::as_str) {
                    return Err(EngineError::Api { status: 200, message: err.to_string() });
                }
            }
        }
        Ok(())
    }

    pub async fn working_dir(&self, id: &str) -> Result<String, EngineError> {
        let bytes = self.expect(Method::GET, &format!("/containers/{id}/json"), None, &[200]).await?;
        let v: Value = serde_json::from_slice(&bytes).map_err(|e| EngineError::Protocol(e.to_string()))?;
        let dir = v["Config"]["WorkingDir"].as_str().unwrap_or("");
        Ok(if dir.is_empty() { "/".to_string() } else { dir.to_string() })
    }

    pub async fn put_archive(&self, id: &str, path: &str, tar: Vec<u8>) -> Result<(), EngineError> {
        let p = format!("/containers/{id}/archive?path={}", query_escape(path));
        self.expect(Method::PUT, &p, Some(("application/x-tar", Bytes::from(tar))), &[200])
            .await
            .map(|_| ())
    }

    /// Returns `None` when the path does not exist in the container.
    pub async fn get_archive(&self, id: &str, path: &str) -> Result<Option<Bytes>, EngineError> {
        let p = format!("/containers/{id}/archive?path={}", query_escape(path));
        let (status, bytes) = self.request(Method::GET, &p, None).await?;
        match status.as_u16() {
            200 => Ok(Some(bytes)),
            404 => Ok(None),
            _ => Err(api_error(status, &bytes)),
        }
    }

    pub async fn start(&self, id: &str) -> Result<(), EngineError> {
        self.expect(Method::POST, &format!("/containers/{id}/start"), None, &[204, 304]).await.map(|_| ())
    }

    /// Blocks until the container exits and returns its exit code.
    pub async fn wait(&self, id: &str) -> Result<i32, EngineError> {
        let bytes = self.expect(Method::POST, &format!("/containers/{id}/wait"), None, &[200]).await?;
        let v: Value = serde_json::from_slice(&bytes).map_err(|e| EngineError::Protocol(e.to_string()))?;
        if let Some(msg) = v["Error"]["Message"].as_str().filter(|m| !m.is_empty()) {
            return Err(EngineError::Api { status: 200, message: msg.to_string() });
        }
        v["StatusCode"]
            .as_i64()
            .map(|c| c as i32)
            .ok_or_else(|| EngineError::Protocol("wait response lacks StatusCode".into()))
    }

    pub async fn kill(&self, id: &str) -> Result<(), EngineError> {
        // 409: already stopped.
        self.expect(Method::POST, &format!("/containers/{id}/kill"), None, &[204, 409]).await.map(|_| ())
    }

    pub async fn logs(&self, id: &str) -> Result<Vec<u8>, EngineError> {
        let bytes = self
            .expect(Method::GET, &format!("/containers/{id}/logs?stdout=1&stderr=1"), None, &[200])
            .await?;
        Ok(demux_logs(&bytes))
    }

    pub async fn remove(&self, id: &str) -> Result<(), EngineError> {
        self.expect(Method::DELETE, &format!("/containers/{id}?force=1&v=1"), None, &[204, 404])
            .await
            .map(|_| ())
    }
}

async fn send<T>(io: TokioIo<T>, req: Request<Full<Bytes>>) -> Result<(StatusCode, Bytes), EngineError>
where
    T: tokio::io::AsyncRead + tokio::io::AsyncWrite + Unpin + Send + 'static,
{
    let (mut sender, conn) = hyper::client::conn::http1::handshake(io)
        .await
        .map_err(|e| EngineError::Connect(e.to_string()))?;
    tokio::spawn(async move {
        let _ = conn.await;
    });
    let resp = sender.send_request(req).await.map_err(|e| EngineError::Protocol(e.to_string()))?;
    let status = resp.status();
    let body = resp
        .into_body()
        .collect()
        .await
        .map_err(|e| EngineError::Protocol(e.to_string()))?
        .to_bytes();
    Ok((status, body))
}

fn api_error(status: StatusCode, body: &[u8]) -> EngineError {
    let message = serde_json::from_slice::<Value>(body)
        .ok()
        .and_then(|v| v.get("message").and_then(Value::as_str).map(str::to_string))
        .unwrap_or_else(|| String::from_utf8_lossy(body).trim().to_string());
    EngineError::Api { status: status.as_u16(), message }
}

/// Splits the engine's multiplexed stdout/stderr framing back into one
/// byte stream in arrival order. Non-multiplexed (TTY) output passes
/// through unchanged.
pub fn demux_logs(raw: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(raw.len());
    let mut rest = raw;
    while !rest.is_empty() {
        if rest.len() < 8 || rest[0] > 2 || rest[1..4] != [0, 0, 0] {
            out.extend_from_slice(rest);
            break;
        }
        let len = u32::from_be_bytes([rest[4], rest[5], rest[6], rest[7]]) as usize;
        let end = (8 + len).min(rest.len());
        out.extend_from_slice(&rest[8..end]);
        rest = &rest[end..];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(stream: u8, payload: &[u8]) -> Vec<u8> {
        let mut v = vec![stream, 0, 0, 0];
        v.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn demux_interleaves_in_order() {
        let mut raw = frame(1, b"hi\n");
        raw.extend(frame(2, b"oops\n"));
        raw.extend(frame(1, b"bye\n"));
        assert_eq!(demux_logs(&raw), b"hi\noops\nbye\n");
        assert_eq!(demux_logs(b"plain tty output"), b"plain tty output");
        assert_eq!(demux_logs(b""), b"");
    }

    #[test]
    fn endpoint_parsing() {
        assert!(EngineClient::new("unix:///var/run/docker.sock", None).is_ok());
        assert!(EngineClient::new("tcp://127.0.0.1:2375", Some("v1.41")).is_ok());
        assert!(EngineClient::new("http://engine:2375/", None).is_ok());
        assert!(EngineClient::new("ftp://x", None).is_err());
        assert!(EngineClient::new("http://host/path", None).is_err());
    }
}
