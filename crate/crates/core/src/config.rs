//! Service configuration: a JSON file plus `SUNRISE_*` environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default = "default_catalog_dir")]
    pub catalog_dir: PathBuf,
    /// JSON list of back-end descriptors; a single local back-end when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backends_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_token: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_level: Option<String>,
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}

fn default_catalog_dir() -> PathBuf {
    PathBuf::from("systems")
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen: default_listen(),
            data_dir: default_data_dir(),
            catalog_dir: default_catalog_dir(),
            backends_file: None,
            auth_token: None,
            log_level: None,
        }
    }
}

impl ServiceConfig {
    /// Reads `path`, then applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?
            }
            None => ServiceConfig::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok());
        Ok(cfg)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) {
        if let Some(v) = var("SUNRISE_LISTEN") {
            self.listen = v;
        }
        if let Some(v) = var("SUNRISE_DATA_DIR") {
            self.data_dir = v.into();
        }
        if let Some(v) = var("SUNRISE_CATALOG_DIR") {
            self.catalog_dir = v.into();
        }
        if let Some(v) = var("SUNRISE_AUTH_TOKEN") {
            self.auth_token = (!v.is_empty()).then_some(v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn file_then_env() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("svc.json");
        std::fs::write(&path, r#"{"listen":"0.0.0.0:9000","data_dir":"/srv/d","log_level":"debug"}"#).unwrap();
        let mut cfg: ServiceConfig = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(cfg.catalog_dir, PathBuf::from("systems"));
        let env = HashMap::from([("SUNRISE_DATA_DIR", "/tmp/x"), ("SUNRISE_AUTH_TOKEN", "s3cret")]);
        cfg.apply_env(|k| env.get(k).map(|v| v.to_string()));
        assert_eq!(cfg.listen, "0.0.0.0:9000");
        assert_eq!(cfg.data_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.auth_token.as_deref(), Some("s3cret"));
        assert_eq!(cfg.log_level.as_deref(), Some("debug"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<ServiceConfig>(r#"{"listen_addr":"x"}"#).is_err());
    }
}
