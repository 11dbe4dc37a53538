use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_LISTEN: &str = "TRAJKD_LISTEN";
pub const ENV_DATA_DIR: &str = "TRAJKD_DATA_DIR";
pub const ENV_MAX_UPLOAD_BYTES: &str = "TRAJKD_MAX_UPLOAD_BYTES";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid value {value:?} for {var}")]
    Env { var: &'static str, value: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// Socket address to bind.
    pub listen: String,
    /// Datasets and sessions are persisted below this directory.
    pub data_dir: PathBuf,
    pub max_upload_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("trajkd-data"),
            max_upload_bytes: 64 * 1024 * 1024,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Reads the optional config file, then applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                Self::from_toml_str(&text)?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = lookup(ENV_LISTEN) {
            self.listen = v;
        }
        if let Some(v) = lookup(ENV_DATA_DIR) {
            self.data_dir = PathBuf::from(v);
        }
        if let Some(v) = lookup(ENV_MAX_UPLOAD_BYTES) {
            self.max_upload_bytes = v.trim().parse().map_err(|_| ConfigError::Env {
                var: ENV_MAX_UPLOAD_BYTES,
                value: v,
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = ServiceConfig::from_toml_str("listen = \"0.0.0.0:9000\"").unwrap();
        assert_eq!(cfg.listen, "0.0.0.0:9000");
        assert_eq!(cfg.max_upload_bytes, ServiceConfig::default().max_upload_bytes);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ServiceConfig::from_toml_str("port = 1").is_err());
    }

    #[test]
    fn environment_overrides_file() {
        let mut cfg = ServiceConfig::from_toml_str("data_dir = \"/a\"\nmax_upload_bytes = 10").unwrap();
        cfg.apply_env(|k| match k {
            ENV_DATA_DIR => Some("/b".into()),
            ENV_MAX_UPLOAD_BYTES => Some("2048".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(cfg.data_dir, PathBuf::from("/b"));
        assert_eq!(cfg.max_upload_bytes, 2048);
        assert!(cfg.apply_env(|k| (k == ENV_MAX_UPLOAD_BYTES).then(|| "lots".into())).is_err());
    }
}
