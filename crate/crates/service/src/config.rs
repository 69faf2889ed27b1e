use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::ApiError;

pub const ENV_HOST: &str = "SURROGATE_HOST";
pub const ENV_PORT: &str = "SURROGATE_PORT";
pub const ENV_CHECKPOINT_DIR: &str = "SURROGATE_CHECKPOINT_DIR";
pub const ENV_IDLE_TIMEOUT: &str = "SURROGATE_IDLE_TIMEOUT_SECS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    /// Every `*.ckpt` file here is registered at startup.
    pub checkpoint_dir: Option<PathBuf>,
    /// Sessions untouched for this long are dropped (running ones are kept).
    pub idle_timeout_secs: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            checkpoint_dir: None,
            idle_timeout_secs: 30 * 60,
        }
    }
}

impl ServiceConfig {
    pub fn from_file(path: &Path) -> Result<Self, ApiError> {
        let text = std::fs::read_to_string(path).map_err(|e| ApiError::BadRequest(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| ApiError::BadRequest(format!("{}: {e}", path.display())))
    }

    /// Applies `SURROGATE_*` overrides from `vars`.
    pub fn with_env<I, K, V>(mut self, vars: I) -> Result<Self, ApiError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (k, v) in vars {
            let (k, v) = (k.as_ref(), v.as_ref());
            let bad = |e: String| ApiError::BadRequest(format!("{k}={v}: {e}"));
            match k {
                ENV_HOST => self.host = v.to_string(),
                ENV_PORT => self.port = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                ENV_CHECKPOINT_DIR => self.checkpoint_dir = Some(PathBuf::from(v)),
                ENV_IDLE_TIMEOUT => {
                    self.idle_timeout_secs = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?
                }
                _ => {}
            }
        }
        Ok(self)
    }

    pub fn from_process_env(self) -> Result<Self, ApiError> {
        self.with_env(std::env::vars())
    }

    pub fn idle_timeout(&self) -> Duration {
        Duration::from_secs(self.idle_timeout_secs)
    }
}
