use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use hydra_core::store::DEFAULT_RETENTION;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DB_ENV: &str = "HYDRA_DB_PATH";
pub const IMAGE_ROOT_ENV: &str = "HYDRA_IMAGE_ROOT";
pub const LISTEN_ENV: &str = "HYDRA_LISTEN";
pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0} is not set")]
    Missing(&'static str),
    #[error("{name}: {value:?} is not a socket address")]
    BadListen { name: &'static str, value: String },
    #[error("{what} {path} does not exist")]
    MissingPath { what: &'static str, path: PathBuf },
}

/// Refresh intervals suggested to clients, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PollHints {
    pub run_ms: u64,
    pub status_ms: u64,
    pub log_ms: u64,
}

impl Default for PollHints {
    fn default() -> Self {
        PollHints { run_ms: 2_000, status_ms: 30_000, log_ms: 30_000 }
    }
}

#[derive(Debug, Clone)]
pub struct ApiConfig {
    pub listen: SocketAddr,
    /// Store directory, as created by `hydra init-schema`.
    pub db_path: PathBuf,
    pub image_root: PathBuf,
    pub retention: Duration,
    /// Served under `/` when set.
    pub static_dir: Option<PathBuf>,
    pub hints: PollHints,
}

impl ApiConfig {
    pub fn new(db_path: impl Into<PathBuf>, image_root: impl Into<PathBuf>) -> Self {
        ApiConfig {
            listen: DEFAULT_LISTEN.parse().expect("valid default"),
            db_path: db_path.into(),
            image_root: image_root.into(),
            retention: DEFAULT_RETENTION,
            static_dir: None,
            hints: PollHints::default(),
        }
    }

    /// Reads `HYDRA_DB_PATH`, `HYDRA_IMAGE_ROOT` and optionally `HYDRA_LISTEN`.
    pub fn from_env() -> Result<Self, ConfigError> {
        let var = |name| std::env::var_os(name).ok_or(ConfigError::Missing(name));
        let mut cfg = ApiConfig::new(var(DB_ENV)?, var(IMAGE_ROOT_ENV)?);
        if let Ok(listen) = std::env::var(LISTEN_ENV) {
            cfg.listen = listen.parse().map_err(|_| ConfigError::BadListen { name: LISTEN_ENV, value: listen })?;
        }
        Ok(cfg)
    }

    /// Every configured path must exist before the service starts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut paths = vec![("store directory", &self.db_path), ("image root", &self.image_root)];
        if let Some(dir) = &self.static_dir {
            paths.push(("static directory", dir));
        }
        for (what, path) in paths {
            if !path.is_dir() {
                return Err(ConfigError::MissingPath { what, path: path.clone() });
            }
        }
        Ok(())
    }
}
