//! Service configuration: one TOML file, overridable by `SKILLFLOW_*`
//! environment variables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid value for {var}: {reason}")]
    Env { var: String, reason: String },
}

/// Where send-task notifications go besides the in-memory record.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NotificationConfig {
    #[default]
    None,
    /// Append one JSON line per notification.
    File { path: PathBuf },
    /// POST `{subject, body, instanceId}` to the URL.
    Webhook { url: String },
}

impl std::str::FromStr for NotificationConfig {
    type Err = String;

    /// `none`, `file:<path>` or `webhook:<url>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            _ if s == "none" => Ok(NotificationConfig::None),
            Some(("file", path)) if !path.is_empty() => Ok(NotificationConfig::File { path: path.into() }),
            Some(("webhook", url)) => url::Url::parse(url)
                .map(|_| NotificationConfig::Webhook { url: url.to_owned() })
                .map_err(|e| format!("bad webhook url: {e}")),
            _ => Err(format!("expected none, file:<path> or webhook:<url>, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub data_dir: PathBuf,
    pub host: String,
    pub port: u16,
    /// Registry document loaded when the data directory has none yet.
    pub registry: Option<PathBuf>,
    pub notifications: NotificationConfig,
    /// Long-poll window towards skills, in milliseconds.
    pub skill_poll_ms: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            data_dir: PathBuf::from("skillflow-data"),
            host: "127.0.0.1".to_owned(),
            port: 7100,
            registry: None,
            notifications: NotificationConfig::None,
            skill_poll_ms: 1000,
        }
    }
}

impl Config {
    /// Reads `file` (if any) and applies overrides from `env`.
    pub fn load(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Config, ConfigError> {
        let mut config = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
                    path: path.to_owned(),
                    source,
                })?;
                toml::from_str(&text)?
            }
            None => Config::default(),
        };
        for (var, value) in env {
            let Some(key) = var.strip_prefix("SKILLFLOW_") else {
                continue;
            };
            let bad = |reason: String| ConfigError::Env {
                var: var.clone(),
                reason,
            };
            match key {
                "DATA_DIR" => config.data_dir = value.into(),
                "HOST" => config.host = value,
                "PORT" => config.port = value.parse().map_err(|e| bad(format!("{e}")))?,
                "REGISTRY" => config.registry = Some(value.into()),
                "NOTIFICATIONS" => config.notifications = value.parse().map_err(bad)?,
                "SKILL_POLL_MS" => config.skill_poll_ms = value.parse().map_err(|e| bad(format!("{e}")))?,
                _ => {}
            }
        }
        Ok(config)
    }

    pub fn from_env(file: Option<&Path>) -> Result<Config, ConfigError> {
        Config::load(file, std::env::vars())
    }
}
