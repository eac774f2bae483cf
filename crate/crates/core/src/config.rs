//! TOML configuration file.
//!
//! ```toml
//! [provider]
//! kind = "mock"
//!
//! [mediation]
//! turns_per_intervention = 8
//! similarity_threshold = 0.85
//!
//! [server]
//! listen = "127.0.0.1:7400"
//! ws_listen = "127.0.0.1:7401"
//! ```
//!
//! Every section and key is optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::ProviderConfig;
use crate::hub::HubConfig;
use crate::model::MediationConfig;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSettings {
    pub listen: String,
    /// WebSocket listener for browser clients; off when unset.
    pub ws_listen: Option<String>,
    pub auto_create_rooms: bool,
    pub outbound_capacity: usize,
    /// Seconds between keepalive pings.
    pub ping_interval_secs: u64,
    pub event_log: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
}

impl Default for ServerSettings {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:7400".into(),
            ws_listen: None,
            auto_create_rooms: true,
            outbound_capacity: 256,
            ping_interval_secs: 30,
            event_log: None,
            templates_dir: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub provider: ProviderConfig,
    pub mediation: MediationConfig,
    pub server: ServerSettings,
}

impl AppConfig {
    pub fn parse(source: &str, origin: &str) -> Result<Self, LoadError> {
        let invalid = |message: String| LoadError::Invalid { path: origin.to_string(), message };
        let config: AppConfig = toml::from_str(source).map_err(|e| invalid(e.to_string()))?;
        config.mediation.validate().map_err(|e| invalid(e.to_string()))?;
        config.provider.validate().map_err(|e| invalid(e.to_string()))?;
        if config.server.outbound_capacity == 0 {
            return Err(invalid("outbound_capacity must be at least 1".into()));
        }
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LoadError> {
        let path = path.as_ref();
        let source = std::fs::read_to_string(path)
            .map_err(|source| LoadError::Io { path: path.display().to_string(), source })?;
        Self::parse(&source, &path.display().to_string())
    }

    pub fn hub_config(&self) -> HubConfig {
        HubConfig {
            mediation: self.mediation.clone(),
            auto_create_rooms: self.server.auto_create_rooms,
            outbound_capacity: self.server.outbound_capacity,
        }
    }
}
