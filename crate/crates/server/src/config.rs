//! Server configuration.
//!
//! Sources, lowest precedence first: the TOML file, `CARE_*` environment
//! variables, command line flags. The last two are merged by the CLI layer
//! into a [`ConfigOverrides`].
//!
//! ```toml
//! listen_addr = "127.0.0.1:8080"
//! data_dir = "./care-data"
//! broker_token = "change-me"
//! session_secret = "pepper"          # optional, mixed into password hashes
//! consent_text_path = "consent.txt"  # optional
//! assist_timeout_secs = 30
//! behavior_logging_default = false
//!
//! [[label_sets]]
//! labelset_id = "review"
//! name = "Peer review"
//! labels = [
//!   { label_id = "strength", display_name = "Strength", color = "#2e7d32" },
//!   { label_id = "weakness", display_name = "Weakness", color = "#c62828" },
//! ]
//! ```

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use care_core::model::LabelSet;
use serde::Deserialize;

pub const DEFAULT_CONSENT_TEXT: &str = "\
By registering you agree that the commentaries you create are stored on this
server and may be exported for research. Behavioral logging (page views,
clicks, commentary edits) happens only if you opt in separately, and exported
data replaces your username with a pseudonym. Uploaded documents remain under
their original license and are not included in exports unless the operator
requests it.
";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config file {path}: {source}")]
    Parse { path: PathBuf, source: Box<toml::de::Error> },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub listen_addr: SocketAddr,
    pub data_dir: PathBuf,
    pub broker_token: String,
    pub session_secret: String,
    pub label_sets: Vec<LabelSet>,
    pub consent_text_path: Option<PathBuf>,
    pub assist_timeout_secs: u64,
    pub behavior_logging_default: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen_addr: SocketAddr::from(([127, 0, 0, 1], 8080)),
            data_dir: PathBuf::from("care-data"),
            broker_token: String::new(),
            session_secret: String::new(),
            label_sets: Vec::new(),
            consent_text_path: None,
            assist_timeout_secs: 30,
            behavior_logging_default: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub listen_addr: Option<SocketAddr>,
    pub data_dir: Option<PathBuf>,
    pub broker_token: Option<String>,
    pub session_secret: Option<String>,
    pub consent_text_path: Option<PathBuf>,
    pub assist_timeout_secs: Option<u64>,
    pub behavior_logging_default: Option<bool>,
}

impl ServerConfig {
    /// Reads `path` if given, then applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: ConfigOverrides) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.into(), source })?;
                Self::parse(&text).map_err(|source| ConfigError::Parse { path: p.into(), source: Box::new(source) })?
            }
            None => Self::default(),
        };
        let o = overrides;
        if let Some(v) = o.listen_addr {
            cfg.listen_addr = v;
        }
        if let Some(v) = o.data_dir {
            cfg.data_dir = v;
        }
        if let Some(v) = o.broker_token {
            cfg.broker_token = v;
        }
        if let Some(v) = o.session_secret {
            cfg.session_secret = v;
        }
        if let Some(v) = o.consent_text_path {
            cfg.consent_text_path = Some(v);
        }
        if let Some(v) = o.assist_timeout_secs {
            cfg.assist_timeout_secs = v;
        }
        if let Some(v) = o.behavior_logging_default {
            cfg.behavior_logging_default = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Checks shared by every command. `serve` additionally calls
    /// [`ServerConfig::validate_serve`].
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.assist_timeout_secs == 0 {
            return Err(ConfigError::Invalid("assist_timeout_secs must be positive".into()));
        }
        for ls in &self.label_sets {
            if !ls.is_well_formed() || ls.labelset_id.as_str().is_empty() {
                return Err(ConfigError::Invalid(format!("label set {:?} is malformed", ls.labelset_id.as_str())));
            }
        }
        Ok(())
    }

    pub fn validate_serve(&self) -> Result<(), ConfigError> {
        if self.broker_token.trim().is_empty() {
            return Err(ConfigError::Invalid("broker_token is required to serve".into()));
        }
        Ok(())
    }

    pub fn consent_text(&self) -> Result<String, ConfigError> {
        match &self.consent_text_path {
            Some(p) => fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.clone(), source }),
            None => Ok(DEFAULT_CONSENT_TEXT.into()),
        }
    }

    pub fn assist_timeout_ms(&self) -> u64 {
        self.assist_timeout_secs.saturating_mul(1000)
    }
}
