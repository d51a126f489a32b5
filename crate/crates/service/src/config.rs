use std::net::SocketAddr;
use std::path::PathBuf;

use textgeo::decode::{DEFAULT_BEAM_WIDTH, DEFAULT_TOP_K};
use textgeo::geojson::GeometryOptions;
use thiserror::Error;

pub const ENV_BIND: &str = "TEXTGEO_BIND";
pub const ENV_PARTITION: &str = "TEXTGEO_PARTITION";
pub const ENV_MODEL: &str = "TEXTGEO_MODEL";
pub const ENV_BEAM_WIDTH: &str = "TEXTGEO_BEAM_WIDTH";
pub const ENV_TOP_K: &str = "TEXTGEO_TOP_K";
/// Comma-separated origins; `*` allows any.
pub const ENV_CORS_ORIGINS: &str = "TEXTGEO_CORS_ORIGINS";

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{var}: {message}")]
    Env { var: &'static str, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub partition: PathBuf,
    /// Baseline model or external scores file.
    pub model: PathBuf,
    pub beam_width: usize,
    pub top_k: usize,
    pub cors_origins: Vec<String>,
    pub geometry: GeometryOptions,
}

impl ServiceConfig {
    pub fn new(partition: impl Into<PathBuf>, model: impl Into<PathBuf>) -> Self {
        Self {
            bind: DEFAULT_BIND.parse().expect("valid default address"),
            partition: partition.into(),
            model: model.into(),
            beam_width: DEFAULT_BEAM_WIDTH,
            top_k: DEFAULT_TOP_K,
            cors_origins: Vec::new(),
            geometry: GeometryOptions::default(),
        }
    }

    /// Overrides fields from `TEXTGEO_*` variables found by `lookup`.
    pub fn with_env(mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        fn parse<T: std::str::FromStr>(var: &'static str, raw: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            raw.trim().parse().map_err(|e: T::Err| ConfigError::Env { var, message: e.to_string() })
        }
        if let Some(v) = lookup(ENV_BIND) {
            self.bind = parse(ENV_BIND, &v)?;
        }
        if let Some(v) = lookup(ENV_PARTITION) {
            self.partition = v.into();
        }
        if let Some(v) = lookup(ENV_MODEL) {
            self.model = v.into();
        }
        if let Some(v) = lookup(ENV_BEAM_WIDTH) {
            self.beam_width = parse(ENV_BEAM_WIDTH, &v)?;
        }
        if let Some(v) = lookup(ENV_TOP_K) {
            self.top_k = parse(ENV_TOP_K, &v)?;
        }
        if let Some(v) = lookup(ENV_CORS_ORIGINS) {
            self.cors_origins = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
        }
        Ok(self)
    }

    /// Applies the process environment.
    pub fn with_process_env(self) -> Result<Self, ConfigError> {
        self.with_env(|k| std::env::var(k).ok())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.beam_width == 0 {
            return Err(ConfigError::Invalid("beam width must be at least 1".into()));
        }
        if self.top_k == 0 || self.top_k > self.beam_width {
            return Err(ConfigError::Invalid(format!(
                "top_k must be between 1 and the beam width ({}), got {}",
                self.beam_width, self.top_k
            )));
        }
        Ok(())
    }
}
