//! Service configuration: one TOML file, then `ADVLOOP_*` environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DEFAULT_QUORUM, DEFAULT_SPAN_F1_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Annotator,
    Validator,
    Owner,
}

/// A static account. Desk-scale deployments seed these from the config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedUser {
    pub id: String,
    pub secret: String,
    pub roles: Vec<Role>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    /// JSON snapshot location; in-memory when unset.
    pub storage_path: Option<PathBuf>,
    /// Salt for public leaderboard handles. Random per process when unset.
    pub salt: Option<String>,
    pub default_span_f1_threshold: f64,
    pub default_quorum: u32,
    pub session_ttl_secs: u64,
    pub users: Vec<SeedUser>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1".into(),
            port: 8080,
            storage_path: None,
            salt: None,
            default_span_f1_threshold: DEFAULT_SPAN_F1_THRESHOLD,
            default_quorum: DEFAULT_QUORUM,
            session_ttl_secs: 24 * 3600,
            users: Vec::new(),
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Reads the file (if any) and applies the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = match path {
            Some(p) => Self::from_toml(&std::fs::read_to_string(p)?)?,
            None => ServiceConfig::default(),
        };
        config.apply_env(std::env::vars())?;
        Ok(config)
    }

    pub fn apply_env<I>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{key}={value:?} does not parse")))
        }
        for (key, value) in vars {
            match key.as_str() {
                "ADVLOOP_BIND" => self.bind = value,
                "ADVLOOP_PORT" => self.port = parse(&key, &value)?,
                "ADVLOOP_STORAGE_PATH" => self.storage_path = Some(value.into()),
                "ADVLOOP_SALT" => self.salt = Some(value),
                "ADVLOOP_SPAN_F1_THRESHOLD" => self.default_span_f1_threshold = parse(&key, &value)?,
                "ADVLOOP_QUORUM" => self.default_quorum = parse(&key, &value)?,
                "ADVLOOP_SESSION_TTL_SECS" => self.session_ttl_secs = parse(&key, &value)?,
                _ => {}
            }
        }
        if !(0.0..=1.0).contains(&self.default_span_f1_threshold) {
            return Err(Error::InvalidConfig("default span F1 threshold must lie in [0, 1]".into()));
        }
        if self.default_quorum == 0 {
            return Err(Error::InvalidConfig("default quorum must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_env() {
        let mut cfg = ServiceConfig::from_toml(
            r#"
            port = 9000
            default_quorum = 5

            [[users]]
            id = "owner"
            secret = "s3cret"
            roles = ["owner"]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.port, 9000);
        assert_eq!(cfg.default_span_f1_threshold, 0.4);
        assert_eq!(cfg.users[0].roles, vec![Role::Owner]);

        cfg.apply_env([
            ("ADVLOOP_PORT".to_string(), "9100".to_string()),
            ("ADVLOOP_SALT".to_string(), "pepper".to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ])
        .unwrap();
        assert_eq!(cfg.port, 9100);
        assert_eq!(cfg.salt.as_deref(), Some("pepper"));
        assert_eq!(cfg.default_quorum, 5);
    }

    #[test]
    fn bad_env_values() {
        let mut cfg = ServiceConfig::default();
        assert!(cfg.apply_env([("ADVLOOP_PORT".into(), "many".into())]).is_err());
        let mut cfg = ServiceConfig::default();
        assert!(cfg
            .apply_env([("ADVLOOP_SPAN_F1_THRESHOLD".into(), "1.5".into())])
            .is_err());
    }
}
