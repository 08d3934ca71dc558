use std::path::{Path, PathBuf};

use fedsilo_core::{DataLoaderSpec, PrivacyConfig};
use serde::{Deserialize, Serialize};

use crate::AgentError;

fn default_heartbeat() -> f64 {
    5.0
}
fn default_poll_wait() -> f64 {
    30.0
}

/// On-disk agent configuration. Written by `agent register`, read by
/// `agent run`. Holds the agent token, so it is saved owner-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub server_url: String,
    pub endpoint_id: String,
    pub agent_token: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub federation_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Local training data. Relative paths are taken from the config file's
    /// directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataLoaderSpec>,
    /// A site-wide privacy floor: tasks never get weaker protection than
    /// this, whatever the experiment asks for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_privacy: Option<PrivacyConfig>,
    #[serde(default = "default_heartbeat")]
    pub heartbeat_interval_s: f64,
    #[serde(default = "default_poll_wait")]
    pub poll_wait_s: f64,
    /// Extra seconds spent on every train task, to emulate a slower site.
    #[serde(default)]
    pub throttle_s: f64,
}

impl AgentConfig {
    pub fn new(server_url: &str, endpoint_id: &str, agent_token: &str) -> Self {
        Self {
            server_url: server_url.to_string(),
            endpoint_id: endpoint_id.to_string(),
            agent_token: agent_token.to_string(),
            federation_id: None,
            name: None,
            data: None,
            local_privacy: None,
            heartbeat_interval_s: default_heartbeat(),
            poll_wait_s: default_poll_wait(),
            throttle_s: 0.0,
        }
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(path).map_err(|source| AgentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: AgentConfig = serde_json::from_str(&text)
            .map_err(|e| AgentError::Config(format!("{}: {e}", path.display())))?;
        if let (Some(data), Some(dir)) = (cfg.data.as_mut(), path.parent()) {
            data.resolve_paths(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.heartbeat_interval_s) {
            return Err(AgentError::Config("heartbeat_interval_s must be positive".into()));
        }
        if !(self.poll_wait_s.is_finite() && self.poll_wait_s >= 0.0) {
            return Err(AgentError::Config("poll_wait_s must be non-negative".into()));
        }
        if !(self.throttle_s.is_finite() && self.throttle_s >= 0.0) {
            return Err(AgentError::Config("throttle_s must be non-negative".into()));
        }
        if let Some(p) = &self.local_privacy {
            p.validate()
                .map_err(|e| AgentError::Config(format!("local_privacy: {e}")))?;
        }
        Ok(())
    }

    /// Writes the config with owner-only permissions.
    pub fn save(&self, path: &Path) -> Result<(), AgentError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        write_private(path, text.as_bytes())
    }
}

/// Writes `bytes` to `path`, readable and writable by the owner only.
pub fn write_private(path: &Path, bytes: &[u8]) -> Result<(), AgentError> {
    let io = |source| AgentError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp: PathBuf = path.with_extension("tmp");
    {
        use std::io::Write;
        let mut options = std::fs::OpenOptions::new();
        options.write(true).create(true).truncate(true);
        #[cfg(unix)]
        {
            use std::os::unix::fs::OpenOptionsExt;
            options.mode(0o600);
        }
        let mut file = options.open(&tmp).map_err(io)?;
        file.write_all(bytes).map_err(io)?;
        file.sync_all().map_err(io)?;
    }
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(&tmp, std::fs::Permissions::from_mode(0o600)).map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = AgentConfig::new("http://127.0.0.1:1", "ep", "fs_x");
        cfg.data = Some(DataLoaderSpec::mnist_idx("imgs.idx", "labels.idx"));
        let path = dir.path().join("agent.json");
        cfg.save(&path).unwrap();
        let loaded = AgentConfig::load(&path).unwrap();
        let data = loaded.data.unwrap();
        assert_eq!(data.train_images.unwrap(), dir.path().join("imgs.idx"));
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            let mode = std::fs::metadata(&path).unwrap().permissions().mode();
            assert_eq!(mode & 0o777, 0o600);
        }
    }

    #[test]
    fn unknown_fields_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        std::fs::write(
            &path,
            r#"{"server_url":"x","endpoint_id":"e","agent_token":"t","bogus":1}"#,
        )
        .unwrap();
        assert!(matches!(AgentConfig::load(&path), Err(AgentError::Config(_))));
    }
}
