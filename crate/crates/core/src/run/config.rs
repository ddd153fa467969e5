//! Run configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::{EnvConfig, EnvSpec};
use crate::sacd::AgentConfig;
use crate::shaping::ComponentSpec;

use super::RunError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Gradient steps between evaluations.
    pub period: u64,
    pub episodes: usize,
    /// Replay states per influence snapshot (0 disables snapshots).
    pub probe_states: usize,
    /// Gradient steps per metric record; evaluations add records of their own.
    pub log_period: u64,
    /// Gradient steps between checkpoints (0: only the first and last).
    pub checkpoint_period: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            period: 1000,
            episodes: 10,
            probe_states: 64,
            log_period: 100,
            checkpoint_period: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Gradient steps to train for.
    pub total_steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub env: EnvConfig,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Defaults to every environment component at weight 1, unconstrained.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<ComponentSpec>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, RunError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            RunError::Config(msg) => RunError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String, RunError> {
        toml::to_string(self).map_err(|e| RunError::Config(e.to_string()))
    }

    /// SHA-256 of the serialised config.
    pub fn hash(&self) -> Result<[u8; 32], RunError> {
        Ok(Sha256::digest(self.to_toml_string()?.as_bytes()).into())
    }

    pub fn env_spec(&self) -> Result<EnvSpec, RunError> {
        Ok(self.env.build()?.spec())
    }

    /// Component list with defaults filled in from the environment.
    pub fn resolved_components(&self) -> Result<Vec<ComponentSpec>, RunError> {
        let spec = self.env_spec()?;
        if self.components.is_empty() {
            return Ok(spec
                .component_names
                .iter()
                .zip(&spec.default_weights)
                .map(|(n, w)| ComponentSpec {
                    weight: *w,
                    ..ComponentSpec::new(n.clone())
                })
                .collect());
        }
        let names: Vec<&str> = self.components.iter().map(|c| c.name.as_str()).collect();
        if names != spec.component_names.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(RunError::Config(format!(
                "components must list the environment's components in order: {:?}, got {:?}",
                spec.component_names, names
            )));
        }
        Ok(self.components.clone())
    }

    pub fn validate(&self) -> Result<(), RunError> {
        self.agent.validate()?;
        for c in self.resolved_components()? {
            c.validate()?;
        }
        if self.eval.log_period == 0 || self.eval.period == 0 {
            return Err(RunError::Config("eval.period and eval.log_period must be positive".into()));
        }
        Ok(())
    }
}
