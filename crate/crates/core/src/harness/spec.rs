use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{A2cConfig, AgentConfig, Regime, Variant};
use crate::envs::{DataPolicy, EnvConfig};
use crate::error::{Error, Result};
use crate::models::{Family, ModelConfig, TrainConfig};
use crate::rollout::BenchConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Model,
    Agent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSpec {
    /// Defaults to the environment's standard data policy.
    pub policy: Option<DataPolicy>,
    pub horizon: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            policy: None,
            horizon: 8,
            train_count: 256,
            test_count: 32,
            burn_in: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub label: String,
    pub family: Family,
    #[serde(default = "one")]
    pub jumpy: usize,
    #[serde(default = "unit_scale")]
    pub channel_scale: f64,
    /// Overrides the study-wide Adam learning rate for this entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
}

fn one() -> usize {
    1
}

fn unit_scale() -> f64 {
    1.0
}

impl ModelEntry {
    pub fn model_config(&self, env: &EnvConfig) -> ModelConfig {
        ModelConfig::new(self.family, env.num_actions(), env.height, env.width)
            .with_scale(self.channel_scale)
            .with_jumpy(self.jumpy)
    }

    pub fn train_config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig { seed, ..base.clone() };
        if let Some(lr) = self.learning_rate {
            cfg.adam.learning_rate = lr;
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentEntry {
    pub label: String,
    pub variant: Variant,
    #[serde(default = "random_regime")]
    pub regime: Regime,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_tau")]
    pub tau: usize,
    #[serde(default = "unit_scale")]
    pub lambda_d: f64,
    #[serde(default)]
    pub rollout_entropy_weight: f64,
    /// Label of a model trained by this spec, or a checkpoint directory.
    #[serde(default)]
    pub model: Option<String>,
}

fn random_regime() -> Regime {
    Regime::Random
}

fn default_k() -> usize {
    5
}

fn default_tau() -> usize {
    3
}

/// A study: environment, data, models and/or agents, seeds and budgets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub study: StudyKind,
    pub output: PathBuf,
    pub seeds: Vec<u64>,
    pub env: EnvConfig,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub models: Vec<ModelEntry>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval_seed: u64,
    #[serde(default)]
    pub bench: Option<BenchConfig>,
    #[serde(default)]
    pub agents: Vec<AgentEntry>,
    #[serde(default)]
    pub agent_env_steps: u64,
    #[serde(default)]
    pub a2c: A2cConfig,
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::MissingArtifact {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let spec: Self = toml::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn model(&self, label: &str) -> Option<&ModelEntry> {
        self.models.iter().find(|m| m.label == label)
    }

    pub fn model_dir(&self, label: &str, seed: u64) -> PathBuf {
        self.output.join("models").join(label).join(format!("seed_{seed}"))
    }

    pub fn agent_dir(&self, label: &str, seed: u64) -> PathBuf {
        self.output.join("agents").join(label).join(format!("seed_{seed}"))
    }

    pub fn agent_config(&self, entry: &AgentEntry, seed: u64) -> AgentConfig {
        AgentConfig {
            variant: entry.variant,
            regime: entry.regime,
            k: entry.k,
            tau: entry.tau,
            lambda_d: entry.lambda_d,
            rollout_entropy_weight: entry.rollout_entropy_weight,
            a2c: self.a2c.clone(),
            seed,
        }
    }

    /// Structural checks; every referenced model is either trained by this
    /// spec or an existing checkpoint.
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("a study needs at least one seed".into()));
        }
        let mut labels: Vec<&str> = self.models.iter().map(|m| m.label.as_str()).collect();
        labels.extend(self.agents.iter().map(|a| a.label.as_str()));
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(Error::Config(format!("duplicate label {l:?}")));
            }
        }
        for m in &self.models {
            m.model_config(&self.env).validate()?;
            if !self.data.horizon.is_multiple_of(m.jumpy) {
                return Err(Error::Config(format!(
                    "model {} has jumpy factor {} which does not divide the horizon {}",
                    m.label, m.jumpy, self.data.horizon
                )));
            }
            if m.learning_rate.is_some_and(|lr| !(lr > 0.0 && lr.is_finite())) {
                return Err(Error::Config(format!(
                    "model {} has a non-positive learning rate",
                    m.label
                )));
            }
        }
        match self.study {
            StudyKind::Model => {
                if self.models.is_empty() {
                    return Err(Error::Config("a model study needs models".into()));
                }
            }
            StudyKind::Agent => {
                if self.agents.is_empty() {
                    return Err(Error::Config("an agent study needs agents".into()));
                }
                for a in &self.agents {
                    match (&a.model, a.variant.uses_model()) {
                        (None, true) => {
                            return Err(Error::Config(format!("agent {} needs a model", a.label)));
                        }
                        (Some(r), true) if self.model(r).is_none() && !Path::new(r).join("model.toml").exists() => {
                            return Err(Error::MissingArtifact {
                                path: PathBuf::from(r),
                                reason: format!("agent {} refers to no model of this spec and no checkpoint", a.label),
                            });
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(())
    }
}
