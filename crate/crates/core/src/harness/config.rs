use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conformal::AcpConfig;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::function_encoder::BasisTrainConfig;
use crate::shield::ShieldConfig;
use crate::sro::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub total_steps: usize,
    /// Safety regularizer and cost Q critic. Off is the plain Lagrangian baseline.
    pub sro_enabled: bool,
    pub shield_enabled: bool,
    /// Feed the true hidden parameters to the policy instead of FE coefficients.
    pub oracle_phi: bool,
    /// Feed online FE coefficients to the policy.
    pub fe_context: bool,
    pub train_intervals: Vec<[f64; 2]>,
    pub ood_intervals: Vec<[f64; 2]>,
    /// Obstacles added on top of `env.obstacle_count` for OOD evaluation.
    pub ood_extra_obstacles: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            total_steps: 200_000,
            sro_enabled: true,
            shield_enabled: true,
            oracle_phi: false,
            fe_context: true,
            train_intervals: vec![[0.3, 1.7]],
            ood_intervals: vec![[0.15, 0.3], [1.7, 2.5]],
            ood_extra_obstacles: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeConfig {
    pub k: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub tasks_per_batch: usize,
    pub samples_per_task: usize,
    pub ridge: f64,
    /// Offline dataset: random-policy episodes, one φ draw each.
    pub episodes: usize,
    pub steps_per_episode: usize,
    /// Episodes kept aside for the held-out report.
    pub heldout_episodes: usize,
    /// Online coefficient re-solve period, in steps.
    pub refresh_period: usize,
    /// Most recent transitions used online; 0 keeps the whole episode.
    pub window: usize,
}

impl Default for FeConfig {
    fn default() -> Self {
        let b = BasisTrainConfig::default();
        Self {
            k: b.k,
            hidden: b.hidden,
            epochs: b.epochs,
            lr: b.lr,
            tasks_per_batch: b.tasks_per_batch,
            samples_per_task: b.samples_per_task,
            ridge: b.ridge,
            episodes: 200,
            steps_per_episode: 200,
            heldout_episodes: 20,
            refresh_period: 10,
            window: 0,
        }
    }
}

impl FeConfig {
    pub fn basis_config(&self) -> BasisTrainConfig {
        BasisTrainConfig {
            k: self.k,
            hidden: self.hidden.clone(),
            epochs: self.epochs,
            lr: self.lr,
            tasks_per_batch: self.tasks_per_batch,
            samples_per_task: self.samples_per_task,
            ridge: self.ridge,
        }
    }

    pub fn window_cap(&self) -> Option<usize> {
        (self.window > 0).then_some(self.window)
    }
}

/// Everything a run needs, one TOML section per component.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: RunConfig,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub shield: ShieldConfig,
    pub fe: FeConfig,
    pub acp: AcpConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.train.validate()?;
        self.shield.validate(&self.env)?;
        self.acp.validate()?;
        let e = &self.experiment;
        // TOML integers are signed; larger seeds could not be saved
        if i64::try_from(e.seed).is_err() {
            return Err(Error::Config(format!("experiment.seed must be at most {}", i64::MAX)));
        }
        if e.oracle_phi && e.fe_context {
            return Err(Error::Config(
                "experiment.oracle_phi and experiment.fe_context are exclusive".into(),
            ));
        }
        for (name, iv) in [
            ("train_intervals", &e.train_intervals),
            ("ood_intervals", &e.ood_intervals),
        ] {
            if iv.is_empty() || iv.iter().any(|[lo, hi]| !(*lo > 0.0 && lo <= hi)) {
                return Err(Error::Config(format!(
                    "experiment.{name} must be non-empty positive intervals"
                )));
            }
        }
        if self.fe.k == 0 || self.fe.refresh_period == 0 || self.fe.episodes < 2 {
            return Err(Error::Config(
                "fe.k, fe.refresh_period must be positive and fe.episodes ≥ 2".into(),
            ));
        }
        if self.fe.heldout_episodes >= self.fe.episodes {
            return Err(Error::Config(
                "fe.heldout_episodes must be smaller than fe.episodes".into(),
            ));
        }
        Ok(())
    }

    /// Whether a trained basis is required.
    pub fn needs_basis(&self) -> bool {
        self.experiment.shield_enabled || self.experiment.fe_context
    }

    /// Length of the context vector appended to observations.
    pub fn context_dim(&self) -> usize {
        if self.experiment.oracle_phi {
            crate::env::HiddenParams::DIM
        } else if self.experiment.fe_context {
            self.fe.k
        } else {
            0
        }
    }

    pub fn policy_input_dim(&self) -> usize {
        self.env.observation_dim() + self.context_dim()
    }

    /// Parses TOML, applies `section.key=value` overrides (values in TOML
    /// syntax, bare words read as strings) and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        Self::from_toml_with_overrides(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let (section, field) = key
        .trim()
        .split_once('.')
        .ok_or_else(|| Error::Config(format!("override key `{key}` must be section.field")))?;
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match entry {
        toml::Value::Table(t) => {
            t.insert(field.to_string(), value);
            Ok(())
        }
        _ => Err(Error::Config(format!("`{section}` is not a section"))),
    }
}
