use std::fs;
use std::path::{Path, PathBuf};

use lumaflow_core::data::SceneParams;
use lumaflow_core::metrics::MetricsConfig;
use lumaflow_core::{SamplerConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a command can be configured with. Loaded from JSON; flags
/// given on the command line are applied on top.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneParams,
    /// Training hyperparameters, including the perturbation ranges and the
    /// network shape.
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub metrics: MetricsConfig,
    pub paths: Paths,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Loss CSV of `train`; defaults to the checkpoint path with `.csv`.
    pub loss_csv: Option<PathBuf>,
    /// Checkpoint to resume `train` from.
    pub resume: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let check = |what: &str, r: lumaflow_core::Result<()>| r.map_err(|e| CliError::Config(format!("{what}: {e}")));
        check("scene", self.scene.validate())?;
        check("train", self.train.validate())?;
        check("sampler", self.sampler.validate())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(RunConfig::parse("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        assert!(RunConfig::parse(r#"{"trian": {}}"#).is_err());
        assert!(RunConfig::parse(r#"{"train": {"learning_rate": 0.1}}"#).is_err());
        assert!(RunConfig::parse(r#"{"train": {"perturb": {"hue_range": [0, 1]}}}"#).is_err());
        assert!(RunConfig::parse(r#"{"sampler": {"gamma": 0.5, "steps": 3}}"#).is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::parse(r#"{"train": {"alpha": 0.0}, "sampler": {"num_steps": 5}}"#).unwrap();
        assert_eq!(cfg.train.alpha, 0.0);
        assert_eq!(cfg.train.lr, TrainConfig::default().lr);
        assert_eq!(cfg.sampler.num_steps, 5);
        assert_eq!(cfg.sampler.gamma, 1.0);
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn invalid_values_fail_validation() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.sampler.num_steps = 0;
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }
}
