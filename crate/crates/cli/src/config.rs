use std::path::{Path, PathBuf};

use pixelfield::model::ModelConfig;
use pixelfield::renderer::RenderConfig;
use pixelfield::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// The whole run in one document. Missing sections take their defaults;
/// unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub render: RenderConfig,
    /// Seed for parameter initialisation.
    pub init_seed: u64,
    /// Iterations between checkpoints; the final state is always written.
    pub checkpoint_every: u64,
    /// Dataset directory, overridable with `--data`.
    pub data: Option<PathBuf>,
    /// Train only on these scene ids; all scenes when absent.
    pub scenes: Option<Vec<String>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            render: RenderConfig::default(),
            init_seed: 0,
            checkpoint_every: 1000,
            data: None,
            scenes: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let err = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        self.model.validate().map_err(|e| err(&e))?;
        self.train.validate().map_err(|e| err(&e))?;
        self.render.validate().map_err(|e| err(&e))?;
        if self.checkpoint_every == 0 {
            return Err(CliError::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_documents_fill_defaults() {
        let c: RunConfig = serde_json::from_str(
            r#"{"train": {"total_iters": 10, "bbox_phase_iters": 2, "fixed_views_iters": 5}}"#,
        )
        .unwrap();
        assert_eq!(c.train.total_iters, 10);
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!(
            (c.train.batch_instances, c.train.rays_per_instance),
            (4, 128)
        );
        assert_eq!(c.render, RenderConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"render": {"n_corse": 3}}"#).is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(c, back);
    }
}
