use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stormmeta::skillmetrics::{Aggregation, DEFAULT_THRESHOLDS};
use stormmeta::sslpretrain::{AugmentationSpec, MocoConfig};
use stormmeta::trainloops::{AdamConfig, LossMode, MetaConfig};

use crate::CliError;

pub const SEED_ENV: &str = "STORMMETA_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Joint,
    Maml,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Joint => "joint",
            Strategy::Maml => "maml",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub seed: u64,
    pub fractions: [f64; 3],
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { seed: 0, fractions: [0.8, 0.1, 0.1] }
    }
}

/// A complete experiment. Missing fields take their defaults; the resolved
/// config is written next to the outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub archive: PathBuf,
    pub out_dir: PathBuf,
    /// Global seed; unset falls back to the environment, then 0.
    pub seed: Option<u64>,
    /// Used when the archive carries no split labels.
    pub split: SplitConfig,
    pub n_support: usize,
    pub n_query: usize,
    pub strategy: Strategy,
    pub loss_mode: LossMode,
    pub lambda_l1: f64,
    pub inner_lr: f64,
    pub meta_batch: usize,
    pub inner_steps: usize,
    pub eval_inner_steps: usize,
    pub joint_batch: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub disc_adam: Option<AdamConfig>,
    pub generator_width: usize,
    pub discriminator_width: usize,
    pub augmentation_level: usize,
    pub pretrain: MocoConfig,
    /// Pretraining epochs actually run; defaults to the full schedule.
    pub pretrain_epochs: Option<usize>,
    /// A pretraining state directory whose encoder seeds the generator.
    pub pretrained_encoder: Option<PathBuf>,
    pub thresholds: Vec<f64>,
    pub aggregation: Aggregation,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            archive: PathBuf::from("archive"),
            out_dir: PathBuf::from("runs/default"),
            seed: None,
            split: SplitConfig::default(),
            n_support: 10,
            n_query: 10,
            strategy: Strategy::Maml,
            loss_mode: LossMode::Adversarial,
            lambda_l1: 100.0,
            inner_lr: 1e-4,
            meta_batch: 2,
            inner_steps: 1,
            eval_inner_steps: 1,
            joint_batch: 8,
            epochs: 3,
            adam: AdamConfig::default(),
            disc_adam: None,
            generator_width: 32,
            discriminator_width: 64,
            augmentation_level: 3,
            pretrain: MocoConfig::default(),
            pretrain_epochs: None,
            pretrained_encoder: None,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            aggregation: Aggregation::Pooled,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Fills in the seed from the environment when the file leaves it unset.
    pub fn resolve_seed(&mut self) -> Result<u64, CliError> {
        if self.seed.is_none() {
            self.seed = Some(match std::env::var(SEED_ENV) {
                Ok(v) => v.trim().parse().map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
                Err(_) => 0,
            });
        }
        Ok(self.seed.expect("set above"))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            meta_batch: self.meta_batch,
            inner_lr: self.inner_lr,
            inner_steps: self.inner_steps,
            eval_inner_steps: self.eval_inner_steps,
            adam: self.adam,
            disc_adam: self.disc_adam,
            lambda_l1: self.lambda_l1,
            joint_batch: self.joint_batch,
            epochs: self.epochs,
            seed: self.seed(),
        }
    }

    pub fn moco_config(&self) -> MocoConfig {
        MocoConfig { seed: self.seed(), ..self.pretrain.clone() }
    }

    pub fn pretrain_epochs(&self) -> usize {
        self.pretrain_epochs.unwrap_or(self.pretrain.epochs)
    }

    /// Checks every precondition that does not need the archive contents.
    pub fn validate(&self) -> Result<(), CliError> {
        self.meta_config().validate()?;
        self.moco_config().validate()?;
        AugmentationSpec::standard(self.augmentation_level)?;
        if self.n_support == 0 || self.n_query == 0 {
            return Err(usage("n_support and n_query must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(usage("epochs must be at least 1"));
        }
        if self.generator_width == 0 || self.discriminator_width == 0 {
            return Err(usage("network widths must be positive"));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(0.0..=255.0).contains(t)) {
            return Err(usage(format!("thresholds must be non-empty and within [0, 255], got {:?}", self.thresholds)));
        }
        let f = self.split.fractions;
        if f.iter().any(|v| !(*v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(usage(format!("split fractions {f:?} must be non-negative and sum to 1")));
        }
        if self.pretrain_epochs() > self.pretrain.epochs {
            return Err(usage(format!(
                "pretrain_epochs {} exceeds the schedule length {}",
                self.pretrain_epochs(),
                self.pretrain.epochs
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = RunConfig { seed: Some(4), ..RunConfig::default() };
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
    }

    #[test]
    fn partial_files_take_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"epochs": 7, "strategy": "joint", "loss_mode": "reconstruction"}"#).unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.strategy, Strategy::Joint);
        assert_eq!(c.n_support, 10);
        assert!(serde_json::from_str::<RunConfig>(r#"{"epochz": 7}"#).is_err());
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        for bad in [
            RunConfig { inner_lr: 0.0, ..RunConfig::default() },
            RunConfig { thresholds: vec![300.0], ..RunConfig::default() },
            RunConfig { augmentation_level: 9, ..RunConfig::default() },
            RunConfig { n_query: 0, ..RunConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(CliError::Usage(_))), "{bad:?}");
        }
    }
}
