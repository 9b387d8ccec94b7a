//! Whole-pipeline configuration: one TOML file, one section per stage, with
//! a single global seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blindtest;
use crate::dataset::SamplerConfig;
use crate::error::{Error, Result};
use crate::evaluation::classifier::ClassifierConfig;
use crate::evaluation::gradient::GradientMode;
use crate::evaluation::nuclei::NucleiConfig;
use crate::ink::InkThresholds;
use crate::model::ModelSpec;
use crate::restore::RestoreConfig;
use crate::training::TrainConfig;

/// The defaults as shipped; `--config-dump` must reproduce this byte for byte.
pub const DEFAULTS_TOML: &str = include_str!("../config/defaults.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InkSection {
    pub downsample: u32,
    pub thresholds: InkThresholds,
}

impl Default for InkSection {
    fn default() -> Self {
        InkSection {
            downsample: 8,
            thresholds: InkThresholds::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Minimum tissue fraction for a patch to count as non-background.
    pub tissue_threshold: f64,
    pub gradient_mode: GradientMode,
    pub classifier: ClassifierConfig,
    pub nuclei: NucleiConfig,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            tissue_threshold: 0.05,
            gradient_mode: GradientMode::Luminance,
            classifier: ClassifierConfig::default(),
            nuclei: NucleiConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlindtestConfig {
    pub items: usize,
    pub patch_size: usize,
    pub port: u16,
    /// Environment variable holding the shared access token, if any.
    pub token_env: String,
}

impl Default for BlindtestConfig {
    fn default() -> Self {
        BlindtestConfig {
            items: blindtest::DEFAULT_ITEMS,
            patch_size: blindtest::DEFAULT_PATCH,
            port: 8080,
            token_env: "INKRESTORE_TOKEN".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Copied into every stage's own seed by [`PipelineConfig::resolve`].
    pub seed: u64,
    pub ink: InkSection,
    pub sampler: SamplerConfig,
    pub model: ModelSpec,
    pub training: TrainConfig,
    pub restore: RestoreConfig,
    pub evaluation: EvaluationConfig,
    pub blindtest: BlindtestConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Propagates the global seed and validates every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.sampler.seed = self.seed;
        self.training.seed = self.seed;
        self.evaluation.classifier.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ink.downsample == 0 {
            return Err(Error::Config("ink.downsample must be >= 1".into()));
        }
        self.ink.thresholds.validate()?;
        self.sampler.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        self.restore.validate()?;
        self.evaluation.classifier.validate()?;
        if !(0.0..=1.0).contains(&self.evaluation.tissue_threshold) {
            return Err(Error::Config("evaluation.tissue_threshold must lie in [0, 1]".into()));
        }
        if self.blindtest.items == 0 || self.blindtest.items % 2 != 0 {
            return Err(Error::Config("blindtest.items must be a positive even number".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::optim::OptimizerKind;

    #[test]
    fn dump_matches_shipped_defaults() {
        assert_eq!(PipelineConfig::default().to_toml().unwrap(), DEFAULTS_TOML);
    }

    #[test]
    fn shipped_defaults_carry_the_documented_values() {
        let c = PipelineConfig::from_toml(DEFAULTS_TOML).unwrap();
        assert_eq!(c, PipelineConfig::default());
        assert_eq!((c.ink.downsample, c.ink.thresholds.close_radius, c.ink.thresholds.min_area), (8, 2, 64));
        assert_eq!(c.sampler.patch_size, 128);
        assert_eq!(c.sampler.total_patches, 250_000);
        assert_eq!((c.sampler.marker_fraction, c.sampler.background_cap), (0.5, 0.25));
        assert_eq!((c.sampler.tissue_threshold, c.sampler.balance_tolerance), (0.05, 0.01));
        assert_eq!((c.model.res_blocks, c.model.lambda_cyc, c.model.full_cyclegan), (6, 10.0, false));
        assert_eq!((c.training.epochs, c.training.batch_size), (150, 64));
        assert_eq!(
            c.training.gen_optimizer,
            OptimizerKind::Adam {
                lr: 2e-4,
                beta1: 0.5,
                beta2: 0.999
            }
        );
        assert_eq!(c.training.disc_optimizer, OptimizerKind::Sgd { lr: 1e-4 });
        assert_eq!((c.restore.tile, c.restore.stride, c.restore.batch), (128, 100, 32));
        let k = &c.evaluation.classifier;
        assert_eq!((k.depth, k.epochs, k.batch, k.lr), (18, 100, 128, 1e-4));
        assert_eq!(c.evaluation.nuclei.min_area, 40);
        assert_eq!((c.blindtest.items, c.blindtest.patch_size), (100, 500));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(PipelineConfig::from_toml("sed = 1"), Err(Error::Config(_))));
        assert!(matches!(
            PipelineConfig::from_toml("[model]\nresblocks = 3"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn partial_file_keeps_other_defaults_and_spreads_seed() {
        let c = PipelineConfig::from_toml("seed = 9\n[restore]\nstride = 64\n").unwrap();
        assert_eq!(c.restore.stride, 64);
        assert_eq!(c.restore.tile, 128);
        assert_eq!((c.sampler.seed, c.training.seed, c.evaluation.classifier.seed), (9, 9, 9));
        let again = PipelineConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(PipelineConfig::from_toml("[restore]\nstride = 200").is_err());
        assert!(PipelineConfig::from_toml("[evaluation.classifier]\ndepth = 20").is_err());
        assert!(PipelineConfig::from_toml("[blindtest]\nitems = 7").is_err());
    }
}
