use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::Norm;
use crate::error::{Error, Result};
use crate::netmodel::{ModelConfig, RegressionPool};
use crate::objectives::{EvalConfig, ObjectiveKind};
use crate::ood::{NoiseKind, OodSource};
use crate::shape_model::PhantomConfig;
use crate::trainer::{LossMode, TrainConfig};

/// Image side and contour length of the desk-scale setup.
pub const DESK_SIZE: usize = 32;
pub const DESK_POINTS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub phantom: PhantomConfig,
    /// Number of real phantom "patients" before the train/test split.
    pub real_samples: usize,
    pub train_fraction: f64,
    /// Virtual samples generated per shape model.
    pub virtual_samples: usize,
    /// Component counts of the shape models (one augmented set each).
    pub ssm_components: Vec<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::scaled(DESK_SIZE, DESK_POINTS),
            real_samples: 200,
            train_fraction: 0.8,
            virtual_samples: 2000,
            ssm_components: vec![3, 5, 10],
        }
    }
}

impl DataConfig {
    pub fn train_count(&self) -> usize {
        ((self.real_samples as f64 * self.train_fraction).round() as usize).min(self.real_samples)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub eval: EvalConfig,
    /// Evaluate only the first `n` test samples.
    pub test_limit: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            eval: EvalConfig::default(),
            test_limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodStageConfig {
    /// Objectives run by the `ood-attack` stage.
    pub objectives: Vec<ObjectiveKind>,
    pub source: OodSource,
    pub eps: f64,
    pub iterations: usize,
    pub step_size: f64,
    pub norm: Norm,
    /// Variant attacked by the `ood-attack` stage.
    pub target_variant: String,
    /// Shape model whose augmented set trains the detectors.
    pub detector_ssm: usize,
    pub detector_modes: Vec<LossMode>,
    /// Objective of the attack run against each detector.
    pub detector_objective: ObjectiveKind,
    pub test_limit: Option<usize>,
    /// Adversarial seeds dumped as PGM per experiment.
    pub export_images: usize,
}

impl Default for OodStageConfig {
    fn default() -> Self {
        Self {
            objectives: vec![ObjectiveKind::OodSeg, ObjectiveKind::OodReg],
            source: OodSource::Procedural {
                kind: NoiseKind::Blobs,
                seed: 7,
            },
            eps: 0.3,
            iterations: 100,
            step_size: 0.01,
            norm: Norm::Linf,
            target_variant: "P10_std".into(),
            detector_ssm: 10,
            detector_modes: vec![LossMode::Standard, LossMode::AdvRS],
            detector_objective: ObjectiveKind::OodSeg,
            test_limit: None,
            export_images: 8,
        }
    }
}

/// Everything a run depends on. Stored verbatim in the run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    /// `loss_mode` and `seed` are overridden per variant.
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub ood: OodStageConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig {
                image_size: DESK_SIZE,
                contour_points: DESK_POINTS,
                base_channels: 8,
                depth: 3,
                blocks_per_stage: 1,
                groupnorm_groups: 4,
                fc_hidden: 64,
                regression_pool: RegressionPool::GlobalAverage,
                reconstruction_head: false,
            },
            data: DataConfig::default(),
            train: TrainConfig {
                epochs: 4,
                adv_iterations: 5,
                adv_step_size: 0.035,
                ..TrainConfig::default()
            },
            sweep: SweepConfig::default(),
            ood: OodStageConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// 128×128 images, 176-point contours, 640k virtual samples, 100 epochs.
    pub fn paper_scale() -> Self {
        Self {
            model: ModelConfig::paper_scale(),
            data: DataConfig {
                phantom: PhantomConfig::scaled(128, 176),
                real_samples: 100,
                virtual_samples: 640_000,
                ..DataConfig::default()
            },
            train: TrainConfig::paper_scale(LossMode::Standard),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        self.model.validate()?;
        let p = &self.data.phantom;
        if p.image_size != self.model.image_size || p.points != self.model.contour_points {
            return bad(format!(
                "phantom {}px/{} points does not match model {}px/{} points",
                p.image_size, p.points, self.model.image_size, self.model.contour_points
            ));
        }
        let n_train = self.data.train_count();
        if n_train < 2 || n_train >= self.data.real_samples {
            return bad(format!(
                "train fraction {} of {} samples leaves an empty split",
                self.data.train_fraction, self.data.real_samples
            ));
        }
        if self.data.ssm_components.is_empty() || self.data.ssm_components.iter().any(|&k| k == 0 || k >= n_train) {
            return bad(format!("shape-model sizes {:?} must lie in 1..{n_train}", self.data.ssm_components));
        }
        if self.data.virtual_samples == 0 {
            return bad("virtual_samples must be positive".into());
        }
        let target: VariantId = self.ood.target_variant.parse()?;
        if !self.data.ssm_components.contains(&target.ssm_k) || !self.data.ssm_components.contains(&self.ood.detector_ssm) {
            return bad("OOD stages reference a shape model that is not built".into());
        }
        if self.ood.objectives.iter().chain([&self.ood.detector_objective]).any(|o| !o.is_ood()) {
            return bad("OOD stages need OOD objectives".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    /// All variants in report row order.
    pub fn variants(&self) -> Vec<VariantId> {
        VariantId::all(&self.data.ssm_components)
    }
}

/// Shape model size × training loss, named like `P10_adv_rs`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VariantId {
    pub ssm_k: usize,
    pub mode: LossMode,
}

impl VariantId {
    pub fn new(ssm_k: usize, mode: LossMode) -> Self {
        Self { ssm_k, mode }
    }

    /// Loss mode major, shape model size minor.
    pub fn all(ks: &[usize]) -> Vec<Self> {
        let mut ks = ks.to_vec();
        ks.sort_unstable();
        ks.dedup();
        LossMode::ALL
            .into_iter()
            .flat_map(|m| ks.iter().map(move |&k| Self::new(k, m)))
            .collect()
    }

    pub fn name(&self) -> String {
        format!("P{}_{}", self.ssm_k, self.mode.name())
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for VariantId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad variant name `{s}` (expected e.g. P10_adv_rs)"));
        let rest = s.strip_prefix('P').or_else(|| s.strip_prefix('p')).ok_or_else(bad)?;
        let (k, mode) = rest.split_once('_').ok_or_else(bad)?;
        Ok(Self {
            ssm_k: k.parse().map_err(|_| bad())?,
            mode: mode.parse().map_err(|_| bad())?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifteen_variants_in_table_order() {
        let v = ExperimentConfig::default().variants();
        assert_eq!(v.len(), 15);
        assert_eq!(v[0].name(), "P3_std");
        assert_eq!(v[2].name(), "P10_std");
        assert_eq!(v[3].name(), "P3_rand");
        assert_eq!(v[14].name(), "P10_adv_rs");
        for id in v {
            assert_eq!(id.name().parse::<VariantId>().unwrap(), id);
        }
        assert!("P10".parse::<VariantId>().is_err());
        assert!("Q3_std".parse::<VariantId>().is_err());
        assert!("P3_adv".parse::<VariantId>().is_err());
    }

    #[test]
    fn default_and_full_scale_configs_validate() {
        ExperimentConfig::default().validate().unwrap();
        let p = ExperimentConfig::paper_scale();
        p.validate().unwrap();
        assert_eq!((p.model.image_size, p.model.contour_points), (128, 176));
        assert_eq!(p.data.virtual_samples, 640_000);
        assert_eq!(p.train.epochs, 100);
    }

    #[test]
    fn mismatched_resolution_rejected() {
        let mut c = ExperimentConfig::default();
        c.data.phantom.image_size = 64;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.ood.target_variant = "P7_std".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"seed": 5, "data": {"virtual_samples": 10}}"#).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.data.virtual_samples, 10);
        assert_eq!(c.data.real_samples, 200);
        assert_eq!(c.model, ExperimentConfig::default().model);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"data": {"virtual_sampels": 10}}"#).is_err());
    }
}
