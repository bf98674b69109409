use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mean_point_error, ObjectiveKind, Targets};
use crate::attack::{run_ind_attack, AttackConfig, Norm};
use crate::error::{Error, Result};
use crate::geometry::{contour_dice, dice};
use crate::grid::binarize;
use crate::io::write_json;
use crate::netmodel::{Predictor, DEFAULT_THRESHOLD};
use crate::rng::{derive_seed, stream};
use crate::shape_model::PhantomSample;

/// Noise levels of the robustness sweep.
pub const PAPER_EPS_LEVELS: [f64; 7] = [0.0, 0.01, 0.03, 0.05, 0.07, 0.1, 0.2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub eps_levels: Vec<f64>,
    pub iterations: usize,
    pub norm: Norm,
    /// α = step_ratio · ε.
    pub step_ratio: f64,
    pub threshold: f64,
    /// Run the regression attack (fills `error_reg` and `dice_reg`).
    pub regression: bool,
    /// Run the segmentation attack (fills `dice_seg`).
    pub segmentation: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            eps_levels: PAPER_EPS_LEVELS.to_vec(),
            iterations: 100,
            norm: Norm::Linf,
            step_ratio: 0.2,
            threshold: DEFAULT_THRESHOLD,
            regression: true,
            segmentation: true,
            seed: 0,
        }
    }
}

/// Sample means at one noise level. Metrics of a skipped attack are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub eps: f64,
    pub error_reg: Option<f64>,
    pub dice_reg: Option<f64>,
    pub dice_seg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k_test: usize,
    /// Points per contour.
    pub i_max: usize,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, eps: f64) -> Option<&EvalRow> {
        self.rows.iter().find(|r| (r.eps - eps).abs() < 1e-12)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format {
            what: "csv",
            detail: e.to_string(),
        })?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str, k_test: usize, i_max: usize) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r.deserialize().collect::<std::result::Result<Vec<EvalRow>, _>>()?;
        Ok(Self { k_test, i_max, rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[derive(Default)]
struct SampleMetrics {
    error_reg: Option<f64>,
    dice_reg: Option<f64>,
    dice_seg: Option<f64>,
}

fn eps_label(eps: f64) -> String {
    format!("{eps:.6}")
}

fn sample_metrics<P: Predictor + ?Sized>(model: &P, sample: &PhantomSample, index: usize, eps: f64, cfg: &EvalConfig) -> Result<SampleMetrics> {
    let (h, w) = sample.image.dims();
    let targets = Targets::from_sample(sample);
    let mut m = SampleMetrics::default();
    let attacked = |kind: ObjectiveKind| -> Result<crate::grid::Image> {
        if eps == 0.0 {
            return Ok(sample.image.clone());
        }
        let acfg = AttackConfig {
            norm: cfg.norm,
            step_size: cfg.step_ratio * eps,
            ..AttackConfig::ind(kind, eps, cfg.iterations)
        };
        let label = format!("eval/{kind}/{}", eps_label(eps));
        let mut rng = stream(derive_seed(cfg.seed, &label), index as u64);
        Ok(run_ind_attack(model, &sample.image, &targets, &acfg, &mut rng)?.adversarial)
    };
    let clean = if eps == 0.0 { Some(model.predict(&sample.image)?) } else { None };
    if cfg.regression {
        let out = match &clean {
            Some(o) => o.clone(),
            None => model.predict(&attacked(ObjectiveKind::IndReg)?)?,
        };
        m.error_reg = Some(mean_point_error(&out.contour, &sample.contour)?);
        m.dice_reg = Some(contour_dice(&out.contour, &sample.contour, h, w)?);
    }
    if cfg.segmentation {
        let out = match &clean {
            Some(o) => o.clone(),
            None => model.predict(&attacked(ObjectiveKind::IndSeg)?)?,
        };
        m.dice_seg = Some(dice(&binarize(&out.soft_seg, cfg.threshold), &sample.seg)?);
    }
    Ok(m)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.collect::<Option<Vec<f64>>>()?;
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

/// Robustness sweep: clean metrics at ε = 0, IND-attacked metrics above.
/// The regression attack feeds `error_reg`/`dice_reg`; the segmentation
/// attack feeds `dice_seg`.
pub fn evaluate<P: Predictor + ?Sized>(model: &P, test_set: &[PhantomSample], cfg: &EvalConfig) -> Result<EvalReport> {
    if test_set.is_empty() {
        return Err(Error::Empty("test set".into()));
    }
    if let Some(e) = cfg.eps_levels.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
        return Err(Error::InvalidArgument(format!("noise level {e} must be finite and >= 0")));
    }
    let mut rows = Vec::with_capacity(cfg.eps_levels.len());
    for &eps in &cfg.eps_levels {
        let per_sample = test_set
            .par_iter()
            .enumerate()
            .map(|(i, s)| sample_metrics(model, s, i, eps, cfg))
            .collect::<Result<Vec<_>>>()?;
        let row = EvalRow {
            eps,
            error_reg: mean(per_sample.iter().map(|m| m.error_reg)),
            dice_reg: mean(per_sample.iter().map(|m| m.dice_reg)),
            dice_seg: mean(per_sample.iter().map(|m| m.dice_seg)),
        };
        log::info!("eval eps={eps}: {row:?}");
        rows.push(row);
    }
    Ok(EvalReport {
        k_test: test_set.len(),
        i_max: test_set[0].contour.len(),
        rows,
    })
}
