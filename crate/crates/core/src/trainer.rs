//! Mini-batch training with Adamax under the five loss modes.
//!
//! | mode     | per-sample loss                                   |
//! |----------|---------------------------------------------------|
//! | `std`    | `L(x)`                                            |
//! | `rand`   | `0.5 L(x) + 0.5 L(x_rand)`                        |
//! | `adv_r`  | `0.5 L(x) + 0.5 L(x_reg)`                         |
//! | `adv_s`  | `0.5 L(x) + 0.5 L(x_seg)`                         |
//! | `adv_rs` | `0.5 L(x) + 0.25 L(x_reg) + 0.25 L(x_seg)`        |
//!
//! Adversarial inputs are regenerated for every batch from the current
//! (frozen) parameters.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{run_ind_attack, AttackConfig};
use crate::error::{Error, Result};
use crate::grid::Image;
use crate::io::write_json;
use crate::netmodel::Model;
use crate::objectives::{loss_standard, ObjectiveKind, Targets};
use crate::rng::{derive_seed, stream};
use crate::shape_model::PhantomSample;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "std")]
    Standard,
    #[serde(rename = "rand")]
    Rand,
    #[serde(rename = "adv_r")]
    AdvR,
    #[serde(rename = "adv_s")]
    AdvS,
    #[serde(rename = "adv_rs")]
    AdvRS,
}

impl LossMode {
    pub const ALL: [LossMode; 5] = [Self::Standard, Self::Rand, Self::AdvR, Self::AdvS, Self::AdvRS];

    pub fn name(self) -> &'static str {
        match self {
            Self::Standard => "std",
            Self::Rand => "rand",
            Self::AdvR => "adv_r",
            Self::AdvS => "adv_s",
            Self::AdvRS => "adv_rs",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown loss mode `{s}` (expected std, rand, adv_r, adv_s or adv_rs)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamaxConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamaxConfig {
    fn default() -> Self {
        Self {
            step_size: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First moments, infinity-norm moments and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamaxState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub u: Vec<Tensor>,
}

impl AdamaxState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            u: zeros,
        }
    }
}

/// One Adamax update:
/// `m ← β₁m + (1−β₁)g`, `u ← max(β₂u, |g|)`,
/// `θ ← θ − α/(1−β₁ᵗ) · m/(u+ε)`.
pub fn adamax_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamaxState, hyper: &AdamaxConfig) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    state.t += 1;
    let lr = hyper.step_size / (1.0 - hyper.beta1.powi(state.t as i32));
    for (((p, g), m), u) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.u) {
        for (((pv, &gv), mv), uv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(u.data_mut())
        {
            *mv = hyper.beta1 * *mv + (1.0 - hyper.beta1) * gv;
            *uv = (hyper.beta2 * *uv).max(gv.abs());
            *pv -= lr * *mv / (*uv + hyper.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss_mode: LossMode,
    pub epochs: usize,
    pub batch_size: usize,
    /// L∞ radius of the training-time attacks.
    pub adv_eps: f64,
    pub adv_iterations: usize,
    pub adv_step_size: f64,
    /// Maximum amplitude of the uniform noise in `rand` mode.
    pub rand_amplitude: f64,
    pub optimizer: AdamaxConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_mode: LossMode::Standard,
            epochs: 30,
            batch_size: 16,
            adv_eps: 0.07,
            adv_iterations: 20,
            adv_step_size: 0.01,
            rand_amplitude: 0.07,
            optimizer: AdamaxConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: 100 epochs, batch 64.
    pub fn paper_scale(loss_mode: LossMode) -> Self {
        Self {
            loss_mode,
            epochs: 100,
            batch_size: 64,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean mode-weighted loss.
    pub loss: f64,
    /// Clean-input components.
    pub loss_reg: f64,
    pub loss_seg: f64,
    pub loss_rec: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub checkpoint: Option<String>,
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    loss: f64,
    loss_reg: f64,
    loss_seg: f64,
    loss_rec: Option<f64>,
}

impl TrainLog {
    /// CSV without the wall-clock column, so that reruns compare byte-equal.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.epochs {
            w.serialize(EpochRow {
                epoch: e.epoch,
                loss: e.loss,
                loss_reg: e.loss_reg,
                loss_seg: e.loss_seg,
                loss_rec: e.loss_rec,
            })?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format {
            what: "csv",
            detail: e.to_string(),
        })?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Loss values of one sample's forward/backward.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleLoss {
    pub total: f64,
    pub reg: f64,
    pub seg: f64,
    pub rec: Option<f64>,
}

fn attack_input(model: &Model, sample: &PhantomSample, kind: ObjectiveKind, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Image> {
    let acfg = AttackConfig {
        step_size: cfg.adv_step_size,
        ..AttackConfig::ind(kind, cfg.adv_eps, cfg.adv_iterations)
    };
    let res = run_ind_attack(model, &sample.image, &Targets::from_sample(sample), &acfg, rng)?;
    Ok(res.adversarial)
}

/// Weighted inputs of the per-sample loss for the configured mode.
pub fn mode_inputs(model: &Model, sample: &PhantomSample, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Vec<(f64, Image)>> {
    let x = sample.image.clone();
    Ok(match cfg.loss_mode {
        LossMode::Standard => vec![(1.0, x)],
        LossMode::Rand => {
            let a = cfg.rand_amplitude;
            let (h, w) = x.dims();
            let noisy = Image::from_fn(h, w, |r, c| {
                let n = if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 };
                (x.get(r, c) + n).clamp(0.0, 1.0)
            });
            vec![(0.5, x), (0.5, noisy)]
        }
        LossMode::AdvR => {
            let xr = attack_input(model, sample, ObjectiveKind::IndReg, cfg, rng)?;
            vec![(0.5, x), (0.5, xr)]
        }
        LossMode::AdvS => {
            let xs = attack_input(model, sample, ObjectiveKind::IndSeg, cfg, rng)?;
            vec![(0.5, x), (0.5, xs)]
        }
        LossMode::AdvRS => {
            let xr = attack_input(model, sample, ObjectiveKind::IndReg, cfg, rng)?;
            let xs = attack_input(model, sample, ObjectiveKind::IndSeg, cfg, rng)?;
            vec![(0.5, x), (0.25, xr), (0.25, xs)]
        }
    })
}

/// `L(x)` for one input, with `L_rec` targeting that input.
pub fn standard_loss_value(model: &Model, x: &Image, targets: &Targets) -> Result<f64> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, false);
    let xv = g.constant(x.to_tensor());
    let heads = model.forward_graph(&mut g, &params, xv)?;
    let terms = loss_standard(&mut g, &heads, targets, x)?;
    Ok(g.value(terms.total).item())
}

/// Weighted loss over `inputs` and its parameter gradients. Components
/// are reported for the first (clean) input.
pub fn weighted_loss_and_grads(model: &Model, targets: &Targets, inputs: &[(f64, Image)]) -> Result<(SampleLoss, Vec<Tensor>)> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, true);
    let mut total = None;
    let mut parts = None;
    for (w, x) in inputs {
        let xv = g.constant(x.to_tensor());
        let heads = model.forward_graph(&mut g, &params, xv)?;
        let terms = loss_standard(&mut g, &heads, targets, x)?;
        if parts.is_none() {
            parts = Some(terms);
        }
        let weighted = g.scale(terms.total, *w);
        total = Some(match total {
            None => weighted,
            Some(t) => g.add(t, weighted)?,
        });
    }
    let (total, parts) = match (total, parts) {
        (Some(t), Some(p)) => (t, p),
        _ => return Err(Error::Empty("loss inputs".into())),
    };
    let loss = SampleLoss {
        total: g.value(total).item(),
        reg: g.value(parts.reg).item(),
        seg: g.value(parts.seg).item(),
        rec: parts.rec.map(|r| g.value(r).item()),
    };
    let mut grads = g.backward(total)?;
    let grads = params.iter().map(|&p| grads.take(p)).collect();
    Ok((loss, grads))
}

fn check_dataset(model: &Model, data: &[PhantomSample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let cfg = model.config();
    for (i, s) in data.iter().enumerate() {
        if s.image.dims() != (cfg.image_size, cfg.image_size) || s.contour.len() != cfg.contour_points {
            return Err(Error::shape(
                "training set",
                format!(
                    "sample {i} is {:?} with {} points, model expects {}x{} with {}",
                    s.image.dims(),
                    s.contour.len(),
                    cfg.image_size,
                    cfg.image_size,
                    cfg.contour_points
                ),
            ));
        }
    }
    Ok(())
}

/// Trains `model` in place. On divergence the model keeps the parameters of
/// the last successful update and `Error::Diverged` is returned.
pub fn train(model: &mut Model, data: &[PhantomSample], cfg: &TrainConfig) -> Result<TrainLog> {
    check_dataset(model, data)?;
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut state = AdamaxState::new(model.params());
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let shuffle_seed = derive_seed(cfg.seed, "shuffle");
    let sample_seed = derive_seed(cfg.seed, "sample");
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut stream(shuffle_seed, epoch as u64));
        let mut sums = SampleLoss {
            total: 0.0,
            reg: 0.0,
            seg: 0.0,
            rec: model.config().reconstruction_head.then_some(0.0),
        };
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let frozen = &*model;
            let results = batch
                .par_iter()
                .enumerate()
                .map(|(j, &idx)| {
                    let sample = &data[idx];
                    let key = (epoch * data.len() + b * cfg.batch_size + j) as u64;
                    let mut rng = stream(sample_seed, key);
                    let inputs = mode_inputs(frozen, sample, cfg, &mut rng)?;
                    weighted_loss_and_grads(frozen, &Targets::from_sample(sample), &inputs)
                })
                .collect::<Vec<_>>();
            let mut grads: Option<Vec<Tensor>> = None;
            for r in results {
                let (loss, g) = r.map_err(|e| Error::Diverged {
                    epoch,
                    detail: e.to_string(),
                })?;
                if !loss.total.is_finite() || g.iter().any(|t| !t.all_finite()) {
                    return Err(Error::Diverged {
                        epoch,
                        detail: format!("non-finite loss {} in batch {b}", loss.total),
                    });
                }
                sums.total += loss.total;
                sums.reg += loss.reg;
                sums.seg += loss.seg;
                if let (Some(s), Some(r)) = (sums.rec.as_mut(), loss.rec) {
                    *s += r;
                }
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, t)| a.add_assign(t)),
                }
            }
            let mut grads = grads.expect("batches are non-empty");
            let inv = 1.0 / batch.len() as f64;
            for t in &mut grads {
                t.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            adamax_step(model.params_mut(), &grads, &mut state, &cfg.optimizer);
        }
        let n = data.len() as f64;
        let entry = EpochLog {
            epoch,
            loss: sums.total / n,
            loss_reg: sums.reg / n,
            loss_seg: sums.seg / n,
            loss_rec: sums.rec.map(|r| r / n),
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} epoch {epoch}: loss {:.5} (reg {:.5}, seg {:.5}) in {:.1}s",
            cfg.loss_mode,
            entry.loss,
            entry.loss_reg,
            entry.loss_seg,
            entry.wall_seconds
        );
        log.epochs.push(entry);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let g = vec![Tensor::zeros(&[3])];
        let mut s = AdamaxState::new(&p);
        for _ in 0..3 {
            adamax_step(&mut p, &g, &mut s, &AdamaxConfig::default());
        }
        assert_eq!(p, before);
        assert_eq!(s.t, 3);
    }

    #[test]
    fn constant_gradient_converges_to_step_size() {
        let mut p = vec![Tensor::zeros(&[2])];
        let g = vec![Tensor::new(vec![2], vec![0.3, -4.0]).unwrap()];
        let mut s = AdamaxState::new(&p);
        let hyper = AdamaxConfig::default();
        let mut last = p[0].data().to_vec();
        for _ in 0..200 {
            adamax_step(&mut p, &g, &mut s, &hyper);
            let now = p[0].data().to_vec();
            let step: Vec<f64> = now.iter().zip(&last).map(|(a, b)| a - b).collect();
            last = now;
            assert!(step[0] < 0.0 && step[1] > 0.0);
            if s.t == 200 {
                assert!((step[0].abs() - hyper.step_size).abs() < 1e-6);
                assert!((step[1].abs() - hyper.step_size).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in LossMode::ALL {
            assert_eq!(m.name().parse::<LossMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("adv".parse::<LossMode>().is_err());
    }
}
