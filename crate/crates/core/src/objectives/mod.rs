//! Training losses, attack objectives and evaluation metrics.
//!
//! Every differentiable quantity is built on a [`Graph`] so it can be
//! differentiated with respect to model parameters (training) or the input
//! image (attacks). The `*_value` functions evaluate the same expressions on
//! plain values.

mod eval;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Contour;
use crate::grid::{binarize, Image, SegMap, SoftSegMap};
use crate::netmodel::{HeadVars, ModelOutput};
use crate::shape_model::PhantomSample;
use crate::tensor::{Graph, Tensor, Var};

pub use eval::{evaluate, EvalConfig, EvalReport, EvalRow, PAPER_EPS_LEVELS};

/// Smoothing term of the soft Dice.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Probability clamp used inside the cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

/// Ground truth (or recorded clean outputs) a loss is measured against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub contour: Contour,
    pub mask: SegMap,
}

impl Targets {
    pub fn new(contour: Contour, mask: SegMap) -> Self {
        Self { contour, mask }
    }

    pub fn from_sample(sample: &PhantomSample) -> Self {
        Self::new(sample.contour.clone(), sample.seg.clone())
    }

    /// Clean-output targets for out-of-distribution attacks.
    pub fn from_output(out: &ModelOutput, threshold: f64) -> Self {
        Self::new(out.contour.clone(), binarize(&out.soft_seg, threshold))
    }
}

/// The four attack objectives. All are maximized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectiveKind {
    #[serde(rename = "IND_reg")]
    IndReg,
    #[serde(rename = "IND_seg")]
    IndSeg,
    #[serde(rename = "OOD_reg")]
    OodReg,
    #[serde(rename = "OOD_seg")]
    OodSeg,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 4] = [Self::IndReg, Self::IndSeg, Self::OodReg, Self::OodSeg];

    pub fn name(self) -> &'static str {
        match self {
            Self::IndReg => "IND_reg",
            Self::IndSeg => "IND_seg",
            Self::OodReg => "OOD_reg",
            Self::OodSeg => "OOD_seg",
        }
    }

    pub fn is_ood(self) -> bool {
        matches!(self, Self::OodReg | Self::OodSeg)
    }

    pub fn targets_regression(self) -> bool {
        matches!(self, Self::IndReg | Self::OodReg)
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown objective `{s}` (expected IND_reg, IND_seg, OOD_reg or OOD_seg)")))
    }
}

fn contour_diff(g: &mut Graph<'_>, pred: Var, target: &Contour) -> Result<Var> {
    let n = g.shape(pred).iter().product::<usize>();
    if n != 2 * target.len() {
        return Err(Error::shape(
            "contour loss",
            format!("prediction has {} points, target has {}", n / 2, target.len()),
        ));
    }
    let flat = g.flatten(pred);
    let t = g.constant(Tensor::new(vec![n], target.to_flat())?);
    g.sub(flat, t)
}

fn mask_constant(g: &mut Graph<'_>, soft: Var, mask: &SegMap) -> Result<Var> {
    let (h, w) = mask.dims();
    let n: usize = g.shape(soft).iter().product();
    if n != h * w {
        return Err(Error::shape(
            "segmentation loss",
            format!("prediction {:?} vs mask {h}x{w}", g.shape(soft)),
        ));
    }
    let t = Tensor::new(g.shape(soft).to_vec(), mask.to_f64().into_data())?;
    Ok(g.constant(t))
}

fn one_minus(g: &mut Graph<'_>, v: Var) -> Var {
    let neg = g.scale(v, -1.0);
    g.add_scalar(neg, 1.0)
}

/// `(2 Σ p m + τ) / (Σ p + Σ m + τ)`.
pub fn soft_dice(g: &mut Graph<'_>, soft: Var, mask: &SegMap) -> Result<Var> {
    let m = mask_constant(g, soft, mask)?;
    let pm = g.mul(soft, m)?;
    let inter = g.sum(pm);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, DICE_SMOOTH);
    let sp = g.sum(soft);
    let den = g.add_scalar(sp, mask.count() as f64 + DICE_SMOOTH);
    g.div(num, den)
}

fn bce(g: &mut Graph<'_>, soft: Var, mask: &SegMap) -> Result<Var> {
    let m = mask_constant(g, soft, mask)?;
    let p = g.clamp(soft, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let log_p = g.ln(p);
    let q = one_minus(g, p);
    let log_q = g.ln(q);
    let not_m = one_minus(g, m);
    let a = g.mul(m, log_p)?;
    let b = g.mul(not_m, log_q)?;
    let s = g.add(a, b)?;
    let mean = g.mean(s);
    Ok(g.scale(mean, -1.0))
}

/// Mean absolute coordinate error, `‖ŝ − s‖₁ / (2P)`.
pub fn loss_reg(g: &mut Graph<'_>, pred: Var, target: &Contour) -> Result<Var> {
    let d = contour_diff(g, pred, target)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// `0.5 (1 − softDice) + 0.5 BCE`.
pub fn loss_seg(g: &mut Graph<'_>, soft: Var, mask: &SegMap) -> Result<Var> {
    let d = soft_dice(g, soft, mask)?;
    let dice_loss = one_minus(g, d);
    let ce = bce(g, soft, mask)?;
    let s = g.add(dice_loss, ce)?;
    Ok(g.scale(s, 0.5))
}

/// Mean absolute pixel error of the reconstruction.
pub fn loss_rec(g: &mut Graph<'_>, rec: Var, x: &Image) -> Result<Var> {
    let n: usize = g.shape(rec).iter().product();
    if n != x.data().len() {
        return Err(Error::shape(
            "reconstruction loss",
            format!("reconstruction {:?} vs image {:?}", g.shape(rec), x.dims()),
        ));
    }
    let t = g.constant(Tensor::new(g.shape(rec).to_vec(), x.data().to_vec())?);
    let d = g.sub(rec, t)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Graph handles of one evaluation of the standard loss.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub reg: Var,
    pub seg: Var,
    pub rec: Option<Var>,
    pub total: Var,
}

/// `L_reg + L_seg`, plus `L_rec` against `input` when the model has a
/// reconstruction head.
pub fn loss_standard(g: &mut Graph<'_>, heads: &HeadVars, targets: &Targets, input: &Image) -> Result<LossTerms> {
    let reg = loss_reg(g, heads.contour, &targets.contour)?;
    let seg = loss_seg(g, heads.seg, &targets.mask)?;
    let mut total = g.add(reg, seg)?;
    let rec = match heads.rec {
        Some(r) => {
            let l = loss_rec(g, r, input)?;
            total = g.add(total, l)?;
            Some(l)
        }
        None => None,
    };
    Ok(LossTerms { reg, seg, rec, total })
}

/// Scalar attack objective on the model heads.
pub fn attack_objective(g: &mut Graph<'_>, kind: ObjectiveKind, heads: &HeadVars, targets: &Targets) -> Result<Var> {
    match kind {
        ObjectiveKind::IndReg => {
            let d = contour_diff(g, heads.contour, &targets.contour)?;
            let sq = g.square(d);
            Ok(g.sum(sq))
        }
        ObjectiveKind::IndSeg => {
            let d = soft_dice(g, heads.seg, &targets.mask)?;
            Ok(one_minus(g, d))
        }
        ObjectiveKind::OodReg => {
            let d = contour_diff(g, heads.contour, &targets.contour)?;
            let a = g.abs(d);
            let s = g.sum(a);
            Ok(g.scale(s, -1.0))
        }
        ObjectiveKind::OodSeg => soft_dice(g, heads.seg, &targets.mask),
    }
}

fn contour_leaf(g: &mut Graph<'_>, c: &Contour) -> Var {
    g.constant(Tensor::new(vec![2 * c.len()], c.to_flat()).expect("flat contour length"))
}

pub fn loss_reg_value(pred: &Contour, target: &Contour) -> Result<f64> {
    let mut g = Graph::new();
    let p = contour_leaf(&mut g, pred);
    let l = loss_reg(&mut g, p, target)?;
    Ok(g.value(l).item())
}

pub fn loss_seg_value(soft: &SoftSegMap, mask: &SegMap) -> Result<f64> {
    soft.check_same_dims(mask, "segmentation loss")?;
    let mut g = Graph::new();
    let p = g.constant(soft.to_tensor());
    let l = loss_seg(&mut g, p, mask)?;
    Ok(g.value(l).item())
}

pub fn loss_rec_value(rec: &Image, x: &Image) -> Result<f64> {
    rec.check_same_dims(x, "reconstruction loss")?;
    let mut g = Graph::new();
    let r = g.constant(rec.to_tensor());
    let l = loss_rec(&mut g, r, x)?;
    Ok(g.value(l).item())
}

/// Attack objective evaluated on plain model outputs.
pub fn objective_value(kind: ObjectiveKind, out: &ModelOutput, targets: &Targets) -> Result<f64> {
    out.soft_seg.check_same_dims(&targets.mask, "attack objective")?;
    let mut g = Graph::new();
    let contour = contour_leaf(&mut g, &out.contour);
    let seg = g.constant(out.soft_seg.to_tensor());
    let heads = HeadVars { contour, seg, rec: None };
    let j = attack_objective(&mut g, kind, &heads, targets)?;
    Ok(g.value(j).item())
}

/// Mean per-point Euclidean distance between corresponding points, in pixels.
pub fn mean_point_error(pred: &Contour, truth: &Contour) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape(
            "point error",
            format!("contours have {} and {} points", pred.len(), truth.len()),
        ));
    }
    let total: f64 = pred.points().iter().zip(truth.points()).map(|(a, b)| a.dist(*b)).sum();
    Ok(total / pred.len() as f64)
}
