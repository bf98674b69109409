//! Projected-gradient attacks in and out of distribution.
//!
//! Starting from `x_init + ξ`, each iteration takes a signed (L∞) or
//! normalized (L2) gradient-ascent step of size `α` and projects back onto
//! the ε-ball around the configured center and onto the `[0, 1]` box.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Image;
use crate::io::{write_json, write_pgm};
use crate::netmodel::{Model, Predictor};
use crate::objectives::{attack_objective, ObjectiveKind, Targets};
use crate::tensor::Graph;

/// Feasibility slack used by the L2 projection loop.
pub const PROJECTION_TOL: f64 = 1e-9;
const L2_PROJECTION_ROUNDS: usize = 10;
const MIN_GRAD_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linf => "linf",
            Self::L2 => "l2",
        })
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linf" | "inf" => Ok(Self::Linf),
            "l2" | "2" => Ok(Self::L2),
            _ => Err(Error::InvalidArgument(format!("unknown norm `{s}` (expected linf or l2)"))),
        }
    }
}

impl Norm {
    pub fn measure(self, v: &[f64]) -> f64 {
        match self {
            Self::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            Self::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    Ind,
    Ood,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BallCenter {
    DataSample,
    InitSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub eps: f64,
    pub norm: Norm,
    pub iterations: usize,
    /// Step size α.
    pub step_size: f64,
    pub objective: ObjectiveKind,
    pub mode: AttackMode,
    pub ball_center: BallCenter,
    /// Return the final iterate instead of the best one.
    #[serde(default)]
    pub last_iterate: bool,
}

impl AttackConfig {
    /// In-distribution L∞ attack with `α = ε / 5`.
    pub fn ind(objective: ObjectiveKind, eps: f64, iterations: usize) -> Self {
        Self {
            eps,
            norm: Norm::Linf,
            iterations,
            step_size: eps / 5.0,
            objective,
            mode: AttackMode::Ind,
            ball_center: BallCenter::DataSample,
            last_iterate: false,
        }
    }

    /// Out-of-distribution L∞ attack: ball of radius 0.3 around the seed.
    pub fn ood(objective: ObjectiveKind) -> Self {
        Self {
            eps: 0.3,
            norm: Norm::Linf,
            iterations: 100,
            step_size: 0.01,
            objective,
            mode: AttackMode::Ood,
            ball_center: BallCenter::InitSample,
            last_iterate: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("eps must be finite and >= 0, got {}", self.eps)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument(format!("step size must be > 0, got {}", self.step_size)));
        }
        if self.mode == AttackMode::Ind && self.ball_center != BallCenter::DataSample {
            return Err(Error::InvalidArgument("IND attacks are centered on the data sample".into()));
        }
        if self.objective.is_ood() != (self.mode == AttackMode::Ood) {
            return Err(Error::InvalidArgument(format!(
                "objective {} does not match {:?} mode",
                self.objective, self.mode
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub adversarial: Image,
    /// `x_ε − center`.
    pub delta: Image,
    /// Objective at the projected initialization and after every step.
    pub trace: Vec<f64>,
    pub best_iterate: usize,
    /// Set when a non-finite objective or gradient stopped the loop early.
    pub aborted: Option<String>,
}

impl AttackResult {
    pub fn objective(&self) -> f64 {
        self.trace[self.best_iterate]
    }
}

/// Scalar function of an image with its input gradient.
pub trait InputObjective {
    fn value_and_grad(&self, x: &Image) -> Result<(f64, Image)>;
}

impl<F: Fn(&Image) -> Result<(f64, Image)>> InputObjective for F {
    fn value_and_grad(&self, x: &Image) -> Result<(f64, Image)> {
        self(x)
    }
}

/// One of the four objectives evaluated through a frozen model.
pub struct ModelObjective<'m, P: ?Sized> {
    pub model: &'m P,
    pub kind: ObjectiveKind,
    pub targets: &'m Targets,
}

impl<P: Predictor + ?Sized> InputObjective for ModelObjective<'_, P> {
    fn value_and_grad(&self, x: &Image) -> Result<(f64, Image)> {
        self.model.objective_grad(x, self.kind, self.targets)
    }
}

/// Objective value and `∂J/∂x` with the parameters held constant.
pub fn grad_wrt_input(model: &Model, x: &Image, kind: ObjectiveKind, targets: &Targets) -> Result<(f64, Image)> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, false);
    let xv = g.leaf(x.to_tensor(), true);
    let heads = model.forward_graph(&mut g, &params, xv)?;
    let j = attack_objective(&mut g, kind, &heads, targets)?;
    let value = g.value(j).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("{kind} objective evaluated to {value}")));
    }
    let grads = g.backward(j)?;
    Ok((value, Image::from_tensor(&grads.wrt(xv))?))
}

/// Projects `v` onto the ε-ball around `center` intersected with `[0, 1]`.
pub fn project(v: &Image, center: &Image, eps: f64, norm: Norm) -> Result<Image> {
    v.check_same_dims(center, "project")?;
    let mut out = v.clone();
    match norm {
        Norm::Linf => {
            for (o, c) in out.data_mut().iter_mut().zip(center.data()) {
                *o = (c + (*o - c).clamp(-eps, eps)).clamp(0.0, 1.0);
            }
        }
        Norm::L2 => {
            for _ in 0..L2_PROJECTION_ROUNDS {
                let dist = l2_dist(&out, center);
                if dist > eps {
                    let s = eps / dist;
                    for (o, c) in out.data_mut().iter_mut().zip(center.data()) {
                        *o = c + (*o - c) * s;
                    }
                }
                for o in out.data_mut() {
                    *o = o.clamp(0.0, 1.0);
                }
                if l2_dist(&out, center) <= eps + PROJECTION_TOL {
                    break;
                }
            }
        }
    }
    Ok(out)
}

fn l2_dist(a: &Image, b: &Image) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `sign(g)` for L∞, `g / ‖g‖₂` for L2 (zero when `‖g‖₂ < 1e-12`).
pub fn step_direction(grad: &Image, norm: Norm) -> Result<Image> {
    if grad.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attack gradient".into()));
    }
    Ok(match norm {
        Norm::Linf => grad.map(|&v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }),
        Norm::L2 => {
            let n = Norm::L2.measure(grad.data());
            if n < MIN_GRAD_NORM {
                grad.map(|_| 0.0)
            } else {
                grad.map(|&v| v / n)
            }
        }
    })
}

/// Random start `ξ` with `‖ξ‖_p ≤ ε`.
pub fn random_start(h: usize, w: usize, eps: f64, norm: Norm, rng: &mut impl Rng) -> Image {
    if eps == 0.0 {
        return Image::zeros(h, w);
    }
    match norm {
        Norm::Linf => Image::from_fn(h, w, |_, _| rng.gen_range(-eps..=eps)),
        Norm::L2 => {
            let dir = Image::from_fn(h, w, |_, _| rng.sample::<f64, _>(StandardNormal));
            let n = Norm::L2.measure(dir.data());
            let u: f64 = rng.gen();
            let radius = eps * u.powf(1.0 / (h * w) as f64);
            dir.map(|&v| if n > 0.0 { v / n * radius } else { 0.0 })
        }
    }
}

fn check_unit_range(x: &Image, what: &str) -> Result<()> {
    if x.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} has pixels outside [0, 1] or non-finite")))
    }
}

/// Generic projected-gradient ascent on any input objective.
pub fn pgd(objective: &impl InputObjective, x: &Image, x_init: &Image, cfg: &AttackConfig, rng: &mut impl Rng) -> Result<AttackResult> {
    if !(cfg.eps >= 0.0 && cfg.step_size > 0.0) {
        return Err(Error::InvalidArgument("eps must be >= 0 and step size > 0".into()));
    }
    x.check_same_dims(x_init, "attack")?;
    check_unit_range(x, "x")?;
    check_unit_range(x_init, "x_init")?;
    let center = match cfg.ball_center {
        BallCenter::DataSample => x,
        BallCenter::InitSample => x_init,
    };
    let (h, w) = x.dims();
    let xi = random_start(h, w, cfg.eps, cfg.norm, rng);
    let start = Image::from_fn(h, w, |r, c| x_init.get(r, c) + xi.get(r, c));
    let mut current = project(&start, center, cfg.eps, cfg.norm)?;
    let (j0, mut grad) = objective.value_and_grad(&current)?;
    if !j0.is_finite() {
        return Err(Error::NonFinite(format!("objective at the attack start evaluated to {j0}")));
    }

    let mut trace = vec![j0];
    let mut best = current.clone();
    let mut best_iterate = 0;
    let mut aborted = None;
    for n in 1..=cfg.iterations {
        let dir = match step_direction(&grad, cfg.norm) {
            Ok(d) => d,
            Err(e) => {
                aborted = Some(format!("iteration {n}: {e}"));
                break;
            }
        };
        let stepped = Image::from_fn(h, w, |r, c| current.get(r, c) + cfg.step_size * dir.get(r, c));
        let next = project(&stepped, center, cfg.eps, cfg.norm)?;
        match objective.value_and_grad(&next) {
            Ok((j, g)) if j.is_finite() => {
                trace.push(j);
                current = next;
                grad = g;
                if j > trace[best_iterate] {
                    best_iterate = n;
                    best = current.clone();
                }
            }
            Ok((j, _)) => {
                aborted = Some(format!("iteration {n}: objective evaluated to {j}"));
                break;
            }
            Err(e) => {
                aborted = Some(format!("iteration {n}: {e}"));
                break;
            }
        }
    }
    if let Some(msg) = &aborted {
        log::warn!("attack stopped early, returning best iterate: {msg}");
    }
    let (adversarial, best_iterate) = if cfg.last_iterate && aborted.is_none() {
        (current, trace.len() - 1)
    } else {
        (best, best_iterate)
    };
    let delta = Image::from_fn(h, w, |r, c| adversarial.get(r, c) - center.get(r, c));
    Ok(AttackResult {
        adversarial,
        delta,
        trace,
        best_iterate,
        aborted,
    })
}

/// Attack on a frozen model. IND attacks use the ground truth of `x` as
/// targets; OOD attacks start from `x_init` and use the clean outputs on `x`.
pub fn run_attack<P: Predictor + ?Sized>(
    model: &P,
    x: &Image,
    targets: &Targets,
    x_init: &Image,
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<AttackResult> {
    cfg.validate()?;
    if cfg.mode == AttackMode::Ind && x_init != x {
        return Err(Error::InvalidArgument("IND attacks start from x_init = x".into()));
    }
    let objective = ModelObjective {
        model,
        kind: cfg.objective,
        targets,
    };
    pgd(&objective, x, x_init, cfg, rng)
}

/// Shorthand for an IND attack (`x_init = x`).
pub fn run_ind_attack<P: Predictor + ?Sized>(model: &P, x: &Image, targets: &Targets, cfg: &AttackConfig, rng: &mut impl Rng) -> Result<AttackResult> {
    run_attack(model, x, targets, x, cfg, rng)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    eps: f64,
    norm: Norm,
    iterations: usize,
    step_size: f64,
    objective: ObjectiveKind,
    mode: AttackMode,
    achieved_delta_norm: f64,
    best_iterate: usize,
    aborted: &'a Option<String>,
    trace: &'a [f64],
}

/// Writes `<stem>.pgm` and a `<stem>.json` sidecar describing the attack.
pub fn export_adversarial(dir: &Path, stem: &str, result: &AttackResult, cfg: &AttackConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_pgm(&dir.join(format!("{stem}.pgm")), &result.adversarial)?;
    let sidecar = Sidecar {
        eps: cfg.eps,
        norm: cfg.norm,
        iterations: cfg.iterations,
        step_size: cfg.step_size,
        objective: cfg.objective,
        mode: cfg.mode,
        achieved_delta_norm: cfg.norm.measure(result.delta.data()),
        best_iterate: result.best_iterate,
        aborted: &result.aborted,
        trace: &result.trace,
    };
    write_json(&dir.join(format!("{stem}.json")), &sidecar)
}
