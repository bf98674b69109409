//! Out-of-distribution attacks and reconstruction-based OOD detection.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{export_adversarial, run_attack, AttackConfig, AttackMode};
use crate::error::{Error, Result};
use crate::geometry::{contour_dice, dice};
use crate::grid::{binarize, Image};
use crate::io::{read_pgm, write_json};
use crate::netmodel::{Predictor, DEFAULT_THRESHOLD};
use crate::objectives::{loss_rec_value, ObjectiveKind, Targets};
use crate::rng::{derive_seed, stream};
use crate::shape_model::PhantomSample;

/// Bins of the Dice-vs-target histogram over `[0, 1]`.
pub const DICE_BINS: usize = 32;
/// Bins of the reconstruction-error histograms.
pub const ERROR_BINS: usize = 32;

/// Reconstruction error `mean |x_rec − x|` used as the OOD score.
pub fn ood_score<P: Predictor + ?Sized>(model: &P, x: &Image) -> Result<f64> {
    let out = model.predict(x)?;
    let rec = out.reconstruction.ok_or(Error::NoReconstructionHead)?;
    loss_rec_value(&rec, x)
}

/// Probability that a random OOD score exceeds a random IND score, ties
/// counted one half (OOD is the positive class).
pub fn auroc(ind_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if ind_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::Empty("AUROC score list".into()));
    }
    if ind_scores.iter().chain(ood_scores).any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUROC scores".into()));
    }
    // Mann-Whitney U from mid-ranks of the pooled scores
    let mut pooled: Vec<(f64, bool)> = ind_scores
        .iter()
        .map(|&s| (s, false))
        .chain(ood_scores.iter().map(|&s| (s, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * pooled[i..j].iter().filter(|p| p.1).count() as f64;
        i = j;
    }
    let (n_pos, n_neg) = (ood_scores.len() as f64, ind_scores.len() as f64);
    Ok((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// I.i.d. uniform pixels.
    Uniform,
    /// Sum of random Gaussian blobs.
    Blobs,
    /// Checkerboard with random cell size, phase and contrast.
    Checkerboard,
}

/// Seed images for OOD attacks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodSource {
    /// A grayscale PGM, resized to the model input.
    File(PathBuf),
    Procedural { kind: NoiseKind, seed: u64 },
}

impl OodSource {
    /// Seed image number `index`, `size x size`, values in `[0, 1]`.
    pub fn image(&self, size: usize, index: usize) -> Result<Image> {
        match self {
            Self::File(path) => Ok(resize_bilinear(&read_pgm(path)?, size, size)),
            Self::Procedural { kind, seed } => {
                let mut rng = stream(*seed, index as u64);
                Ok(procedural(*kind, size, &mut rng))
            }
        }
    }
}

fn procedural(kind: NoiseKind, size: usize, rng: &mut impl Rng) -> Image {
    let s = size as f64;
    match kind {
        NoiseKind::Uniform => Image::from_fn(size, size, |_, _| rng.gen()),
        NoiseKind::Blobs => {
            let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(3..8))
                .map(|_| {
                    (
                        rng.gen_range(0.0..s),
                        rng.gen_range(0.0..s),
                        rng.gen_range(0.05..0.25) * s,
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            let raw = Image::from_fn(size, size, |r, c| {
                let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
                blobs
                    .iter()
                    .map(|&(bx, by, sd, amp)| amp * (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * sd * sd)).exp())
                    .sum::<f64>()
            });
            normalize(raw)
        }
        NoiseKind::Checkerboard => {
            let cell = rng.gen_range(2..=(size / 4).max(2)) as f64;
            let (ox, oy) = (rng.gen_range(0.0..cell), rng.gen_range(0.0..cell));
            let lo = rng.gen_range(0.0..0.4);
            let hi = rng.gen_range(0.6..1.0);
            Image::from_fn(size, size, |r, c| {
                let a = ((c as f64 + ox) / cell).floor() as i64;
                let b = ((r as f64 + oy) / cell).floor() as i64;
                if (a + b).rem_euclid(2) == 0 {
                    lo
                } else {
                    hi
                }
            })
        }
    }
}

fn normalize(img: Image) -> Image {
    let lo = img.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return img.map(|_| 0.5);
    }
    img.map(|&v| (v - lo) / (hi - lo))
}

/// Pixel-center aligned bilinear resize.
pub fn resize_bilinear(img: &Image, h: usize, w: usize) -> Image {
    let (ih, iw) = img.dims();
    if (ih, iw) == (h, w) {
        return img.clone();
    }
    let sy = ih as f64 / h as f64;
    let sx = iw as f64 / w as f64;
    Image::from_fn(h, w, |r, c| {
        let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (ih - 1) as f64);
        let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (iw - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(ih - 1), (x0 + 1).min(iw - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = img.get(y0, x0) * (1.0 - fx) + img.get(y0, x1) * fx;
        let bottom = img.get(y1, x0) * (1.0 - fx) + img.get(y1, x1) * fx;
        (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` increasing edges; the last bin is closed.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let k = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Self { edges, counts }
    }

    /// Range taken from the data.
    pub fn auto(values: &[f64], bins: usize) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            return Self::new(values, 0.0, 1.0, bins);
        }
        Self::new(values, lo, if hi > lo { hi } else { lo + 1.0 }, bins)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["lo", "hi", "count"])?;
        for (i, c) in self.counts.iter().enumerate() {
            w.write_record([self.edges[i].to_string(), self.edges[i + 1].to_string(), c.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format {
            what: "csv",
            detail: e.to_string(),
        })?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodConfig {
    pub attack: AttackConfig,
    pub source: OodSource,
    pub threshold: f64,
    pub seed: u64,
    /// Where to dump the adversarial seeds as PGM + JSON, if anywhere.
    #[serde(default)]
    pub export_dir: Option<PathBuf>,
    /// Export only the first `n` samples; `None` exports all.
    #[serde(default)]
    pub export_limit: Option<usize>,
}

impl OodConfig {
    pub fn new(objective: ObjectiveKind, source: OodSource, seed: u64) -> Self {
        Self {
            attack: AttackConfig::ood(objective),
            source,
            threshold: DEFAULT_THRESHOLD,
            seed,
            export_dir: None,
            export_limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub objective: ObjectiveKind,
    /// Per-sample Dice between outputs on `x_out` and on `x`.
    pub dice_vs_target: Vec<f64>,
    pub dice_histogram: Histogram,
    /// Detector scores; present when the model has a reconstruction head.
    pub ind_scores: Option<Vec<f64>>,
    pub ood_scores: Option<Vec<f64>>,
    pub ind_error_histogram: Option<Histogram>,
    pub ood_error_histogram: Option<Histogram>,
    pub auroc: Option<f64>,
}

impl OodReport {
    pub fn mean_dice(&self) -> f64 {
        self.dice_vs_target.iter().sum::<f64>() / self.dice_vs_target.len() as f64
    }

    /// Fraction of samples whose Dice vs target reaches `level`.
    pub fn success_rate(&self, level: f64) -> f64 {
        self.dice_vs_target.iter().filter(|&&d| d >= level).count() as f64 / self.dice_vs_target.len() as f64
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(format!("{stem}.json")), self)?;
        let put = |name: String, h: &Histogram| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, h.to_csv()?).map_err(|e| Error::io(&p, e))
        };
        put(format!("{stem}_dice_hist.csv"), &self.dice_histogram)?;
        if let (Some(i), Some(o)) = (&self.ind_error_histogram, &self.ood_error_histogram) {
            put(format!("{stem}_ind_error_hist.csv"), i)?;
            put(format!("{stem}_ood_error_hist.csv"), o)?;
        }
        Ok(())
    }
}

struct SampleOutcome {
    dice: f64,
    ind_score: Option<f64>,
    ood_score: Option<f64>,
}

fn ood_sample<P: Predictor + ?Sized>(model: &P, sample: &PhantomSample, index: usize, cfg: &OodConfig) -> Result<SampleOutcome> {
    let size = sample.image.height();
    let clean = model.predict(&sample.image)?;
    let targets = Targets::from_output(&clean, cfg.threshold);
    let seed_img = cfg.source.image(size, index)?;
    let mut rng = stream(derive_seed(cfg.seed, "ood"), index as u64);
    let res = run_attack(model, &sample.image, &targets, &seed_img, &cfg.attack, &mut rng)?;
    if let Some(dir) = cfg.export_dir.as_ref().filter(|_| cfg.export_limit.map_or(true, |n| index < n)) {
        export_adversarial(dir, &format!("ood_{index:04}"), &res, &cfg.attack)?;
    }
    let out = model.predict(&res.adversarial)?;
    let (h, w) = sample.image.dims();
    let d = if cfg.attack.objective.targets_regression() {
        contour_dice(&out.contour, &clean.contour, h, w)?
    } else {
        dice(&binarize(&out.soft_seg, cfg.threshold), &targets.mask)?
    };
    let (ind_score, ood_score) = match (&clean.reconstruction, &out.reconstruction) {
        (Some(r_in), Some(r_out)) => (
            Some(loss_rec_value(r_in, &sample.image)?),
            Some(loss_rec_value(r_out, &res.adversarial)?),
        ),
        _ => (None, None),
    };
    Ok(SampleOutcome {
        dice: d,
        ind_score,
        ood_score,
    })
}

/// For every test sample, attacks an OOD seed toward the clean outputs on
/// that sample and measures how closely the outputs match.
pub fn run_ood_attack_experiment<P: Predictor + ?Sized>(model: &P, test_set: &[PhantomSample], cfg: &OodConfig) -> Result<OodReport> {
    if test_set.is_empty() {
        return Err(Error::Empty("test set".into()));
    }
    if cfg.attack.mode != AttackMode::Ood {
        return Err(Error::InvalidArgument("OOD experiments need an OOD-mode attack".into()));
    }
    cfg.attack.validate()?;
    let outcomes = test_set
        .par_iter()
        .enumerate()
        .map(|(i, s)| ood_sample(model, s, i, cfg))
        .collect::<Result<Vec<_>>>()?;
    let dice_vs_target: Vec<f64> = outcomes.iter().map(|o| o.dice).collect();
    let ind: Option<Vec<f64>> = outcomes.iter().map(|o| o.ind_score).collect();
    let ood: Option<Vec<f64>> = outcomes.iter().map(|o| o.ood_score).collect();
    let auroc = match (&ind, &ood) {
        (Some(i), Some(o)) => Some(auroc(i, o)?),
        _ => None,
    };
    let (ind_hist, ood_hist) = match (&ind, &ood) {
        (Some(i), Some(o)) => {
            let all: Vec<f64> = i.iter().chain(o).copied().collect();
            let shared = Histogram::auto(&all, ERROR_BINS);
            let (lo, hi) = (shared.edges[0], *shared.edges.last().unwrap());
            (
                Some(Histogram::new(i, lo, hi, ERROR_BINS)),
                Some(Histogram::new(o, lo, hi, ERROR_BINS)),
            )
        }
        _ => (None, None),
    };
    Ok(OodReport {
        objective: cfg.attack.objective,
        dice_histogram: Histogram::new(&dice_vs_target, 0.0, 1.0, DICE_BINS),
        dice_vs_target,
        ind_scores: ind,
        ood_scores: ood,
        ind_error_histogram: ind_hist,
        ood_error_histogram: ood_hist,
        auroc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn auroc_edge_cases() {
        assert_eq!(auroc(&[0.1, 0.2], &[0.3, 0.4, 0.5]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3, 0.4], &[0.1, 0.2]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.7; 4], &[0.7; 3]).unwrap(), 0.5);
        assert!(auroc(&[], &[1.0]).is_err());
        assert!(auroc(&[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn procedural_sources_are_valid_and_deterministic() {
        for kind in [NoiseKind::Uniform, NoiseKind::Blobs, NoiseKind::Checkerboard] {
            let src = OodSource::Procedural { kind, seed: 9 };
            let a = src.image(16, 3).unwrap();
            assert_eq!(a, src.image(16, 3).unwrap());
            assert_ne!(a, src.image(16, 4).unwrap());
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn file_source_is_resized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seed.pgm");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Image::from_fn(20, 30, |_, _| rng.gen());
        crate::io::write_pgm(&path, &img).unwrap();
        let got = OodSource::File(path).image(16, 0).unwrap();
        assert_eq!(got.dims(), (16, 16));
    }

    #[test]
    fn histogram_counts_everything() {
        let h = Histogram::new(&[0.0, 0.5, 1.0, 0.99, 0.01], 0.0, 1.0, 4);
        assert_eq!(h.counts, vec![2, 0, 1, 2]);
        assert_eq!(h.edges.len(), 5);
        let a = Histogram::auto(&[2.0, 2.0], 3);
        assert_eq!(a.counts.iter().sum::<usize>(), 2);
    }
}
