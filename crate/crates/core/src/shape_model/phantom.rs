use std::f64::consts::{PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{rasterize_contour, Contour, Point};
use crate::grid::{Image, SegMap};

/// Parameters of the synthetic disk phantom. Lengths given as fractions are
/// relative to `image_size`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub image_size: usize,
    pub points: usize,
    /// Horizontal semi-axis range (fraction of the image size).
    pub semi_major: (f64, f64),
    /// Vertical semi-axis range (fraction of the image size).
    pub semi_minor: (f64, f64),
    /// Maximum disk-center offset from the image center (fraction).
    pub center_jitter: f64,
    /// Maximum in-plane rotation, radians.
    pub max_rotation: f64,
    /// Total amplitude of the Fourier radial perturbation (fraction of radius).
    pub perturbation: f64,
    /// Highest harmonic in the radial perturbation.
    pub harmonics: usize,
    pub background: (f64, f64),
    pub disk_peak: (f64, f64),
    pub vertebra: (f64, f64),
    /// Dark gap between disk and vertebra blocks, in pixels.
    pub endplate_gap: f64,
    /// Amplitude of the smooth additive texture field.
    pub texture: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            points: 64,
            semi_major: (0.26, 0.34),
            semi_minor: (0.12, 0.17),
            center_jitter: 0.04,
            max_rotation: 0.15,
            perturbation: 0.12,
            harmonics: 4,
            background: (0.20, 0.30),
            disk_peak: (0.48, 0.62),
            vertebra: (0.35, 0.45),
            endplate_gap: 1.5,
            texture: 0.06,
        }
    }
}

impl PhantomConfig {
    /// Same phantom family at a different resolution and point count.
    pub fn scaled(image_size: usize, points: usize) -> Self {
        Self {
            image_size,
            points,
            endplate_gap: 1.5 * image_size as f64 / 64.0,
            ..Self::default()
        }
    }
}

/// Labeled sample: image, contour, and the rasterized contour as mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSample {
    pub image: Image,
    pub contour: Contour,
    pub seg: SegMap,
}

impl PhantomSample {
    /// Pairs an image with a contour, rasterizing the mask.
    pub fn new(image: Image, contour: Contour) -> crate::Result<Self> {
        let seg = rasterize_contour(&contour, image.height(), image.width())?;
        Ok(Self { image, contour, seg })
    }
}

struct DiskShape {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    rot: f64,
    /// (order, cos coefficient, sin coefficient)
    harmonics: Vec<(usize, f64, f64)>,
}

impl DiskShape {
    fn radius(&self, theta: f64) -> f64 {
        let (s, c) = theta.sin_cos();
        let ellipse = self.a * self.b / ((self.b * c).powi(2) + (self.a * s).powi(2)).sqrt();
        let bump: f64 = self
            .harmonics
            .iter()
            .map(|&(m, cm, sm)| cm * (m as f64 * theta).cos() + sm * (m as f64 * theta).sin())
            .sum();
        ellipse * (1.0 + bump)
    }

    /// Point at body-frame angle `theta`, rotated and placed in the image.
    fn point(&self, theta: f64) -> Point {
        let r = self.radius(theta);
        let (lx, ly) = (r * theta.cos(), r * theta.sin());
        let (s, c) = self.rot.sin_cos();
        Point::new(self.cx + c * lx - s * ly, self.cy + s * lx + c * ly)
    }

    /// Normalized radial coordinate of an image point (1 on the boundary).
    fn rho(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.rot.sin_cos();
        let (lx, ly) = (c * dx + s * dy, -s * dx + c * dy);
        let d = lx.hypot(ly);
        if d == 0.0 {
            return 0.0;
        }
        d / self.radius(ly.atan2(lx))
    }

    /// Contour resampled to `n` points at equal arc length, starting at
    /// body-frame angle 0 and running counter-clockwise in body coordinates.
    fn resampled(&self, n: usize) -> Contour {
        const DENSE: usize = 2048;
        let dense: Vec<Point> = (0..=DENSE).map(|i| self.point(TAU * i as f64 / DENSE as f64)).collect();
        let mut cum = Vec::with_capacity(dense.len());
        cum.push(0.0);
        for w in dense.windows(2) {
            cum.push(cum.last().unwrap() + w[0].dist(w[1]));
        }
        let total = *cum.last().unwrap();
        let mut out = Vec::with_capacity(n);
        let mut seg = 0;
        for k in 0..n {
            let target = total * k as f64 / n as f64;
            while seg + 1 < cum.len() - 1 && cum[seg + 1] < target {
                seg += 1;
            }
            let span = cum[seg + 1] - cum[seg];
            let t = if span > 0.0 { (target - cum[seg]) / span } else { 0.0 };
            let (p, q) = (dense[seg], dense[seg + 1]);
            out.push(Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)));
        }
        Contour::new(out)
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Draws one disk phantom: a perturbed ellipse with a bright radial profile,
/// darker background, vertebra-like blocks above and below, and a smooth
/// texture field.
pub fn generate_phantom(rng: &mut impl Rng, cfg: &PhantomConfig) -> PhantomSample {
    let size = cfg.image_size as f64;
    let half = size / 2.0;
    let a = uniform(rng, cfg.semi_major) * size;
    let b = uniform(rng, cfg.semi_minor) * size;
    let cx = half + rng.gen_range(-1.0..=1.0) * cfg.center_jitter * size;
    let cy = half + rng.gen_range(-1.0..=1.0) * cfg.center_jitter * size;
    let rot = rng.gen_range(-1.0..=1.0) * cfg.max_rotation;
    let mut harmonics = Vec::new();
    if cfg.perturbation > 0.0 && cfg.harmonics >= 2 {
        let raw: Vec<(usize, f64, f64)> = (2..=cfg.harmonics)
            .map(|m| (m, rng.gen_range(-1.0..1.0) / m as f64, rng.gen_range(-1.0..1.0) / m as f64))
            .collect();
        let l1: f64 = raw.iter().map(|&(_, c, s)| c.abs() + s.abs()).sum();
        let amp = rng.gen_range(0.3..1.0) * cfg.perturbation;
        if l1 > 0.0 {
            harmonics = raw.into_iter().map(|(m, c, s)| (m, c * amp / l1, s * amp / l1)).collect();
        }
    }
    let disk = DiskShape {
        cx,
        cy,
        a,
        b,
        rot,
        harmonics,
    };
    let contour = disk.resampled(cfg.points);

    let bg = uniform(rng, cfg.background);
    let peak = uniform(rng, cfg.disk_peak);
    let vert = uniform(rng, cfg.vertebra);
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let freq = rng.gen_range(0.5..3.0) * TAU / size;
            let dir = rng.gen_range(0.0..PI);
            (freq * dir.cos(), freq * dir.sin(), rng.gen_range(0.0..TAU), rng.gen_range(0.5..1.0))
        })
        .collect();
    let wave_norm: f64 = waves.iter().map(|w| w.3).sum();

    // vertebra blocks span the disk's horizontal extent, separated vertically
    let (ys, xs): (Vec<f64>, Vec<f64>) = contour.points().iter().map(|p| (p.y, p.x)).unzip();
    let top = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let bottom = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let left = xs.iter().copied().fold(f64::INFINITY, f64::min) - 0.05 * size;
    let right = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 0.05 * size;
    let (s_rot, c_rot) = (rot.sin(), rot.cos());

    let image = Image::from_fn(cfg.image_size, cfg.image_size, |r, c| {
        let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
        let rho = disk.rho(x, y);
        let texture = cfg.texture
            * waves
                .iter()
                .map(|&(kx, ky, ph, w)| w * (kx * x + ky * y + ph).cos())
                .sum::<f64>()
            / wave_norm;
        // slope of block edges follows the disk rotation
        let yr = y - cy - (x - cx) * s_rot / c_rot;
        let in_band = x >= left && x <= right;
        let base = if in_band && yr < top - cy - cfg.endplate_gap {
            vert
        } else if in_band && yr > bottom - cy + cfg.endplate_gap {
            vert
        } else {
            bg
        };
        // soft boundary, ~half a pixel wide
        let inside = 1.0 / (1.0 + ((rho - 1.0) * (a + b) / 2.0 / 0.35).exp());
        let disk_val = peak * (1.0 - 0.35 * rho.min(1.0).powi(2));
        (base * (1.0 - inside) + disk_val * inside + texture).clamp(0.0, 1.0)
    });

    let seg = rasterize_contour(&contour, cfg.image_size, cfg.image_size).expect("phantom contour has P >= 3");
    PhantomSample { image, contour, seg }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_for_fixed_seed() {
        let cfg = PhantomConfig::default();
        let a = generate_phantom(&mut ChaCha8Rng::seed_from_u64(11), &cfg);
        let b = generate_phantom(&mut ChaCha8Rng::seed_from_u64(11), &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn exact_ellipse_area_without_perturbation() {
        let cfg = PhantomConfig {
            perturbation: 0.0,
            max_rotation: 0.0,
            texture: 0.0,
            points: 256,
            ..PhantomConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let s = generate_phantom(&mut rng, &cfg);
            let c = s.contour.centroid();
            let (ax, by) = s.contour.points().iter().fold((0.0f64, 0.0f64), |(ax, by), p| {
                (ax.max((p.x - c.x).abs()), by.max((p.y - c.y).abs()))
            });
            let analytic = PI * ax * by;
            let bound = s.contour.perimeter();
            assert!(((s.seg.count() as f64) - analytic).abs() <= bound, "{} vs {analytic}", s.seg.count());
        }
    }

    #[test]
    fn contour_has_p_points_and_seg_matches() {
        let cfg = PhantomConfig::scaled(32, 24);
        let s = generate_phantom(&mut ChaCha8Rng::seed_from_u64(5), &cfg);
        assert_eq!(s.contour.len(), 24);
        assert_eq!(s.seg, rasterize_contour(&s.contour, 32, 32).unwrap());
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn correspondence_starts_at_body_angle_zero() {
        let cfg = PhantomConfig {
            max_rotation: 0.0,
            ..PhantomConfig::default()
        };
        let s = generate_phantom(&mut ChaCha8Rng::seed_from_u64(8), &cfg);
        let c = s.contour.centroid();
        let p0 = s.contour.points()[0];
        // first point is the rightmost-ish point on the horizontal axis
        assert!(p0.x > c.x);
        assert!((p0.y - c.y).abs() < 0.2 * (p0.x - c.x));
    }
}
