use nalgebra::DMatrix;

use super::{Contour, Point};
use crate::error::{Error, Result};
use crate::grid::Image;

/// Offset applied to duplicated control points before refitting.
const DUPLICATE_JITTER: f64 = 1e-9;
/// Sample positions this close to a pixel center snap onto it.
const SNAP: f64 = 1e-9;

/// 2-D thin-plate spline `f(p) = a0 + ax*x + ay*y + Σ w_i U(|p - c_i|)` per
/// output axis, with `U(r) = r² log r²` and `U(0) = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct TpsTransform {
    control: Vec<Point>,
    /// Rows are output axes (x, y); columns are `[a0, ax, ay]`.
    affine: [[f64; 3]; 2],
    weights: Vec<[f64; 2]>,
}

#[inline]
fn kernel(r2: f64) -> f64 {
    if r2 == 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

impl TpsTransform {
    pub fn identity() -> Self {
        Self {
            control: Vec::new(),
            affine: [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            weights: Vec::new(),
        }
    }

    pub fn control_points(&self) -> &[Point] {
        &self.control
    }

    pub fn affine(&self) -> [[f64; 3]; 2] {
        self.affine
    }

    pub fn weights(&self) -> &[[f64; 2]] {
        &self.weights
    }

    pub fn apply(&self, p: Point) -> Point {
        let [ax, ay] = self.affine;
        let mut x = ax[0] + ax[1] * p.x + ax[2] * p.y;
        let mut y = ay[0] + ay[1] * p.x + ay[2] * p.y;
        for (c, w) in self.control.iter().zip(&self.weights) {
            let dx = p.x - c.x;
            let dy = p.y - c.y;
            let u = kernel(dx * dx + dy * dy);
            x += w[0] * u;
            y += w[1] * u;
        }
        Point::new(x, y)
    }

    pub fn apply_contour(&self, c: &Contour) -> Contour {
        Contour::new(c.points().iter().map(|&p| self.apply(p)).collect())
    }

    /// Largest `|f(source_i) - target_i|` over the control points.
    pub fn max_residual(&self, target: &Contour) -> f64 {
        self.control
            .iter()
            .zip(target.points())
            .map(|(&s, &t)| self.apply(s).dist(t))
            .fold(0.0, f64::max)
    }
}

/// Fits the spline taking `source[i]` to `target[i]`. `lambda` adds
/// regularization on the kernel diagonal; `lambda = 0` interpolates exactly.
pub fn tps_fit(source: &Contour, target: &Contour, lambda: f64) -> Result<TpsTransform> {
    if source.len() != target.len() {
        return Err(Error::shape(
            "tps_fit",
            format!("source has {} points, target {}", source.len(), target.len()),
        ));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    if source.len() < 3 {
        return Err(Error::InvalidArgument("TPS needs at least 3 control points".into()));
    }
    if !source.is_finite() || !target.is_finite() {
        return Err(Error::NonFinite("TPS control points".into()));
    }
    let mut control = source.points().to_vec();
    let dups = jitter_duplicates(&mut control);
    if dups > 0 {
        log::warn!("tps_fit: {dups} duplicate control points jittered by {DUPLICATE_JITTER}");
    }
    if collinear(&control) {
        return Err(Error::Singular("TPS control points are collinear".into()));
    }
    solve(control, target.points(), lambda)
}

fn jitter_duplicates(points: &mut [Point]) -> usize {
    let mut count = 0;
    for i in 1..points.len() {
        let mut bump = 0;
        while points[..i].iter().any(|p| *p == points[i]) {
            bump += 1;
            points[i].x += DUPLICATE_JITTER;
            points[i].y += DUPLICATE_JITTER * (bump as f64).sqrt();
        }
        count += (bump > 0) as usize;
    }
    count
}

fn collinear(points: &[Point]) -> bool {
    let n = points.len() as f64;
    let (mx, my) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p.x / n, b + p.y / n));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p.x - mx, p.y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let det = sxx * syy - sxy * sxy;
    let scale = (sxx + syy).powi(2);
    scale == 0.0 || det <= 1e-14 * scale
}

fn solve(control: Vec<Point>, target: &[Point], lambda: f64) -> Result<TpsTransform> {
    let n = control.len();
    let m = n + 3;
    let mut a = DMatrix::<f64>::zeros(m, m);
    for i in 0..n {
        for j in 0..n {
            let dx = control[i].x - control[j].x;
            let dy = control[i].y - control[j].y;
            a[(i, j)] = kernel(dx * dx + dy * dy);
        }
        a[(i, i)] += lambda;
        let row = [1.0, control[i].x, control[i].y];
        for (k, v) in row.into_iter().enumerate() {
            a[(i, n + k)] = v;
            a[(n + k, i)] = v;
        }
    }
    let mut rhs = DMatrix::<f64>::zeros(m, 2);
    for (i, t) in target.iter().enumerate() {
        rhs[(i, 0)] = t.x;
        rhs[(i, 1)] = t.y;
    }
    let sol = a
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("TPS system matrix is singular".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("TPS solution is not finite".into()));
    }
    // one step of iterative refinement
    let resid = &rhs - &a * &sol;
    let sol = match a.lu().solve(&resid) {
        Some(corr) => sol + corr,
        None => sol,
    };
    let weights = (0..n).map(|i| [sol[(i, 0)], sol[(i, 1)]]).collect();
    let affine = [
        [sol[(n, 0)], sol[(n + 1, 0)], sol[(n + 2, 0)]],
        [sol[(n, 1)], sol[(n + 1, 1)], sol[(n + 2, 1)]],
    ];
    Ok(TpsTransform {
        control,
        affine,
        weights,
    })
}

/// Inverse warp: every output pixel center is pushed through `t` (which maps
/// output space to input space) and the input is bilinearly sampled there.
/// Samples outside the input read as 0.
pub fn tps_warp_image(image: &Image, t: &TpsTransform) -> Image {
    let (h, w) = image.dims();
    Image::from_fn(h, w, |r, c| {
        let q = t.apply(Point::new(c as f64 + 0.5, r as f64 + 0.5));
        sample_bilinear(image, q.x - 0.5, q.y - 0.5)
    })
}

/// Bilinear sample at continuous index coordinates (`u` = column, `v` = row).
pub(crate) fn sample_bilinear(image: &Image, u: f64, v: f64) -> f64 {
    let u = snap(u);
    let v = snap(v);
    let (h, w) = (image.height() as isize, image.width() as isize);
    let c0 = u.floor();
    let r0 = v.floor();
    let fu = u - c0;
    let fv = v - r0;
    let (c0, r0) = (c0 as isize, r0 as isize);
    let px = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h || c >= w {
            0.0
        } else {
            *image.get(r as usize, c as usize)
        }
    };
    let mut acc = 0.0;
    for (dr, wr) in [(0, 1.0 - fv), (1, fv)] {
        if wr == 0.0 {
            continue;
        }
        for (dc, wc) in [(0, 1.0 - fu), (1, fu)] {
            if wc == 0.0 {
                continue;
            }
            acc += wr * wc * px(r0 + dr, c0 + dc);
        }
    }
    acc
}

#[inline]
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}
