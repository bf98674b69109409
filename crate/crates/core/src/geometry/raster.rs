use super::{Contour, Point};
use crate::error::{Error, Result};
use crate::grid::SegMap;

/// Fills the polygon on an `h x w` pixel grid.
///
/// Pixel `(row, col)` is set iff its center `(col + 0.5, row + 0.5)` is inside
/// the closed polygon under the even-odd rule, or lies exactly on an edge.
/// Degenerate polygons (all points collinear or coincident) give an empty mask.
pub fn rasterize_contour(contour: &Contour, h: usize, w: usize) -> Result<SegMap> {
    let pts = contour.points();
    if pts.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "rasterization needs at least 3 points, got {}",
            pts.len()
        )));
    }
    if !contour.is_finite() {
        return Err(Error::NonFinite("contour coordinates".into()));
    }
    let mut mask = SegMap::filled(h, w, false);
    if is_degenerate(pts) {
        return Ok(mask);
    }
    let n = pts.len();
    let mut crossings = Vec::with_capacity(n);
    for row in 0..h {
        let py = row as f64 + 0.5;
        crossings.clear();
        let mut j = n - 1;
        for i in 0..n {
            let (xi, yi) = (pts[i].x, pts[i].y);
            let (xj, yj) = (pts[j].x, pts[j].y);
            if (yi > py) != (yj > py) {
                crossings.push(xi + (py - yi) * (xj - xi) / (yj - yi));
            }
            j = i;
        }
        if crossings.is_empty() {
            continue;
        }
        crossings.sort_by(f64::total_cmp);
        // crossings strictly right of px flip parity
        let mut at_or_left = 0;
        for col in 0..w {
            let px = col as f64 + 0.5;
            while at_or_left < crossings.len() && crossings[at_or_left] <= px {
                at_or_left += 1;
            }
            if (crossings.len() - at_or_left) % 2 == 1 {
                mask.set(row, col, true);
            }
        }
    }
    for i in 0..n {
        mark_edge(&mut mask, pts[i], pts[(i + 1) % n]);
    }
    Ok(mask)
}

/// Sets pixels whose centers lie exactly on segment `a`-`b`.
fn mark_edge(mask: &mut SegMap, a: Point, b: Point) {
    let (h, w) = mask.dims();
    let (x1, y1, x2, y2) = (a.x, a.y, b.x, b.y);
    let Some((c_lo, c_hi)) = center_span(x1.min(x2), x1.max(x2), w) else { return };
    let Some((r_lo, r_hi)) = center_span(y1.min(y2), y1.max(y2), h) else { return };
    for row in r_lo..=r_hi {
        let py = row as f64 + 0.5;
        for col in c_lo..=c_hi {
            let px = col as f64 + 0.5;
            let cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1);
            if cross == 0.0 {
                mask.set(row, col, true);
            }
        }
    }
}

/// Indices `k` in `[0, len)` with `lo <= k + 0.5 <= hi`.
fn center_span(lo: f64, hi: f64, len: usize) -> Option<(usize, usize)> {
    let first = (lo - 0.5).ceil().max(0.0);
    let last = (hi - 0.5).floor().min(len as f64 - 1.0);
    (len > 0 && first <= last).then_some((first as usize, last as usize))
}

fn is_degenerate(pts: &[Point]) -> bool {
    let p0 = pts[0];
    let Some(far) = pts
        .iter()
        .copied()
        .max_by(|a, b| p0.dist(*a).total_cmp(&p0.dist(*b)))
        .filter(|p| p0.dist(*p) > 0.0)
    else {
        return true;
    };
    let (dx, dy) = (far.x - p0.x, far.y - p0.y);
    pts.iter().all(|p| dx * (p.y - p0.y) - dy * (p.x - p0.x) == 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Contour {
        Contour::new(vec![
            Point::new(x0, y0),
            Point::new(x1, y0),
            Point::new(x1, y1),
            Point::new(x0, y1),
        ])
    }

    #[test]
    fn full_cover() {
        let m = rasterize_contour(&rect(0.0, 0.0, 7.0, 5.0), 5, 7).unwrap();
        assert_eq!(m.count(), 35);
    }

    #[test]
    fn coincident_and_collinear_are_empty() {
        let c = Contour::new(vec![Point::new(2.5, 2.5); 5]);
        assert_eq!(rasterize_contour(&c, 6, 6).unwrap().count(), 0);
        let line = Contour::new((0..4).map(|i| Point::new(0.5 + i as f64, 0.5 + i as f64)).collect());
        assert_eq!(rasterize_contour(&line, 6, 6).unwrap().count(), 0);
    }

    #[test]
    fn centers_on_edges_count_inside() {
        // edges pass through centers of columns 1 and 3, rows 1 and 3
        let m = rasterize_contour(&rect(1.5, 1.5, 3.5, 3.5), 5, 5).unwrap();
        assert_eq!(m.count(), 9);
        assert!(*m.get(1, 1) && *m.get(3, 3) && !*m.get(4, 4) && !*m.get(0, 2));
    }

    #[test]
    fn too_few_points() {
        let c = Contour::new(vec![Point::new(0.0, 0.0), Point::new(1.0, 1.0)]);
        assert!(rasterize_contour(&c, 3, 3).is_err());
    }
}
