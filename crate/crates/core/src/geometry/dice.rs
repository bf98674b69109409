use super::{rasterize_contour, Contour};
use crate::error::Result;
use crate::grid::SegMap;

/// Dice similarity `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &SegMap, b: &SegMap) -> Result<f64> {
    a.check_same_dims(b, "dice")?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Dice between the regions enclosed by two contours on an `h x w` grid.
pub fn contour_dice(c1: &Contour, c2: &Contour, h: usize, w: usize) -> Result<f64> {
    dice(&rasterize_contour(c1, h, w)?, &rasterize_contour(c2, h, w)?)
}
