use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PhantomSample;
use crate::error::{Error, Result};
use crate::geometry::{tps_fit, tps_warp_image, Contour};
use crate::grid::Image;

/// Pool draws attempted before giving up on a virtual shape.
pub const MAX_TPS_RETRIES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VirtualSample {
    pub shape: Contour,
    pub image: Image,
    /// Index into the pool of the warped source image.
    pub source_index: usize,
    /// Largest control-point residual of the fitted spline.
    pub tps_residual: f64,
}

impl VirtualSample {
    pub fn into_sample(self) -> Result<PhantomSample> {
        PhantomSample::new(self.image, self.shape)
    }
}

/// Synthesizes an image whose disk follows `shape`: a pool sample `(x, s*)`
/// is drawn uniformly, a spline taking `shape` onto `s*` is fitted, and `x`
/// is inverse-warped through it so the anatomy lands on `shape`.
pub fn make_virtual_sample(shape: &Contour, pool: &[PhantomSample], rng: &mut impl Rng) -> Result<VirtualSample> {
    if pool.is_empty() {
        return Err(Error::Empty("virtual-sample pool".into()));
    }
    let mut last_err = None;
    for _ in 0..=MAX_TPS_RETRIES {
        let idx = rng.gen_range(0..pool.len());
        let src = &pool[idx];
        match tps_fit(shape, &src.contour, 0.0) {
            Ok(t) => {
                let residual = t.max_residual(&src.contour);
                if !(residual <= 1e-6) {
                    last_err = Some(Error::Singular(format!("TPS residual {residual:e} exceeds 1e-6")));
                    continue;
                }
                let image = tps_warp_image(&src.image, &t).clamp01();
                return Ok(VirtualSample {
                    shape: shape.clone(),
                    image,
                    source_index: idx,
                    tps_residual: residual,
                });
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Singular("TPS fit failed".into())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use crate::shape_model::{generate_phantom, PhantomConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_shape_reproduces_the_source() {
        let cfg = PhantomConfig::scaled(32, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pool = vec![generate_phantom(&mut rng, &cfg)];
        let v = make_virtual_sample(&pool[0].contour, &pool, &mut rng).unwrap();
        assert_eq!(v.image, pool[0].image);
        assert!(v.tps_residual <= 1e-6);
    }

    #[test]
    fn translated_shape_translates_the_image() {
        // flat background, no texture: content near the disk is a pure function of position
        let cfg = PhantomConfig {
            texture: 0.0,
            ..PhantomConfig::scaled(32, 24)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pool = vec![generate_phantom(&mut rng, &cfg)];
        let shifted = pool[0].contour.translated(2.0, 0.0);
        let v = make_virtual_sample(&shifted, &pool, &mut rng).unwrap();
        let c = pool[0].contour.centroid();
        for r in 0..32 {
            for col in 2..32 {
                let p = Point::new(col as f64 + 0.5, r as f64 + 0.5);
                if p.dist(Point::new(c.x + 2.0, c.y)) < 6.0 {
                    let want = *pool[0].image.get(r, col - 2);
                    assert!((v.image.get(r, col) - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn output_in_range_and_empty_pool_rejected() {
        let cfg = PhantomConfig::scaled(32, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pool: Vec<_> = (0..4).map(|_| generate_phantom(&mut rng, &cfg)).collect();
        let other = generate_phantom(&mut rng, &cfg).contour;
        let v = make_virtual_sample(&other, &pool, &mut rng).unwrap();
        assert!(v.image.data().iter().all(|x| (0.0..=1.0).contains(x)));
        assert_eq!(v.shape, other);
        assert!(make_virtual_sample(&other, &[], &mut rng).is_err());
    }
}
