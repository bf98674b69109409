mod common;

use common::point_in_polygon;
use disklab::geometry::{dice, rasterize_contour, tps_fit, Contour, Point};
use disklab::grid::SegMap;
use proptest::prelude::*;

fn polygon() -> impl Strategy<Value = Vec<(f64, f64)>> {
    proptest::collection::vec((0.0f64..12.0, 0.0f64..12.0), 3..9)
}

fn contour(p: &[(f64, f64)]) -> Contour {
    Contour::new(p.iter().map(|&(x, y)| Point::new(x, y)).collect())
}

proptest! {
    #[test]
    fn dice_is_symmetric_and_bounded(a in proptest::collection::vec(any::<bool>(), 36), b in proptest::collection::vec(any::<bool>(), 36)) {
        let a = SegMap::from_vec(6, 6, a).unwrap();
        let b = SegMap::from_vec(6, 6, b).unwrap();
        let ab = dice(&a, &b).unwrap();
        prop_assert_eq!(ab, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn rasterization_agrees_with_even_odd_rule(p in polygon()) {
        let m = rasterize_contour(&contour(&p), 12, 12).unwrap();
        let (x0, y0) = p[0];
        let collinear = p.iter().all(|&(x, y)| (p[1].0 - x0) * (y - y0) == (p[1].1 - y0) * (x - x0));
        for r in 0..12 {
            for c in 0..12 {
                let expect = !collinear && point_in_polygon(c as f64 + 0.5, r as f64 + 0.5, &p);
                prop_assert_eq!(*m.get(r, c), expect);
            }
        }
    }

    #[test]
    fn integer_translation_shifts_the_mask(p in proptest::collection::vec((2.0f64..8.0, 2.0f64..8.0), 3..8), dx in 0i32..4, dy in 0i32..4) {
        let c = contour(&p);
        let a = rasterize_contour(&c, 12, 12).unwrap();
        let b = rasterize_contour(&c.translated(dx as f64, dy as f64), 12, 12).unwrap();
        for r in 0..8 {
            for col in 0..8 {
                prop_assert_eq!(a.get(r, col), b.get(r + dy as usize, col + dx as usize));
            }
        }
    }

    #[test]
    fn flat_coordinates_round_trip(p in polygon()) {
        let c = contour(&p);
        prop_assert_eq!(Contour::from_flat(&c.to_flat()).unwrap(), c);
    }

    #[test]
    fn tps_of_an_affine_map_is_affine(a in -0.3f64..0.3, b in -0.3f64..0.3, tx in -3.0f64..3.0, ty in -3.0f64..3.0) {
        let src = contour(&[(1.0, 1.0), (9.0, 2.0), (8.0, 9.0), (2.0, 7.0), (5.0, 5.0), (4.0, 2.5)]);
        let map = |p: Point| Point::new((1.0 + a) * p.x + b * p.y + tx, -b * p.x + (1.0 - a) * p.y + ty);
        let dst = Contour::new(src.points().iter().map(|&p| map(p)).collect());
        let t = tps_fit(&src, &dst, 0.0).unwrap();
        for w in t.weights() {
            prop_assert!(w[0].abs() < 1e-8 && w[1].abs() < 1e-8);
        }
        let q = t.apply(Point::new(3.3, 6.1));
        let e = map(Point::new(3.3, 6.1));
        prop_assert!((q.x - e.x).abs() < 1e-8 && (q.y - e.y).abs() < 1e-8);
    }
}
