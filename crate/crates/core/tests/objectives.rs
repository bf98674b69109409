use disklab::geometry::{contour_dice, dice, Contour, Point};
use disklab::grid::{Image, SegMap, SoftSegMap};
use disklab::netmodel::ModelOutput;
use disklab::objectives::{
    loss_rec_value, loss_reg_value, loss_seg_value, mean_point_error, objective_value, ObjectiveKind, Targets, DICE_SMOOTH,
};

fn pts(v: &[(f64, f64)]) -> Contour {
    Contour::new(v.iter().map(|&(x, y)| Point::new(x, y)).collect())
}

#[test]
fn point_error_of_a_three_four_five_offset() {
    let truth = pts(&[(0.0, 0.0), (10.0, 0.0), (10.0, 10.0)]);
    let pred = truth.translated(3.0, 4.0);
    assert!((mean_point_error(&pred, &truth).unwrap() - 5.0).abs() < 1e-12);
}

#[test]
fn regression_loss_is_mean_absolute_coordinate_error() {
    let pred = pts(&[(1.0, 2.0), (3.0, 5.0)]);
    let truth = pts(&[(0.0, 0.0), (0.0, 0.0)]);
    assert!((loss_reg_value(&pred, &truth).unwrap() - 2.75).abs() < 1e-12);
}

#[test]
fn segmentation_loss_by_hand() {
    // soft 0.5 everywhere on a 2x2 grid with one foreground pixel
    let soft: SoftSegMap = SoftSegMap::filled(2, 2, 0.5);
    let mask = SegMap::from_fn(2, 2, |r, c| r == 0 && c == 0);
    let sd = (2.0 * 0.5 + DICE_SMOOTH) / (2.0 + 1.0 + DICE_SMOOTH);
    let expect = 0.5 * (1.0 - sd) + 0.5 * std::f64::consts::LN_2;
    assert!((loss_seg_value(&soft, &mask).unwrap() - expect).abs() < 1e-12);
}

#[test]
fn reconstruction_loss_by_hand() {
    let x = Image::zeros(3, 3);
    let rec = Image::filled(3, 3, 0.25);
    assert!((loss_rec_value(&rec, &x).unwrap() - 0.25).abs() < 1e-15);
}

#[test]
fn attack_objectives_by_hand() {
    let truth = pts(&[(2.0, 2.0), (6.0, 2.0), (6.0, 6.0), (2.0, 6.0)]);
    let mask = SegMap::from_fn(8, 8, |r, c| (2..6).contains(&r) && (2..6).contains(&c));
    let targets = Targets::new(truth.clone(), mask.clone());
    // every point off by (3, 4); soft map is half the mask
    let out = ModelOutput {
        contour: truth.translated(3.0, 4.0),
        soft_seg: mask.to_f64().map(|v| 0.5 * v),
        reconstruction: None,
    };
    let sd = (2.0 * 0.5 * 16.0 + DICE_SMOOTH) / (8.0 + 16.0 + DICE_SMOOTH);
    let cases = [
        (ObjectiveKind::IndReg, 4.0 * 25.0),
        (ObjectiveKind::OodReg, -4.0 * 7.0),
        (ObjectiveKind::IndSeg, 1.0 - sd),
        (ObjectiveKind::OodSeg, sd),
    ];
    for (kind, expect) in cases {
        let v = objective_value(kind, &out, &targets).unwrap();
        assert!((v - expect).abs() < 1e-12, "{kind}: {v} vs {expect}");
    }
}

#[test]
fn dice_by_hand() {
    let a = SegMap::from_fn(4, 4, |r, _| r < 2); // 8 pixels
    let b = SegMap::from_fn(4, 4, |r, c| r < 2 && c < 2); // 4 pixels, all shared
    assert!((dice(&a, &b).unwrap() - 2.0 * 4.0 / 12.0).abs() < 1e-15);
    assert_eq!(dice(&SegMap::filled(3, 3, false), &SegMap::filled(3, 3, false)).unwrap(), 1.0);
    let sq = pts(&[(1.0, 1.0), (5.0, 1.0), (5.0, 5.0), (1.0, 5.0)]);
    assert_eq!(contour_dice(&sq, &sq, 8, 8).unwrap(), 1.0);
    // shifted by 2 columns: 8 of 16 pixels shared
    assert!((contour_dice(&sq, &sq.translated(2.0, 0.0), 8, 8).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn mismatched_shapes_are_errors() {
    let a = pts(&[(0.0, 0.0), (1.0, 1.0)]);
    let b = pts(&[(0.0, 0.0)]);
    assert!(mean_point_error(&a, &b).is_err());
    assert!(loss_reg_value(&a, &b).is_err());
    assert!(loss_seg_value(&SoftSegMap::filled(2, 2, 0.5), &SegMap::filled(3, 3, true)).is_err());
}
