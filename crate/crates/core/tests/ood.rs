use disklab::experiment::generate_corpus;
use disklab::geometry::{Contour, Point};
use disklab::grid::{Image, SoftSegMap};
use disklab::netmodel::{Model, ModelConfig, ModelOutput, Predictor};
use disklab::objectives::{ObjectiveKind, Targets};
use disklab::ood::{auroc, ood_score, run_ood_attack_experiment, NoiseKind, OodConfig, OodSource};
use disklab::rng::stream;
use disklab::shape_model::PhantomConfig;
use disklab::Result;
use rand::Rng;

#[test]
fn auroc_swaps_to_its_complement() {
    let mut r = stream(1, 0);
    for _ in 0..50 {
        let a: Vec<f64> = (0..r.gen_range(1..30)).map(|_| (r.gen_range(0.0..1.0f64) * 8.0).round()).collect();
        let b: Vec<f64> = (0..r.gen_range(1..30)).map(|_| (r.gen_range(0.0..1.0f64) * 8.0).round()).collect();
        let s = auroc(&a, &b).unwrap() + auroc(&b, &a).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn auroc_ignores_monotone_rescaling() {
    let mut r = stream(2, 0);
    let a: Vec<f64> = (0..40).map(|_| r.gen_range(0.0..1.0)).collect();
    let b: Vec<f64> = (0..25).map(|_| r.gen_range(0.3..1.3)).collect();
    let base = auroc(&a, &b).unwrap();
    let f = |v: &[f64]| v.iter().map(|x| 3.0 * x.exp() - 7.0).collect::<Vec<_>>();
    assert!((auroc(&f(&a), &f(&b)).unwrap() - base).abs() < 1e-12);
    assert_eq!(auroc(&[0.0, 0.1], &[0.5, 0.9]).unwrap(), 1.0);
    assert_eq!(auroc(&[0.5, 0.9], &[0.0, 0.1]).unwrap(), 0.0);
}

/// Ignores its input entirely.
struct Constant {
    out: ModelOutput,
}

impl Predictor for Constant {
    fn predict(&self, _: &Image) -> Result<ModelOutput> {
        Ok(self.out.clone())
    }

    fn objective_grad(&self, x: &Image, _: ObjectiveKind, _: &Targets) -> Result<(f64, Image)> {
        Ok((0.0, Image::zeros(x.height(), x.width())))
    }
}

#[test]
fn constant_model_is_trivially_fooled() {
    let test = generate_corpus(5, 4, &PhantomConfig::scaled(16, 8));
    let c = Constant {
        out: ModelOutput {
            contour: Contour::new((0..8).map(|i| Point::new(4.0 + i as f64, 6.0 + (i % 3) as f64)).collect()),
            soft_seg: SoftSegMap::from_fn(16, 16, |r, _| if r < 8 { 0.9 } else { 0.1 }),
            reconstruction: None,
        },
    };
    for obj in [ObjectiveKind::OodSeg, ObjectiveKind::OodReg] {
        let mut cfg = OodConfig::new(obj, OodSource::Procedural { kind: NoiseKind::Uniform, seed: 1 }, 3);
        cfg.attack.iterations = 3;
        let r = run_ood_attack_experiment(&c, &test, &cfg).unwrap();
        assert_eq!(r.dice_vs_target, vec![1.0; 4]);
        assert_eq!(r.success_rate(0.9), 1.0);
        assert!(r.auroc.is_none());
    }
}

#[test]
fn detector_scores_need_a_reconstruction_head() {
    let base = ModelConfig {
        image_size: 16,
        contour_points: 8,
        base_channels: 2,
        depth: 1,
        groupnorm_groups: 1,
        fc_hidden: 4,
        ..ModelConfig::default()
    };
    let x = Image::filled(16, 16, 0.4);
    let plain = Model::init(base.clone(), &mut stream(1, 1)).unwrap();
    assert!(ood_score(&plain, &x).is_err());
    let rec = Model::init(ModelConfig { reconstruction_head: true, ..base }, &mut stream(1, 1)).unwrap();
    let s = ood_score(&rec, &x).unwrap();
    assert!((0.0..=1.0).contains(&s));

    let test = generate_corpus(6, 3, &PhantomConfig::scaled(16, 8));
    let mut cfg = OodConfig::new(ObjectiveKind::OodSeg, OodSource::Procedural { kind: NoiseKind::Blobs, seed: 2 }, 9);
    cfg.attack.iterations = 2;
    let r = run_ood_attack_experiment(&rec, &test, &cfg).unwrap();
    let a = r.auroc.unwrap();
    assert!((0.0..=1.0).contains(&a));
    assert_eq!(r.ind_scores.unwrap().len(), 3);
}
