//! U-net style network with a residual encoder, a transposed-convolution
//! decoder with concatenative skips, a fully-connected contour-regression
//! head on the encoder output, a sigmoid segmentation channel, and an
//! optional sigmoid reconstruction channel.
//!
//! ```text
//! x [1,S,S] ─ stem ─┬─ pool+stage0 ─┬─ ... ─ pool+stage(d-1) ─┬─ pool ─ fc ─ fc ─> contour
//!                   │               │                          │
//!                   └── concat ─ up ┴── ... ── concat ─ up ────┘
//!                        │
//!                        └─ 1x1 ─> seg,  1x1 ─> rec
//! ```

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Contour;
use crate::grid::{Image, SoftSegMap};
use crate::objectives::{ObjectiveKind, Targets};
use crate::tensor::{load_checkpoint, save_checkpoint, Graph, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const GROUPNORM_EPS: f64 = 1e-5;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub contour_points: usize,
    pub base_channels: usize,
    /// Number of 2x downsampling stages.
    pub depth: usize,
    pub blocks_per_stage: usize,
    pub groupnorm_groups: usize,
    pub fc_hidden: usize,
    pub regression_pool: RegressionPool,
    pub reconstruction_head: bool,
}

/// How the encoder output is reduced before the fully-connected head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionPool {
    /// Keep the whole `C x s x s` map.
    Flatten,
    /// Channel means only.
    #[default]
    GlobalAverage,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            contour_points: 64,
            base_channels: 16,
            depth: 4,
            blocks_per_stage: 2,
            groupnorm_groups: 4,
            fc_hidden: 256,
            regression_pool: RegressionPool::GlobalAverage,
            reconstruction_head: false,
        }
    }
}

impl ModelConfig {
    /// Full-scale network: 128x128 input, 176 points.
    pub fn paper_scale() -> Self {
        Self {
            image_size: 128,
            contour_points: 176,
            base_channels: 64,
            depth: 4,
            blocks_per_stage: 2,
            groupnorm_groups: 8,
            fc_hidden: 512,
            regression_pool: RegressionPool::GlobalAverage,
            reconstruction_head: false,
        }
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        (0..self.depth).map(|i| self.base_channels << i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.depth == 0 || self.image_size % (1 << self.depth) != 0 {
            return bad(format!(
                "image_size {} must be divisible by 2^depth = {}",
                self.image_size,
                1usize << self.depth
            ));
        }
        if self.contour_points < 3 {
            return bad(format!("contour_points must be >= 3, got {}", self.contour_points));
        }
        if self.base_channels == 0 || self.fc_hidden == 0 {
            return bad("base_channels and fc_hidden must be positive".into());
        }
        let g = self.groupnorm_groups;
        if g == 0 || self.stage_channels().iter().any(|c| c % g != 0) {
            return bad(format!(
                "groupnorm_groups {g} must divide every stage width {:?}",
                self.stage_channels()
            ));
        }
        Ok(())
    }
}

/// Plain-value model outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    /// Contour in pixel coordinates.
    pub contour: Contour,
    pub soft_seg: SoftSegMap,
    pub reconstruction: Option<Image>,
}

/// Graph handles for the three heads.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// `[2P]` interleaved pixel coordinates.
    pub contour: Var,
    /// `[1, S, S]` probabilities.
    pub seg: Var,
    pub rec: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// He-normal with the given fan-in.
    He(usize),
    Normal(f64),
    Zeros,
    Ones,
    /// Circle template for the regression bias (normalized coordinates).
    ContourTemplate,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Registry {
    specs: Vec<ParamSpec>,
}

impl Registry {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> Conv {
        let w = self.add(format!("{name}.weight"), vec![cout, cin, k, k], Init::He(cin * k * k));
        let b = bias.then(|| self.add(format!("{name}.bias"), vec![cout], Init::Zeros));
        Conv { w, b }
    }

    fn up(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        let w = self.add(format!("{name}.weight"), vec![cin, cout, 2, 2], Init::He(cin));
        let b = Some(self.add(format!("{name}.bias"), vec![cout], Init::Zeros));
        Conv { w, b }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{name}.gamma"), vec![c], Init::Ones),
            beta: self.add(format!("{name}.beta"), vec![c], Init::Zeros),
        }
    }

    fn cna(&mut self, name: &str, cin: usize, cout: usize) -> ConvNormAct {
        ConvNormAct {
            conv: self.conv(&format!("{name}.conv"), cin, cout, 3, false),
            norm: self.norm(&format!("{name}.norm"), cout),
        }
    }
}

#[derive(Clone, Copy)]
struct Conv {
    w: usize,
    b: Option<usize>,
}

#[derive(Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy)]
struct ConvNormAct {
    conv: Conv,
    norm: Norm,
}

struct ResBlock {
    first: ConvNormAct,
    second: Conv,
    second_norm: Norm,
}

struct Stage {
    entry: ConvNormAct,
    blocks: Vec<ResBlock>,
}

struct UpStage {
    up: Conv,
    fuse: ConvNormAct,
}

struct Architecture {
    stem: ConvNormAct,
    stages: Vec<Stage>,
    ups: Vec<UpStage>,
    seg_head: Conv,
    rec_head: Option<Conv>,
    fc1: Conv,
    fc2: Conv,
}

impl Architecture {
    fn build(cfg: &ModelConfig, reg: &mut Registry) -> Self {
        let widths = cfg.stage_channels();
        let base = cfg.base_channels;
        let stem = reg.cna("stem", 1, base);
        let mut stages = Vec::with_capacity(cfg.depth);
        let mut prev = base;
        for (i, &w) in widths.iter().enumerate() {
            let entry = reg.cna(&format!("enc{i}.entry"), prev, w);
            let blocks = (0..cfg.blocks_per_stage)
                .map(|b| ResBlock {
                    first: reg.cna(&format!("enc{i}.block{b}.a"), w, w),
                    second: reg.conv(&format!("enc{i}.block{b}.b.conv"), w, w, 3, false),
                    second_norm: reg.norm(&format!("enc{i}.block{b}.b.norm"), w),
                })
                .collect();
            stages.push(Stage { entry, blocks });
            prev = w;
        }
        // decoder level j upsamples to the resolution of skip j (stem for j = 0)
        let skip_width = |j: usize| if j == 0 { base } else { widths[j - 1] };
        let mut ups = Vec::with_capacity(cfg.depth);
        for j in (0..cfg.depth).rev() {
            let cin = if j == cfg.depth - 1 { widths[j] } else { skip_width(j + 1) };
            let cout = skip_width(j);
            ups.push(UpStage {
                up: reg.up(&format!("dec{j}.up"), cin, cout),
                fuse: reg.cna(&format!("dec{j}.fuse"), 2 * cout, cout),
            });
        }
        let seg_head = reg.conv("seg_head", base, 1, 1, true);
        let rec_head = cfg.reconstruction_head.then(|| reg.conv("rec_head", base, 1, 1, true));
        let bottom = cfg.image_size >> cfg.depth;
        let flat = match cfg.regression_pool {
            RegressionPool::Flatten => widths[cfg.depth - 1] * bottom * bottom,
            RegressionPool::GlobalAverage => widths[cfg.depth - 1],
        };
        let fc1 = Conv {
            w: reg.add("fc1.weight".into(), vec![cfg.fc_hidden, flat], Init::He(flat)),
            b: Some(reg.add("fc1.bias".into(), vec![cfg.fc_hidden], Init::Zeros)),
        };
        let out = 2 * cfg.contour_points;
        let fc2 = Conv {
            w: reg.add("fc2.weight".into(), vec![out, cfg.fc_hidden], Init::Normal(0.01 / (cfg.fc_hidden as f64).sqrt())),
            b: Some(reg.add("fc2.bias".into(), vec![out], Init::ContourTemplate)),
        };
        Self {
            stem,
            stages,
            ups,
            seg_head,
            rec_head,
            fc1,
            fc2,
        }
    }
}

/// Network parameters plus the configuration that shapes them.
pub struct Model {
    config: ModelConfig,
    arch: Architecture,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("num_params", &self.num_parameters())
            .finish()
    }
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self::from_named(self.config.clone(), self.named_params()).expect("a valid model re-validates")
    }
}

impl Model {
    /// Fresh randomly initialized model.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut reg = Registry::default();
        let arch = Architecture::build(&config, &mut reg);
        let p = config.contour_points;
        let params = reg
            .specs
            .iter()
            .map(|s| match s.init {
                Init::He(fan_in) => {
                    let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    Tensor::from_fn(&s.shape, |_| d.sample(rng))
                }
                Init::Normal(std) => {
                    let d = Normal::new(0.0, std).expect("positive std");
                    Tensor::from_fn(&s.shape, |_| d.sample(rng))
                }
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::full(&s.shape, 1.0),
                Init::ContourTemplate => Tensor::from_fn(&s.shape, |i| {
                    let theta = TAU * (i / 2) as f64 / p as f64;
                    if i % 2 == 0 {
                        0.5 + 0.25 * theta.cos()
                    } else {
                        0.5 + 0.12 * theta.sin()
                    }
                }),
            })
            .collect();
        let names = reg.specs.into_iter().map(|s| s.name).collect();
        Ok(Self {
            config,
            arch,
            names,
            params,
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let mut reg = Registry::default();
        let arch = Architecture::build(&config, &mut reg);
        if named.len() != reg.specs.len() {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("expected {} tensors, found {}", reg.specs.len(), named.len()),
            });
        }
        let mut names = Vec::with_capacity(named.len());
        let mut params = Vec::with_capacity(named.len());
        for (spec, (name, t)) in reg.specs.iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::Format {
                    what: "checkpoint",
                    detail: format!(
                        "expected `{}` {:?}, found `{name}` {:?}",
                        spec.name,
                        spec.shape,
                        t.shape()
                    ),
                });
            }
            names.push(name);
            params.push(t);
        }
        Ok(Self {
            config,
            arch,
            names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.params.iter().cloned()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.named_params())
    }

    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        Self::from_named(config, load_checkpoint(path)?)
    }

    /// Records the parameters as leaves of `g`.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|t| g.leaf_ref(t, trainable)).collect()
    }

    /// Records a forward pass on `g` for an input already on the graph.
    pub fn forward_graph(&self, g: &mut Graph<'_>, params: &[Var], x: Var) -> Result<HeadVars> {
        self.forward_impl(g, params, x, None)
    }

    fn forward_impl(&self, g: &mut Graph<'_>, p: &[Var], x: Var, ablate_skip: Option<usize>) -> Result<HeadVars> {
        let cfg = &self.config;
        let s = cfg.image_size;
        if g.shape(x) != [1, s, s] {
            return Err(Error::shape(
                "model input",
                format!("expected [1, {s}, {s}], got {:?}", g.shape(x)),
            ));
        }
        let groups = cfg.groupnorm_groups;
        let cna = |g: &mut Graph<'_>, l: &ConvNormAct, h: Var| -> Result<Var> {
            let y = g.conv2d(h, p[l.conv.w], l.conv.b.map(|b| p[b]), 1, 1)?;
            let y = g.group_norm(y, p[l.norm.gamma], p[l.norm.beta], groups, GROUPNORM_EPS)?;
            Ok(g.leaky_relu(y, LEAKY_SLOPE))
        };

        let mut skips = Vec::with_capacity(cfg.depth);
        let mut h = cna(g, &self.arch.stem, x)?;
        for stage in &self.arch.stages {
            skips.push(h);
            h = g.max_pool2(h)?;
            h = cna(g, &stage.entry, h)?;
            for blk in &stage.blocks {
                let r = cna(g, &blk.first, h)?;
                let r = g.conv2d(r, p[blk.second.w], None, 1, 1)?;
                let r = g.group_norm(r, p[blk.second_norm.gamma], p[blk.second_norm.beta], groups, GROUPNORM_EPS)?;
                let sum = g.add(h, r)?;
                h = g.leaky_relu(sum, LEAKY_SLOPE);
            }
        }
        let encoded = h;

        let mut d = encoded;
        for (up, j) in self.arch.ups.iter().zip((0..cfg.depth).rev()) {
            let u = g.conv_transpose2d(d, p[up.up.w], up.up.b.map(|b| p[b]), 2, 0)?;
            let mut skip = skips[j];
            if ablate_skip == Some(j) {
                let zeros = Tensor::zeros(g.shape(skip));
                skip = g.constant(zeros);
            }
            let cat = g.concat_channels(u, skip)?;
            d = cna(g, &up.fuse, cat)?;
        }
        let seg_logit = g.conv2d(d, p[self.arch.seg_head.w], self.arch.seg_head.b.map(|b| p[b]), 1, 0)?;
        let seg = g.sigmoid(seg_logit);
        let rec = match &self.arch.rec_head {
            Some(head) => {
                let r = g.conv2d(d, p[head.w], head.b.map(|b| p[b]), 1, 0)?;
                Some(g.sigmoid(r))
            }
            None => None,
        };

        let flat = match self.config.regression_pool {
            RegressionPool::Flatten => g.flatten(encoded),
            RegressionPool::GlobalAverage => g.global_avg_pool(encoded)?,
        };
        let f = g.linear(flat, p[self.arch.fc1.w], self.arch.fc1.b.map(|b| p[b]))?;
        let f = g.leaky_relu(f, LEAKY_SLOPE);
        let out = g.linear(f, p[self.arch.fc2.w], self.arch.fc2.b.map(|b| p[b]))?;
        let contour = g.scale(out, s as f64);
        Ok(HeadVars { contour, seg, rec })
    }

    /// Inference on one image.
    pub fn forward(&self, x: &Image) -> Result<ModelOutput> {
        self.forward_with(x, None)
    }

    /// Inference with decoder skip `j` replaced by zeros.
    pub fn forward_ablated(&self, x: &Image, skip: usize) -> Result<ModelOutput> {
        if skip >= self.config.depth {
            return Err(Error::InvalidArgument(format!("no skip connection {skip}")));
        }
        self.forward_with(x, Some(skip))
    }

    fn forward_with(&self, x: &Image, ablate: Option<usize>) -> Result<ModelOutput> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.to_tensor());
        let heads = self.forward_impl(&mut g, &p, xv, ablate)?;
        let out = read_outputs(&g, &heads)?;
        Ok(out)
    }
}

/// Anything that maps an image to contour/segmentation outputs and can
/// differentiate an attack objective with respect to its input.
pub trait Predictor: Sync {
    fn predict(&self, x: &Image) -> Result<ModelOutput>;

    /// Objective value and `∂J/∂x` with any parameters held constant.
    fn objective_grad(&self, x: &Image, kind: ObjectiveKind, targets: &Targets) -> Result<(f64, Image)>;
}

impl Predictor for Model {
    fn predict(&self, x: &Image) -> Result<ModelOutput> {
        self.forward(x)
    }

    fn objective_grad(&self, x: &Image, kind: ObjectiveKind, targets: &Targets) -> Result<(f64, Image)> {
        crate::attack::grad_wrt_input(self, x, kind, targets)
    }
}

/// Copies head values off a graph, rejecting non-finite outputs.
pub fn read_outputs(g: &Graph<'_>, heads: &HeadVars) -> Result<ModelOutput> {
    let contour_t = g.value(heads.contour);
    let seg_t = g.value(heads.seg);
    if !contour_t.all_finite() || !seg_t.all_finite() {
        return Err(Error::NonFinite("model output; parameters may be corrupt".into()));
    }
    let reconstruction = match heads.rec {
        Some(r) => {
            let t = g.value(r);
            if !t.all_finite() {
                return Err(Error::NonFinite("reconstruction output".into()));
            }
            Some(Image::from_tensor(t)?)
        }
        None => None,
    };
    Ok(ModelOutput {
        contour: Contour::from_flat(contour_t.data())?,
        soft_seg: Image::from_tensor(seg_t)?,
        reconstruction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            contour_points: 8,
            base_channels: 4,
            depth: 2,
            blocks_per_stage: 1,
            groupnorm_groups: 2,
            fc_hidden: 8,
            regression_pool: RegressionPool::GlobalAverage,
            reconstruction_head: true,
        }
    }

    fn random_image(rng: &mut impl Rng, s: usize) -> Image {
        Image::from_fn(s, s, |_, _| rng.gen())
    }

    #[test]
    fn validates_config() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::paper_scale().validate().is_ok());
        let bad = ModelConfig {
            image_size: 60,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            groupnorm_groups: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            contour_points: 2,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn output_shapes_and_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Model::init(tiny(), &mut rng).unwrap();
        for _ in 0..3 {
            let out = m.forward(&random_image(&mut rng, 16)).unwrap();
            assert_eq!(out.contour.len(), 8);
            assert!(out.contour.is_finite());
            assert_eq!(out.soft_seg.dims(), (16, 16));
            assert!(out.soft_seg.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(out.reconstruction.unwrap().dims(), (16, 16));
        }
        assert!(m.forward(&Image::zeros(8, 8)).is_err());
    }

    #[test]
    fn zero_final_layer_gives_constant_contour() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = Model::init(tiny(), &mut rng).unwrap();
        let idx = m.param_names().iter().position(|n| n == "fc2.weight").unwrap();
        m.params_mut()[idx].data_mut().fill(0.0);
        let bias_idx = m.param_names().iter().position(|n| n == "fc2.bias").unwrap();
        let bias = m.params()[bias_idx].clone();
        let expect: Vec<f64> = bias.data().iter().map(|b| b * 16.0).collect();
        for _ in 0..3 {
            let out = m.forward(&random_image(&mut rng, 16)).unwrap();
            assert_eq!(out.contour.to_flat(), expect);
        }
    }

    #[test]
    fn nan_parameters_are_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = Model::init(tiny(), &mut rng).unwrap();
        m.params_mut()[0].data_mut()[0] = f64::NAN;
        assert!(matches!(m.forward(&Image::zeros(16, 16)), Err(Error::NonFinite(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Model::init(tiny(), &mut rng).unwrap();
        let x = random_image(&mut rng, 16);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = Model::load(tiny(), &path).unwrap();
        assert_eq!(m.forward(&x).unwrap(), back.forward(&x).unwrap());
        let wrong = ModelConfig {
            base_channels: 8,
            ..tiny()
        };
        assert!(Model::load(wrong, &path).is_err());
    }

    #[test]
    fn skip_ablation_changes_segmentation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Model::init(tiny(), &mut rng).unwrap();
        let x = random_image(&mut rng, 16);
        let full = m.forward(&x).unwrap();
        for j in 0..2 {
            let ablated = m.forward_ablated(&x, j).unwrap();
            assert!(full.soft_seg.max_abs_diff(&ablated.soft_seg) > 1e-9, "skip {j} has no effect");
        }
        assert!(m.forward_ablated(&x, 2).is_err());
    }
}
