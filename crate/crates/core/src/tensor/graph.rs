use std::borrow::Cow;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    /// Transposed convolution; `geom` describes the adjoint forward conv
    /// (its "input" is this op's output).
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    LeakyRelu {
        input: Var,
        slope: f64,
    },
    Sigmoid {
        input: Var,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Abs(Var),
    Log(Var),
    Clamp {
        input: Var,
        lo: f64,
        hi: f64,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ConcatChannels {
        a: Var,
        b: Var,
    },
    GlobalAvgPool(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Nodes are appended in evaluation order, so the node list
/// is already a topological order and backward walks it in reverse.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operands have shapes {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that owns its value.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that borrows its value, e.g. a model parameter.
    pub fn leaf_ref(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- layers -------------------------------------------------------------

    /// Cross-correlation of `[C_in, H, W]` with `[C_out, C_in, k, k]`, zero padded.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected input [C,H,W] and kernel [Co,Ci,k,k], got {xs:?} and {ws:?}"),
            ));
        }
        let (ci, h, w) = (xs[0], xs[1], xs[2]);
        let (co, wci, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
        if wci != ci {
            return Err(Error::shape(
                "conv2d",
                format!("input has {ci} channels but kernel expects C_in={wci}"),
            ));
        }
        if k != k2 || k % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel must be square and odd, got {k}x{k2}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        let oh = ConvGeom::out_extent(h, k, stride, padding).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("H={h} with k={k}, stride={stride}, padding={padding} gives a non-integral output height"),
            )
        })?;
        let ow = ConvGeom::out_extent(w, k, stride, padding).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("W={w} with k={k}, stride={stride}, padding={padding} gives a non-integral output width"),
            )
        })?;
        if let Some(b) = bias {
            if self.shape(b) != [co] {
                return Err(Error::shape("conv2d", format!("bias shape {:?} != [{co}]", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            in_channels: ci,
            out_channels: co,
            in_h: h,
            in_w: w,
            out_h: oh,
            out_w: ow,
            kernel: k,
            stride,
            padding,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let t = Tensor::new(vec![co, oh, ow], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(t, Op::Conv2d { input, weight, bias, geom }, &inputs))
    }

    /// Transposed convolution of `[C_in, H, W]` with `[C_in, C_out, k, k]`;
    /// output extent `(H-1)*stride - 2*padding + k`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("expected input [C,H,W] and kernel [Ci,Co,k,k], got {xs:?} and {ws:?}"),
            ));
        }
        let (ci, h, w) = (xs[0], xs[1], xs[2]);
        let (wci, co, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
        if wci != ci || k != k2 || stride == 0 {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input {xs:?} incompatible with kernel {ws:?} at stride {stride}"),
            ));
        }
        let oh = ((h - 1) * stride + k)
            .checked_sub(2 * padding)
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::shape("conv_transpose2d", "padding too large for output"))?;
        let ow = ((w - 1) * stride + k)
            .checked_sub(2 * padding)
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::shape("conv_transpose2d", "padding too large for output"))?;
        if let Some(b) = bias {
            if self.shape(b) != [co] {
                return Err(Error::shape(
                    "conv_transpose2d",
                    format!("bias shape {:?} != [{co}]", self.shape(b)),
                ));
            }
        }
        // Adjoint conv: maps [co, oh, ow] -> [ci, h, w].
        let geom = ConvGeom {
            in_channels: co,
            out_channels: ci,
            in_h: oh,
            in_w: ow,
            out_h: h,
            out_w: w,
            kernel: k,
            stride,
            padding,
        };
        let mut out = kernels::conv2d_backward_input(self.value(input).data(), self.value(weight).data(), &geom);
        if let Some(b) = bias {
            let bv = self.value(b).data();
            let plane = oh * ow;
            for c in 0..co {
                for v in &mut out[c * plane..(c + 1) * plane] {
                    *v += bv[c];
                }
            }
        }
        let t = Tensor::new(vec![co, oh, ow], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(t, Op::ConvTranspose2d { input, weight, bias, geom }, &inputs))
    }

    /// `weight [m, n] · input [n] + bias [m]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] {
            return Err(Error::shape(
                "linear",
                format!("weight {ws:?} cannot multiply input {xs:?}"),
            ));
        }
        let (m, n) = (ws[0], ws[1]);
        if let Some(b) = bias {
            if self.shape(b) != [m] {
                return Err(Error::shape("linear", format!("bias shape {:?} != [{m}]", self.shape(b))));
            }
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut out: Vec<f64> = (0..m)
            .map(|r| w[r * n..(r + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        if let Some(b) = bias {
            for (o, bv) in out.iter_mut().zip(self.value(b).data()) {
                *o += bv;
            }
        }
        let t = Tensor::new(vec![m], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(t, Op::Linear { input, weight, bias }, &inputs))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let x = self.value(input);
        let out = x.data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let t = Tensor { shape: x.shape().to_vec(), data: out };
        self.push(t, Op::LeakyRelu { input, slope }, &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = x.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let t = Tensor { shape: x.shape().to_vec(), data: out };
        self.push(t, Op::Sigmoid { input }, &[input])
    }

    /// Group normalization over `[C, H, W]` with per-channel affine.
    pub fn group_norm(&mut self, input: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("group_norm", format!("expected [C,H,W], got {xs:?}")));
        }
        let c = xs[0];
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(
                "group_norm",
                format!("{groups} groups do not divide {c} channels"),
            ));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("group_norm", format!("affine parameters must have shape [{c}]")));
        }
        let plane = xs[1] * xs[2];
        let per_group = (c / groups) * plane;
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(groups);
        let mut out = vec![0.0; x.len()];
        for grp in 0..groups {
            let range = grp * per_group..(grp + 1) * per_group;
            let seg = &x[range.clone()];
            let mean = seg.iter().sum::<f64>() / per_group as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per_group as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for i in range {
                let ch = i / plane;
                let xh = (x[i] - mean) * is;
                xhat[i] = xh;
                out[i] = g[ch] * xh + b[ch];
            }
        }
        let t = Tensor { shape: xs, data: out };
        Ok(self.push(
            t,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            &[input, gamma, beta],
        ))
    }

    // ---- elementwise --------------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(name, self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor {
            shape: self.shape(a).to_vec(),
            data,
        })
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor {
            shape: x.shape().to_vec(),
            data: x.data().iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.unary(a, |v| c * v);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.unary(a, |v| v + c);
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.unary(a, |v| v * v);
        self.push(t, Op::Square(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::abs);
        self.push(t, Op::Abs(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::ln);
        self.push(t, Op::Log(a), &[a])
    }

    /// Clamp to `[lo, hi]`; gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.unary(a, |v| v.clamp(lo, hi));
        self.push(t, Op::Clamp { input: a, lo, hi }, &[a])
    }

    // ---- reductions / shape -------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(t, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64);
        self.push(t, Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn flatten(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        self.reshape(a, &[n]).expect("flatten preserves element count")
    }

    /// Concatenate two `[C, H, W]` maps along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(Error::shape(
                "concat_channels",
                format!("spatial extents differ: {sa:?} vs {sb:?}"),
            ));
        }
        let shape = vec![sa[0] + sb[0], sa[1], sa[2]];
        let mut data = Vec::with_capacity(self.value(a).len() + self.value(b).len());
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let t = Tensor { shape, data };
        Ok(self.push(t, Op::ConcatChannels { a, b }, &[a, b]))
    }

    /// Mean over the spatial axes of `[C, H, W]`, giving `[C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 {
            return Err(Error::shape("global_avg_pool", format!("expected [C,H,W], got {s:?}")));
        }
        let c = s[0];
        let plane = (s[1] * s[2]) as f64;
        let sums = kernels::channel_sums(self.value(a).data(), c);
        let t = Tensor {
            shape: vec![c],
            data: sums.into_iter().map(|v| v / plane).collect(),
        };
        Ok(self.push(t, Op::GlobalAvgPool(a), &[a]))
    }

    /// 2x2 max-pool with stride 2 over `[C, H, W]`; H and W must be even.
    /// Ties resolve to the first element in row-major window order.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::shape("max_pool2", format!("expected [C,H,W] with even H and W, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = (ch * h + 2 * oy) * w + 2 * ox;
                    let mut best = base;
                    for idx in [base + 1, base + w, base + w + 1] {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor {
            shape: vec![c, oh, ow],
            data: out,
        };
        Ok(self.push(t, Op::MaxPool2 { input, argmax }, &[input]))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor {
            shape: lv.shape().to_vec(),
            data: vec![1.0],
        });
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[id].value;
        let gd = g.data();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                if self.wants(*input) {
                    let gi = kernels::conv2d_backward_input(gd, self.value(*weight).data(), geom);
                    accumulate(grads, *input, self.shape(*input), gi);
                }
                if self.wants(*weight) {
                    let gw = kernels::conv2d_backward_weight(gd, self.value(*input).data(), geom);
                    accumulate(grads, *weight, self.shape(*weight), gw);
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    accumulate(grads, b, self.shape(b), kernels::channel_sums(gd, geom.out_channels));
                }
            }
            Op::ConvTranspose2d { input, weight, bias, geom } => {
                if self.wants(*input) {
                    let gi = kernels::conv2d_forward(gd, self.value(*weight).data(), None, geom);
                    accumulate(grads, *input, self.shape(*input), gi);
                }
                if self.wants(*weight) {
                    let gw = kernels::conv2d_backward_weight(self.value(*input).data(), gd, geom);
                    accumulate(grads, *weight, self.shape(*weight), gw);
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    accumulate(grads, b, self.shape(b), kernels::channel_sums(gd, geom.in_channels));
                }
            }
            Op::Linear { input, weight, bias } => {
                let ws = self.shape(*weight);
                let (m, n) = (ws[0], ws[1]);
                if self.wants(*input) {
                    let w = self.value(*weight).data();
                    let mut gi = vec![0.0; n];
                    for r in 0..m {
                        let gr = gd[r];
                        if gr != 0.0 {
                            for (a, wv) in gi.iter_mut().zip(&w[r * n..(r + 1) * n]) {
                                *a += gr * wv;
                            }
                        }
                    }
                    accumulate(grads, *input, &[n], gi);
                }
                if self.wants(*weight) {
                    let x = self.value(*input).data();
                    let mut gw = vec![0.0; m * n];
                    for r in 0..m {
                        let gr = gd[r];
                        for (a, xv) in gw[r * n..(r + 1) * n].iter_mut().zip(x) {
                            *a = gr * xv;
                        }
                    }
                    accumulate(grads, *weight, &[m, n], gw);
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    accumulate(grads, b, &[m], gd.to_vec());
                }
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(*input).data();
                let gi = x
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { slope * gv })
                    .collect();
                accumulate(grads, *input, out.shape(), gi);
            }
            Op::Sigmoid { input } => {
                let gi = out.data().iter().zip(gd).map(|(&y, &gv)| gv * y * (1.0 - y)).collect();
                accumulate(grads, *input, out.shape(), gi);
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let s = out.shape();
                let (c, plane) = (s[0], s[1] * s[2]);
                let per_group = (c / groups) * plane;
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let mut gg = vec![0.0; c];
                    for (i, (&gv, &xh)) in gd.iter().zip(xhat).enumerate() {
                        gg[i / plane] += gv * xh;
                    }
                    accumulate(grads, *gamma, &[c], gg);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, &[c], kernels::channel_sums(gd, c));
                }
                if self.wants(*input) {
                    let mut gi = vec![0.0; gd.len()];
                    let nf = per_group as f64;
                    for grp in 0..*groups {
                        let range = grp * per_group..(grp + 1) * per_group;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for i in range.clone() {
                            let d = gd[i] * gam[i / plane];
                            sum_d += d;
                            sum_dx += d * xhat[i];
                        }
                        let is = inv_std[grp];
                        for i in range {
                            let d = gd[i] * gam[i / plane];
                            gi[i] = is * (d - sum_d / nf - xhat[i] * sum_dx / nf);
                        }
                    }
                    accumulate(grads, *input, s, gi);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        accumulate(grads, v, out.shape(), gd.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, out.shape(), gd.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, out.shape(), gd.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(grads, *a, out.shape(), gd.iter().zip(bv).map(|(g, y)| g * y).collect());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, out.shape(), gd.iter().zip(av).map(|(g, x)| g * x).collect());
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(grads, *a, out.shape(), gd.iter().zip(bv).map(|(g, y)| g / y).collect());
                }
                if self.wants(*b) {
                    let gb = gd
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    accumulate(grads, *b, out.shape(), gb);
                }
            }
            Op::Scale(a, c) => {
                accumulate(grads, *a, out.shape(), gd.iter().map(|g| g * c).collect());
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                accumulate(grads, *a, &shape, gd.to_vec());
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                accumulate(grads, *a, out.shape(), gd.iter().zip(x).map(|(g, v)| 2.0 * g * v).collect());
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                let gi = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &v)| if v > 0.0 { *g } else if v < 0.0 { -g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, out.shape(), gi);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                accumulate(grads, *a, out.shape(), gd.iter().zip(x).map(|(g, v)| g / v).collect());
            }
            Op::Clamp { input, lo, hi } => {
                let x = self.value(*input).data();
                let gi = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &v)| if v >= *lo && v <= *hi { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *input, out.shape(), gi);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                let shape = self.shape(*a).to_vec();
                accumulate(grads, *a, &shape, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let shape = self.shape(*a).to_vec();
                accumulate(grads, *a, &shape, vec![gd[0] / n as f64; n]);
            }
            Op::ConcatChannels { a, b } => {
                let na = self.value(*a).len();
                if self.wants(*a) {
                    let shape = self.shape(*a).to_vec();
                    accumulate(grads, *a, &shape, gd[..na].to_vec());
                }
                if self.wants(*b) {
                    let shape = self.shape(*b).to_vec();
                    accumulate(grads, *b, &shape, gd[na..].to_vec());
                }
            }
            Op::GlobalAvgPool(a) => {
                let s = self.shape(*a).to_vec();
                let plane = s[1] * s[2];
                let mut gi = Vec::with_capacity(s[0] * plane);
                for &gv in gd {
                    gi.extend(std::iter::repeat(gv / plane as f64).take(plane));
                }
                accumulate(grads, *a, &s, gi);
            }
            Op::MaxPool2 { input, argmax } => {
                let shape = self.shape(*input).to_vec();
                let mut gi = vec![0.0; self.value(*input).len()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    gi[src] += gv;
                }
                accumulate(grads, *input, &shape, gi);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign_slice(&g),
        slot @ None => {
            *slot = Some(Tensor {
                shape: shape.to_vec(),
                data: g,
            })
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`; nodes the loss never reached (or that
    /// were detached) get zeros.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Moves the gradient out, zero-filled when absent.
    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}
