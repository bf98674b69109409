//! Raw slice kernels behind the graph ops. Layouts are `[C, H, W]` for
//! feature maps and `[C_out, C_in, k, k]` for convolution weights.

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// Output extent of one spatial axis, or `None` when the window does not
    /// tile the padded input exactly.
    pub fn out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = input + 2 * padding;
        if padded < kernel || (padded - kernel) % stride != 0 {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    /// Range of output columns `ox` whose input column `ox*stride + kx - padding`
    /// lands inside `[0, in_w)`.
    #[inline]
    fn valid_range(&self, k_off: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        // need ox*s + k_off >= p  and  ox*s + k_off - p < in_len
        let s = self.stride;
        let p = self.padding;
        let lo = if k_off >= p { 0 } else { (p - k_off).div_ceil(s) };
        let limit = in_len + p; // ox*s + k_off < limit
        let hi = if limit <= k_off {
            0
        } else {
            ((limit - k_off).div_ceil(s)).min(out_len)
        };
        (lo, hi.max(lo))
    }
}

/// `C = A * B + beta * C` for row-major `A: m x k`, `B: k x n`, with either
/// operand optionally read transposed from its stored layout.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above bounds every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds the input into a `[C_in*k*k, H'*W']` patch matrix.
fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ih, iw, oh, ow, k) = (g.in_h, g.in_w, g.out_h, g.out_w, g.kernel);
    let n = oh * ow;
    let mut cols = vec![0.0; g.patch_len() * n];
    for ci in 0..g.in_channels {
        let in_c = &input[ci * ih * iw..(ci + 1) * ih * iw];
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ky, ih, oh);
            for kx in 0..k {
                let (ox_lo, ox_hi) = g.valid_range(kx, iw, ow);
                let row = &mut cols[((ci * k + ky) * k + kx) * n..][..n];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.padding;
                    let in_row = &in_c[iy * iw..(iy + 1) * iw];
                    let out_row = &mut row[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        let off = ox_lo + kx - g.padding;
                        out_row[ox_lo..ox_hi].copy_from_slice(&in_row[off..off + ox_hi - ox_lo]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            out_row[ox] = in_row[ox * g.stride + kx - g.padding];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds a patch matrix back, summing overlapping contributions.
fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ih, iw, oh, ow, k) = (g.in_h, g.in_w, g.out_h, g.out_w, g.kernel);
    let n = oh * ow;
    let mut out = vec![0.0; g.in_channels * ih * iw];
    for ci in 0..g.in_channels {
        let out_c = &mut out[ci * ih * iw..(ci + 1) * ih * iw];
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ky, ih, oh);
            for kx in 0..k {
                let (ox_lo, ox_hi) = g.valid_range(kx, iw, ow);
                let row = &cols[((ci * k + ky) * k + kx) * n..][..n];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.padding;
                    let dst = &mut out_c[iy * iw..(iy + 1) * iw];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        let off = ox_lo + kx - g.padding;
                        for (d, s) in dst[off..off + ox_hi - ox_lo].iter_mut().zip(&src[ox_lo..ox_hi]) {
                            *d += s;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox * g.stride + kx - g.padding] += src[ox];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_forward(input: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let n = g.out_h * g.out_w;
    let mut out = vec![0.0; g.out_channels * n];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_exact_mut(n).enumerate() {
            chunk.fill(b[co]);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if g.is_pointwise() {
        gemm(g.out_channels, g.patch_len(), n, weight, false, input, false, beta, &mut out);
    } else {
        let cols = im2col(input, g);
        gemm(g.out_channels, g.patch_len(), n, weight, false, &cols, false, beta, &mut out);
    }
    out
}

/// Gradient of a cross-correlation with respect to its input.
pub fn conv2d_backward_input(grad_out: &[f64], weight: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.out_h * g.out_w;
    let mut cols = vec![0.0; g.patch_len() * n];
    gemm(g.patch_len(), g.out_channels, n, weight, true, grad_out, false, 0.0, &mut cols);
    if g.is_pointwise() {
        cols
    } else {
        col2im(&cols, g)
    }
}

/// Gradient of a cross-correlation with respect to its weight.
pub fn conv2d_backward_weight(grad_out: &[f64], input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.out_h * g.out_w;
    let mut grad_w = vec![0.0; g.out_channels * g.patch_len()];
    if g.is_pointwise() {
        gemm(g.out_channels, n, g.patch_len(), grad_out, false, input, true, 0.0, &mut grad_w);
    } else {
        let cols = im2col(input, g);
        gemm(g.out_channels, n, g.patch_len(), grad_out, false, &cols, true, 0.0, &mut grad_w);
    }
    grad_w
}

/// Per-channel sums of a `[C, H*W]` buffer (bias gradients).
pub fn channel_sums(x: &[f64], channels: usize) -> Vec<f64> {
    let plane = x.len() / channels;
    (0..channels)
        .map(|c| x[c * plane..(c + 1) * plane].iter().sum())
        .collect()
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
