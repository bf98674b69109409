mod common;

use common::{conv2d_reference, numeric_grad, rand_tensor, rel_err, rng};
use disklab::tensor::{Graph, Tensor};
use rand::Rng;

#[test]
fn conv_identity_kernel() {
    let mut r = rng(1);
    let x = rand_tensor(&mut r, &[1, 5, 7], -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = g.conv2d(xv, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn conv_constant_image_all_ones_kernel() {
    let c = 0.37;
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 6, 6], c));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 4, 4]);
    for v in g.value(y).data() {
        assert!((v - 9.0 * c).abs() < 1e-15);
    }
}

#[test]
fn conv_matches_nested_loop_reference() {
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let x = rand_tensor(&mut r, &[2, 5, 5], -1.0, 1.0);
        let w = rand_tensor(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
        for (stride, padding) in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let Ok(y) = g.conv2d(xv, wv, None, stride, padding) else {
                // non-integral output extents are rejected, as is the reference's precondition
                assert!((5 + 2 * padding - 3) % stride != 0);
                continue;
            };
            let (expect, oh, ow) = conv2d_reference(x.data(), (2, 5, 5), w.data(), (3, 3), stride, padding);
            assert_eq!(g.shape(y), &[3, oh, ow]);
            for (a, b) in g.value(y).data().iter().zip(&expect) {
                assert!((a - b).abs() <= 1e-12, "stride {stride} pad {padding}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn conv_shape_errors_name_dimensions() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 6, 6]));
    let w = g.constant(Tensor::zeros(&[3, 4, 3, 3]));
    let err = g.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
    assert!(err.contains("2 channels") && err.contains("C_in=4"), "{err}");

    let w = g.constant(Tensor::zeros(&[3, 2, 3, 3]));
    let err = g.conv2d(x, w, None, 2, 0).unwrap_err().to_string();
    assert!(err.contains("H=6"), "{err}");

    let w = g.constant(Tensor::zeros(&[3, 2, 2, 2]));
    assert!(g.conv2d(x, w, None, 1, 0).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64), true);
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).data(), &[1.0; 6]);
    assert_eq!(grads.wrt(x).shape(), &[2, 3]);
}

#[test]
fn backward_of_affine_square() {
    let (a, b, x0) = (1.7, -0.4, 0.9);
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(x0), true);
    let ax = g.scale(x, a);
    let axb = g.add_scalar(ax, b);
    let loss = g.square(axb);
    let grads = g.backward(loss).unwrap();
    let expect = 2.0 * a * (a * x0 + b);
    assert!((grads.wrt(x).item() - expect).abs() < 1e-14);
}

#[test]
fn backward_rejects_non_scalar_and_zero_fills_detached() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[3]), true);
    let unused = g.leaf(Tensor::zeros(&[2, 2]), true);
    let y = g.scale(x, 2.0);
    assert!(g.backward(y).is_err());
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(unused).is_none());
    assert_eq!(grads.wrt(unused), Tensor::zeros(&[2, 2]));
}

/// Keeps random pre-activations at least `gap` away from zero so finite
/// differences never straddle a LeakyReLU kink.
fn away_from_zero(r: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = r.gen_range(gap..1.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn check_grad(x: &Tensor, build: impl Fn(&mut Graph, disklab::tensor::Var) -> disklab::tensor::Var, tol: f64) {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let loss = build(&mut g, xv);
    let analytic = g.backward(loss).unwrap().wrt(xv);
    let numeric = numeric_grad(x, 1e-5, |p| {
        let mut g = Graph::new();
        let pv = g.leaf(p.clone(), false);
        let l = build(&mut g, pv);
        g.value(l).item()
    });
    let e = rel_err(analytic.data(), &numeric);
    assert!(e <= tol, "relative error {e:e}");
}

#[test]
fn elementwise_gradients() {
    for seed in 0..10 {
        let mut r = rng(200 + seed);
        let x = rand_tensor(&mut r, &[4, 3], 0.2, 1.5);
        let y = rand_tensor(&mut r, &[4, 3], 0.2, 1.5);
        let w = rand_tensor(&mut r, &[4, 3], -1.0, 1.0);
        check_grad(
            &x,
            |g, xv| {
                let yv = g.constant(y.clone());
                let wv = g.constant(w.clone());
                let a = g.mul(xv, yv).unwrap();
                let b = g.div(wv, xv).unwrap();
                let c = g.sub(a, b).unwrap();
                let d = g.ln(xv);
                let e = g.add(c, d).unwrap();
                let f = g.abs(e);
                let h = g.clamp(f, 0.0, 100.0);
                let s = g.square(h);
                let m = g.mean(s);
                g.scale(m, 3.0)
            },
            1e-6,
        );
    }
}

#[test]
fn layer_gradients_match_finite_differences() {
    for seed in 0..10 {
        let mut r = rng(300 + seed);
        let x = rand_tensor(&mut r, &[2, 7, 7], -1.0, 1.0);
        let w1 = rand_tensor(&mut r, &[4, 2, 3, 3], -0.5, 0.5);
        let b1 = rand_tensor(&mut r, &[4], -0.1, 0.1);
        let gamma = rand_tensor(&mut r, &[4], 0.5, 1.5);
        let beta = rand_tensor(&mut r, &[4], -0.2, 0.2);
        let wt = rand_tensor(&mut r, &[4, 3, 2, 2], -0.5, 0.5);
        let wl = rand_tensor(&mut r, &[5, 3 * 2 * 2 + 6], -0.3, 0.3);
        let proj = rand_tensor(&mut r, &[5], -1.0, 1.0);
        let wc = wtv_as_conv(&wt);
        check_grad(
            &x,
            |g, xv| {
                let w1v = g.constant(w1.clone());
                let b1v = g.constant(b1.clone());
                let gv = g.constant(gamma.clone());
                let bv = g.constant(beta.clone());
                let wtv = g.constant(wt.clone());
                let wlv = g.constant(wl.clone());
                let pv = g.constant(proj.clone());
                let h = g.conv2d(xv, w1v, Some(b1v), 2, 1).unwrap(); // [4,4,4]
                let h = g.group_norm(h, gv, bv, 2, 1e-5).unwrap();
                let h = g.sigmoid(h);
                let up = g.conv_transpose2d(h, wtv, None, 2, 0).unwrap(); // [3,8,8]
                let pooled_up = g.max_pool2(up).unwrap(); // [3,4,4]
                let wcv = g.constant(wc.clone());
                let down = g.conv2d(pooled_up, wcv, None, 1, 0).unwrap(); // [3,2,2]
                let pooled = g.global_avg_pool(h).unwrap(); // [4]
                let pooled = g.reshape(pooled, &[4]).unwrap();
                let flat = g.flatten(down);
                let extra = g.constant(Tensor::zeros(&[2]));
                let pooled6 = concat_vec(g, pooled, extra);
                let feat = concat_vec(g, flat, pooled6);
                let y = g.linear(feat, wlv, None).unwrap();
                let y = g.mul(y, pv).unwrap();
                g.sum(y)
            },
            1e-6,
        );
    }
}

/// `[Ci, Co, 2, 2]` transposed weights padded to a 3x3 conv kernel `[Co, Ci, 3, 3]`.
fn wtv_as_conv(w: &Tensor) -> Tensor {
    let s = w.shape();
    let (ci, co) = (s[0], s[1]);
    let mut out = Tensor::zeros(&[co, co, 3, 3]);
    for o in 0..co {
        for i in 0..co.min(ci) {
            for ky in 0..2 {
                for kx in 0..2 {
                    out.data_mut()[((o * co + i) * 3 + ky) * 3 + kx] = w.data()[((i * co + o) * 2 + ky) * 2 + kx];
                }
            }
        }
    }
    out
}

/// Concatenates two vectors through the channel-concat op.
fn concat_vec(g: &mut Graph, a: disklab::tensor::Var, b: disklab::tensor::Var) -> disklab::tensor::Var {
    let na = g.value(a).len();
    let nb = g.value(b).len();
    let a3 = g.reshape(a, &[na, 1, 1]).unwrap();
    let b3 = g.reshape(b, &[nb, 1, 1]).unwrap();
    let c = g.concat_channels(a3, b3).unwrap();
    g.flatten(c)
}

#[test]
fn leaky_relu_gradient_away_from_kink() {
    for seed in 0..10 {
        let mut r = rng(400 + seed);
        let x = away_from_zero(&mut r, &[3, 4, 4], 1e-3);
        let w = rand_tensor(&mut r, &[3, 4, 4], -1.0, 1.0);
        check_grad(
            &x,
            |g, xv| {
                let y = g.leaky_relu(xv, 0.01);
                let wv = g.constant(w.clone());
                let z = g.mul(y, wv).unwrap();
                g.sum(z)
            },
            1e-6,
        );
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    for seed in 0..5 {
        let mut r = rng(500 + seed);
        let x = rand_tensor(&mut r, &[2, 4, 4], -1.0, 1.0);
        let w = rand_tensor(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
        let gamma = rand_tensor(&mut r, &[3], 0.5, 1.5);
        let wt = rand_tensor(&mut r, &[3, 2, 2, 2], -0.5, 0.5);
        let bt = rand_tensor(&mut r, &[2], -0.5, 0.5);
        let target = rand_tensor(&mut r, &[2, 8, 8], 0.0, 1.0);
        let build = |w: &Tensor, gamma: &Tensor, wt: &Tensor, bt: &Tensor, req: [bool; 4]| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.leaf(w.clone(), req[0]);
            let gv = g.leaf(gamma.clone(), req[1]);
            let bv = g.constant(Tensor::zeros(&[3]));
            let wtv = g.leaf(wt.clone(), req[2]);
            let btv = g.leaf(bt.clone(), req[3]);
            let h = g.conv2d(xv, wv, None, 1, 1).unwrap();
            let h = g.group_norm(h, gv, bv, 3, 1e-5).unwrap();
            let h = g.sigmoid(h);
            let up = g.conv_transpose2d(h, wtv, Some(btv), 2, 0).unwrap();
            let t = g.constant(target.clone());
            let d = g.sub(up, t).unwrap();
            let sq = g.square(d);
            let loss = g.mean(sq);
            (g, [wv, gv, wtv, btv], loss)
        };
        let (g, vars, loss) = build(&w, &gamma, &wt, &bt, [true; 4]);
        let grads = g.backward(loss).unwrap();
        let params = [&w, &gamma, &wt, &bt];
        for (k, (&v, p)) in vars.iter().zip(params).enumerate() {
            let numeric = numeric_grad(p, 1e-5, |probe| {
                let mut ps = [w.clone(), gamma.clone(), wt.clone(), bt.clone()];
                ps[k] = probe.clone();
                let (g, _, l) = build(&ps[0], &ps[1], &ps[2], &ps[3], [false; 4]);
                g.value(l).item()
            });
            let e = rel_err(grads.wrt(v).data(), &numeric);
            assert!(e < 1e-6, "param {k}: {e:e}");
        }
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut r = rng(7);
    let x = rand_tensor(&mut r, &[1, 5, 5], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[2, 1, 3, 3], -1.0, 1.0);
    let (alpha, beta) = (0.7, -1.3);
    let mut g = Graph::new();
    let xv = g.leaf(x, true);
    let wv = g.constant(w);
    let h = g.conv2d(xv, wv, None, 1, 1).unwrap();
    let h = g.sigmoid(h);
    let j1 = g.sum(h);
    let sq = g.square(h);
    let j2 = g.mean(sq);
    let a = g.scale(j1, alpha);
    let b = g.scale(j2, beta);
    let combo = g.add(a, b).unwrap();
    let g1 = g.backward(j1).unwrap().wrt(xv);
    let g2 = g.backward(j2).unwrap().wrt(xv);
    let gc = g.backward(combo).unwrap().wrt(xv);
    for i in 0..gc.len() {
        let expect = alpha * g1.data()[i] + beta * g2.data()[i];
        assert!((gc.data()[i] - expect).abs() <= 1e-12);
    }
}

#[test]
fn forward_is_deterministic() {
    let mut r = rng(9);
    let x = rand_tensor(&mut r, &[2, 8, 8], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[4, 2, 3, 3], -1.0, 1.0);
    let run = || {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
        let gam = g.constant(Tensor::full(&[4], 1.0));
        let bet = g.constant(Tensor::zeros(&[4]));
        let y = g.group_norm(y, gam, bet, 2, 1e-5).unwrap();
        g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
