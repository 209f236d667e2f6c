//! Independent dense-loop oracles for the desk CNN shared by several test
//! targets. Layer indices follow `desk_cnn_layers`: conv 0, conv 3, dense 7,
//! dense 9.
#![allow(dead_code)]

use contrastnet_core::nn::{desk_cnn, Network};
use contrastnet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_vec(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn random_image(seed: u64) -> Tensor<f64> {
    Tensor::new([1, 32, 32], random_vec(1024, seed, 0.0, 1.0)).unwrap()
}

/// Desk CNN whose second conv bias is shifted up so the last conv
/// activation is strictly positive: no ReLU kinks or pooling ties sit under
/// the finite-difference probes.
pub fn positive_desk_cnn(seed: u64) -> Network<f64> {
    let mut net = desk_cnn::<f64>(&[1, 32, 32], 10, seed).unwrap();
    for b in net.params_mut().get_mut("3.bias").unwrap().data_mut() {
        *b += 2.0;
    }
    net
}

fn param<'a>(net: &'a Network<f64>, name: &str) -> &'a [f64] {
    net.params().get(name).unwrap().data()
}

/// 3×3 "same" convolution followed by ReLU, `[cin,h,w] → [cout,h,w]`.
fn conv_relu(
    x: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: &[f64],
    b: &[f64],
) -> Vec<f64> {
    conv(x, cin, cout, h, w, k, b)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect()
}

/// 3×3 "same" convolution, pre-activation.
fn conv(x: &[f64], cin: usize, cout: usize, h: usize, w: usize, k: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        for i in 0..h {
            for j in 0..w {
                let mut acc = b[o];
                for c in 0..cin {
                    for di in 0..3 {
                        for dj in 0..3 {
                            let (si, sj) =
                                (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                            if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                continue;
                            }
                            acc += k[((o * cin + c) * 3 + di) * 3 + dj]
                                * x[(c * h + si as usize) * w + sj as usize];
                        }
                    }
                }
                out[(o * h + i) * w + j] = acc;
            }
        }
    }
    out
}

/// 2×2 max pool; returns values and the flat source index of each maximum
/// (first in row-major window order on ties).
fn pool(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut v = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = (ch * h + 2 * i) * w + 2 * j;
                for di in 0..2 {
                    for dj in 0..2 {
                        let idx = (ch * h + 2 * i + di) * w + 2 * j + dj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                v.push(x[best]);
                arg.push(best);
            }
        }
    }
    (v, arg)
}

/// Smallest gap between a window maximum and the largest strictly smaller
/// value in the same 2×2 window. Exact ties are skipped: they only arise
/// from identical receptive fields and stay tied under any parameter change.
fn pool_gap(x: &[f64], c: usize, h: usize, w: usize) -> f64 {
    let mut gap = f64::INFINITY;
    for ch in 0..c {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let v: Vec<f64> = (0..4)
                    .map(|k| x[(ch * h + 2 * i + k / 2) * w + 2 * j + k % 2])
                    .collect();
                let top = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let next = v
                    .iter()
                    .cloned()
                    .filter(|&u| u < top)
                    .fold(f64::NEG_INFINITY, f64::max);
                gap = gap.min(top - next);
            }
        }
    }
    gap
}

/// Distance of the evaluation point from the nearest nondifferentiable
/// point: the smallest |pre-activation| over every ReLU unit and the
/// smallest max-pool gap. Central differences are a valid oracle only when
/// the probe step moves no unit across this margin.
pub fn kink_margin(net: &Network<f64>, x: &[f64]) -> f64 {
    let abs_min = |z: &[f64]| z.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    let z1 = conv(
        x,
        1,
        8,
        32,
        32,
        param(net, "0.weight"),
        param(net, "0.bias"),
    );
    let a1: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
    let (p1, _) = pool(&a1, 8, 32, 32);
    let z2 = conv(
        &p1,
        8,
        16,
        16,
        16,
        param(net, "3.weight"),
        param(net, "3.bias"),
    );
    let a2: Vec<f64> = z2.iter().map(|v| v.max(0.0)).collect();
    let (_, _, z3) = tail(net, &a2);
    [
        abs_min(&z1),
        pool_gap(&a1, 8, 32, 32),
        abs_min(&z2),
        pool_gap(&a2, 16, 16, 16),
        abs_min(&z3),
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min)
}

/// Last conv activation `A` as `[16, 16, 16]`.
pub fn last_conv_activation(net: &Network<f64>, x: &[f64]) -> Vec<f64> {
    let a1 = conv_relu(
        x,
        1,
        8,
        32,
        32,
        param(net, "0.weight"),
        param(net, "0.bias"),
    );
    let (p1, _) = pool(&a1, 8, 32, 32);
    conv_relu(
        &p1,
        8,
        16,
        16,
        16,
        param(net, "3.weight"),
        param(net, "3.bias"),
    )
}

/// Logits from `A`, plus the intermediates needed for a manual backward.
pub fn tail(net: &Network<f64>, a: &[f64]) -> (Vec<f64>, Vec<usize>, Vec<f64>) {
    let (p, arg) = pool(a, 16, 16, 16);
    let (w1, b1) = (param(net, "7.weight"), param(net, "7.bias"));
    let z: Vec<f64> = (0..64)
        .map(|k| b1[k] + (0..1024).map(|t| w1[k * 1024 + t] * p[t]).sum::<f64>())
        .collect();
    let (w2, b2) = (param(net, "9.weight"), param(net, "9.bias"));
    let y = (0..10)
        .map(|c| b2[c] + (0..64).map(|k| w2[c * 64 + k] * z[k].max(0.0)).sum::<f64>())
        .collect();
    (y, arg, z)
}

/// `Σ_k α_k A_k` with `α_k` the spatial mean of `g_k`.
pub fn weighted_sum(g: &[f64], a: &[f64]) -> Vec<f64> {
    let mut raw = vec![0.0; 256];
    for k in 0..16 {
        let alpha = g[k * 256..(k + 1) * 256].iter().sum::<f64>() / 256.0;
        for (r, v) in raw.iter_mut().zip(&a[k * 256..(k + 1) * 256]) {
            *r += alpha * v;
        }
    }
    raw
}

/// Pre-ReLU Grad-CAM map for `class`, by hand-written backward loops.
pub fn gradcam_oracle(net: &Network<f64>, x: &[f64], class: usize) -> Vec<f64> {
    let a = last_conv_activation(net, x);
    let (_, arg, z) = tail(net, &a);
    let (w1, w2) = (param(net, "7.weight"), param(net, "9.weight"));
    let mut g = vec![0.0; a.len()];
    for t in 0..1024 {
        let dp: f64 = (0..64)
            .filter(|&k| z[k] > 0.0)
            .map(|k| w2[class * 64 + k] * w1[k * 1024 + t])
            .sum();
        g[arg[t]] += dp;
    }
    weighted_sum(&g, &a)
}

/// `Σ_j e^{y_j} − y_Q` (the `y_Q` term optional).
pub fn exp_loss(y: &[f64], q: usize, with_yq: bool) -> f64 {
    y.iter().map(|v| v.exp()).sum::<f64>() - if with_yq { y[q] } else { 0.0 }
}

/// Pre-ReLU contrastive map from central differences of the exponential
/// loss with respect to each activation cell.
pub fn contrastive_fd_oracle(net: &Network<f64>, x: &[f64], q: usize, with_yq: bool) -> Vec<f64> {
    let a = last_conv_activation(net, x);
    let h = 1e-5;
    let mut probe = a.clone();
    let mut g = vec![0.0; a.len()];
    for i in 0..a.len() {
        probe[i] = a[i] + h;
        let up = exp_loss(&tail(net, &probe).0, q, with_yq);
        probe[i] = a[i] - h;
        let down = exp_loss(&tail(net, &probe).0, q, with_yq);
        probe[i] = a[i];
        g[i] = (up - down) / (2.0 * h);
    }
    weighted_sum(&g, &a)
}
