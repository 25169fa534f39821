//! Reference implementations written as plain index loops, independent of
//! the library kernels. Everything is `f64` and row-major.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Zero-padded cross-correlation, `input[c_in×h×w]`, `kernels[c_out×c_in×k×k]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kernels: &[f64],
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for ci in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let v = input[(ci * h + iy as usize) * w + ix as usize];
                            s += v * kernels[((co * c_in + ci) * k + ky) * k + kx];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = s;
            }
        }
    }
    (out, oh, ow)
}

/// `exp(x_i) / Σ exp(x_j)` computed as `1 / Σ exp(x_j − x_i)`.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|xi| 1.0 / x.iter().map(|xj| (xj - xi).exp()).sum::<f64>())
        .collect()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| if *v > 0.0 { *v } else { 0.0 }).collect()
}

pub fn max_pool(x: &[f64], c: usize, h: usize, w: usize, win: usize, stride: usize) -> Vec<f64> {
    let oh = (h - win) / stride + 1;
    let ow = (w - win) / stride + 1;
    let mut out = Vec::new();
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..win {
                    for dx in 0..win {
                        m = m.max(x[(ch * h + oy * stride + dy) * w + ox * stride + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// `[9 × c]`: row `r` is the mean of cell `(r / 3, r % 3)` of a 3×3 grid.
pub fn slice_regions(fmap: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ch, cw) = (h / 3, w / 3);
    let mut out = vec![0.0; 9 * c];
    for r in 0..9 {
        let (gy, gx) = (r / 3, r % 3);
        for k in 0..c {
            let mut s = 0.0;
            for y in gy * ch..(gy + 1) * ch {
                for x in gx * cw..(gx + 1) * cw {
                    s += fmap[(k * h + y) * w + x];
                }
            }
            out[r * c + k] = s / (ch * cw) as f64;
        }
    }
    out
}

/// `relu(Â · H · W)`, or without the ReLU when `activate` is false.
pub fn gcn_layer(a_hat: &[f64], h: &[f64], w: &[f64], n: usize, d_in: usize, d_out: usize, activate: bool) -> Vec<f64> {
    let mut out = vec![0.0; n * d_out];
    for i in 0..n {
        for o in 0..d_out {
            let mut s = 0.0;
            for j in 0..n {
                for t in 0..d_in {
                    s += a_hat[i * n + j] * h[j * d_in + t] * w[t * d_out + o];
                }
            }
            out[i * d_out + o] = if activate { s.max(0.0) } else { s };
        }
    }
    out
}

/// `softmax(W · [global, nodes…] + b)` with `w[K × (g + 9d)]`.
pub fn fused_classify(global: &[f64], nodes: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let features: Vec<f64> = global.iter().chain(nodes).copied().collect();
    let f = features.len();
    let logits: Vec<f64> = (0..b.len())
        .map(|k| b[k] + (0..f).map(|j| w[k * f + j] * features[j]).sum::<f64>())
        .collect();
    softmax(&logits)
}

/// `D_r^{-1/2} (A + I) D_c^{-1/2}` with row sums `D_r` and column sums `D_c`.
pub fn normalize(a: &[f64], n: usize) -> Vec<f64> {
    let mut s = a.to_vec();
    for i in 0..n {
        s[i * n + i] += 1.0;
    }
    let row: Vec<f64> = (0..n).map(|i| (0..n).map(|j| s[i * n + j]).sum()).collect();
    let col: Vec<f64> = (0..n).map(|j| (0..n).map(|i| s[i * n + j]).sum()).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = s[i * n + j] / (row[i].sqrt() * col[j].sqrt());
        }
    }
    out
}

/// Bilinear sample of a `h×w` plane at `(y, x)` in source pixel coordinates.
pub fn bilinear_at(src: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor().clamp(0.0, (h - 1) as f64) as usize;
    let x0 = x.floor().clamp(0.0, (w - 1) as f64) as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
    let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}
