//! Loop kernels over flat row-major buffers.
//!
//! Inner loops run over the contiguous axis so the compiler can vectorize.

use crate::real::Real;

/// `a[m×k] · b[k×n]`.
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[t * n..(t + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * *bv;
            }
        }
    }
    out
}

/// Accumulates `dA += dC · Bᵀ` and `dB += Aᵀ · dC`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_backward<T: Real>(
    a: &[T],
    b: &[T],
    d_out: &[T],
    m: usize,
    k: usize,
    n: usize,
    d_a: Option<&mut [T]>,
    d_b: Option<&mut [T]>,
) {
    if let Some(d_a) = d_a {
        for i in 0..m {
            let g_row = &d_out[i * n..(i + 1) * n];
            for t in 0..k {
                let b_row = &b[t * n..(t + 1) * n];
                let dot: T = g_row.iter().zip(b_row).map(|(g, bv)| *g * *bv).sum();
                d_a[i * k + t] += dot;
            }
        }
    }
    if let Some(d_b) = d_b {
        for i in 0..m {
            let g_row = &d_out[i * n..(i + 1) * n];
            for t in 0..k {
                let av = a[i * k + t];
                if av == T::zero() {
                    continue;
                }
                let db_row = &mut d_b[t * n..(t + 1) * n];
                for (d, g) in db_row.iter_mut().zip(g_row) {
                    *d += av * *g;
                }
            }
        }
    }
}

pub(crate) fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    /// Output indices `o` along one axis whose input index `o*stride + tap - padding`
    /// falls inside `[0, extent)`.
    fn valid_range(&self, tap: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride;
        let p = self.padding;
        let lo = if p > tap { (p - tap).div_ceil(s) } else { 0 };
        let hi = if extent + p > tap {
            ((extent - 1 + p - tap) / s + 1).min(out_extent)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Cross-correlation of `input[C_in×H×W]` with `kernels[C_out×C_in×k×k]`.
pub(crate) fn conv2d<T: Real>(input: &[T], kernels: &[T], g: &ConvGeometry) -> Vec<T> {
    let mut out = vec![T::zero(); g.c_out * g.oh * g.ow];
    let k = g.k;
    for co in 0..g.c_out {
        let out_plane = &mut out[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        for ci in 0..g.c_in {
            let in_plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.oh);
                for kx in 0..k {
                    let wv = kernels[((co * g.c_in + ci) * k + ky) * k + kx];
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.padding;
                        let out_row = &mut out_plane[oy * g.ow..(oy + 1) * g.ow];
                        let in_row = &in_plane[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let ix_lo = ox_lo + kx - g.padding;
                            let span = ox_hi - ox_lo;
                            for (o, x) in out_row[ox_lo..ox_hi]
                                .iter_mut()
                                .zip(&in_row[ix_lo..ix_lo + span])
                            {
                                *o += wv * *x;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                out_row[ox] += wv * in_row[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward<T: Real>(
    input: &[T],
    kernels: &[T],
    d_out: &[T],
    g: &ConvGeometry,
    mut d_input: Option<&mut [T]>,
    mut d_kernels: Option<&mut [T]>,
) {
    let k = g.k;
    for co in 0..g.c_out {
        let g_plane = &d_out[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        for ci in 0..g.c_in {
            let in_off = ci * g.h * g.w;
            for ky in 0..k {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.oh);
                for kx in 0..k {
                    let w_idx = ((co * g.c_in + ci) * k + ky) * k + kx;
                    let wv = kernels[w_idx];
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut dw = T::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.padding;
                        let g_row = &g_plane[oy * g.ow..(oy + 1) * g.ow];
                        let row_off = in_off + iy * g.w;
                        if g.stride == 1 {
                            let ix_lo = ox_lo + kx - g.padding;
                            let span = ox_hi - ox_lo;
                            let gs = &g_row[ox_lo..ox_hi];
                            if d_kernels.is_some() {
                                let xs = &input[row_off + ix_lo..row_off + ix_lo + span];
                                dw += gs.iter().zip(xs).map(|(a, b)| *a * *b).sum::<T>();
                            }
                            if let Some(d_in) = d_input.as_deref_mut() {
                                let dxs = &mut d_in[row_off + ix_lo..row_off + ix_lo + span];
                                for (dx, gv) in dxs.iter_mut().zip(gs) {
                                    *dx += wv * *gv;
                                }
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = row_off + ox * g.stride + kx - g.padding;
                                dw += g_row[ox] * input[ix];
                                if let Some(d_in) = d_input.as_deref_mut() {
                                    d_in[ix] += wv * g_row[ox];
                                }
                            }
                        }
                    }
                    if let Some(d_k) = d_kernels.as_deref_mut() {
                        d_k[w_idx] += dw;
                    }
                }
            }
        }
    }
}

/// Window layout of a channel-wise 2-D pooling op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeometry {
    pub fn new(
        channels: usize,
        h: usize,
        w: usize,
        (kh, kw): (usize, usize),
        (sh, sw): (usize, usize),
    ) -> Option<Self> {
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 || kh > h || kw > w {
            return None;
        }
        Some(PoolGeometry {
            channels,
            h,
            w,
            kh,
            kw,
            sh,
            sw,
            oh: (h - kh) / sh + 1,
            ow: (w - kw) / sw + 1,
        })
    }

    pub fn output_len(&self) -> usize {
        self.channels * self.oh * self.ow
    }
}

/// Max pooling; returns values and the flat input index of each winner.
/// Ties go to the first element in row-major window order.
pub(crate) fn max_pool<T: Real>(x: &[T], g: &PoolGeometry) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(g.output_len());
    let mut arg = Vec::with_capacity(g.output_len());
    for c in 0..g.channels {
        let base = c * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best_idx = base + oy * g.sh * g.w + ox * g.sw;
                let mut best = x[best_idx];
                for dy in 0..g.kh {
                    let row = base + (oy * g.sh + dy) * g.w + ox * g.sw;
                    for dx in 0..g.kw {
                        let v = x[row + dx];
                        if v > best {
                            best = v;
                            best_idx = row + dx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

/// Smallest gap between the winner and the runner-up over all windows.
pub(crate) fn max_pool_margin<T: Real>(x: &[T], g: &PoolGeometry) -> Option<T> {
    if g.kh * g.kw < 2 {
        return None;
    }
    let mut margin: Option<T> = None;
    for c in 0..g.channels {
        let base = c * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut first = T::neg_infinity();
                let mut second = T::neg_infinity();
                for dy in 0..g.kh {
                    let row = base + (oy * g.sh + dy) * g.w + ox * g.sw;
                    for &v in &x[row..row + g.kw] {
                        if v > first {
                            second = first;
                            first = v;
                        } else if v > second {
                            second = v;
                        }
                    }
                }
                // A tie among exact zeros comes from dead ReLUs upstream; those
                // stay pinned at zero under small perturbations.
                if first == T::zero() && second == T::zero() {
                    continue;
                }
                let gap = first - second;
                margin = Some(margin.map_or(gap, |m| m.min(gap)));
            }
        }
    }
    margin
}

pub(crate) fn avg_pool<T: Real>(x: &[T], g: &PoolGeometry) -> Vec<T> {
    let scale = T::one() / T::lit((g.kh * g.kw) as f64);
    let mut out = Vec::with_capacity(g.output_len());
    for c in 0..g.channels {
        let base = c * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = T::zero();
                for dy in 0..g.kh {
                    let row = base + (oy * g.sh + dy) * g.w + ox * g.sw;
                    for &v in &x[row..row + g.kw] {
                        acc += v;
                    }
                }
                out.push(acc * scale);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Real>(d_out: &[T], g: &PoolGeometry, d_x: &mut [T]) {
    let scale = T::one() / T::lit((g.kh * g.kw) as f64);
    let mut o = 0;
    for c in 0..g.channels {
        let base = c * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let share = d_out[o] * scale;
                o += 1;
                for dy in 0..g.kh {
                    let row = base + (oy * g.sh + dy) * g.w + ox * g.sw;
                    for d in &mut d_x[row..row + g.kw] {
                        *d += share;
                    }
                }
            }
        }
    }
}
