//! Raw loops shared by the forward and backward passes.

use crate::tensor::for_each_broadcast;

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Batched matmul. `a` is `[.., m, k]`, `b` is `[.., k, n]`; the batch shapes
/// are already known to broadcast to `batch`.
pub(crate) fn matmul(
    a: &[f64],
    a_batch: &[usize],
    b: &[f64],
    b_batch: &[usize],
    batch: &[usize],
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let nb: usize = batch.iter().product();
    let mut out = vec![0.0; nb * m * n];
    for_each_broadcast(a_batch, b_batch, batch, |o, ia, ib| {
        let a = &a[ia * m * k..(ia + 1) * m * k];
        let b = &b[ib * k * n..(ib + 1) * k * n];
        let c = &mut out[o * m * n..(o + 1) * m * n];
        gemm_acc(a, b, c, m, k, n);
    });
    out
}

/// Below this output width the row-axpy loops are too short to vectorise,
/// so the kernels switch to dot products over the long axis.
const NARROW: usize = 16;

/// Dot product with four independent accumulators.
#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        acc[0] += a[0] * b[0];
        acc[1] += a[1] * b[1];
        acc[2] += a[2] * b[2];
        acc[3] += a[3] * b[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (a, b) in xr.iter().zip(yr) {
        s += a * b;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (v, &u) in y.iter_mut().zip(x) {
        *v += alpha * u;
    }
}

/// Row-major `rows×cols` to `cols×rows`.
fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// `c += a @ b` for row-major `a: m×k`, `b: k×n`.
#[inline]
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if n < NARROW && k >= NARROW {
        let bt = transpose(b, k, n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                c[i * n + j] += dot(arow, &bt[j * k..(j + 1) * k]);
            }
        }
        return;
    }
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            axpy(aip, &b[p * n..(p + 1) * n], crow);
        }
    }
}

/// `da += dc @ b^T` for `dc: m×n`, `b: k×n`.
#[inline]
pub(crate) fn gemm_nt_acc(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    if n < NARROW && k >= NARROW {
        let bt = transpose(b, k, n);
        for i in 0..m {
            let darow = &mut da[i * k..(i + 1) * k];
            for j in 0..n {
                let g = dc[i * n + j];
                if g != 0.0 {
                    axpy(g, &bt[j * k..(j + 1) * k], darow);
                }
            }
        }
        return;
    }
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            da[i * k + p] += dot(drow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `db += a^T @ dc` for `a: m×k`, `dc: m×n`.
#[inline]
pub(crate) fn gemm_tn_acc(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    if n < NARROW && m >= NARROW {
        let (at, dct) = (transpose(a, m, k), transpose(dc, m, n));
        for p in 0..k {
            let acol = &at[p * m..(p + 1) * m];
            for j in 0..n {
                db[p * n + j] += dot(acol, &dct[j * m..(j + 1) * m]);
            }
        }
        return;
    }
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            axpy(aip, drow, &mut db[p * n..(p + 1) * n]);
        }
    }
}

pub(crate) fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

pub(crate) fn log_softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Geometry of a strided 3-D patch extraction over a `[T, H, W, C]` volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub input: [usize; 4],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl PatchGeometry {
    pub fn output_grid(&self) -> [usize; 3] {
        let mut g = [0; 3];
        for a in 0..3 {
            g[a] = (self.input[a] + 2 * self.pad[a] - self.kernel[a]) / self.stride[a] + 1;
        }
        g
    }

    pub fn patch_len(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.input[3]
    }

    /// For every (output cell, patch slot) the flat source offset, or `None`
    /// when the slot falls in the zero padding.
    pub(crate) fn for_each(&self, mut f: impl FnMut(usize, Option<usize>)) {
        let [t_in, h_in, w_in, c] = self.input;
        let [ot, oh, ow] = self.output_grid();
        let [kt, kh, kw] = self.kernel;
        let mut dst = 0;
        for t in 0..ot {
            for y in 0..oh {
                for x in 0..ow {
                    for dt in 0..kt {
                        let st = (t * self.stride[0] + dt) as isize - self.pad[0] as isize;
                        for dy in 0..kh {
                            let sy = (y * self.stride[1] + dy) as isize - self.pad[1] as isize;
                            for dx in 0..kw {
                                let sx = (x * self.stride[2] + dx) as isize - self.pad[2] as isize;
                                let inside = st >= 0
                                    && sy >= 0
                                    && sx >= 0
                                    && (st as usize) < t_in
                                    && (sy as usize) < h_in
                                    && (sx as usize) < w_in;
                                for ch in 0..c {
                                    let src = inside.then(|| {
                                        ((st as usize * h_in + sy as usize) * w_in + sx as usize)
                                            * c
                                            + ch
                                    });
                                    f(dst, src);
                                    dst += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Two-tap linear interpolation weights for resizing one axis with
/// half-pixel centers (`align_corners = false`).
#[derive(Clone, Debug)]
pub(crate) struct InterpTable {
    pub taps: Vec<(usize, usize, f64, f64)>,
}

impl InterpTable {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let taps = (0..out_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                let w1 = src - i0 as f64;
                let w1 = if i1 == i0 { 0.0 } else { w1 };
                (i0, i1, 1.0 - w1, w1)
            })
            .collect();
        Self { taps }
    }
}
