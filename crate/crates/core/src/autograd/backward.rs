use super::kernels::{self, split_axis};
use super::{permute_data, sabotaged, Graph, Op, ParamId, Var};
use crate::error::{CstsError, Result};
use crate::tensor::{broadcast_shapes, for_each_broadcast, Tensor};

/// Gradients of a scalar with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not participate in the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Gradients for every parameter the graph touched, keyed by parameter.
    pub fn params(&self, graph: &Graph<'_>) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> =
            graph.param_vars().iter().map(|(&id, &v)| (id, self.wrt(v))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

/// Reduces a gradient over the broadcast axes back down to `in_shape`.
fn unbroadcast(grad: &[f64], out_shape: &[usize], in_shape: &[usize], dst: &mut [f64]) {
    if out_shape == in_shape {
        for (d, g) in dst.iter_mut().zip(grad) {
            *d += g;
        }
        return;
    }
    for_each_broadcast(in_shape, out_shape, out_shape, |o, i, _| dst[i] += grad[o]);
}

impl Graph<'_> {
    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(CstsError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            let gout = if sabotaged(node.op.name()) {
                gout.iter().map(|g| -g).collect()
            } else {
                gout
            };
            self.propagate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out_shape = node.value.shape();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    let sa = self.shape(*a);
                    accumulate(&mut grads[a.0], self.value(*a).numel(), |d| {
                        unbroadcast(g, out_shape, sa, d)
                    });
                }
                if self.needs(*b) {
                    let sb = self.shape(*b);
                    let neg: Vec<f64>;
                    let gb = if sign < 0.0 {
                        neg = g.iter().map(|v| -v).collect();
                        &neg[..]
                    } else {
                        g
                    };
                    accumulate(&mut grads[b.0], self.value(*b).numel(), |d| {
                        unbroadcast(gb, out_shape, sb, d)
                    });
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let full = broadcast_shapes(&sa, &sb).expect("validated in forward");
                let numel = g.len();
                let mut ga = if self.needs(*a) { Some(vec![0.0; numel]) } else { None };
                let mut gb = if self.needs(*b) { Some(vec![0.0; numel]) } else { None };
                for_each_broadcast(&sa, &sb, &full, |o, ia, ib| {
                    let (x, z) = (va[ia], vb[ib]);
                    if is_div {
                        if let Some(ga) = ga.as_mut() {
                            ga[o] = g[o] / z;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[o] = -g[o] * x / (z * z);
                        }
                    } else {
                        if let Some(ga) = ga.as_mut() {
                            ga[o] = g[o] * z;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[o] = g[o] * x;
                        }
                    }
                });
                if let Some(ga) = ga {
                    accumulate(&mut grads[a.0], va.len(), |d| unbroadcast(&ga, &full, &sa, d));
                }
                if let Some(gb) = gb {
                    accumulate(&mut grads[b.0], vb.len(), |d| unbroadcast(&gb, &full, &sb, d));
                }
            }
            Op::Scale(x, c) => self.elementwise(*x, grads, |i| g[i] * c),
            Op::AddScalar(x) | Op::Reshape(x) => self.elementwise(*x, grads, |i| g[i]),
            Op::Exp(x) => self.elementwise(*x, grads, |i| g[i] * y[i]),
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.elementwise(*x, grads, |i| g[i] / xv[i])
            }
            Op::Sqrt(x) => self.elementwise(*x, grads, |i| g[i] * 0.5 / y[i]),
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.elementwise(*x, grads, |i| g[i] * kernels::gelu_grad(xv[i]))
            }
            Op::SumAxis(x, axis) => {
                let shape = self.shape(*x);
                let (outer, len, inner) = split_axis(shape, *axis);
                accumulate(&mut grads[x.0], outer * len * inner, |d| {
                    for o in 0..outer {
                        for a in 0..len {
                            let dst = &mut d[(o * len + a) * inner..(o * len + a + 1) * inner];
                            for (dv, &gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *dv += gv;
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => self.elementwise(*x, grads, |_| g[0]),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, out_shape, &inv);
                self.elementwise(*x, grads, |i| back[i]);
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut start = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if self.needs(x) {
                        accumulate(&mut grads[x.0], outer * len * inner, |d| {
                            for o in 0..outer {
                                let src = &g[(o * total + start) * inner..(o * total + start + len) * inner];
                                for (dv, &gv) in d[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                    *dv += gv;
                                }
                            }
                        });
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = split_axis(self.shape(*x), *axis);
                let len = out_shape[*axis];
                accumulate(&mut grads[x.0], outer * full * inner, |d| {
                    for o in 0..outer {
                        let dst = &mut d[(o * full + start) * inner..(o * full + start + len) * inner];
                        for (dv, &gv) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::IndexSelect { x, axis, indices } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let k = indices.len();
                accumulate(&mut grads[x.0], outer * len * inner, |d| {
                    for o in 0..outer {
                        for (j, &i) in indices.iter().enumerate() {
                            let dst = &mut d[(o * len + i) * inner..(o * len + i + 1) * inner];
                            let src = &g[(o * k + j) * inner..(o * k + j + 1) * inner];
                            for (dv, &gv) in dst.iter_mut().zip(src) {
                                *dv += gv;
                            }
                        }
                    }
                });
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, grads),
            Op::Softmax(x) => {
                let w = *out_shape.last().unwrap();
                accumulate(&mut grads[x.0], y.len(), |d| {
                    for r in 0..y.len() / w {
                        let (yr, gr) = (&y[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for i in 0..w {
                            d[r * w + i] += yr[i] * (gr[i] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let w = *out_shape.last().unwrap();
                accumulate(&mut grads[x.0], y.len(), |d| {
                    for r in 0..y.len() / w {
                        let (yr, gr) = (&y[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                        let gsum: f64 = gr.iter().sum();
                        for i in 0..w {
                            d[r * w + i] += gr[i] - yr[i].exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let dim = *out_shape.last().unwrap();
                let gam = self.value(*gamma).data();
                let rows = g.len() / dim;
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], g.len(), |d| {
                        for r in 0..rows {
                            let gr = &g[r * dim..(r + 1) * dim];
                            let hr = &xhat[r * dim..(r + 1) * dim];
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for i in 0..dim {
                                let dh = gr[i] * gam[i];
                                m1 += dh;
                                m2 += dh * hr[i];
                            }
                            m1 /= dim as f64;
                            m2 /= dim as f64;
                            for i in 0..dim {
                                let dh = gr[i] * gam[i];
                                d[r * dim + i] += rstd[r] * (dh - m1 - hr[i] * m2);
                            }
                        }
                    });
                }
                if self.needs(*gamma) {
                    accumulate(&mut grads[gamma.0], dim, |d| {
                        for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                            d[i % dim] += gv * h;
                        }
                    });
                }
                if self.needs(*beta) {
                    accumulate(&mut grads[beta.0], dim, |d| {
                        for (i, &gv) in g.iter().enumerate() {
                            d[i % dim] += gv;
                        }
                    });
                }
            }
            Op::Patches(x, geom) => {
                accumulate(&mut grads[x.0], self.value(*x).numel(), |d| {
                    geom.for_each(|dst, src| {
                        if let Some(s) = src {
                            d[s] += g[dst];
                        }
                    })
                });
            }
            Op::Resize { x, axis, table } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let out_len = table.taps.len();
                accumulate(&mut grads[x.0], outer * len * inner, |d| {
                    for o in 0..outer {
                        for (j, &(i0, i1, w0, w1)) in table.taps.iter().enumerate() {
                            let src = &g[(o * out_len + j) * inner..(o * out_len + j + 1) * inner];
                            for (k, &gv) in src.iter().enumerate() {
                                d[(o * len + i0) * inner + k] += w0 * gv;
                                d[(o * len + i1) * inner + k] += w1 * gv;
                            }
                        }
                    }
                });
            }
        }
    }

    fn elementwise(&self, x: Var, grads: &mut [Option<Vec<f64>>], f: impl Fn(usize) -> f64) {
        if !self.needs(x) {
            return;
        }
        let n = self.value(x).numel();
        accumulate(&mut grads[x.0], n, |d| {
            for (i, dv) in d.iter_mut().enumerate() {
                *dv += f(i);
            }
        });
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shapes(ba, bb).expect("validated in forward");
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        if self.needs(a) {
            accumulate(&mut grads[a.0], va.len(), |d| {
                for_each_broadcast(ba, bb, &batch, |o, ia, ib| {
                    kernels::gemm_nt_acc(
                        &g[o * m * n..(o + 1) * m * n],
                        &vb[ib * k * n..(ib + 1) * k * n],
                        &mut d[ia * m * k..(ia + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                });
            });
        }
        if self.needs(b) {
            accumulate(&mut grads[b.0], vb.len(), |d| {
                for_each_broadcast(ba, bb, &batch, |o, ia, ib| {
                    kernels::gemm_tn_acc(
                        &va[ia * m * k..(ia + 1) * m * k],
                        &g[o * m * n..(o + 1) * m * n],
                        &mut d[ib * k * n..(ib + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                });
            });
        }
    }
}
