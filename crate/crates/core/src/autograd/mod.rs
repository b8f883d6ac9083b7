//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op appends a node
//! holding its output value, so node order is a topological order and
//! [`Graph::backward`] is a single reverse sweep. Parameters come from a
//! [`ParamStore`] borrowed for the lifetime of the graph.

mod backward;
mod gradcheck;
pub(crate) mod kernels;
mod params;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

pub use backward::Gradients;
pub use gradcheck::{finite_diff_check, finite_diff_params, GradCheckReport, ParamCheck};
pub use kernels::PatchGeometry;
pub use params::{ParamId, ParamStore};

use kernels::{split_axis, InterpTable};

use crate::error::{CstsError, Result};
use crate::tensor::{broadcast_shapes, for_each_broadcast, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    /// Every op output is rounded to single precision.
    F32,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Gelu(Var),
    SumAxis(Var, usize),
    SumAll(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    IndexSelect { x: Var, axis: usize, indices: Rc<Vec<usize>> },
    MatMul(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Patches(Var, PatchGeometry),
    Resize { x: Var, axis: usize, table: Rc<InterpTable> },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Gelu(..) => "gelu",
            Op::SumAxis(..) => "sum_axis",
            Op::SumAll(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat(..) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::IndexSelect { .. } => "index_select",
            Op::MatMul(..) => "matmul",
            Op::Softmax(..) => "softmax_last",
            Op::LogSoftmax(..) => "log_softmax_last",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Patches(..) => "patch_extract",
            Op::Resize { .. } => "resize_linear",
        }
    }
}

/// Every op name the tape can record, for diagnostics and fault injection.
pub const OP_NAMES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "exp",
    "log",
    "sqrt",
    "gelu",
    "sum_axis",
    "sum",
    "reshape",
    "permute",
    "concat",
    "narrow",
    "index_select",
    "matmul",
    "softmax_last",
    "log_softmax_last",
    "layer_norm",
    "patch_extract",
    "resize_linear",
];

thread_local! {
    static SABOTAGE: RefCell<Option<String>> = const { RefCell::new(None) };
}

/// Test hook: negates the backward rule of the named op on this thread.
pub fn set_gradient_sabotage(op: Option<&str>) {
    SABOTAGE.with(|s| *s.borrow_mut() = op.map(str::to_owned));
}

pub(crate) fn sabotaged(op: &str) -> bool {
    SABOTAGE.with(|s| s.borrow().as_deref() == Some(op))
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

pub struct Graph<'p> {
    pub(crate) nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    param_vars: HashMap<ParamId, Var>,
    precision: Precision,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: None, param_vars: HashMap::new(), precision: Precision::F64 }
    }
}

impl<'p> Graph<'p> {
    pub fn with_params(params: &'p ParamStore) -> Self {
        Graph {
            nodes: Vec::new(),
            params: Some(params),
            param_vars: HashMap::new(),
            precision: Precision::F64,
        }
    }

    pub fn set_precision(&mut self, precision: Precision) {
        self.precision = precision;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, mut t: Tensor, requires_grad: bool) -> Var {
        if self.precision == Precision::F32 {
            round_f32(&mut t);
        }
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Graph leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let v = self.leaf(store.get(id).clone(), true);
        self.param_vars.insert(id, v);
        v
    }

    pub(crate) fn param_vars(&self) -> &HashMap<ParamId, Var> {
        &self.param_vars
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(CstsError::NonFinite { op: op.name() });
        }
        if self.precision == Precision::F32 {
            round_f32(&mut value);
        }
        let requires_grad = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub(crate) fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sqrt(x)
            | Op::Gelu(x)
            | Op::SumAxis(x, _)
            | Op::SumAll(x)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Patches(x, _) => vec![*x],
            Op::Narrow { x, .. } | Op::IndexSelect { x, .. } | Op::Resize { x, .. } => vec![*x],
            Op::Concat(xs, _) => xs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shapes(&sa, &sb)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![0.0; out_shape.iter().product()];
            for_each_broadcast(&sa, &sb, &out_shape, |o, ia, ib| out[o] = f(da[ia], db[ib]));
            out
        };
        self.push(Tensor::new(&out_shape, data)?, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(value, op)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    // ---- reductions and layout ----------------------------------------------

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(CstsError::dim(format!("sum axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        self.push(Tensor::new(&out_shape, out)?, Op::SumAxis(x, axis))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| CstsError::dim(format!("mean axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push(t, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(CstsError::dim(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let out = permute_data(self.value(x).data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        self.push(Tensor::new(&out_shape, out)?, Op::Permute(x, perm.to_vec()))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(CstsError::dim("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| CstsError::dim("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(CstsError::dim(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(CstsError::dim(format!(
                    "concat along axis {axis}: {first:?} vs {s:?}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(Tensor::new(&shape, out)?, Op::Concat(xs.to_vec(), axis))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(CstsError::dim(format!(
                "narrow axis {axis} [{start}, {}) out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(Tensor::new(&out_shape, out)?, Op::Narrow { x, axis, start })
    }

    /// Splits `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(x, axis, start, s)?);
            start += s;
        }
        if Some(&start) != self.shape(x).get(axis) {
            return Err(CstsError::dim(format!(
                "split sizes {sizes:?} do not cover axis {axis} of {:?}",
                self.shape(x)
            )));
        }
        Ok(out)
    }

    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || indices.iter().any(|&i| i >= shape[axis]) || indices.is_empty() {
            return Err(CstsError::dim(format!("index_select out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                out.extend_from_slice(&d[(o * len + i) * inner..(o * len + i + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let op = Op::IndexSelect { x, axis, indices: Rc::new(indices.to_vec()) };
        self.push(Tensor::new(&out_shape, out)?, op)
    }

    /// Nearest-neighbour upsampling of one axis by an integer factor.
    pub fn repeat_axis(&mut self, x: Var, axis: usize, factor: usize) -> Result<Var> {
        if factor == 1 {
            return Ok(x);
        }
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| CstsError::dim(format!("repeat axis {axis} out of range")))?;
        let idx: Vec<usize> = (0..len * factor).map(|i| i / factor).collect();
        self.index_select(x, axis, &idx)
    }

    // ---- linear algebra ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(CstsError::dim(format!("matmul shapes {sa:?} and {sb:?} are incompatible")));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shapes(ba, bb).map_err(|_| {
            CstsError::dim(format!("matmul batch dims of {sa:?} and {sb:?} do not broadcast"))
        })?;
        let out = kernels::matmul(self.value(a).data(), ba, self.value(b).data(), bb, &batch, m, k, n);
        let mut shape = batch;
        shape.extend([m, n]);
        self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b))
    }

    /// `x @ w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or_else(|| CstsError::dim("softmax of rank-0 tensor"))?;
        let out = kernels::softmax_rows(self.value(x).data(), width);
        self.push(Tensor::new(&shape, out)?, Op::Softmax(x))
    }

    pub fn log_softmax_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or_else(|| CstsError::dim("log-softmax of rank-0 tensor"))?;
        let out = kernels::log_softmax_rows(self.value(x).data(), width);
        self.push(Tensor::new(&shape, out)?, Op::LogSoftmax(x))
    }

    /// Layer normalisation over the last axis with variance epsilon `1e-5`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| CstsError::dim("layer_norm of rank-0 tensor"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(CstsError::dim(format!(
                "layer_norm over {shape:?} needs gamma/beta [{d}], got {:?}/{:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * g[i] + b[i];
            }
        }
        self.push(Tensor::new(&shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Strided 3-D patch extraction (im2col) over a `[T, H, W, C]` volume.
    /// Output is `[T', H', W', kt*kh*kw*C]`.
    pub fn patches(&mut self, x: Var, kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(CstsError::dim(format!("patch extraction needs [T,H,W,C], got {shape:?}")));
        }
        for a in 0..3 {
            if shape[a] + 2 * pad[a] < kernel[a] || stride[a] == 0 {
                return Err(CstsError::dim(format!(
                    "kernel {kernel:?} does not fit input {shape:?} with padding {pad:?}"
                )));
            }
        }
        let geom = PatchGeometry { input: [shape[0], shape[1], shape[2], shape[3]], kernel, stride, pad };
        let [ot, oh, ow] = geom.output_grid();
        let plen = geom.patch_len();
        let src = self.value(x).data();
        let mut out = vec![0.0; ot * oh * ow * plen];
        geom.for_each(|dst, s| {
            if let Some(s) = s {
                out[dst] = src[s];
            }
        });
        self.push(Tensor::new(&[ot, oh, ow, plen], out)?, Op::Patches(x, geom))
    }

    /// Linear interpolation of one axis to `out_len` (half-pixel centers).
    pub fn resize_axis(&mut self, x: Var, axis: usize, out_len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || out_len == 0 {
            return Err(CstsError::dim(format!("resize axis {axis} invalid for {shape:?}")));
        }
        if shape[axis] == out_len {
            return Ok(x);
        }
        let table = Rc::new(InterpTable::new(shape[axis], out_len));
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * out_len * inner];
        for o in 0..outer {
            for (j, &(i0, i1, w0, w1)) in table.taps.iter().enumerate() {
                let dst = &mut out[(o * out_len + j) * inner..(o * out_len + j + 1) * inner];
                let r0 = &src[(o * len + i0) * inner..(o * len + i0 + 1) * inner];
                let r1 = &src[(o * len + i1) * inner..(o * len + i1 + 1) * inner];
                for ((d, &a), &b) in dst.iter_mut().zip(r0).zip(r1) {
                    *d = w0 * a + w1 * b;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = out_len;
        self.push(Tensor::new(&out_shape, out)?, Op::Resize { x, axis, table })
    }

    /// Trilinear interpolation of the first three axes of `[T, H, W, ..]`.
    pub fn trilinear(&mut self, x: Var, size: [usize; 3]) -> Result<Var> {
        let t = self.resize_axis(x, 0, size[0])?;
        let h = self.resize_axis(t, 1, size[1])?;
        self.resize_axis(h, 2, size[2])
    }

    /// `x / (||x||_2 + 1e-12)` over the last axis.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        let sq = self.mul(x, x)?;
        let ss = self.sum_axis(sq, r - 1)?;
        let norm = self.sqrt(ss)?;
        let denom = self.add_scalar(norm, 1e-12)?;
        self.div(x, denom)
    }
}

fn round_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

pub(crate) fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let in_strides = crate::tensor::strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
