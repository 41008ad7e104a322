use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::tensor::{
    broadcast_shape, broadcast_strides, for_each_offset, reduce_to_shape, strides, Tensor,
};

/// Guard added inside `log` so that `log(0)` stays finite.
pub const LOG_EPS: f64 = 1e-12;
/// Variance guard for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-9;
/// Norm guard for L2 normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Sum {
        input: Var,
        axis: usize,
    },
    Abs(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
    Conv1dPatch {
        input: Var,
        weight: Var,
        patch: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    L2Normalize {
        input: Var,
        norms: Vec<f64>,
    },
    Cumsum {
        input: Var,
        axis: usize,
    },
    StraightThrough {
        soft: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum { .. } => "sum",
            Op::Abs(..) => "abs",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::Square(..) => "square",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv1dPatch { .. } => "conv1d_patch",
            Op::Embedding { .. } => "embedding",
            Op::Dropout { .. } => "dropout",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Cumsum { .. } => "cumsum",
            Op::StraightThrough { .. } => "straight_through",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic tape. Nodes are appended in creation order, which is a valid
/// topological order, so backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Result of [`Graph::backward`]: one optional gradient buffer per node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for every parameter bound on the tape; parameters the loss
    /// does not reach get zeros.
    pub fn for_params(&self, params: &ParamSet) -> BTreeMap<String, Tensor> {
        params
            .iter()
            .map(|(name, value)| {
                let grad = self
                    .params
                    .get(name)
                    .and_then(|v| self.get(*v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(value.shape()));
                (name.clone(), grad)
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_axis(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape.last() {
        Some(&n) if n > 0 => Ok((shape.iter().product::<usize>() / n, n)),
        _ => Err(TensorError::invalid(
            op,
            format!("needs a non-empty last axis, got {shape:?}"),
        )),
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner;
    (value, deriv)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct MatMulDims {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    n: usize,
    k: usize,
    m: usize,
    out_shape: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (n, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, m) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let lead_a = &a[..a.len() - 2];
    let lead_b = &b[..b.len() - 2];
    let lead = if lead_b.is_empty() {
        lead_a
    } else if lead_a.is_empty() || lead_a == lead_b {
        lead_b
    } else {
        return Err(mismatch());
    };
    let mut out_shape = lead.to_vec();
    out_shape.extend([n, m]);
    Ok(MatMulDims {
        batch: lead.iter().product(),
        a_batched: !lead_a.is_empty(),
        b_batched: !lead_b.is_empty(),
        n,
        k,
        m,
        out_shape,
    })
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Bind a named parameter as a trainable leaf. Repeated calls with the
    /// same name return the same node.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some(&var) = self.params.get(name) {
            return Ok(var);
        }
        let value = params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?
            .clone();
        let var = self.leaf(value, true);
        self.params.insert(name.to_string(), var);
        Ok(var)
    }

    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Copy of the value cut off from the tape.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.nodes[var.0].value.clone();
        self.constant(value)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let da = self.value(a).data();
        let db = self.value(b).data();
        let data: Vec<f64> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let out = broadcast_shape(&sa, &sb).ok_or(TensorError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            })?;
            let st_a = broadcast_strides(&sa, &out);
            let st_b = broadcast_strides(&sb, &out);
            let mut data = Vec::with_capacity(out.iter().product());
            for_each_offset(&out, [&st_a, &st_b], |[i, j]| data.push(f(da[i], db[j])));
            return Ok((Tensor::new(out, data)?, self.any_grad(&[a, b])));
        };
        Ok((Tensor::new(sa, data)?, self.any_grad(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(value, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.requires_grad(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let value = self.value(a).map(|x| x + offset);
        let rg = self.requires_grad(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// Batched matrix product over the last two axes. Leading axes must match,
    /// or one operand may be a plain matrix broadcast over the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let dims = matmul_dims(self.shape(a), self.shape(b))?;
        let da = self.value(a).data();
        let db = self.value(b).data();
        let (n, k, m) = (dims.n, dims.k, dims.m);
        let mut out = vec![0.0; dims.batch * n * m];
        for bi in 0..dims.batch {
            let ao = if dims.a_batched { bi * n * k } else { 0 };
            let bo = if dims.b_batched { bi * k * m } else { 0 };
            let oo = bi * n * m;
            for i in 0..n {
                let row = &mut out[oo + i * m..oo + (i + 1) * m];
                for p in 0..k {
                    let aip = da[ao + i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &db[bo + p * m..bo + (p + 1) * m];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += aip * bv;
                    }
                }
            }
        }
        let value = Tensor::new(dims.out_shape, out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::invalid(
                "permute",
                format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(&shape);
        let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(data.len());
        for_each_offset(&out_shape, [&src], |[i]| out.push(data[i]));
        let value = Tensor::new(out_shape, out)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Permute(a, perm.to_vec()), rg))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(TensorError::invalid("transpose", "needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                shape: base,
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "slice",
                axis,
                shape,
            });
        }
        if start > end || end > shape[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{end} out of bounds for axis {axis} of {shape:?}"),
            ));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let value = Tensor::new(out_shape, out)?;
        let rg = self.requires_grad(a);
        Ok(self.push(
            value,
            Op::Slice {
                input: a,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "sum",
                axis,
                shape,
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let d = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += x;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Sum { input: a, axis }, rg))
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| TensorError::InvalidAxis {
                op: "mean",
                axis,
                shape: self.shape(a).to_vec(),
            })?;
        let s = self.sum(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, &[n])?;
        self.sum(flat, 0)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(TensorError::invalid("mean_all", "empty tensor"));
        }
        let s = self.sum_all(a)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.requires_grad(a);
        self.push(value, op, rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// `ln(x + 1e-12)`.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| (x + LOG_EPS).ln(), Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| gelu_parts(x).0, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, n) = last_axis(self.shape(a), "softmax")?;
        let mut value = self.value(a).clone();
        for r in 0..rows {
            let row = &mut value.data_mut()[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, n) = last_axis(self.shape(a), "log_softmax")?;
        let mut value = self.value(a).clone();
        for r in 0..rows {
            let row = &mut value.data_mut()[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::LogSoftmax(a), rg))
    }

    /// Normalize each row of the last axis to zero mean and unit variance.
    /// Affine gain and bias are applied by the caller.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let (rows, n) = last_axis(self.shape(a), "layer_norm")?;
        let mut value = self.value(a).clone();
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut value.data_mut()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::LayerNorm { input: a, inv_std }, rg))
    }

    /// 1-D convolution with stride equal to kernel width: input `[B, C, T]`,
    /// weight `[D, C, P]`, output `[B, T/P, D]` (one embedding per patch).
    pub fn conv1d_patch(&mut self, input: Var, weight: Var) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv1d_patch",
            lhs: si.clone(),
            rhs: sw.clone(),
        };
        if si.len() != 3 || sw.len() != 3 || si[1] != sw[1] || sw[2] == 0 || !si[2].is_multiple_of(sw[2]) {
            return Err(mismatch());
        }
        let (b, c, t) = (si[0], si[1], si[2]);
        let (d, p) = (sw[0], sw[2]);
        let l = t / p;
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut out = vec![0.0; b * l * d];
        for bi in 0..b {
            for li in 0..l {
                let o = &mut out[(bi * l + li) * d..(bi * l + li + 1) * d];
                for (di, slot) in o.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        let xs = &x[(bi * c + ci) * t + li * p..(bi * c + ci) * t + (li + 1) * p];
                        let ws = &w[(di * c + ci) * p..(di * c + ci + 1) * p];
                        acc += xs.iter().zip(ws).map(|(a, b)| a * b).sum::<f64>();
                    }
                    *slot = acc;
                }
            }
        }
        let value = Tensor::new(vec![b, l, d], out)?;
        let rg = self.any_grad(&[input, weight]);
        Ok(self.push(
            value,
            Op::Conv1dPatch {
                input,
                weight,
                patch: p,
            },
            rg,
        ))
    }

    /// Rows of `table` (`[V, D]`) selected by `ids`, shaped `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::invalid(
                "embedding",
                format!("table must be 2-D, got {shape:?}"),
            ));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::invalid(
                "embedding",
                format!("id {bad} out of range for {v} rows"),
            ));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.requires_grad(table);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout. Call only in training mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::invalid(
                "dropout",
                format!("probability {p} not in [0, 1)"),
            ));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(a).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mut value = self.value(a).clone();
        for (x, m) in value.data_mut().iter_mut().zip(&mask) {
            *x *= m;
        }
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Dropout { input: a, mask }, rg))
    }

    /// Scale each row of the last axis to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let (rows, n) = last_axis(self.shape(a), "l2_normalize")?;
        let mut value = self.value(a).clone();
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut value.data_mut()[r * n..(r + 1) * n];
            let norm = (row.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x /= norm;
            }
            norms.push(norm);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::L2Normalize { input: a, norms }, rg))
    }

    /// Cosine similarity along the last axis (broadcasting like `mul`).
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.l2_normalize(a)?;
        let nb = self.l2_normalize(b)?;
        let prod = self.mul(na, nb)?;
        let axis = self.shape(prod).len() - 1;
        self.sum(prod, axis)
    }

    /// Sum of squares along the last axis.
    pub fn squared_l2(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank == 0 {
            return Err(TensorError::invalid("squared_l2", "needs rank >= 1"));
        }
        let sq = self.square(a);
        self.sum(sq, rank - 1)
    }

    pub fn cumsum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "cumsum",
                axis,
                shape,
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut value = self.value(a).clone();
        let d = value.data_mut();
        for o in 0..outer {
            for j in 1..n {
                for i in 0..inner {
                    d[(o * n + j) * inner + i] += d[(o * n + j - 1) * inner + i];
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Cumsum { input: a, axis }, rg))
    }

    /// Forward value is `hard`; backward passes the incoming gradient to
    /// `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(TensorError::ShapeMismatch {
                op: "straight_through",
                lhs: self.shape(soft).to_vec(),
                rhs: hard.shape().to_vec(),
            });
        }
        let rg = self.requires_grad(soft);
        Ok(self.push(hard, Op::StraightThrough { soft }, rg))
    }

    /// Reverse sweep from a scalar `loss`, accumulating `d loss / d node` for
    /// every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(TensorError::NonScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|g| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("gradient shape")
                })
            })
            .collect();
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, contrib: Vec<f64>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Vec<f64>>],
        var: Var,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        let n = self.nodes[var.0].value.numel();
        let slot = grads[var.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn elementwise(
        &self,
        grads: &mut [Option<Vec<f64>>],
        input: Var,
        g: &[f64],
        local: impl Fn(usize) -> f64,
    ) {
        self.accumulate_with(grads, input, |acc| {
            for (i, (a, gi)) in acc.iter_mut().zip(g).enumerate() {
                *a += gi * local(i);
            }
        });
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, reduce_to_shape(g, out_shape, self.shape(*a)));
                self.accumulate(grads, *b, reduce_to_shape(g, out_shape, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, reduce_to_shape(g, out_shape, self.shape(*a)));
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accumulate(grads, *b, reduce_to_shape(&neg, out_shape, self.shape(*b)));
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let da = self.value(*a).data();
                let db = self.value(*b).data();
                let st_a = broadcast_strides(sa, out_shape);
                let st_b = broadcast_strides(sb, out_shape);
                let st_o = strides(out_shape);
                let need_a = self.requires_grad(*a);
                let need_b = self.requires_grad(*b);
                let mut ga = vec![0.0; if need_a { g.len() } else { 0 }];
                let mut gb = vec![0.0; if need_b { g.len() } else { 0 }];
                for_each_offset(out_shape, [&st_o, &st_a, &st_b], |[o, i, j]| {
                    let (x, y) = (da[i], db[j]);
                    if is_div {
                        if need_a {
                            ga[o] = g[o] / y;
                        }
                        if need_b {
                            gb[o] = -g[o] * x / (y * y);
                        }
                    } else {
                        if need_a {
                            ga[o] = g[o] * y;
                        }
                        if need_b {
                            gb[o] = g[o] * x;
                        }
                    }
                });
                if need_a {
                    self.accumulate(grads, *a, reduce_to_shape(&ga, out_shape, sa));
                }
                if need_b {
                    self.accumulate(grads, *b, reduce_to_shape(&gb, out_shape, sb));
                }
            }
            Op::Scale(a, factor) => self.elementwise(grads, *a, g, |_| *factor),
            Op::AddScalar(a) => self.elementwise(grads, *a, g, |_| 1.0),
            Op::MatMul(a, b) => self.backward_matmul(*a, *b, g, grads),
            Op::Permute(a, perm) => {
                let shape = self.shape(*a);
                let in_strides = strides(shape);
                let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                let o_strides = strides(out_shape);
                self.accumulate_with(grads, *a, |acc| {
                    for_each_offset(out_shape, [&o_strides, &src], |[o, i]| acc[i] += g[o]);
                });
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    if self.requires_grad(p) {
                        let mut part = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            part.extend_from_slice(&g[base..base + n * inner]);
                        }
                        self.accumulate(grads, p, part);
                    }
                    offset += n;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, n, inner) = axis_split(self.shape(*input), *axis);
                let len = out_shape[*axis];
                self.accumulate_with(grads, *input, |acc| {
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            acc[dst + i] += g[src + i];
                        }
                    }
                });
            }
            Op::Sum { input, axis } => {
                let (outer, n, inner) = axis_split(self.shape(*input), *axis);
                self.accumulate_with(grads, *input, |acc| {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                acc[(o * n + j) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                self.elementwise(grads, *a, g, |i| {
                    if x[i] > 0.0 {
                        1.0
                    } else if x[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
            }
            Op::Exp(a) => self.elementwise(grads, *a, g, |i| out[i]),
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.elementwise(grads, *a, g, |i| 1.0 / (x[i] + LOG_EPS));
            }
            Op::Sigmoid(a) => self.elementwise(grads, *a, g, |i| out[i] * (1.0 - out[i])),
            Op::Tanh(a) => self.elementwise(grads, *a, g, |i| 1.0 - out[i] * out[i]),
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.elementwise(grads, *a, g, |i| gelu_parts(x[i]).1);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.elementwise(grads, *a, g, |i| if x[i] > 0.0 { 1.0 } else { 0.0 });
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                self.elementwise(grads, *a, g, |i| 2.0 * x[i]);
            }
            Op::Softmax(a) => {
                let n = *out_shape.last().expect("softmax rank");
                self.accumulate_with(grads, *a, |acc| {
                    for r in 0..out.len() / n {
                        let y = &out[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for i in 0..n {
                            acc[r * n + i] += y[i] * (gr[i] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let n = *out_shape.last().expect("log_softmax rank");
                self.accumulate_with(grads, *a, |acc| {
                    for r in 0..out.len() / n {
                        let gr = &g[r * n..(r + 1) * n];
                        let total: f64 = gr.iter().sum();
                        for i in 0..n {
                            acc[r * n + i] += gr[i] - out[r * n + i].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm { input, inv_std } => {
                let n = *out_shape.last().expect("layer_norm rank");
                self.accumulate_with(grads, *input, |acc| {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let y = &out[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mean_g = gr.iter().sum::<f64>() / n as f64;
                        let mean_gy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for i in 0..n {
                            acc[r * n + i] += inv * (gr[i] - mean_g - y[i] * mean_gy);
                        }
                    }
                });
            }
            Op::Conv1dPatch {
                input,
                weight,
                patch,
            } => {
                let si = self.shape(*input);
                let (b, c, t) = (si[0], si[1], si[2]);
                let d = self.shape(*weight)[0];
                let p = *patch;
                let l = t / p;
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                self.accumulate_with(grads, *input, |acc| {
                    for bi in 0..b {
                        for li in 0..l {
                            for di in 0..d {
                                let go = g[(bi * l + li) * d + di];
                                for ci in 0..c {
                                    for pi in 0..p {
                                        acc[(bi * c + ci) * t + li * p + pi] +=
                                            go * w[(di * c + ci) * p + pi];
                                    }
                                }
                            }
                        }
                    }
                });
                self.accumulate_with(grads, *weight, |acc| {
                    for bi in 0..b {
                        for li in 0..l {
                            for di in 0..d {
                                let go = g[(bi * l + li) * d + di];
                                for ci in 0..c {
                                    for pi in 0..p {
                                        acc[(di * c + ci) * p + pi] +=
                                            go * x[(bi * c + ci) * t + li * p + pi];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                self.accumulate_with(grads, *table, |acc| {
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            acc[id * d + j] += g[row * d + j];
                        }
                    }
                });
            }
            Op::Dropout { input, mask } => self.elementwise(grads, *input, g, |i| mask[i]),
            Op::L2Normalize { input, norms } => {
                let n = *out_shape.last().expect("l2_normalize rank");
                self.accumulate_with(grads, *input, |acc| {
                    for (r, norm) in norms.iter().enumerate() {
                        let y = &out[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for i in 0..n {
                            acc[r * n + i] += (gr[i] - y[i] * dot) / norm;
                        }
                    }
                });
            }
            Op::Cumsum { input, axis } => {
                let (outer, n, inner) = axis_split(out_shape, *axis);
                let mut rev = g.to_vec();
                for o in 0..outer {
                    for j in (0..n.saturating_sub(1)).rev() {
                        for i in 0..inner {
                            rev[(o * n + j) * inner + i] += rev[(o * n + j + 1) * inner + i];
                        }
                    }
                }
                self.accumulate(grads, *input, rev);
            }
            Op::StraightThrough { soft } => self.accumulate(grads, *soft, g.to_vec()),
        }
    }

    fn backward_matmul(&self, a: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let dims = matmul_dims(self.shape(a), self.shape(b)).expect("validated in forward");
        let (n, k, m) = (dims.n, dims.k, dims.m);
        let da = self.value(a).data();
        let db = self.value(b).data();
        self.accumulate_with(grads, a, |acc| {
            for bi in 0..dims.batch {
                let ao = if dims.a_batched { bi * n * k } else { 0 };
                let bo = if dims.b_batched { bi * k * m } else { 0 };
                let go = bi * n * m;
                for i in 0..n {
                    let grow = &g[go + i * m..go + (i + 1) * m];
                    for p in 0..k {
                        let brow = &db[bo + p * m..bo + (p + 1) * m];
                        acc[ao + i * k + p] +=
                            grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
        });
        self.accumulate_with(grads, b, |acc| {
            for bi in 0..dims.batch {
                let ao = if dims.a_batched { bi * n * k } else { 0 };
                let bo = if dims.b_batched { bi * k * m } else { 0 };
                let go = bi * n * m;
                for i in 0..n {
                    let grow = &g[go + i * m..go + (i + 1) * m];
                    for p in 0..k {
                        let aip = da[ao + i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let dst = &mut acc[bo + p * m..bo + (p + 1) * m];
                        for (d, &gv) in dst.iter_mut().zip(grow) {
                            *d += aip * gv;
                        }
                    }
                }
            }
        });
    }

    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.name()
    }
}
