use crate::conv::{self, ConvDims};
use crate::linalg::{gemm, gemm_nt, gemm_tn};
use crate::error::{Result, TensorError};
use crate::shape::{broadcast, broadcast_map, check_axis, split_axis};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Scale(f64),
    Offset,
    Clamp(f64, f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Prelu(Var, Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Conv(Var, Var, ConvDims),
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    SumAll(Var),
    Reshape(Var),
    Narrow { x: Var, axis: usize, start: usize },
    Stack { xs: Vec<Var>, axis: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic record of one forward pass.
///
/// Nodes are appended in evaluation order, so inputs always precede the
/// nodes that consume them and the backward sweep is a single reverse pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if `var` was trainable and
    /// reachable from the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
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

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast(name, &sa, &sb)?;
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(&sa, &out_shape);
            let mb = broadcast_map(&sb, &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var, offset: f64) -> Var {
        let value = match kind {
            Unary::Tanh => self.value(x).map(f64::tanh),
            Unary::Sigmoid => self.value(x).map(sigmoid),
            Unary::Exp => self.value(x).map(f64::exp),
            Unary::Log => self.value(x).map(f64::ln),
            Unary::Scale(c) => self.value(x).map(|v| c * v),
            Unary::Offset => self.value(x).map(|v| v + offset),
            Unary::Clamp(lo, hi) => self.value(x).map(|v| v.clamp(lo, hi)),
        };
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Unary(kind, x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x, 0.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x, 0.0)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x, 0.0)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), x, 0.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::Offset, x, c)
    }

    /// Clamps into `[lo, hi]`; the gradient passes where the input lies in
    /// the closed interval and is zero elsewhere.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(Unary::Clamp(lo, hi), x, 0.0)
    }

    /// `x` where positive, `slope * x` elsewhere. `slope` must hold one value.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let a = self.value(slope).item().ok_or_else(|| TensorError::Shape {
            op: "prelu",
            lhs: self.shape(x).to_vec(),
            rhs: self.shape(slope).to_vec(),
        })?;
        let value = self.value(x).map(|v| if v > 0.0 { v } else { a * v });
        let rg = self.any_grad(&[x, slope]);
        Ok(self.push(value, Op::Prelu(x, slope), rg))
    }

    /// `m×k · k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), rg))
    }

    /// `B×m×k · B×k×n`, one product per leading index.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::Shape {
                op: "batch_matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bn, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(bn * m * n);
        for i in 0..bn {
            data.extend(gemm(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![bn, m, n], data)?,
            Op::BatchMatMul(a, b),
            rg,
        ))
    }

    /// Same-padded cross-correlation treating axis 1 (axis 0 for rank-3
    /// input) as channels. Input `[N×]C_in×H×W`, kernel `C_out×C_in×KH×KW`
    /// with odd spatial extents; spatial extents are preserved.
    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        let err = || TensorError::Shape {
            op: "conv2d",
            lhs: sx.clone(),
            rhs: sk.clone(),
        };
        let (n, rest) = match sx.len() {
            3 => (1, &sx[..]),
            4 => (sx[0], &sx[1..]),
            _ => return Err(err()),
        };
        if sk.len() != 4 || sk[1] != rest[0] || sk[2] % 2 == 0 || sk[3] % 2 == 0 {
            return Err(err());
        }
        let dims = ConvDims {
            n,
            c_in: rest[0],
            c_out: sk[0],
            h: rest[1],
            w: rest[2],
            kh: sk[2],
            kw: sk[3],
        };
        let data = conv::forward(&dims, self.value(x).data(), self.value(kernel).data());
        let mut shape = sx.clone();
        shape[sx.len() - 3] = dims.c_out;
        let rg = self.any_grad(&[x, kernel]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Conv(x, kernel, dims), rg))
    }

    fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
        let mut s = shape.to_vec();
        if keepdim {
            s[axis] = 1;
        } else {
            s.remove(axis);
        }
        s
    }

    fn reduce(&mut self, x: Var, axis: usize, keepdim: bool, mean: bool) -> Result<Var> {
        let name = if mean { "mean" } else { "sum" };
        check_axis(name, self.shape(x), axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let row = (o * extent + e) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[row + i];
                }
            }
        }
        if mean {
            let inv = 1.0 / extent as f64;
            data.iter_mut().for_each(|v| *v *= inv);
        }
        let out = Tensor::new(Self::reduced_shape(&shape, axis, keepdim), data)?;
        let op = if mean {
            Op::Mean { x, axis }
        } else {
            Op::Sum { x, axis }
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, op, rg))
    }

    pub fn sum(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(x, axis, keepdim, false)
    }

    pub fn mean(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(x, axis, keepdim, true)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        check_axis("narrow", self.shape(x), axis)?;
        let shape = self.shape(x).to_vec();
        if start + len > shape[axis] {
            return Err(TensorError::Invalid(format!(
                "narrow: range {start}..{} exceeds extent {} of axis {axis}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Narrow { x, axis, start },
            rg,
        ))
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Invalid("stack: no inputs".into()))?;
        let shape = self.shape(*first).to_vec();
        if axis > shape.len() {
            return Err(TensorError::Axis {
                op: "stack",
                axis,
                rank: shape.len(),
            });
        }
        for v in xs {
            if self.shape(*v) != shape.as_slice() {
                return Err(TensorError::Shape {
                    op: "stack",
                    lhs: shape.clone(),
                    rhs: self.shape(*v).to_vec(),
                });
            }
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * inner * xs.len());
        for o in 0..outer {
            for v in xs {
                data.extend_from_slice(&self.value(*v).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, xs.len());
        let rg = self.any_grad(xs);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Stack {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Reverse sweep from a single-element `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            // Intermediate gradients are not exposed; only leaves keep theirs.
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, contribution: Vec<f64>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing
                .iter_mut()
                .zip(contribution)
                .for_each(|(e, c)| *e += c),
            slot => *slot = Some(contribution),
        }
    }

    /// Folds an output-shaped gradient back onto a broadcast operand.
    fn unbroadcast(&self, var: Var, out_shape: &[usize], g: &[f64]) -> Vec<f64> {
        let shape = self.shape(var);
        if shape == out_shape {
            return g.to_vec();
        }
        let map = broadcast_map(shape, out_shape);
        let mut acc = vec![0.0; self.value(var).numel()];
        for (gi, &src) in g.iter().zip(&map) {
            acc[src] += gi;
        }
        acc
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                let (da, db) = (self.value(a).data(), self.value(b).data());
                let (sa, sb) = (self.shape(a), self.shape(b));
                let ma = broadcast_map(sa, out_shape);
                let mb = broadcast_map(sb, out_shape);
                let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                    Binary::Add => (g.to_vec(), g.to_vec()),
                    Binary::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    Binary::Mul => (
                        g.iter().zip(&mb).map(|(gv, &j)| gv * db[j]).collect(),
                        g.iter().zip(&ma).map(|(gv, &i)| gv * da[i]).collect(),
                    ),
                    Binary::Div => (
                        g.iter().zip(&mb).map(|(gv, &j)| gv / db[j]).collect(),
                        g.iter()
                            .zip(ma.iter().zip(&mb))
                            .map(|(gv, (&i, &j))| -gv * da[i] / (db[j] * db[j]))
                            .collect(),
                    ),
                };
                if self.requires_grad(a) {
                    let c = self.unbroadcast(a, out_shape, &ga);
                    self.accumulate(grads, a, c);
                }
                if self.requires_grad(b) {
                    let c = self.unbroadcast(b, out_shape, &gb);
                    self.accumulate(grads, b, c);
                }
            }
            Op::Unary(kind, x) => {
                let xin = self.value(*x).data();
                let c: Vec<f64> = match kind {
                    Unary::Tanh => g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Unary::Sigmoid => g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    Unary::Exp => g.iter().zip(out).map(|(g, y)| g * y).collect(),
                    Unary::Log => g.iter().zip(xin).map(|(g, x)| g / x).collect(),
                    Unary::Scale(c) => g.iter().map(|g| g * c).collect(),
                    Unary::Offset => g.to_vec(),
                    Unary::Clamp(lo, hi) => g
                        .iter()
                        .zip(xin)
                        .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { 0.0 })
                        .collect(),
                };
                self.accumulate(grads, *x, c);
            }
            Op::Prelu(x, slope) => {
                let xin = self.value(*x).data();
                let a = self.value(*slope).data()[0];
                let gx = g
                    .iter()
                    .zip(xin)
                    .map(|(g, &x)| if x > 0.0 { *g } else { a * g })
                    .collect();
                let ga: f64 = g
                    .iter()
                    .zip(xin)
                    .filter(|(_, &x)| x <= 0.0)
                    .map(|(g, x)| g * x)
                    .sum();
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *slope, vec![ga]);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, gemm_nt(g, db, m, n, k));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, gemm_tn(da, g, m, k, n));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bn, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let (mut ga, mut gb) = (Vec::new(), Vec::new());
                for i in 0..bn {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &da[i * m * k..(i + 1) * m * k];
                    let bi = &db[i * k * n..(i + 1) * k * n];
                    ga.extend(gemm_nt(gi, bi, m, n, k));
                    gb.extend(gemm_tn(ai, gi, m, k, n));
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Conv(x, k, dims) => {
                let (gx, gk) =
                    conv::backward(dims, self.value(*x).data(), self.value(*k).data(), g);
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *k, gk);
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let (outer, extent, inner) = split_axis(self.shape(*x), *axis);
                let w = if matches!(node.op, Op::Mean { .. }) {
                    1.0 / extent as f64
                } else {
                    1.0
                };
                let mut c = vec![0.0; outer * extent * inner];
                for o in 0..outer {
                    for e in 0..extent {
                        for i in 0..inner {
                            c[(o * extent + e) * inner + i] = w * g[o * inner + i];
                        }
                    }
                }
                self.accumulate(grads, *x, c);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Narrow { x, axis, start } => {
                let (outer, extent, inner) = split_axis(self.shape(*x), *axis);
                let len = out_shape[*axis];
                let mut c = vec![0.0; outer * extent * inner];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    c[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, c);
            }
            Op::Stack { xs, axis } => {
                let shape = self.shape(xs[0]);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis..].iter().product();
                for (j, v) in xs.iter().enumerate() {
                    if !self.requires_grad(*v) {
                        continue;
                    }
                    let mut c = Vec::with_capacity(outer * inner);
                    for o in 0..outer {
                        let base = (o * xs.len() + j) * inner;
                        c.extend_from_slice(&g[base..base + inner]);
                    }
                    self.accumulate(grads, *v, c);
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn matmul_gradient_hand_value() {
        // d/da sum(a·b) = 1·bᵀ: rows are the row sums of b.
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]));
        let y = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[5.0, 9.0, 5.0, 9.0]);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let th = tape.tanh(z);
        let sg = tape.sigmoid(z);
        assert_eq!(tape.value(th).item(), Some(0.0));
        assert_eq!(tape.value(sg).item(), Some(0.5));
    }

    #[test]
    fn tanh_derivative() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.3));
        let y = tape.tanh(x);
        let g = tape.backward(y).unwrap();
        let expected = 1.0 - 0.3f64.tanh().powi(2);
        assert!((g.get(x).unwrap().data()[0] - expected).abs() < 1e-15);
        assert!((expected - 0.915137).abs() < 1e-6);
    }

    #[test]
    fn broadcast_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, b), Err(TensorError::Shape { op: "add", .. })));
    }

    #[test]
    fn broadcast_gradient_sums_over_expanded_axes() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.leaf(t(&[1, 3], &[10.0, 20.0, 30.0]));
        let y = tape.mul(a, b).unwrap();
        let loss = tape.sum_all(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(g.get(a).unwrap().data(), &[10.0, 20.0, 30.0, 10.0, 20.0, 30.0]);
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let m = tape.mean(v, 0, false).unwrap();
        assert_eq!(tape.value(m).item(), Some(2.5));
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[0.25; 4]);

        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.sum(x, 0, false).unwrap();
        assert_eq!(tape.value(s).shape(), &[2]);
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
        let k = tape.sum(x, 1, true).unwrap();
        assert_eq!(tape.value(k).shape(), &[2, 1]);
        assert_eq!(tape.value(k).data(), &[3.0, 7.0]);
        let mean3 = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let m3 = tape.mean(mean3, 0, false).unwrap();
        assert_eq!(tape.value(m3).item(), Some(2.0));
        assert!(matches!(tape.sum(x, 2, false), Err(TensorError::Axis { .. })));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.tanh(x);
        assert_eq!(
            tape.backward(y).unwrap_err(),
            TensorError::NonScalarLoss(vec![2])
        );
    }

    #[test]
    fn sum_gives_ones_and_square_gives_twice() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5));
        let loss = tape.sum_all(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, -2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn conv_zero_and_identity_kernels() {
        let x = Tensor::from_fn(&[1, 3, 4], |i| (i as f64).sin());
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let zero = tape.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let y = tape.conv2d(xv, zero).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let mut delta = Tensor::zeros(&[1, 1, 3, 3]);
        delta.set(&[0, 0, 1, 1], 1.0);
        let d = tape.constant(delta);
        let y = tape.conv2d(xv, d).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 3]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, k),
            Err(TensorError::Shape { op: "conv2d", .. })
        ));
    }

    #[test]
    fn narrow_and_stack_route_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 5], |i| i as f64));
        let n = tape.narrow(x, 1, 1, 2).unwrap();
        assert_eq!(tape.value(n).data(), &[1.0, 2.0, 6.0, 7.0]);
        let s = tape.stack(&[n, n], 0).unwrap();
        assert_eq!(tape.shape(s), &[2, 2, 2]);
        let loss = tape.sum_all(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(
            g.get(x).unwrap().data(),
            &[0.0, 2.0, 2.0, 0.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0]
        );
    }

    #[test]
    fn stack_interleaves_on_inner_axis() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let s = tape.stack(&[a, b], 1).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn prelu_forward_and_slope_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-2.0, 3.0]));
        let a = tape.leaf(Tensor::from_vec(vec![0.25]));
        let y = tape.prelu(x, a).unwrap();
        assert_eq!(tape.value(y).data(), &[-0.5, 3.0]);
        let loss = tape.sum_all(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25, 1.0]);
        assert_eq!(g.get(a).unwrap().data(), &[-2.0]);
    }
}
