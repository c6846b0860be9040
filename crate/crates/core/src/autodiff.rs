//! A small reverse-mode automatic differentiation tape over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value. Calling
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients for
//! every node that transitively depends on a leaf created with
//! `requires_grad = true`. Tapes are single-use: build one per forward pass.

use std::rc::Rc;

use crate::attention::{nonresidual_entry, residual_entry, ModulationVariant};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A fixed sparse linear map `y[i] = sum_j w_ij * x[j]` over flattened tensors.
///
/// Bilinear warps, crops and resizes are all expressed this way.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMap {
    pub out_shape: Vec<usize>,
    pub in_len: usize,
    /// `rows[i]` lists `(input index, weight)` pairs for output `i`.
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMap {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(j, w)| w * x[j]).sum())
            .collect()
    }
}

/// Where modulation applies inside a per-head joint probability matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationPlan {
    pub rows: Vec<usize>,
    /// Column groups modulated independently (foreground words, identity tokens).
    pub groups: Vec<Vec<usize>>,
    /// Shape prior per entry of `rows`.
    pub mask: Vec<f64>,
    pub alpha: f64,
    pub variant: ModulationVariant,
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
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, f64),
    Silu(Var),
    Tanh(Var),
    Clamp(Var, f64, f64),
    Square(Var),
    Sqrt(Var),
    SumAll(Var),
    RowSum(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    Sparse(Var, Rc<SparseMap>),
    Modulate(Var, Rc<ModulationPlan>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0[v.0].take()
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise op shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(t, op, &[a, b])
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        self.push(t, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |p, q| p * q)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Div(a, b), |p, q| p / q)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |v| v + s)
    }

    fn row_op(&mut self, x: Var, r: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (xv, rv) = (self.value(x), self.value(r));
        let d = xv.cols();
        assert_eq!(rv.len(), d, "row broadcast width");
        let mut out = xv.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            for (v, &b) in row.iter_mut().zip(rv.data()) {
                *v = f(*v, b);
            }
        }
        self.push(out, op, &[x, r])
    }

    /// `x[n, d] + b[d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        self.row_op(x, b, Op::AddRow(x, b), |p, q| p + q)
    }

    /// `x[n, d] * g[d]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        self.row_op(x, g, Op::MulRow(x, g), |p, q| p * q)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(&[av.rows(), bv.cols()]);
        gemm(av, false, bv, false, 1.0, &mut out);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a[n, k] * b[m, k]^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(&[av.rows(), bv.rows()]);
        gemm(av, false, bv, true, 1.0, &mut out);
        self.push(out, Op::MatMulT(a, b), &[a, b])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        crate::attention::softmax_rows_in_place(&mut out);
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut out = self.value(a).clone();
        let d = out.cols();
        for row in out.data_mut().chunks_exact_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        self.push(out, Op::LayerNormRows(a, eps), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |v| v / (1.0 + (-v).exp()))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// Elementwise clamp; the gradient passes only strictly inside `(lo, hi)`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |v| v * v)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `[n, m] -> [n, 1]` sums along each row.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.cols();
        let data = v.data().chunks_exact(m).map(|r| r.iter().sum()).collect();
        let t = Tensor::from_parts(vec![v.rows(), 1], data);
        self.push(t, Op::RowSum(a), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let d = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), d, "concat_rows width");
            n += v.rows();
            data.extend_from_slice(v.data());
        }
        self.push(Tensor::from_parts(vec![n, d], data), Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            assert_eq!(v.rows(), n, "concat_cols height");
            for r in 0..n {
                data[r * total + off..r * total + off + w].copy_from_slice(v.row(r));
            }
            off += w;
        }
        self.push(Tensor::from_parts(vec![n, total], data), Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a);
        let d = v.cols();
        let t = Tensor::from_parts(vec![end - start, d], v.data()[start * d..end * d].to_vec());
        self.push(t, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a);
        let w = end - start;
        let mut data = Vec::with_capacity(v.rows() * w);
        for r in 0..v.rows() {
            data.extend_from_slice(&v.row(r)[start..end]);
        }
        let t = Tensor::from_parts(vec![v.rows(), w], data);
        self.push(t, Op::SliceCols(a, start), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape.to_vec()).expect("reshape size");
        self.push(t, Op::Reshape(a), &[a])
    }

    pub fn sparse(&mut self, a: Var, map: Rc<SparseMap>) -> Var {
        let v = self.value(a);
        assert_eq!(v.len(), map.in_len, "sparse map input length");
        let t = Tensor::from_parts(map.out_shape.clone(), map.apply(v.data()));
        self.push(t, Op::Sparse(a, map), &[a])
    }

    /// Shape-aware modulation of a square probability matrix.
    pub fn modulate(&mut self, probs: Var, plan: Rc<ModulationPlan>) -> Var {
        let src = self.value(probs);
        let n = src.cols();
        let mut out = src.clone();
        for (k, &r) in plan.rows.iter().enumerate() {
            let m = plan.mask[k];
            let row_in = src.row(r);
            for cols in &plan.groups {
                let (hi, lo) = extrema(row_in, cols);
                for &c in cols {
                    out.data_mut()[r * n + c] = match plan.variant {
                        ModulationVariant::Residual => {
                            residual_entry(row_in[c], row_in[hi], row_in[lo], m, plan.alpha)
                        }
                        ModulationVariant::NonResidual => {
                            nonresidual_entry(row_in[c], m, plan.alpha).clamp(0.0, 1.0)
                        }
                    };
                }
            }
        }
        self.push(out, Op::Modulate(probs, plan), &[probs])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, hadamard(g, val(*b)));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, hadamard(g, val(*a)));
                }
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a), val(*b));
                if wants(*a) {
                    let d = g.data().iter().zip(y.data()).map(|(g, y)| g / y).collect();
                    self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
                }
                if wants(*b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(x.data().iter().zip(y.data()))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    self.accumulate(grads, *b, Tensor::from_parts(g.shape().to_vec(), d));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if wants(*b) {
                    let d = val(*b).len();
                    let mut gb = vec![0.0; d];
                    for row in g.data().chunks_exact(d) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(val(*b).shape().to_vec(), gb));
                }
            }
            Op::MulRow(x, r) => {
                let (xv, rv) = (val(*x), val(*r));
                let d = rv.len();
                if wants(*x) {
                    let mut gx = g.clone();
                    for row in gx.data_mut().chunks_exact_mut(d) {
                        row.iter_mut().zip(rv.data()).for_each(|(a, s)| *a *= s);
                    }
                    self.accumulate(grads, *x, gx);
                }
                if wants(*r) {
                    let mut gr = vec![0.0; d];
                    for (grow, xrow) in g.data().chunks_exact(d).zip(xv.data().chunks_exact(d)) {
                        for k in 0..d {
                            gr[k] += grow[k] * xrow[k];
                        }
                    }
                    self.accumulate(grads, *r, Tensor::from_parts(rv.shape().to_vec(), gr));
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let mut ga = Tensor::zeros(av.shape());
                    gemm(g, false, bv, true, 1.0, &mut ga);
                    self.accumulate(grads, *a, ga);
                }
                if wants(*b) {
                    let mut gb = Tensor::zeros(bv.shape());
                    gemm(av, true, g, false, 1.0, &mut gb);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let mut ga = Tensor::zeros(av.shape());
                    gemm(g, false, bv, false, 1.0, &mut ga);
                    self.accumulate(grads, *a, ga);
                }
                if wants(*b) {
                    let mut gb = Tensor::zeros(bv.shape());
                    gemm(g, true, av, false, 1.0, &mut gb);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let m = y.cols();
                let mut gx = g.clone();
                for (grow, yrow) in gx.data_mut().chunks_exact_mut(m).zip(y.data().chunks_exact(m)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    grow.iter_mut().zip(yrow).for_each(|(g, y)| *g = y * (*g - dot));
                }
                self.accumulate(grads, *a, gx);
            }
            Op::LayerNormRows(a, eps) => {
                let (x, y) = (val(*a), &node.value);
                let d = x.cols();
                let mut gx = g.clone();
                for ((grow, yrow), xrow) in gx
                    .data_mut()
                    .chunks_exact_mut(d)
                    .zip(y.data().chunks_exact(d))
                    .zip(x.data().chunks_exact(d))
                {
                    let mean = xrow.iter().sum::<f64>() / d as f64;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gm = grow.iter().sum::<f64>() / d as f64;
                    let gy = grow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>() / d as f64;
                    grow.iter_mut()
                        .zip(yrow)
                        .for_each(|(g, y)| *g = inv * (*g - gm - y * gy));
                }
                self.accumulate(grads, *a, gx);
            }
            Op::Silu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Tanh(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Clamp(a, lo, hi) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| if x > *lo && x < *hi { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Square(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, x)| 2.0 * g * x)
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Sqrt(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g / (2.0 * y))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::SumAll(a) => {
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item()));
            }
            Op::RowSum(a) => {
                let x = val(*a);
                let m = x.cols();
                let mut gx = Tensor::zeros(x.shape());
                for (r, row) in gx.data_mut().chunks_exact_mut(m).enumerate() {
                    row.fill(g.data()[r]);
                }
                self.accumulate(grads, *a, gx);
            }
            Op::ConcatRows(parts) => {
                let d = g.cols();
                let mut start = 0;
                for &p in parts {
                    let n = val(p).rows();
                    if wants(p) {
                        let t = Tensor::from_parts(
                            vec![n, d],
                            g.data()[start * d..(start + n) * d].to_vec(),
                        );
                        self.accumulate(grads, p, t);
                    }
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (n, total) = (g.rows(), g.cols());
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let mut data = Vec::with_capacity(n * w);
                        for r in 0..n {
                            data.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        self.accumulate(grads, p, Tensor::from_parts(vec![n, w], data));
                    }
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let x = val(*a);
                let d = x.cols();
                let mut gx = Tensor::zeros(x.shape());
                gx.data_mut()[start * d..start * d + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, gx);
            }
            Op::SliceCols(a, start) => {
                let x = val(*a);
                let (n, m, w) = (x.rows(), x.cols(), g.cols());
                let mut gx = Tensor::zeros(x.shape());
                for r in 0..n {
                    gx.data_mut()[r * m + start..r * m + start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, gx);
            }
            Op::Reshape(a) => {
                let t = g.clone().reshape(val(*a).shape().to_vec()).expect("reshape back");
                self.accumulate(grads, *a, t);
            }
            Op::Sparse(a, map) => {
                let mut gx = vec![0.0; map.in_len];
                for (row, &gi) in map.rows.iter().zip(g.data()) {
                    for &(j, w) in row {
                        gx[j] += w * gi;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(val(*a).shape().to_vec(), gx));
            }
            Op::Modulate(a, plan) => {
                let x = val(*a);
                let n = x.cols();
                let mut gx = g.clone();
                for (k, &r) in plan.rows.iter().enumerate() {
                    let m = plan.mask[k];
                    let row_in = x.row(r);
                    for cols in &plan.groups {
                        match plan.variant {
                            ModulationVariant::Residual => {
                                let (hi, lo) = extrema(row_in, cols);
                                let gsum: f64 = cols.iter().map(|&c| g.get(r, c)).sum();
                                let dst = &mut gx.data_mut()[r * n..(r + 1) * n];
                                for &c in cols {
                                    dst[c] = (1.0 - plan.alpha) * g.get(r, c);
                                }
                                dst[hi] += plan.alpha * m * gsum;
                                dst[lo] += plan.alpha * (1.0 - m) * gsum;
                            }
                            ModulationVariant::NonResidual => {
                                for &c in cols {
                                    let pre = nonresidual_entry(row_in[c], m, plan.alpha);
                                    if !(0.0..=1.0).contains(&pre) {
                                        gx.data_mut()[r * n + c] = 0.0;
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, gx);
            }
        }
    }
}

/// Column indices (first occurrence) of the maximum and minimum within `cols`.
fn extrema(row: &[f64], cols: &[usize]) -> (usize, usize) {
    let (mut hi, mut lo) = (cols[0], cols[0]);
    for &c in &cols[1..] {
        if row[c] > row[hi] {
            hi = c;
        }
        if row[c] < row[lo] {
            lo = c;
        }
    }
    (hi, lo)
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let d = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_parts(a.shape().to_vec(), d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` at `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn check(x: Tensor, build: impl Fn(&mut Tape, Var) -> Var) {
        let eval = |t: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.param(t.clone());
            let out = build(&mut tape, v);
            tape.value(out).item()
        };
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let out = build(&mut tape, v);
        let analytic = tape.backward(out).get(v).unwrap().clone();
        let numeric = numeric_grad(&x, &eval);
        let scale = numeric.data().iter().fold(1e-3f64, |a, b| a.max(b.abs()));
        assert!(
            analytic.max_abs_diff(&numeric) / scale < 1e-6,
            "analytic {:?}\nnumeric {:?}",
            analytic.data(),
            numeric.data()
        );
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn matmul_softmax_layernorm_chain() {
        let w = rand_t(&[4, 3], 1);
        let c = rand_t(&[5, 3], 2);
        check(rand_t(&[5, 4], 3), |t, x| {
            let w = t.constant(w.clone());
            let c = t.constant(c.clone());
            let y = t.matmul(x, w);
            let y = t.layer_norm_rows(y, 1e-5);
            let s = t.softmax_rows(y);
            let z = t.mul(s, c);
            let z = t.silu(z);
            t.sum(z)
        });
    }

    #[test]
    fn matmul_t_and_broadcast_rows() {
        let k = rand_t(&[6, 4], 5);
        let b = rand_t(&[1, 4], 6);
        check(rand_t(&[3, 4], 7), |t, x| {
            let k = t.constant(k.clone());
            let b = t.constant(b.clone());
            let y = t.add_row(x, b);
            let y = t.mul_row(y, b);
            let s = t.matmul_t(y, k);
            let s = t.tanh(s);
            let s = t.square(s);
            t.mean(s)
        });
        // Gradient with respect to the broadcast operand.
        let x = rand_t(&[3, 4], 8);
        check(rand_t(&[1, 4], 9), |t, b| {
            let x = t.constant(x.clone());
            let y = t.mul_row(x, b);
            let y = t.add_row(y, b);
            let y = t.square(y);
            t.sum(y)
        });
    }

    #[test]
    fn slicing_concat_reshape_sparse() {
        let map = Rc::new(SparseMap {
            out_shape: vec![2, 3],
            in_len: 12,
            rows: (0..6).map(|i| vec![(i, 0.5), ((i * 5) % 12, -1.5)]).collect(),
        });
        check(rand_t(&[4, 3], 10), |t, x| {
            let a = t.slice_rows(x, 1, 3);
            let b = t.slice_cols(x, 0, 2);
            let b = t.reshape(b, &[2, 4]);
            let b = t.slice_cols(b, 1, 4);
            let c = t.concat_rows(&[a, b]);
            let d = t.concat_cols(&[c, c]);
            let e = t.sparse(x, map.clone());
            let e = t.row_sum(e);
            let e = t.square(e);
            let s1 = t.sum(d);
            let d2 = t.square(d);
            let s2 = t.sum(d2);
            let s3 = t.sum(e);
            let s = t.add(s1, s2);
            t.add(s, s3)
        });
    }

    #[test]
    fn div_sqrt_scalar_ops() {
        check(Tensor::new(vec![3], vec![0.7, 1.3, 2.1]).unwrap(), |t, x| {
            let sq = t.square(x);
            let n = t.sum(sq);
            let n = t.sqrt(n);
            let n2 = t.add_scalar(n, 0.5);
            let ratio = t.div(n, n2);
            let r = t.scale(ratio, 3.0);
            t.sub(r, n)
        });
    }

    #[test]
    fn modulation_gradients_match_finite_differences() {
        for variant in [ModulationVariant::Residual, ModulationVariant::NonResidual] {
            for alpha in [0.0, 0.3, 1.0] {
                let plan = Rc::new(ModulationPlan {
                    rows: vec![0, 2],
                    groups: vec![vec![3], vec![1, 4]],
                    mask: vec![1.0, 0.25],
                    alpha,
                    variant,
                });
                let c = rand_t(&[5, 5], 11);
                check(rand_t(&[5, 5], 12), |t, x| {
                    let p = t.softmax_rows(x);
                    let m = t.modulate(p, plan.clone());
                    let c = t.constant(c.clone());
                    let z = t.mul(m, c);
                    t.sum(z)
                });
            }
        }
    }

    #[test]
    fn modulate_op_matches_pure_function() {
        use crate::attention::{modulate_joint, Segment};
        let labels = [
            Segment::Image,
            Segment::Image,
            Segment::ForegroundText,
            Segment::Id,
            Segment::Id,
        ];
        let mut tape = Tape::new();
        let x = tape.constant(rand_t(&[5, 5], 13));
        let p = tape.softmax_rows(x);
        let plan = Rc::new(ModulationPlan {
            rows: vec![0, 1],
            groups: vec![vec![2], vec![3, 4]],
            mask: vec![1.0, 0.0],
            alpha: 0.6,
            variant: ModulationVariant::Residual,
        });
        let m = tape.modulate(p, plan);
        let expected =
            modulate_joint(tape.value(p), &labels, &[0], &[1.0, 0.0], 0.6, ModulationVariant::Residual)
                .unwrap();
        assert!(tape.value(m).max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.param(Tensor::full(&[2], 2.0));
        let c = tape.mul(a, b);
        let s = tape.sum(c);
        let g = tape.backward(s);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 1.0]);
    }
}
