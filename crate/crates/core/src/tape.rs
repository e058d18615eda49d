//! Reverse-mode automatic differentiation over `f64` ndarray tensors.
//!
//! A [`Graph`] records operations define-by-run; [`Graph::backward`] walks
//! the tape in reverse and accumulates gradients for every node that
//! (transitively) depends on a parameter. Matrices are the working currency:
//! most ops take 2-D values, scalars are 0-D.
//!
//! Index selections (gather/pool groups) are recorded as constants, so the
//! analytic gradient treats them as fixed structure. Callers that need
//! finite-difference agreement freeze those selections across perturbed
//! evaluations.

use ndarray::{ArrayD, Axis, Ix2, IxDyn};
use std::collections::BTreeMap;
use std::sync::Arc;

pub const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

enum Op {
    Constant,
    Param,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    AddScalar(VarId, f64),
    /// (r, c) matrix plus a length-c row vector broadcast over rows.
    AddBias(VarId, VarId),
    Matmul(VarId, VarId),
    Transpose(VarId),
    Reshape(VarId, Vec<usize>),
    ConcatRows(Vec<VarId>),
    ConcatCols(Vec<VarId>),
    SliceCols(VarId, usize, usize),
    GatherRows(VarId, Arc<Vec<usize>>),
    PickElems(VarId, Arc<Vec<(usize, usize)>>),
    SumAll(VarId),
    MeanAll(VarId),
    Sigmoid(VarId),
    Tanh(VarId),
    Silu(VarId),
    Softplus(VarId),
    Exp(VarId),
    Abs(VarId),
    Huber(VarId),
    PowScalar(VarId, f64),
    SoftmaxRows(VarId),
    LogSoftmaxRows(VarId),
    LayerNorm { x: VarId, gamma: VarId, beta: VarId },
    MaxPoolGroups { x: VarId, argmax: Vec<Vec<Option<usize>>> },
    MeanPoolGroups { x: VarId, groups: Arc<Vec<Vec<usize>>> },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

pub struct Gradients {
    by_node: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&ArrayD<f64>> {
        self.by_node[id.0].as_ref()
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound_params: BTreeMap<String, VarId>,
}

fn as2(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    v.view()
        .into_dimensionality::<Ix2>()
        .expect("tape: expected a 2-D value")
}

fn softplus_stable(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> VarId {
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Param => true,
            _ => self.op_inputs(&op).iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        VarId(self.nodes.len() - 1)
    }

    fn op_inputs(&self, op: &Op) -> Vec<VarId> {
        match op {
            Op::Constant | Op::Param => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::Matmul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a, _)
            | Op::SliceCols(a, _, _)
            | Op::GatherRows(a, _)
            | Op::PickElems(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Silu(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Abs(a)
            | Op::Huber(a)
            | Op::PowScalar(a, _)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::MaxPoolGroups { x: a, .. }
            | Op::MeanPoolGroups { x: a, .. } => vec![*a],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
            Op::LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
        }
    }

    pub fn value(&self, id: VarId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: VarId) -> f64 {
        *self.nodes[id.0]
            .value
            .iter()
            .next()
            .expect("tape: scalar() on empty value")
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> VarId {
        self.push(value, Op::Constant)
    }

    pub fn constant2(&mut self, value: ndarray::Array2<f64>) -> VarId {
        self.constant(value.into_dyn())
    }

    /// Bind a named parameter tensor as a differentiable leaf. Binding the
    /// same name twice returns the same node.
    pub fn param(&mut self, name: &str, store: &crate::nn::ParamStore) -> VarId {
        if let Some(&id) = self.bound_params.get(name) {
            return id;
        }
        let value = store.get(name).clone();
        let id = self.push(value, Op::Param);
        self.bound_params.insert(name.to_string(), id);
        id
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> VarId {
        let v = &self.nodes[a.0].value + c;
        self.push(v, Op::AddScalar(a, c))
    }

    pub fn neg(&mut self, a: VarId) -> VarId {
        self.scale(a, -1.0)
    }

    pub fn one_minus(&mut self, a: VarId) -> VarId {
        let n = self.neg(a);
        self.add_scalar(n, 1.0)
    }

    pub fn add_bias(&mut self, a: VarId, bias: VarId) -> VarId {
        let av = as2(&self.nodes[a.0].value).to_owned();
        let bv = &self.nodes[bias.0].value;
        assert_eq!(bv.ndim(), 1, "add_bias: bias must be 1-D");
        assert_eq!(av.ncols(), bv.len(), "add_bias: width mismatch");
        let bv1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let v = (&av + &bv1).into_dyn();
        self.push(v, Op::AddBias(a, bias))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dim mismatch");
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let v = as2(&self.nodes[a.0].value).t().to_owned().into_dyn();
        self.push(v, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> VarId {
        let orig = self.nodes[a.0].value.shape().to_vec();
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(v, Op::Reshape(a, orig))
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| as2(&self.nodes[p.0].value)).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows").into_dyn();
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| as2(&self.nodes[p.0].value)).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols").into_dyn();
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let av = as2(&self.nodes[a.0].value);
        let v = av.slice(ndarray::s![.., start..start + len]).to_owned().into_dyn();
        self.push(v, Op::SliceCols(a, start, len))
    }

    pub fn gather_rows(&mut self, a: VarId, idx: &[usize]) -> VarId {
        let av = as2(&self.nodes[a.0].value);
        let v = av.select(Axis(0), idx).into_dyn();
        self.push(v, Op::GatherRows(a, Arc::new(idx.to_vec())))
    }

    /// Pick individual elements of a 2-D value into a 1-D vector.
    pub fn pick(&mut self, a: VarId, coords: &[(usize, usize)]) -> VarId {
        let av = as2(&self.nodes[a.0].value);
        let v = ndarray::Array1::from_iter(coords.iter().map(|&(r, c)| av[[r, c]])).into_dyn();
        self.push(v, Op::PickElems(a, Arc::new(coords.to_vec())))
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let v = ndarray::arr0(self.nodes[a.0].value.sum()).into_dyn();
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let n = self.nodes[a.0].value.len().max(1);
        let v = ndarray::arr0(self.nodes[a.0].value.sum() / n as f64).into_dyn();
        self.push(v, Op::MeanAll(a))
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a.0].value.mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn silu(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a.0].value.mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn softplus(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a.0].value.mapv(softplus_stable);
        self.push(v, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn abs(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    /// Elementwise Huber with delta 1: 0.5 x^2 inside, |x| - 0.5 outside.
    pub fn huber(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a.0].value.mapv(|x| {
            if x.abs() <= 1.0 {
                0.5 * x * x
            } else {
                x.abs() - 0.5
            }
        });
        self.push(v, Op::Huber(a))
    }

    /// x^p for nonnegative x. The derivative at x = 0 with p < 1 is defined
    /// as 0 to keep gradients finite.
    pub fn pow_scalar(&mut self, a: VarId, p: f64) -> VarId {
        let v = self.nodes[a.0].value.mapv(|x| x.powf(p));
        self.push(v, Op::PowScalar(a, p))
    }

    /// Row-wise softmax of a 2-D value. Entries at or below [`MASK_NEG`]
    /// underflow to exactly zero probability. Callers must not pass rows
    /// that are entirely masked.
    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let av = as2(&self.nodes[a.0].value);
        let mut v = av.to_owned();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        self.push(v.into_dyn(), Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: VarId) -> VarId {
        let av = as2(&self.nodes[a.0].value);
        let mut v = av.to_owned();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(v.into_dyn(), Op::LogSoftmaxRows(a))
    }

    /// Row-wise layer normalization with learned scale and shift vectors.
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId) -> VarId {
        let xv = as2(&self.nodes[x.0].value).to_owned();
        let g = self.nodes[gamma.0].value.clone();
        let b = self.nodes[beta.0].value.clone();
        let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let b1 = b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut out = xv.clone();
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mu = row.sum() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mu) * inv * g1[j] + b1[j];
            }
        }
        self.push(out.into_dyn(), Op::LayerNorm { x, gamma, beta })
    }

    /// Column-wise max over groups of rows: output row g is the elementwise
    /// max over `groups[g]` rows of `x`. Empty groups produce a zero row.
    pub fn max_pool_groups(&mut self, x: VarId, groups: &[Vec<usize>]) -> VarId {
        let xv = as2(&self.nodes[x.0].value);
        let cols = xv.ncols();
        let mut out = ndarray::Array2::<f64>::zeros((groups.len(), cols));
        let mut argmax: Vec<Vec<Option<usize>>> = Vec::with_capacity(groups.len());
        for (gi, grp) in groups.iter().enumerate() {
            let mut arg = vec![None; cols];
            if !grp.is_empty() {
                for c in 0..cols {
                    let (mut best_r, mut best_v) = (grp[0], xv[[grp[0], c]]);
                    for &r in &grp[1..] {
                        if xv[[r, c]] > best_v {
                            best_v = xv[[r, c]];
                            best_r = r;
                        }
                    }
                    out[[gi, c]] = best_v;
                    arg[c] = Some(best_r);
                }
            }
            argmax.push(arg);
        }
        self.push(out.into_dyn(), Op::MaxPoolGroups { x, argmax })
    }

    /// Column-wise mean over groups of rows. Empty groups produce a zero row.
    pub fn mean_pool_groups(&mut self, x: VarId, groups: &[Vec<usize>]) -> VarId {
        let xv = as2(&self.nodes[x.0].value);
        let cols = xv.ncols();
        let mut out = ndarray::Array2::<f64>::zeros((groups.len(), cols));
        for (gi, grp) in groups.iter().enumerate() {
            if grp.is_empty() {
                continue;
            }
            for &r in grp {
                for c in 0..cols {
                    out[[gi, c]] += xv[[r, c]];
                }
            }
            let inv = 1.0 / grp.len() as f64;
            for c in 0..cols {
                out[[gi, c]] *= inv;
            }
        }
        self.push(
            out.into_dyn(),
            Op::MeanPoolGroups { x, groups: Arc::new(groups.to_vec()) },
        )
    }

    /// Reverse pass from a scalar root. Returns per-node gradients; use
    /// [`Graph::param_grads`] to extract them keyed by parameter name.
    pub fn backward(&self, root: VarId) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward: root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { by_node: grads }
    }

    fn add_grad(&self, grads: &mut [Option<ArrayD<f64>>], id: VarId, delta: ArrayD<f64>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, i: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                self.add_grad(grads, *a, g * &self.nodes[b.0].value);
                self.add_grad(grads, *b, g * &self.nodes[a.0].value);
            }
            Op::Scale(a, c) => self.add_grad(grads, *a, g * *c),
            Op::AddScalar(a, _) => self.add_grad(grads, *a, g.clone()),
            Op::AddBias(a, bias) => {
                self.add_grad(grads, *a, g.clone());
                let g2 = as2(g);
                self.add_grad(grads, *bias, g2.sum_axis(Axis(0)).into_dyn());
            }
            Op::Matmul(a, b) => {
                let g2 = as2(g);
                let av = as2(&self.nodes[a.0].value);
                let bv = as2(&self.nodes[b.0].value);
                self.add_grad(grads, *a, g2.dot(&bv.t()).into_dyn());
                self.add_grad(grads, *b, av.t().dot(&g2).into_dyn());
            }
            Op::Transpose(a) => {
                self.add_grad(grads, *a, as2(g).t().to_owned().into_dyn());
            }
            Op::Reshape(a, orig) => {
                let back = g.clone().into_shape_with_order(IxDyn(orig)).unwrap();
                self.add_grad(grads, *a, back);
            }
            Op::ConcatRows(parts) => {
                let g2 = as2(g);
                let mut start = 0;
                for p in parts {
                    let rows = as2(&self.nodes[p.0].value).nrows();
                    let piece = g2.slice(ndarray::s![start..start + rows, ..]).to_owned();
                    self.add_grad(grads, *p, piece.into_dyn());
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let g2 = as2(g);
                let mut start = 0;
                for p in parts {
                    let cols = as2(&self.nodes[p.0].value).ncols();
                    let piece = g2.slice(ndarray::s![.., start..start + cols]).to_owned();
                    self.add_grad(grads, *p, piece.into_dyn());
                    start += cols;
                }
            }
            Op::SliceCols(a, start, len) => {
                let av = as2(&self.nodes[a.0].value);
                let mut back = ndarray::Array2::<f64>::zeros((av.nrows(), av.ncols()));
                back.slice_mut(ndarray::s![.., *start..start + len]).assign(&as2(g));
                self.add_grad(grads, *a, back.into_dyn());
            }
            Op::GatherRows(a, idx) => {
                let av = as2(&self.nodes[a.0].value);
                let g2 = as2(g);
                let mut back = ndarray::Array2::<f64>::zeros((av.nrows(), av.ncols()));
                for (out_r, &src_r) in idx.iter().enumerate() {
                    let mut dst = back.row_mut(src_r);
                    dst += &g2.row(out_r);
                }
                self.add_grad(grads, *a, back.into_dyn());
            }
            Op::PickElems(a, coords) => {
                let av = as2(&self.nodes[a.0].value);
                let mut back = ndarray::Array2::<f64>::zeros((av.nrows(), av.ncols()));
                for (k, &(r, c)) in coords.iter().enumerate() {
                    back[[r, c]] += g[[k]];
                }
                self.add_grad(grads, *a, back.into_dyn());
            }
            Op::SumAll(a) => {
                let s = *g.iter().next().unwrap();
                let back = ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), s);
                self.add_grad(grads, *a, back);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len().max(1) as f64;
                let s = *g.iter().next().unwrap() / n;
                let back = ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), s);
                self.add_grad(grads, *a, back);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                self.add_grad(grads, *a, g * &(y * &(1.0 - y)));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                self.add_grad(grads, *a, g * &(1.0 - y * y));
            }
            Op::Silu(a) => {
                let x = &self.nodes[a.0].value;
                let d = x.mapv(|v| {
                    let s = sigmoid(v);
                    s * (1.0 + v * (1.0 - s))
                });
                self.add_grad(grads, *a, g * &d);
            }
            Op::Softplus(a) => {
                let d = self.nodes[a.0].value.mapv(sigmoid);
                self.add_grad(grads, *a, g * &d);
            }
            Op::Exp(a) => {
                self.add_grad(grads, *a, g * &node.value);
            }
            Op::Abs(a) => {
                let d = self.nodes[a.0].value.mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.add_grad(grads, *a, g * &d);
            }
            Op::Huber(a) => {
                let d = self.nodes[a.0].value.mapv(|x| x.clamp(-1.0, 1.0));
                self.add_grad(grads, *a, g * &d);
            }
            Op::PowScalar(a, p) => {
                let d = if *p == 0.0 {
                    self.nodes[a.0].value.mapv(|_| 0.0)
                } else {
                    let p = *p;
                    self.nodes[a.0].value.mapv(|x| {
                        if x == 0.0 && p < 1.0 {
                            0.0
                        } else {
                            p * x.powf(p - 1.0)
                        }
                    })
                };
                self.add_grad(grads, *a, g * &d);
            }
            Op::SoftmaxRows(a) => {
                let y = as2(&node.value);
                let g2 = as2(g);
                let mut back = y.to_owned();
                for (r, mut row) in back.rows_mut().into_iter().enumerate() {
                    let dot: f64 = y.row(r).iter().zip(g2.row(r).iter()).map(|(a, b)| a * b).sum();
                    for (c, v) in row.iter_mut().enumerate() {
                        *v = y[[r, c]] * (g2[[r, c]] - dot);
                    }
                }
                self.add_grad(grads, *a, back.into_dyn());
            }
            Op::LogSoftmaxRows(a) => {
                let y = as2(&node.value);
                let g2 = as2(g);
                let mut back = y.to_owned();
                for (r, mut row) in back.rows_mut().into_iter().enumerate() {
                    let gsum: f64 = g2.row(r).sum();
                    for (c, v) in row.iter_mut().enumerate() {
                        *v = g2[[r, c]] - y[[r, c]].exp() * gsum;
                    }
                }
                self.add_grad(grads, *a, back.into_dyn());
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xv = as2(&self.nodes[x.0].value);
                let g2 = as2(g);
                let gam = self.nodes[gamma.0]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap();
                let (rows, cols) = (xv.nrows(), xv.ncols());
                let mut gx = ndarray::Array2::<f64>::zeros((rows, cols));
                let mut ggamma = ndarray::Array1::<f64>::zeros(cols);
                let mut gbeta = ndarray::Array1::<f64>::zeros(cols);
                for r in 0..rows {
                    let row = xv.row(r);
                    let n = cols as f64;
                    let mu = row.sum() / n;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mu) * inv).collect();
                    let gy: Vec<f64> = (0..cols).map(|c| g2[[r, c]] * gam[c]).collect();
                    let mean_gy: f64 = gy.iter().sum::<f64>() / n;
                    let mean_gy_xhat: f64 =
                        gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..cols {
                        gx[[r, c]] = (gy[c] - mean_gy - xhat[c] * mean_gy_xhat) * inv;
                        ggamma[c] += g2[[r, c]] * xhat[c];
                        gbeta[c] += g2[[r, c]];
                    }
                }
                self.add_grad(grads, *x, gx.into_dyn());
                self.add_grad(grads, *gamma, ggamma.into_dyn());
                self.add_grad(grads, *beta, gbeta.into_dyn());
            }
            Op::MaxPoolGroups { x, argmax } => {
                let xv = as2(&self.nodes[x.0].value);
                let g2 = as2(g);
                let mut back = ndarray::Array2::<f64>::zeros((xv.nrows(), xv.ncols()));
                for (gi, arg) in argmax.iter().enumerate() {
                    for (c, src) in arg.iter().enumerate() {
                        if let Some(r) = src {
                            back[[*r, c]] += g2[[gi, c]];
                        }
                    }
                }
                self.add_grad(grads, *x, back.into_dyn());
            }
            Op::MeanPoolGroups { x, groups } => {
                let xv = as2(&self.nodes[x.0].value);
                let g2 = as2(g);
                let mut back = ndarray::Array2::<f64>::zeros((xv.nrows(), xv.ncols()));
                for (gi, grp) in groups.iter().enumerate() {
                    if grp.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / grp.len() as f64;
                    for &r in grp {
                        for c in 0..xv.ncols() {
                            back[[r, c]] += g2[[gi, c]] * inv;
                        }
                    }
                }
                self.add_grad(grads, *x, back.into_dyn());
            }
        }
    }

    /// Gradients of bound parameters by name. Parameters never touched by
    /// the root expression are absent.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.bound_params {
            if let Some(g) = grads.get(*id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }

    pub fn bound_param_names(&self) -> Vec<String> {
        self.bound_params.keys().cloned().collect()
    }
}
