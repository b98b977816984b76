//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape index order is a
//! topological order and the backward sweep is a single reverse pass.

use super::tensor::{dot, sq_dist, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    ScaleBy { scalar: Var, x: Var },
    AddRows { x: Var, row: Var },
    MulRows { x: Var, row: Var },
    Neg(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MeanRows(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
    CausalSoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    SqDist(Var, Var),
    RowDot(Var, Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Gather { x: Var, idx: Vec<usize> },
    EmbedRows { table: Var, ids: Vec<usize> },
    Reshape(Var),
    StraightThrough(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::ScaleBy { .. } => "scale_by",
            Op::AddRows { .. } => "add_rows",
            Op::MulRows { .. } => "mul_rows",
            Op::Neg(..) => "neg",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::MeanRows(..) => "mean_rows",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::LogSumExpRows(..) => "log_sum_exp_rows",
            Op::CausalSoftmaxRows(..) => "causal_softmax_rows",
            Op::LayerNormRows { .. } => "layer_norm_rows",
            Op::SqDist(..) => "sq_dist",
            Op::RowDot(..) => "row_dot",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Gather { .. } => "gather",
            Op::EmbedRows { .. } => "embed_rows",
            Op::Reshape(..) => "reshape",
            Op::StraightThrough(..) => "straight_through",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

/// A single-threaded computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Total bytes held by node values.
    pub fn value_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.byte_len()).sum()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        t.ensure_finite("leaf")?;
        Ok(self.push_raw(Op::Leaf, t, true))
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        t.ensure_finite("constant")?;
        Ok(self.push_raw(Op::Constant, t, false))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(op, value, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), out, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(Op::Transpose(a), out, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), out, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), out, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), out, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), out, &[a])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push(Op::AddConst(a), out, &[a])
    }

    /// `scalar * x` where `scalar` is a one-element node.
    pub fn scale_by(&mut self, scalar: Var, x: Var) -> Result<Var> {
        if self.value(scalar).len() != 1 {
            return Err(Error::Shape {
                op: "scale_by",
                lhs: self.shape(scalar).to_vec(),
                rhs: self.shape(x).to_vec(),
            });
        }
        let s = self.scalar(scalar);
        let out = self.value(x).map(|v| s * v);
        self.push(Op::ScaleBy { scalar, x }, out, &[scalar, x])
    }

    fn row_operand_check(&self, op: &'static str, x: Var, row: Var) -> Result<(usize, usize)> {
        let (m, n) = self.value(x).dims2();
        if self.value(row).len() != n {
            return Err(Error::Shape {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        Ok((m, n))
    }

    /// Adds the vector `row` to every row of `x`.
    pub fn add_rows(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.row_operand_check("add_rows", x, row)?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        for i in 0..m {
            for (o, b) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push(Op::AddRows { x, row }, out, &[x, row])
    }

    /// Multiplies every row of `x` elementwise by the vector `row`.
    pub fn mul_rows(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.row_operand_check("mul_rows", x, row)?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        for i in 0..m {
            for (o, b) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(&r) {
                *o *= b;
            }
        }
        self.push(Op::MulRows { x, row }, out, &[x, row])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| -x);
        self.push(Op::Neg(a), out, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), out, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push(Op::Log(a), out, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), out, &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()));
        self.push(Op::Gelu(a), out, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(Op::Mean(a), out, &[a])
    }

    /// `[m,n] -> [m]`, summing each row.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, _) = t.dims2();
        let out = Tensor::vector((0..m).map(|i| t.row(i).iter().sum()).collect());
        self.push(Op::SumCols(a), out, &[a])
    }

    /// `[m,n] -> [n]`, averaging over rows.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        self.push(Op::MeanRows(a), Tensor::vector(out), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, _) = t.dims2();
        let mut out = t.clone();
        for i in 0..m {
            let s = super::tensor::softmax(t.row(i));
            out.row_mut(i).copy_from_slice(&s);
        }
        self.push(Op::SoftmaxRows(a), out, &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, _) = t.dims2();
        let mut out = t.clone();
        for i in 0..m {
            let lse = super::tensor::log_sum_exp(t.row(i));
            out.row_mut(i).iter_mut().for_each(|v| *v -= lse);
        }
        self.push(Op::LogSoftmaxRows(a), out, &[a])
    }

    /// `[m,n] -> [m]` row-wise log-sum-exp.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, _) = t.dims2();
        let out = Tensor::vector((0..m).map(|i| super::tensor::log_sum_exp(t.row(i))).collect());
        self.push(Op::LogSumExpRows(a), out, &[a])
    }

    /// Row `i` of a square score matrix is normalized over columns `0..=i`;
    /// later columns are zero.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2();
        if m != n {
            return Err(Error::Shape {
                op: "causal_softmax_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![m, m],
            });
        }
        let mut out = Tensor::zeros(t.shape());
        for i in 0..m {
            let s = super::tensor::softmax(&t.row(i)[..=i]);
            out.row_mut(i)[..=i].copy_from_slice(&s);
        }
        self.push(Op::CausalSoftmaxRows(a), out, &[a])
    }

    /// Zero-mean, unit-variance normalization of each row (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2();
        let mut out = t.clone();
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = t.row(i);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            out.row_mut(i).iter_mut().for_each(|v| *v = (*v - mu) * r);
            inv_std.push(r);
        }
        self.push(Op::LayerNormRows { x: a, inv_std }, out, &[a])
    }

    /// Pairwise squared Euclidean distances between rows: `[m,d],[n,d] -> [m,n]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, d), (n, d2)) = (ta.dims2(), tb.dims2());
        if d != d2 {
            return Err(Error::Shape {
                op: "sq_dist",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(sq_dist(ta.row(i), tb.row(j)));
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        self.push(Op::SqDist(a, b), out, &[a, b])
    }

    /// Row-wise dot products: `[m,d],[m,d] -> [m]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims2() != tb.dims2() {
            return Err(Error::Shape {
                op: "row_dot",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, _) = ta.dims2();
        let out = Tensor::vector((0..m).map(|i| dot(ta.row(i), tb.row(i))).collect());
        self.push(Op::RowDot(a, b), out, &[a, b])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat_rows of nothing"));
        };
        let (_, n) = self.value(first).dims2();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            let (m, n2) = t.dims2();
            if n2 != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
            rows += m;
        }
        let out = Tensor::new(vec![rows, n], data)?;
        self.push(Op::ConcatRows(parts.to_vec()), out, parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat_cols of nothing"));
        };
        let (m, _) = self.value(first).dims2();
        let mut total = 0;
        for &p in parts {
            let (m2, n) = self.value(p).dims2();
            if m2 != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total += n;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        self.push(Op::ConcatCols(parts.to_vec()), out, parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2();
        if start >= end || end > m {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let out = Tensor::new(vec![end - start, n], t.data()[start * n..end * n].to_vec())?;
        self.push(Op::SliceRows { x: a, start }, out, &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2();
        if start >= end || end > n {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        let out = Tensor::new(vec![m, end - start], data)?;
        self.push(Op::SliceCols { x: a, start }, out, &[a])
    }

    /// Picks flat (row-major) positions into a vector.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.len()) {
            return Err(Error::Shape {
                op: "gather",
                lhs: t.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let out = Tensor::vector(idx.iter().map(|&i| t.data()[i]).collect());
        self.push(
            Op::Gather {
                x: a,
                idx: idx.to_vec(),
            },
            out,
            &[a],
        )
    }

    /// Row lookup: `table[V,d]`, ids -> `[ids.len(), d]`.
    pub fn embed_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = t.dims2();
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Shape {
                op: "embed_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            Op::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
            out,
            &[table],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(Op::Reshape(a), out, &[a])
    }

    /// Forward value is `hard`; the backward pass routes the incoming
    /// gradient unchanged to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::Shape {
                op: "straight_through",
                lhs: self.shape(soft).to_vec(),
                rhs: hard.shape().to_vec(),
            });
        }
        self.push(Op::StraightThrough(soft), hard, &[soft])
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = self.value(root);
        if root_val.len() != 1 {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        root_val.ensure_finite("backward root")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::filled(root_val.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(node, &gy, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match self.nodes[i].op {
                Op::Leaf => g,
                _ => None,
            })
            .collect();
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, g: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let y = &node.value;

        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    let ga = gy.matmul(&val(*b).transpose()).expect("matmul grad shape");
                    acc(*a, ga.reshape(val(*a).shape().to_vec()).expect("shape"));
                }
                if wants(*b) {
                    let gb = val(*a).transpose().matmul(gy).expect("matmul grad shape");
                    acc(*b, gb.reshape(val(*b).shape().to_vec()).expect("shape"));
                }
            }
            Op::Transpose(a) => {
                let g = gy.transpose().reshape(val(*a).shape().to_vec()).expect("shape");
                acc(*a, g);
            }
            Op::Add(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, zip(gy, val(*b), |g, x| g * x));
                }
                if wants(*b) {
                    acc(*b, zip(gy, val(*a), |g, x| g * x));
                }
            }
            Op::Scale(a, c) => acc(*a, gy.map(|g| g * c)),
            Op::AddConst(a) => acc(*a, gy.clone()),
            Op::ScaleBy { scalar, x } => {
                let s = val(*scalar).item();
                if wants(*scalar) {
                    let ds = dot(gy.data(), val(*x).data());
                    acc(*scalar, Tensor::filled(val(*scalar).shape(), ds));
                }
                if wants(*x) {
                    acc(*x, gy.map(|g| g * s));
                }
            }
            Op::AddRows { x, row } => {
                acc(*x, gy.clone());
                if wants(*row) {
                    acc(*row, column_sums(gy, val(*row).shape()));
                }
            }
            Op::MulRows { x, row } => {
                let (m, n) = gy.dims2();
                let r = val(*row).data();
                if wants(*x) {
                    let mut g = gy.clone();
                    for i in 0..m {
                        for (o, b) in g.data_mut()[i * n..(i + 1) * n].iter_mut().zip(r) {
                            *o *= b;
                        }
                    }
                    acc(*x, g);
                }
                if wants(*row) {
                    let xv = val(*x);
                    let mut gr = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            gr[j] += gy.data()[i * n + j] * xv.data()[i * n + j];
                        }
                    }
                    let gr = Tensor::new(val(*row).shape().to_vec(), gr).expect("shape");
                    acc(*row, gr);
                }
            }
            Op::Neg(a) => acc(*a, gy.map(|g| -g)),
            Op::Exp(a) => acc(*a, zip(gy, y, |g, e| g * e)),
            Op::Log(a) => acc(*a, zip(gy, val(*a), |g, x| g / x)),
            Op::Tanh(a) => acc(*a, zip(gy, y, |g, t| g * (1.0 - t * t))),
            Op::Gelu(a) => acc(
                *a,
                zip(gy, val(*a), |g, x| {
                    let u = GELU_C * (x + GELU_K * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                }),
            ),
            Op::Sum(a) => acc(*a, Tensor::filled(val(*a).shape(), gy.item())),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, Tensor::filled(val(*a).shape(), gy.item() / n));
            }
            Op::SumCols(a) => {
                let (m, n) = val(*a).dims2();
                let mut g = Tensor::zeros(val(*a).shape());
                for i in 0..m {
                    g.data_mut()[i * n..(i + 1) * n].fill(gy.data()[i]);
                }
                acc(*a, g);
            }
            Op::MeanRows(a) => {
                let (m, n) = val(*a).dims2();
                let mut g = Tensor::zeros(val(*a).shape());
                for i in 0..m {
                    for j in 0..n {
                        g.data_mut()[i * n + j] = gy.data()[j] / m as f64;
                    }
                }
                acc(*a, g);
            }
            Op::SoftmaxRows(a) | Op::CausalSoftmaxRows(a) => {
                let (m, n) = y.dims2();
                let mut g = Tensor::zeros(y.shape());
                for i in 0..m {
                    let s = y.row(i);
                    let gr = &gy.data()[i * n..(i + 1) * n];
                    let inner = dot(s, gr);
                    for j in 0..n {
                        g.data_mut()[i * n + j] = s[j] * (gr[j] - inner);
                    }
                }
                acc(*a, g);
            }
            Op::LogSoftmaxRows(a) => {
                let (m, n) = y.dims2();
                let mut g = Tensor::zeros(y.shape());
                for i in 0..m {
                    let gr = &gy.data()[i * n..(i + 1) * n];
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        g.data_mut()[i * n + j] = gr[j] - y.data()[i * n + j].exp() * total;
                    }
                }
                acc(*a, g);
            }
            Op::LogSumExpRows(a) => {
                let x = val(*a);
                let (m, n) = x.dims2();
                let mut g = Tensor::zeros(x.shape());
                for i in 0..m {
                    let s = super::tensor::softmax(x.row(i));
                    for j in 0..n {
                        g.data_mut()[i * n + j] = gy.data()[i] * s[j];
                    }
                }
                acc(*a, g);
            }
            Op::LayerNormRows { x, inv_std } => {
                let (m, n) = y.dims2();
                let mut g = Tensor::zeros(y.shape());
                for i in 0..m {
                    let yr = y.row(i);
                    let gr = &gy.data()[i * n..(i + 1) * n];
                    let mean_g = gr.iter().sum::<f64>() / n as f64;
                    let mean_gy = dot(gr, yr) / n as f64;
                    for j in 0..n {
                        g.data_mut()[i * n + j] = inv_std[i] * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                acc(*x, g);
            }
            Op::SqDist(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ((m, d), (n, _)) = (ta.dims2(), tb.dims2());
                let mut ga = Tensor::zeros(ta.shape());
                let mut gb = Tensor::zeros(tb.shape());
                for i in 0..m {
                    for j in 0..n {
                        let c = 2.0 * gy.data()[i * n + j];
                        if c == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = ta.data()[i * d + k] - tb.data()[j * d + k];
                            ga.data_mut()[i * d + k] += c * diff;
                            gb.data_mut()[j * d + k] -= c * diff;
                        }
                    }
                }
                if wants(*a) {
                    acc(*a, ga);
                }
                if wants(*b) {
                    acc(*b, gb);
                }
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, d) = ta.dims2();
                let mut ga = Tensor::zeros(ta.shape());
                let mut gb = Tensor::zeros(tb.shape());
                for i in 0..m {
                    let c = gy.data()[i];
                    for k in 0..d {
                        ga.data_mut()[i * d + k] = c * tb.data()[i * d + k];
                        gb.data_mut()[i * d + k] = c * ta.data()[i * d + k];
                    }
                }
                if wants(*a) {
                    acc(*a, ga);
                }
                if wants(*b) {
                    acc(*b, gb);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    let g = Tensor::new(val(p).shape().to_vec(), gy.data()[offset..offset + n].to_vec())
                        .expect("shape");
                    acc(p, g);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = gy.dims2();
                let mut col = 0;
                for &p in parts {
                    let (_, n) = val(p).dims2();
                    let mut data = Vec::with_capacity(m * n);
                    for i in 0..m {
                        data.extend_from_slice(&gy.data()[i * total + col..i * total + col + n]);
                    }
                    acc(p, Tensor::new(val(p).shape().to_vec(), data).expect("shape"));
                    col += n;
                }
            }
            Op::SliceRows { x, start } => {
                let (_, n) = val(*x).dims2();
                let mut g = Tensor::zeros(val(*x).shape());
                g.data_mut()[start * n..start * n + gy.len()].copy_from_slice(gy.data());
                acc(*x, g);
            }
            Op::SliceCols { x, start } => {
                let (m, n) = val(*x).dims2();
                let (_, w) = gy.dims2();
                let mut g = Tensor::zeros(val(*x).shape());
                for i in 0..m {
                    g.data_mut()[i * n + start..i * n + start + w].copy_from_slice(gy.row(i));
                }
                acc(*x, g);
            }
            Op::Gather { x, idx } => {
                let mut g = Tensor::zeros(val(*x).shape());
                for (k, &i) in idx.iter().enumerate() {
                    g.data_mut()[i] += gy.data()[k];
                }
                acc(*x, g);
            }
            Op::EmbedRows { table, ids } => {
                let (_, d) = val(*table).dims2();
                let mut g = Tensor::zeros(val(*table).shape());
                for (k, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        g.data_mut()[i * d + j] += gy.data()[k * d + j];
                    }
                }
                acc(*table, g);
            }
            Op::Reshape(a) => {
                acc(*a, gy.clone().reshape(val(*a).shape().to_vec()).expect("shape"));
            }
            Op::StraightThrough(soft) => acc(*soft, gy.clone()),
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn column_sums(g: &Tensor, shape: &[usize]) -> Tensor {
    let (m, n) = g.dims2();
    let mut out = vec![0.0; n];
    for i in 0..m {
        for (o, v) in out.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    Tensor::new(shape.to_vec(), out).expect("shape")
}

/// Gradients of a scalar root with respect to each leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros when `v` does not influence the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let s = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let root = g.sum(sq).unwrap();
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_root_has_zero_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let c = g.constant(Tensor::vector(vec![3.0, 4.0])).unwrap();
        let root = g.sum(c).unwrap();
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn shape_errors_name_the_operation() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.leaf(Tensor::zeros(&[3])).unwrap();
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn non_finite_inputs_and_outputs_are_rejected() {
        let mut g = Graph::new();
        assert!(g.leaf(Tensor::vector(vec![f64::NAN])).is_err());
        let z = g.leaf(Tensor::vector(vec![0.0])).unwrap();
        assert!(matches!(g.log(z), Err(Error::NonFinite(_))));
    }

    #[test]
    fn straight_through_forwards_hard_and_backwards_soft() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.3, 0.1])).unwrap();
        let s = g.softmax_rows(x).unwrap();
        let st = g.straight_through(s, Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert_eq!(g.value(st).data(), &[1.0, 0.0]);
        let w = g.constant(Tensor::vector(vec![2.0, -1.0])).unwrap();
        let p = g.mul(st, w).unwrap();
        let root = g.sum(p).unwrap();
        let via_st = g.backward(root).unwrap().wrt(x);

        let mut h = Graph::new();
        let x2 = h.leaf(Tensor::vector(vec![0.3, 0.1])).unwrap();
        let s2 = h.softmax_rows(x2).unwrap();
        let w2 = h.constant(Tensor::vector(vec![2.0, -1.0])).unwrap();
        let p2 = h.mul(s2, w2).unwrap();
        let root2 = h.sum(p2).unwrap();
        let via_soft = h.backward(root2).unwrap().wrt(x2);
        assert!(via_st.max_abs_diff(&via_soft) < 1e-15);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 3])).unwrap();
        let s = g.causal_softmax_rows(x).unwrap();
        let v = g.value(s);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row(1), &[0.5, 0.5, 0.0]);
    }
}
