//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation as a node holding its value. Node
//! indices are already a topological order, so [`Graph::backward`] walks the
//! tape once from the end.

use crate::error::{Error, Result};
use crate::ssm::{sigmoid, softplus, ScanTrace, SelectiveInputs};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(usize),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Softplus(Var),
    Gelu(Var),
    Exp(Var),
    Abs(Var),
    Max(Var, Var),
    Min(Var, Var),
    SoftmaxRows(Var),
    LayerNorm(Var, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Merge2x2 { x: Var, grid_h: usize, grid_w: usize },
    PairMean(Var),
    Sum(Var),
    Mean(Var),
    SelectiveScan {
        parents: [Var; 5],
        inputs: Box<SelectiveInputs>,
        trace: Box<ScanTrace>,
    },
    FocalLoss {
        logits: Var,
        target: Tensor,
        alpha: f64,
        beta: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Gelu(_) => "gelu",
            Op::Exp(_) => "exp",
            Op::Abs(_) => "abs",
            Op::Max(..) => "max",
            Op::Min(..) => "min",
            Op::SoftmaxRows(_) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Merge2x2 { .. } => "merge_2x2",
            Op::PairMean(_) => "pair_mean",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SelectiveScan { .. } => "selective_scan",
            Op::FocalLoss { .. } => "focal_loss",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const C: f64 = 0.044_715;
    let u = K * (x + C * x * x * x);
    let t = u.tanh();
    let value = 0.5 * x * (1.0 + t);
    let grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * C * x * x);
    (value, grad)
}

fn check2(t: &Tensor) -> (usize, usize) {
    assert_eq!(t.shape().len(), 2, "graph tensors are 2-D, got {:?}", t.shape());
    (t.shape()[0], t.shape()[1])
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        check2(&value);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        check2(self.value(v))
    }

    /// A value no gradient is requested for.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A free variable whose gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// A model parameter identified by `id`; see [`Graph::param_grads`].
    pub fn param(&mut self, id: usize, t: Tensor) -> Var {
        self.push(t, Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, out.data_mut(), false);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let src = self.value(a);
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[j * r + i] = src.data()[i * c + j];
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::Transpose(a), ng)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shapes differ ({})", op.name());
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let data = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(self.value(a).shape(), data).expect("same shape");
        let ng = self.ng(&[a, b]);
        self.push(out, op, ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let ng = self.ng(&[a]);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise max; ties split the gradient evenly.
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, f64::max, Op::Max(a, b))
    }

    /// Elementwise min; ties split the gradient evenly.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, f64::min, Op::Min(a, b))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row bias shape");
        let mut out = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for i in 0..r {
            for (o, b) in out.row_mut(i).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row scale shape");
        let mut out = self.value(a).clone();
        let scale = self.value(row).data().to_vec();
        for i in 0..r {
            for (o, s) in out.row_mut(i).iter_mut().zip(&scale) {
                *o *= s;
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(out, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| gelu(x).0, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let mut out = self.value(a).clone();
        let c = out.cols() as f64;
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::LayerNorm(a, eps), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.shape(p);
            assert_eq!(pc, c, "concat_rows width mismatch");
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let out = Tensor::from_vec(&[rows, c], data).expect("rows");
        let ng = self.ng(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pr, pc) = self.shape(p);
                assert_eq!(pr, r, "concat_cols height mismatch");
                pc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[r, total]);
        for i in 0..r {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                out.row_mut(i)[off..off + w].copy_from_slice(self.value(p).row(i));
                off += w;
            }
        }
        let ng = self.ng(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, _) = self.shape(a);
        assert!(start + len <= r, "slice_rows {start}+{len} > {r}");
        let out = self.value(a).slice_rows(start, len);
        let ng = self.ng(&[a]);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "slice_cols {start}+{len} > {c}");
        let mut out = Tensor::zeros(&[r, len]);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&self.value(a).row(i)[start..start + len]);
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    /// Concatenates each 2x2 neighbourhood of a row-major token grid:
    /// `(gh*gw) x c` becomes `(gh/2*gw/2) x 4c`, neighbours ordered
    /// top-left, top-right, bottom-left, bottom-right.
    pub fn merge_2x2(&mut self, a: Var, grid_h: usize, grid_w: usize) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(r, grid_h * grid_w, "merge_2x2 grid");
        assert!(grid_h % 2 == 0 && grid_w % 2 == 0, "merge_2x2 needs even grid");
        let (oh, ow) = (grid_h / 2, grid_w / 2);
        let src = self.value(a);
        let mut out = Tensor::zeros(&[oh * ow, 4 * c]);
        for i in 0..oh {
            for j in 0..ow {
                let dst = out.row_mut(i * ow + j);
                for (q, (di, dj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    let s = (2 * i + di) * grid_w + 2 * j + dj;
                    dst[q * c..(q + 1) * c].copy_from_slice(src.row(s));
                }
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::Merge2x2 { x: a, grid_h, grid_w }, ng)
    }

    /// Averages adjacent row pairs: `L x c` becomes `L/2 x c`.
    pub fn pair_mean(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        assert!(r % 2 == 0, "pair_mean needs an even row count");
        let src = self.value(a);
        let mut out = Tensor::zeros(&[r / 2, c]);
        for i in 0..r / 2 {
            let (x0, x1) = (src.row(2 * i), src.row(2 * i + 1));
            for (k, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = 0.5 * (x0[k] + x1[k]);
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::PairMean(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// `x W + b` for a `1 x out` bias row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    /// Selective scan with a constant initial state bank `h0` (`D x N`).
    /// `a` holds the (negative) diagonal state matrices, `D x N`.
    pub fn selective_scan(&mut self, x: Var, delta: Var, b: Var, c: Var, a: Var, h0: Tensor) -> Result<Var> {
        let inputs = SelectiveInputs {
            x: self.value(x).clone(),
            delta: self.value(delta).clone(),
            b: self.value(b).clone(),
            c: self.value(c).clone(),
            a: self.value(a).clone(),
            h0,
        };
        let trace = inputs.forward()?;
        let ng = self.ng(&[x, delta, b, c, a]);
        Ok(self.push(
            trace.y.clone(),
            Op::SelectiveScan {
                parents: [x, delta, b, c, a],
                inputs: Box::new(inputs),
                trace: Box::new(trace),
            },
            ng,
        ))
    }

    /// Final state bank of a selective-scan node.
    pub fn scan_final_state(&self, v: Var) -> Option<Tensor> {
        match &self.nodes[v.0].op {
            Op::SelectiveScan { inputs, trace, .. } => {
                Some(trace.final_state(inputs.a.rows(), inputs.a.cols()))
            }
            _ => None,
        }
    }

    /// Penalty-reduced focal loss on logits against a heatmap target with
    /// peaks exactly 1, normalized by the number of peaks.
    pub fn focal_loss(&mut self, logits: Var, target: Tensor, alpha: f64, beta: f64) -> Var {
        assert_eq!(self.value(logits).shape(), target.shape(), "focal target shape");
        let s = self.value(logits).data();
        let mut total = 0.0;
        let mut npos = 0usize;
        for (&si, &yi) in s.iter().zip(target.data()) {
            let p = sigmoid(si);
            if yi >= 1.0 {
                npos += 1;
                // log p = -softplus(-s)
                total += (1.0 - p).powf(alpha) * softplus(-si);
            } else {
                total += (1.0 - yi).powf(beta) * p.powf(alpha) * softplus(si);
            }
        }
        let value = total / npos.max(1) as f64;
        let ng = self.ng(&[logits]);
        self.push(
            Tensor::scalar(value),
            Op::FocalLoss {
                logits,
                target,
                alpha,
                beta,
            },
            ng,
        )
    }

    /// Name of the first operation whose value is not finite.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.nodes
            .iter()
            .find(|n| !n.value.is_finite())
            .map(|n| n.op.name())
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        if !self.value(loss).is_finite() {
            let op = self.first_non_finite().unwrap_or("unknown").to_string();
            return Err(Error::Gradient { op });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !g.is_finite() {
                return Err(Error::Gradient {
                    op: node.op.name().to_string(),
                });
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every parameter node, by parameter id. Parameters bound
    /// more than once have their contributions summed.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(usize, Tensor)> {
        let mut out: Vec<(usize, Tensor)> = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = n.op {
                let g = grads.grads[i]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(n.value.shape()));
                match out.iter_mut().find(|(pid, _)| *pid == id) {
                    Some((_, acc)) => acc.add_assign(&g),
                    None => out.push((id, g)),
                }
            }
        }
        out
    }

    /// Ids of the parameters the differentiated output depends on.
    pub fn reached_params(&self, grads: &Gradients) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = n.op {
                if grads.grads[i].is_some() && !out.contains(&id) {
                    out.push(id);
                }
            }
        }
        out
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let elementwise = |v: Var, f: &dyn Fn(usize, f64) -> f64| -> Tensor {
            let data = g.data().iter().enumerate().map(|(i, &gi)| f(i, gi)).collect();
            Tensor::from_vec(val(v).shape(), data).expect("same shape")
        };
        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                let (m, k) = check2(val(a));
                let n = val(b).cols();
                if wants(a) {
                    let mut ga = Tensor::zeros(&[m, k]);
                    gemm(m, n, k, g.data(), false, val(b).data(), true, ga.data_mut(), false);
                    acc(a, ga);
                }
                if wants(b) {
                    let mut gb = Tensor::zeros(&[k, n]);
                    gemm(k, m, n, val(a).data(), true, g.data(), false, gb.data_mut(), false);
                    acc(b, gb);
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = check2(val(a));
                let mut ga = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    for j in 0..c {
                        ga.data_mut()[i * c + j] = g.data()[j * r + i];
                    }
                }
                acc(a, ga);
            }
            &Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            &Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a).data(), val(b).data());
                acc(a, elementwise(a, &|i, gi| gi * vb[i]));
                acc(b, elementwise(b, &|i, gi| gi * va[i]));
            }
            &Op::Div(a, b) => {
                let (va, vb) = (val(a).data(), val(b).data());
                acc(a, elementwise(a, &|i, gi| gi / vb[i]));
                acc(b, elementwise(b, &|i, gi| -gi * va[i] / (vb[i] * vb[i])));
            }
            &Op::Max(a, b) | &Op::Min(a, b) => {
                let is_max = matches!(node.op, Op::Max(..));
                let (va, vb) = (val(a).data(), val(b).data());
                let share = |i: usize, first: bool| -> f64 {
                    let (x, y) = (va[i], vb[i]);
                    if x == y {
                        0.5
                    } else if (x > y) == (is_max == first) {
                        1.0
                    } else {
                        0.0
                    }
                };
                acc(a, elementwise(a, &|i, gi| gi * share(i, true)));
                acc(b, elementwise(b, &|i, gi| gi * share(i, false)));
            }
            &Op::AddRow(a, row) => {
                acc(a, g.clone());
                if wants(row) {
                    let c = g.cols();
                    let mut gr = Tensor::zeros(&[1, c]);
                    for i in 0..g.rows() {
                        for (o, v) in gr.data_mut().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(row, gr);
                }
            }
            &Op::MulRow(a, row) => {
                let c = g.cols();
                let (va, vr) = (val(a), val(row).data());
                acc(a, elementwise(a, &|i, gi| gi * vr[i % c]));
                if wants(row) {
                    let mut gr = Tensor::zeros(&[1, c]);
                    for i in 0..g.rows() {
                        for ((o, gv), av) in gr.data_mut().iter_mut().zip(g.row(i)).zip(va.row(i)) {
                            *o += gv * av;
                        }
                    }
                    acc(row, gr);
                }
            }
            &Op::Scale(a, s) => acc(a, g.map(|v| v * s)),
            &Op::AddScalar(a) => acc(a, g.clone()),
            &Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(a, elementwise(a, &|i, gi| gi * y[i] * (1.0 - y[i])));
            }
            &Op::Softplus(a) => {
                let x = val(a).data();
                acc(a, elementwise(a, &|i, gi| gi * sigmoid(x[i])));
            }
            &Op::Gelu(a) => {
                let x = val(a).data();
                acc(a, elementwise(a, &|i, gi| gi * gelu(x[i]).1));
            }
            &Op::Exp(a) => {
                let y = node.value.data();
                acc(a, elementwise(a, &|i, gi| gi * y[i]));
            }
            &Op::Abs(a) => {
                let x = val(a).data();
                acc(a, elementwise(a, &|i, gi| gi * if x[i] == 0.0 { 0.0 } else { x[i].signum() }));
            }
            &Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(y.shape());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (k, o) in ga.row_mut(i).iter_mut().enumerate() {
                        *o = yr[k] * (gr[k] - dot);
                    }
                }
                acc(a, ga);
            }
            &Op::LayerNorm(a, eps) => {
                let x = val(a);
                let y = &node.value;
                let c = x.cols() as f64;
                let mut ga = Tensor::zeros(x.shape());
                for i in 0..x.rows() {
                    let xr = x.row(i);
                    let mean = xr.iter().sum::<f64>() / c;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
                    let r = 1.0 / (var + eps).sqrt();
                    let (yr, gr) = (y.row(i), g.row(i));
                    let gmean = gr.iter().sum::<f64>() / c;
                    let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c;
                    for (k, o) in ga.row_mut(i).iter_mut().enumerate() {
                        *o = r * (gr[k] - gmean - yr[k] * gy_mean);
                    }
                }
                acc(a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let r = val(p).rows();
                    acc(p, g.slice_rows(start, r));
                    start += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, w) = check2(val(p));
                    if wants(p) {
                        let mut gp = Tensor::zeros(&[r, w]);
                        for i in 0..r {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + w]);
                        }
                        acc(p, gp);
                    }
                    off += w;
                }
            }
            &Op::SliceRows(a, start) => {
                let mut ga = Tensor::zeros(val(a).shape());
                let c = g.cols();
                ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(a, ga);
            }
            &Op::SliceCols(a, start) => {
                let mut ga = Tensor::zeros(val(a).shape());
                let w = g.cols();
                for i in 0..g.rows() {
                    ga.row_mut(i)[start..start + w].copy_from_slice(g.row(i));
                }
                acc(a, ga);
            }
            &Op::Merge2x2 { x, grid_h, grid_w } => {
                let c = val(x).cols();
                let (oh, ow) = (grid_h / 2, grid_w / 2);
                let mut gx = Tensor::zeros(val(x).shape());
                for i in 0..oh {
                    for j in 0..ow {
                        let src = g.row(i * ow + j);
                        for (q, (di, dj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                            let s = (2 * i + di) * grid_w + 2 * j + dj;
                            gx.row_mut(s).copy_from_slice(&src[q * c..(q + 1) * c]);
                        }
                    }
                }
                acc(x, gx);
            }
            &Op::PairMean(a) => {
                let mut ga = Tensor::zeros(val(a).shape());
                for i in 0..g.rows() {
                    for (k, &gv) in g.row(i).iter().enumerate() {
                        ga.row_mut(2 * i)[k] = 0.5 * gv;
                        ga.row_mut(2 * i + 1)[k] = 0.5 * gv;
                    }
                }
                acc(a, ga);
            }
            &Op::Sum(a) => acc(a, Tensor::filled(val(a).shape(), g.data()[0])),
            &Op::Mean(a) => {
                let n = val(a).len() as f64;
                acc(a, Tensor::filled(val(a).shape(), g.data()[0] / n));
            }
            Op::SelectiveScan { parents, inputs, trace } => {
                let sg = inputs.backward(trace, g);
                let [x, delta, b, c, a] = *parents;
                acc(x, sg.x);
                acc(delta, sg.delta);
                acc(b, sg.b);
                acc(c, sg.c);
                acc(a, sg.a);
            }
            Op::FocalLoss {
                logits,
                target,
                alpha,
                beta,
            } => {
                let s = val(*logits).data();
                let npos = target.data().iter().filter(|&&y| y >= 1.0).count().max(1) as f64;
                let scale = g.data()[0] / npos;
                let data = (0..s.len()).map(|i| {
                    let (si, yi) = (s[i], target.data()[i]);
                    let p = sigmoid(si);
                    let d = if yi >= 1.0 {
                        // d/ds [-(1-p)^a log p]
                        (1.0 - p).powf(*alpha) * (-alpha * p * softplus(-si) - (1.0 - p))
                    } else {
                        // d/ds [-(1-y)^b p^a log(1-p)]
                        (1.0 - yi).powf(*beta) * p.powf(*alpha) * (p + alpha * (1.0 - p) * softplus(si))
                    };
                    d * scale
                });
                let ga = Tensor::from_vec(target.shape(), data.collect()).expect("same shape");
                acc(*logits, ga);
            }
        }
    }
}
