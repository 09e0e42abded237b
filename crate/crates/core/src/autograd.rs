//! Tape-based reverse-mode differentiation over 2-D `f32` matrices.
//!
//! Every tensor in the model is a matrix (tokens × channels). A [`Graph`] is
//! built per sample, holds the forward values, and produces [`Gradients`]
//! keyed by [`ParamId`] on [`Graph::backward`]. Graphs only borrow the
//! parameter store, so independent samples can be differentiated on
//! different threads and their gradients summed afterwards.

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f32>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum GateMode {
    Hard,
    StraightThrough,
}

enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f32),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Abs(Var),
    ClampMin(Var, f32),
    SoftmaxRows(Var),
    Normalize(Var, Vec<f32>),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    Sum(Var),
    MeanRows(Var),
    Grl(Var, f32),
    ReplaceRows(Var, Var, Vec<bool>),
    MulConst(Var, Mat),
    Gate(Var, GateMode),
    BceWithLogits(Var, Mat),
    CrossEntropy(Var, Vec<usize>, Vec<f32>),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Per-parameter gradient accumulator.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads.get(id.index()).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Mat) {
        match &mut self.grads[id.index()] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId::from_index(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    /// Sum of squared entries over every parameter whose id satisfies `filter`.
    pub fn sq_norm_where(&self, mut filter: impl FnMut(ParamId) -> bool) -> f64 {
        self.grads
            .iter()
            .enumerate()
            .filter(|(i, _)| filter(ParamId::from_index(*i)))
            .filter_map(|(_, g)| g.as_ref())
            .map(|g| g.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId::from_index(i), g)))
    }
}

/// A differentiable computation over a borrowed parameter store.
pub struct Graph<'a> {
    store: &'a ParamStore,
    trainable: Option<&'a [bool]>,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

impl<'a> Graph<'a> {
    /// Every parameter receives gradients.
    pub fn new(store: &'a ParamStore) -> Self {
        Self::with_trainable(store, None)
    }

    /// Parameters whose flag is `false` are treated as constants.
    pub fn with_trainable(store: &'a ParamStore, trainable: Option<&'a [bool]>) -> Self {
        Self {
            store,
            trainable,
            nodes: Vec::with_capacity(512),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const, false)
    }

    /// A leaf that receives gradients without being a stored parameter.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.index()] {
            return v;
        }
        let trainable = self.trainable.is_none_or(|t| t[id.index()]);
        let value = self.store.value(id).clone();
        let v = if trainable {
            self.push(value, Op::Param(id), true)
        } else {
            self.push(value, Op::Const, false)
        };
        self.param_nodes[id.index()] = Some(v);
        v
    }

    /// Stops gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) / self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Div(a, b), ng)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        Zip::from(&mut value)
            .and(self.value(b))
            .for_each(|x, &y| *x = x.min(y));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Minimum(a, b), ng)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        Zip::from(&mut value)
            .and(self.value(b))
            .for_each(|x, &y| *x = x.max(y));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Maximum(a, b), ng)
    }

    /// Adds a `1 × n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.value(x) + self.value(row);
        let ng = self.ng(x) || self.ng(row);
        self.push(value, Op::AddRow(x, row), ng)
    }

    /// Multiplies every row of `x` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.value(x) * self.value(row);
        let ng = self.ng(x) || self.ng(row);
        self.push(value, Op::MulRow(x, row), ng)
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let value = self.value(x) * c;
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, c), ng)
    }

    pub fn offset(&mut self, x: Var, c: f32) -> Var {
        let value = self.value(x) + c;
        let ng = self.ng(x);
        self.push(value, Op::Offset(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        let ng = self.ng(x);
        self.push(value, Op::Sigmoid(x), ng)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f32::ln);
        let ng = self.ng(x);
        self.push(value, Op::Log(x), ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f32::abs);
        let ng = self.ng(x);
        self.push(value, Op::Abs(x), ng)
    }

    pub fn clamp_min(&mut self, x: Var, lo: f32) -> Var {
        let value = self.value(x).mapv(|v| v.max(lo));
        let ng = self.ng(x);
        self.push(value, Op::ClampMin(x, lo), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        let ng = self.ng(x);
        self.push(value, Op::SoftmaxRows(x), ng)
    }

    /// Per-row standardization without affine parameters.
    pub fn normalize_rows(&mut self, x: Var, eps: f32) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f32;
        let mut value = xv.clone();
        let mut rstd = Vec::with_capacity(xv.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
            let r = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        let ng = self.ng(x);
        self.push(value, Op::Normalize(x, rstd), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).t().to_owned();
        let ng = self.ng(x);
        self.push(value, Op::Transpose(x), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![start..end, ..]).to_owned();
        let ng = self.ng(x);
        self.push(value, Op::SliceRows(x, start), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![.., start..end]).to_owned();
        let ng = self.ng(x);
        self.push(value, Op::SliceCols(x, start), ng)
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let value = self.value(x).select(Axis(0), rows);
        let ng = self.ng(x);
        self.push(value, Op::SelectRows(x, rows.to_vec()), ng)
    }

    /// Sum of all entries as a `1 × 1` matrix.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(x).sum());
        let ng = self.ng(x);
        self.push(value, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f32;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Column means over rows, `1 × n`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .mean_axis(Axis(0))
            .expect("mean_rows on empty matrix")
            .insert_axis(Axis(0));
        let ng = self.ng(x);
        self.push(value, Op::MeanRows(x), ng)
    }

    /// Gradient reversal: identity forward, `-lambda · g` backward.
    pub fn grl(&mut self, x: Var, lambda: f32) -> Var {
        let value = self.value(x).clone();
        let ng = self.ng(x);
        self.push(value, Op::Grl(x, lambda), ng)
    }

    /// Rows of `x` flagged in `mask` are replaced by the `1 × n` `token`.
    pub fn replace_rows(&mut self, x: Var, token: Var, mask: &[bool]) -> Var {
        let mut value = self.value(x).clone();
        let tok = self.value(token).row(0).to_owned();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                value.row_mut(i).assign(&tok);
            }
        }
        let ng = self.ng(x) || self.ng(token);
        self.push(value, Op::ReplaceRows(x, token, mask.to_vec()), ng)
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, x: Var, c: Mat) -> Var {
        let value = self.value(x) * &c;
        let ng = self.ng(x);
        self.push(value, Op::MulConst(x, c), ng)
    }

    /// Strict `> 0.5` binarization with no gradient.
    pub fn hard_gate(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(binarize);
        self.push(value, Op::Gate(x, GateMode::Hard), false)
    }

    /// Strict `> 0.5` binarization with identity backward.
    pub fn straight_through_gate(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(binarize);
        let ng = self.ng(x);
        self.push(value, Op::Gate(x, GateMode::StraightThrough), ng)
    }

    /// Summed binary cross-entropy of `logits` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Mat) -> Var {
        let total: f32 = Zip::from(self.value(logits))
            .and(&targets)
            .fold(0.0f32, |acc, &z, &t| acc + bce_logit(z, t));
        let ng = self.ng(logits);
        self.push(
            Mat::from_elem((1, 1), total),
            Op::BceWithLogits(logits, targets),
            ng,
        )
    }

    /// Weighted sum over rows of `-w_i · log softmax(logits_i)[target_i]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f32]) -> Var {
        let lv = self.value(logits);
        let mut total = 0.0f32;
        for (i, row) in lv.rows().into_iter().enumerate() {
            let m = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f32>().ln();
            total += weights[i] * (lse - row[targets[i]]);
        }
        let ng = self.ng(logits);
        self.push(
            Mat::from_elem((1, 1), total),
            Op::CrossEntropy(logits, targets.to_vec(), weights.to_vec()),
            ng,
        )
    }

    /// Reverse pass from a `1 × 1` node; returns parameter gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        let (grads, _) = self.backward_full(root, &[]);
        grads
    }

    /// Reverse pass that also reports gradients of the requested input nodes.
    pub fn backward_full(&self, root: Var, inputs: &[Var]) -> (Gradients, Vec<Option<Mat>>) {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Mat>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Mat::from_elem((1, 1), 1.0));
        let mut out = Gradients {
            grads: vec![None; self.store.len()],
        };
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            if let Op::Param(id) = node.op {
                out.accumulate(id, &g);
            }
            grads[i] = Some(g);
        }
        let requested = inputs.iter().map(|v| grads.get(v.0).cloned().flatten()).collect();
        (out, requested)
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let send = |v: Var, delta: Mat, grads: &mut [Option<Mat>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => *acc += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Const | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    send(*a, g.dot(&val(*b).t()), grads);
                }
                if self.ng(*b) {
                    send(*b, val(*a).t().dot(g), grads);
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    send(*a, g.dot(val(*b)), grads);
                }
                if self.ng(*b) {
                    send(*b, g.t().dot(val(*a)), grads);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, -g, grads);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    send(*a, g * val(*b), grads);
                }
                if self.ng(*b) {
                    send(*b, g * val(*a), grads);
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if self.ng(*a) {
                    send(*a, g / bv, grads);
                }
                if self.ng(*b) {
                    let mut d = g * val(*a);
                    Zip::from(&mut d).and(bv).for_each(|d, &b| *d = -*d / (b * b));
                    send(*b, d, grads);
                }
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let take_min = matches!(node.op, Op::Minimum(..));
                let (av, bv) = (val(*a), val(*b));
                let mut ga = g.clone();
                let mut gb = g.clone();
                Zip::from(&mut ga)
                    .and(&mut gb)
                    .and(av)
                    .and(bv)
                    .for_each(|ga, gb, &x, &y| {
                        let pick_a = if take_min { x <= y } else { x >= y };
                        if pick_a {
                            *gb = 0.0;
                        } else {
                            *ga = 0.0;
                        }
                    });
                send(*a, ga, grads);
                send(*b, gb, grads);
            }
            Op::AddRow(x, row) => {
                send(*x, g.clone(), grads);
                if self.ng(*row) {
                    send(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)), grads);
                }
            }
            Op::MulRow(x, row) => {
                if self.ng(*x) {
                    send(*x, g * val(*row), grads);
                }
                if self.ng(*row) {
                    let d = (g * val(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    send(*row, d, grads);
                }
            }
            Op::Scale(x, c) => send(*x, g * *c, grads),
            Op::Offset(x) => send(*x, g.clone(), grads),
            Op::Relu(x) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| if y <= 0.0 { *d = 0.0 });
                send(*x, d, grads);
            }
            Op::Sigmoid(x) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= y * (1.0 - y));
                send(*x, d, grads);
            }
            Op::Log(x) => send(*x, g / val(*x), grads),
            Op::Abs(x) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*x)).for_each(|d, &v| {
                    *d *= if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                send(*x, d, grads);
            }
            Op::ClampMin(x, lo) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(val(*x))
                    .for_each(|d, &v| if v < *lo { *d = 0.0 });
                send(*x, d, grads);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut d = Mat::zeros(y.dim());
                for ((mut dr, yr), gr) in d.rows_mut().into_iter().zip(y.rows()).zip(g.rows()) {
                    let dot: f32 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    Zip::from(&mut dr)
                        .and(&yr)
                        .and(&gr)
                        .for_each(|d, &y, &g| *d = y * (g - dot));
                }
                send(*x, d, grads);
            }
            Op::Normalize(x, rstd) => {
                let y = &node.value;
                let n = y.ncols() as f32;
                let mut d = Mat::zeros(y.dim());
                for (i, (mut dr, (yr, gr))) in d
                    .rows_mut()
                    .into_iter()
                    .zip(y.rows().into_iter().zip(g.rows()))
                    .enumerate()
                {
                    let mean_g = gr.sum() / n;
                    let mean_gy: f32 = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f32>() / n;
                    Zip::from(&mut dr)
                        .and(&yr)
                        .and(&gr)
                        .for_each(|d, &y, &g| *d = rstd[i] * (g - mean_g - y * mean_gy));
                }
                send(*x, d, grads);
            }
            Op::Transpose(x) => send(*x, g.t().to_owned(), grads),
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = val(*p).nrows();
                    if self.ng(*p) {
                        send(*p, g.slice(s![start..start + rows, ..]).to_owned(), grads);
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let cols = val(*p).ncols();
                    if self.ng(*p) {
                        send(*p, g.slice(s![.., start..start + cols]).to_owned(), grads);
                    }
                    start += cols;
                }
            }
            Op::SliceRows(x, start) => {
                let mut d = Mat::zeros(val(*x).dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                send(*x, d, grads);
            }
            Op::SliceCols(x, start) => {
                let mut d = Mat::zeros(val(*x).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                send(*x, d, grads);
            }
            Op::SelectRows(x, rows) => {
                let mut d = Mat::zeros(val(*x).dim());
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(r);
                    dst += &g.row(k);
                }
                send(*x, d, grads);
            }
            Op::Sum(x) => send(*x, Mat::from_elem(val(*x).dim(), g[[0, 0]]), grads),
            Op::MeanRows(x) => {
                let (r, c) = val(*x).dim();
                let row = g.row(0).mapv(|v| v / r as f32);
                let d = row.broadcast((r, c)).expect("broadcast").to_owned();
                send(*x, d, grads);
            }
            Op::Grl(x, lambda) => send(*x, g * -*lambda, grads),
            Op::ReplaceRows(x, token, mask) => {
                if self.ng(*x) {
                    let mut d = g.clone();
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            d.row_mut(i).fill(0.0);
                        }
                    }
                    send(*x, d, grads);
                }
                if self.ng(*token) {
                    let mut acc = Mat::zeros((1, g.ncols()));
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            let mut row = acc.row_mut(0);
                            row += &g.row(i);
                        }
                    }
                    send(*token, acc, grads);
                }
            }
            Op::MulConst(x, c) => send(*x, g * c, grads),
            Op::Gate(x, mode) => {
                if *mode == GateMode::StraightThrough {
                    send(*x, g.clone(), grads);
                }
            }
            Op::BceWithLogits(x, targets) => {
                let mut d = val(*x).mapv(sigmoid);
                d -= targets;
                d *= g[[0, 0]];
                send(*x, d, grads);
            }
            Op::CrossEntropy(x, targets, weights) => {
                let mut d = softmax_rows(val(*x));
                for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                    row[targets[i]] -= 1.0;
                    row *= weights[i] * g[[0, 0]];
                }
                send(*x, d, grads);
            }
        }
    }
}

pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn binarize(v: f32) -> f32 {
    if v > 0.5 {
        1.0
    } else {
        0.0
    }
}

/// Numerically stable `-(t·ln σ(z) + (1-t)·ln(1-σ(z)))`.
pub fn bce_logit(z: f32, t: f32) -> f32 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0f32..1.0))
    }

    /// Checks d(loss)/d(input) from the tape against central differences.
    fn check<F>(inputs: Vec<Mat>, f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let store = ParamStore::default();
        let run = |vals: &[Mat]| -> (f32, Vec<Option<Mat>>) {
            let mut g = Graph::new(&store);
            let vars: Vec<Var> = vals.iter().map(|m| g.input(m.clone())).collect();
            let out = f(&mut g, &vars);
            let (_, gi) = g.backward_full(out, &vars);
            (g.scalar(out), gi)
        };
        let (_, analytic) = run(&inputs);
        let eps = 1e-2f32;
        for (k, input) in inputs.iter().enumerate() {
            for idx in 0..input.len() {
                let (r, c) = (idx / input.ncols(), idx % input.ncols());
                let mut plus = inputs.clone();
                plus[k][[r, c]] += eps;
                let mut minus = inputs.clone();
                minus[k][[r, c]] -= eps;
                let numeric = (run(&plus).0 - run(&minus).0) / (2.0 * eps);
                let a = analytic[k].as_ref().map_or(0.0, |m| m[[r, c]]);
                assert!(
                    (a - numeric).abs() <= 2e-2 * (1.0 + numeric.abs()),
                    "input {k} entry ({r},{c}): analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_family_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        let c = rand_mat(&mut rng, 5, 4);
        check(vec![a.clone(), b], |g, v| {
            let m = g.matmul(v[0], v[1]);
            let sq = g.mul(m, m);
            g.sum(sq)
        });
        check(vec![a, c], |g, v| {
            let m = g.matmul_t(v[0], v[1]);
            let t = g.transpose(m);
            let s = g.sigmoid(t);
            g.sum(s)
        });
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 2, 3);
        let b = rand_mat(&mut rng, 2, 3).mapv(|v| v + 3.0);
        check(vec![a.clone(), b.clone()], |g, v| {
            let d = g.div(v[0], v[1]);
            let s = g.sub(d, v[0]);
            let l = g.offset(v[1], 1.0);
            let l = g.log(l);
            let m = g.mul(s, l);
            let m = g.scale(m, 1.5);
            g.sum(m)
        });
        // keep finite differences away from the kinks at 0 and 0.1
        let kinked = a.mapv(|v| if v.abs() < 0.05 || (v - 0.1).abs() < 0.05 { v + 0.25 } else { v });
        check(vec![kinked, b], |g, v| {
            let a = g.abs(v[0]);
            let r = g.relu(v[0]);
            let cm = g.clamp_min(v[0], 0.1);
            let s = g.add(a, r);
            let s = g.add(s, cm);
            let s = g.mul(s, v[1]);
            g.sum(s)
        });
        let x = rand_mat(&mut rng, 3, 3);
        let y = x.mapv(|v| v + 0.3);
        check(vec![x, y], |g, v| {
            let lo = g.minimum(v[0], v[1]);
            let hi = g.maximum(v[0], v[1]);
            let p = g.mul(lo, hi);
            g.sum(p)
        });
    }

    #[test]
    fn row_and_structure_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_mat(&mut rng, 4, 3);
        let row = rand_mat(&mut rng, 1, 3);
        let w = rand_mat(&mut rng, 4, 3);
        check(vec![x.clone(), row.clone(), w.clone()], |g, v| {
            let a = g.add_row(v[0], v[1]);
            let m = g.mul_row(a, v[1]);
            let n = g.normalize_rows(m, 1e-5);
            let p = g.mul(n, v[2]);
            g.sum(p)
        });
        check(vec![x.clone(), w.clone()], |g, v| {
            let sm = g.softmax_rows(v[0]);
            let p = g.mul(sm, v[1]);
            let c = g.concat_rows(&[p, v[0]]);
            let cc = g.concat_cols(&[c, c]);
            let sl = g.slice_cols(cc, 2, 5);
            let sr = g.slice_rows(sl, 1, 6);
            let sel = g.select_rows(sr, &[0, 2, 2, 4]);
            let mr = g.mean_rows(sel);
            let sq = g.mul(mr, mr);
            g.sum(sq)
        });
        check(vec![x, row], |g, v| {
            let r = g.replace_rows(v[0], v[1], &[true, false, true, false]);
            let sq = g.mul(r, r);
            g.mean(sq)
        });
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = rand_mat(&mut rng, 3, 4).mapv(|v| v * 3.0);
        let t = Mat::from_shape_fn((3, 4), |(i, j)| ((i + j) % 2) as f32);
        check(vec![z.clone()], |g, v| g.bce_with_logits(v[0], t.clone()));
        check(vec![z], |g, v| g.cross_entropy(v[0], &[1, 3, 0], &[1.0, 0.5, 2.0]));
    }

    #[test]
    fn grl_is_identity_forward_and_negates_backward() {
        let store = ParamStore::default();
        let mut g = Graph::new(&store);
        let x = g.input(Mat::from_elem((1, 1), 3.0));
        let r = g.grl(x, 1.0);
        assert_eq!(g.value(r), g.value(x));
        let sq = g.mul(r, r);
        let (_, gi) = g.backward_full(sq, &[x]);
        assert_eq!(gi[0].as_ref().unwrap()[[0, 0]], -6.0);
    }

    #[test]
    fn hard_gate_blocks_and_straight_through_passes() {
        let store = ParamStore::default();
        let mut g = Graph::new(&store);
        let d = g.input(Mat::from_shape_vec((1, 3), vec![0.3, 0.6, 0.5]).unwrap());
        let x = g.input(Mat::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap());
        let hard = g.hard_gate(d);
        assert_eq!(g.value(hard).as_slice().unwrap(), &[0.0, 1.0, 0.0]);
        let st = g.straight_through_gate(d);
        let a = g.mul(hard, x);
        let b = g.mul(st, x);
        let s = g.add(a, b);
        let out = g.sum(s);
        let (_, gi) = g.backward_full(out, &[d, x]);
        // only the straight-through path reaches d
        assert_eq!(gi[0].as_ref().unwrap().as_slice().unwrap(), &[1.0, 2.0, 3.0]);
        assert_eq!(gi[1].as_ref().unwrap().as_slice().unwrap(), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::default();
        let a = store.add("a", Mat::from_elem((1, 1), 2.0), crate::params::Group::Backbone);
        let b = store.add("b", Mat::from_elem((1, 1), 5.0), crate::params::Group::Backbone);
        let mask = vec![true, false];
        let mut g = Graph::with_trainable(&store, Some(&mask));
        let (va, vb) = (g.param(a), g.param(b));
        let p = g.mul(va, vb);
        let out = g.sum(p);
        let grads = g.backward(out);
        assert_eq!(grads.get(a).unwrap()[[0, 0]], 5.0);
        assert!(grads.get(b).is_none());
    }
}
