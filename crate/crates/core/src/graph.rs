//! Matrix-valued reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of a forward pass as a node holding
//! its value. [`Graph::backward`] then walks the nodes in reverse order and
//! accumulates the adjoint of each input. Nodes that do not depend on any
//! trainable leaf are never differentiated.
//!
//! All values are 2-D `f64` matrices; row vectors are `1×n` and scalars are
//! `1×1`. Batched data is laid out row-major: one row per sample (or per
//! sample-timestep for sequences).

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulTn(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    ColStandardize {
        x: Var,
        inv_std: Vec<f64>,
    },
    Attention(Box<AttentionCache>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Sum(Var),
    WeightedSqDiff {
        x: Var,
        target: Matrix,
        weights: Option<Matrix>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
    },
    StraightThrough(Var),
}

struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    seq_len: usize,
    heads: usize,
    /// Softmax weights, one `seq_len×seq_len` block per (sample, head).
    probs: Vec<Matrix>,
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Tape of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn scalar(v: f64) -> Matrix {
    Array2::from_elem((1, 1), v)
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

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf: its gradient is kept after [`Graph::backward`].
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: never differentiated.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).t().dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulTn(a, b), ng)
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

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) * self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).mapv(|x| scale * x + shift);
        let ng = self.ng(a);
        self.push(value, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    /// Normalizes each row to zero mean and unit (population) variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (value, inv_std) = standardize_lanes(x.view(), Axis(1), eps);
        let ng = self.ng(a);
        self.push(value, Op::LayerNorm { x: a, inv_std }, ng)
    }

    /// Normalizes each column over the batch to zero mean and unit
    /// (population) variance.
    pub fn col_standardize(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (value, inv_std) = standardize_lanes(x.view(), Axis(0), eps);
        let ng = self.ng(a);
        self.push(value, Op::ColStandardize { x: a, inv_std }, ng)
    }

    /// Multi-head scaled dot-product self-attention over independent
    /// sequences stacked as consecutive blocks of `seq_len` rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = qm.dim();
        assert_eq!(rows % seq_len, 0, "rows must be a multiple of seq_len");
        assert_eq!(width % heads, 0, "width must be divisible by heads");
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = rows / seq_len;
        let mut out = Array2::zeros((rows, width));
        let mut probs = Vec::with_capacity(n * heads);
        for b in 0..n {
            let r = b * seq_len..(b + 1) * seq_len;
            for h in 0..heads {
                let c = h * dh..(h + 1) * dh;
                let qs = qm.slice(s![r.clone(), c.clone()]);
                let ks = km.slice(s![r.clone(), c.clone()]);
                let vs = vm.slice(s![r.clone(), c.clone()]);
                let mut p = qs.dot(&ks.t());
                p.mapv_inplace(|x| x * scale);
                softmax_rows(&mut p);
                out.slice_mut(s![r.clone(), c]).assign(&p.dot(&vs));
                probs.push(p);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let cache = AttentionCache {
            q,
            k,
            v,
            seq_len,
            heads,
            probs,
        };
        self.push(out, Op::Attention(Box::new(cache)), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceCols { x: a, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceRows { x: a, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// `out[i] = a[index[i]]`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), index);
        let ng = self.ng(a);
        self.push(
            value,
            Op::GatherRows {
                x: a,
                index: index.to_vec(),
            },
            ng,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    /// `Σ w_ij (a_ij − target_ij)²`; unit weights when `weights` is `None`.
    pub fn weighted_sq_diff(&mut self, a: Var, target: Matrix, weights: Option<Matrix>) -> Var {
        let x = self.value(a);
        let total = match &weights {
            Some(w) => Zip::from(x)
                .and(&target)
                .and(w)
                .fold(0.0, |acc, &x, &t, &w| acc + w * (x - t) * (x - t)),
            None => Zip::from(x)
                .and(&target)
                .fold(0.0, |acc, &x, &t| acc + (x - t) * (x - t)),
        };
        let ng = self.ng(a);
        self.push(scalar(total), Op::WeightedSqDiff { x: a, target, weights }, ng)
    }

    /// Sum of squared entries.
    pub fn sq_sum(&mut self, a: Var) -> Var {
        let target = Array2::zeros(self.value(a).dim());
        self.weighted_sq_diff(a, target, None)
    }

    /// Mean softmax cross-entropy of `logits` (N×K) against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let mut probs = self.value(logits).clone();
        assert_eq!(probs.nrows(), labels.len());
        softmax_rows(&mut probs);
        let n = labels.len().max(1) as f64;
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &c)| -probs[[i, c]].max(1e-300).ln())
            .sum::<f64>()
            / n;
        let ng = self.ng(logits);
        self.push(
            scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Records `value` as the result of an op whose gradient is passed to
    /// `a` unchanged (straight-through estimator).
    pub fn straight_through(&mut self, a: Var, value: Matrix) -> Var {
        assert_eq!(value.dim(), self.value(a).dim());
        let ng = self.ng(a);
        self.push(value, Op::StraightThrough(a), ng)
    }

    /// Back-propagates from a scalar output with seed 1.
    pub fn backward(&mut self, output: Var) {
        let seed = Array2::ones(self.value(output).dim());
        self.backward_with(output, seed);
    }

    /// Back-propagates an arbitrary adjoint `seed` for `output`.
    pub fn backward_with(&mut self, output: Var, seed: Matrix) {
        assert_eq!(seed.dim(), self.value(output).dim());
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(i, g, &mut grads);
        }
        self.grads = grads;
    }

    fn propagate(&self, i: usize, g: Matrix, grads: &mut [Option<Matrix>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, contrib: Matrix| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &contrib,
                slot @ None => *slot = Some(contrib),
            }
        };
        let ng = |v: Var| nodes[v.0].needs_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if ng(*a) {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if ng(*b) {
                    acc(*b, val(*a).t().dot(&g));
                }
            }
            Op::MatMulTn(a, b) => {
                if ng(*a) {
                    acc(*a, val(*b).dot(&g.t()));
                }
                if ng(*b) {
                    acc(*b, val(*a).dot(&g));
                }
            }
            Op::Add(a, b) => {
                if ng(*b) {
                    acc(*b, g.clone());
                }
                acc(*a, g);
            }
            Op::Sub(a, b) => {
                if ng(*b) {
                    acc(*b, -&g);
                }
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    acc(*a, &g * val(*b));
                }
                if ng(*b) {
                    acc(*b, &g * val(*a));
                }
            }
            Op::AddRow(a, r) => {
                if ng(*r) {
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                acc(*a, g);
            }
            Op::MulRow(a, r) => {
                if ng(*r) {
                    acc(*r, (&g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if ng(*a) {
                    acc(*a, &g * val(*r));
                }
            }
            Op::Affine(a, scale) => acc(*a, g * *scale),
            Op::Relu(a) => {
                let mut d = g;
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::Gelu(a) => {
                let mut d = g;
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| *d *= gelu_grad(x));
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g;
                Zip::from(&mut d)
                    .and(&nodes[i].value)
                    .for_each(|d, &s| *d *= s * (1.0 - s));
                acc(*a, d);
            }
            Op::Tanh(a) => {
                let mut d = g;
                Zip::from(&mut d)
                    .and(&nodes[i].value)
                    .for_each(|d, &t| *d *= 1.0 - t * t);
                acc(*a, d);
            }
            Op::LayerNorm { x, inv_std } => {
                acc(*x, standardize_backward(&g, &nodes[i].value, inv_std, Axis(1)));
            }
            Op::ColStandardize { x, inv_std } => {
                acc(*x, standardize_backward(&g, &nodes[i].value, inv_std, Axis(0)));
            }
            Op::Attention(cache) => {
                let (dq, dk, dv) = attention_backward(cache, &g, val(cache.q), val(cache.k), val(cache.v));
                acc(cache.q, dq);
                acc(cache.k, dk);
                acc(cache.v, dv);
            }
            Op::SliceCols { x, start } => {
                let mut d = Array2::zeros(val(*x).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                acc(*x, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    if ng(*p) {
                        acc(*p, g.slice(s![.., offset..offset + w]).to_owned());
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let mut d = Array2::zeros(val(*x).dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                acc(*x, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let h = val(*p).nrows();
                    if ng(*p) {
                        acc(*p, g.slice(s![offset..offset + h, ..]).to_owned());
                    }
                    offset += h;
                }
            }
            Op::GatherRows { x, index } => {
                let mut d = Array2::zeros(val(*x).dim());
                for (row, &src) in index.iter().enumerate() {
                    let mut dst = d.row_mut(src);
                    dst += &g.row(row);
                }
                acc(*x, d);
            }
            Op::Sum(a) => {
                let s = g[[0, 0]];
                acc(*a, Array2::from_elem(val(*a).dim(), s));
            }
            Op::WeightedSqDiff { x, target, weights } => {
                let s = 2.0 * g[[0, 0]];
                let mut d = val(*x) - target;
                match weights {
                    Some(w) => Zip::from(&mut d).and(w).for_each(|d, &w| *d *= s * w),
                    None => d.mapv_inplace(|v| v * s),
                }
                acc(*x, d);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let s = g[[0, 0]] / labels.len().max(1) as f64;
                let mut d = probs.clone();
                for (row, &c) in labels.iter().enumerate() {
                    d[[row, c]] -= 1.0;
                }
                d.mapv_inplace(|v| v * s);
                acc(*logits, d);
            }
            Op::StraightThrough(a) => acc(*a, g),
        }
    }
}

fn softmax_rows(m: &mut Matrix) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}

/// Standardizes lanes along `axis` (Axis(1): each row; Axis(0): each
/// column). Returns the normalized matrix and one inverse std per lane.
fn standardize_lanes(x: ArrayView2<f64>, axis: Axis, eps: f64) -> (Matrix, Vec<f64>) {
    let mut out = x.to_owned();
    let mut inv = Vec::new();
    let lanes = match axis {
        Axis(1) => out.rows_mut().into_iter().collect::<Vec<_>>(),
        _ => out.columns_mut().into_iter().collect::<Vec<_>>(),
    };
    for mut lane in lanes {
        let n = lane.len() as f64;
        let mean = lane.sum() / n;
        let var = lane.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / n;
        let is = 1.0 / (var + eps).sqrt();
        lane.mapv_inplace(|v| (v - mean) * is);
        inv.push(is);
    }
    (out, inv)
}

fn standardize_backward(g: &Matrix, xhat: &Matrix, inv_std: &[f64], axis: Axis) -> Matrix {
    let mut d = g.clone();
    let lanes: Vec<_> = match axis {
        Axis(1) => d.rows_mut().into_iter().collect(),
        _ => d.columns_mut().into_iter().collect(),
    };
    let xlanes: Vec<_> = match axis {
        Axis(1) => xhat.rows().into_iter().collect(),
        _ => xhat.columns().into_iter().collect(),
    };
    for ((mut dl, xl), &is) in lanes.into_iter().zip(xlanes).zip(inv_std) {
        let n = dl.len() as f64;
        let mean_g = dl.sum() / n;
        let mean_gx = dl.iter().zip(xl.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
        Zip::from(&mut dl)
            .and(&xl)
            .for_each(|d, &xh| *d = is * (*d - mean_g - xh * mean_gx));
    }
    d
}

fn attention_backward(
    cache: &AttentionCache,
    g: &Matrix,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let (rows, width) = q.dim();
    let l = cache.seq_len;
    let dh = width / cache.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros((rows, width));
    let mut dk = Array2::zeros((rows, width));
    let mut dv = Array2::zeros((rows, width));
    for b in 0..rows / l {
        let r = b * l..(b + 1) * l;
        for h in 0..cache.heads {
            let c = h * dh..(h + 1) * dh;
            let p = &cache.probs[b * cache.heads + h];
            let go = g.slice(s![r.clone(), c.clone()]);
            let qs = q.slice(s![r.clone(), c.clone()]);
            let ks = k.slice(s![r.clone(), c.clone()]);
            let vs = v.slice(s![r.clone(), c.clone()]);
            dv.slice_mut(s![r.clone(), c.clone()]).assign(&p.t().dot(&go));
            let dp = go.dot(&vs.t());
            // softmax backward: dS = P ⊙ (dP − rowsum(dP ⊙ P))
            let mut ds = dp;
            for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot: f64 = ds_row.iter().zip(p_row.iter()).map(|(a, b)| a * b).sum();
                Zip::from(&mut ds_row)
                    .and(&p_row)
                    .for_each(|d, &pv| *d = pv * (*d - dot) * scale);
            }
            dq.slice_mut(s![r.clone(), c.clone()]).assign(&ds.dot(&ks));
            dk.slice_mut(s![r.clone(), c]).assign(&ds.t().dot(&qs));
        }
    }
    (dq, dk, dv)
}
