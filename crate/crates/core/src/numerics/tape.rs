//! Reverse-mode automatic differentiation over dense row-major `f64` arrays.
//!
//! Every forward operation appends a node to a [`Tape`]. A node only ever
//! refers to nodes with a smaller index, so walking the tape backwards is a
//! topological order and each node is visited exactly once.

use std::sync::Arc;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse correlation between query points, support points and kernel
/// points, stored as CSR rows (one row per query).
///
/// Entry `(support, kernel, weight)` in row `i` contributes
/// `weight * feats[support] * W[kernel]` to output row `i`.
#[derive(Clone, Debug, Default)]
pub struct KernelCorrelation {
    pub num_queries: usize,
    pub num_supports: usize,
    pub kernel_size: usize,
    pub offsets: Vec<usize>,
    pub support: Vec<u32>,
    pub kernel: Vec<u16>,
    pub weight: Vec<f64>,
}

impl KernelCorrelation {
    pub fn row(&self, query: usize) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let span = self.offsets[query]..self.offsets[query + 1];
        span.map(move |e| {
            (
                self.support[e] as usize,
                self.kernel[e] as usize,
                self.weight[e],
            )
        })
    }

    pub fn nnz(&self) -> usize {
        self.weight.len()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Transpose(Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    Maximum(Var, Var),
    LeakyRelu(Var, f64),
    AddBias(Var, Var),
    SoftmaxRows(Var),
    SigmoidBce { logits: Var, targets: Vec<f64> },
    SoftmaxXent { logits: Var, labels: Vec<i64>, counted: usize },
    GlobalAvgPool(Var),
    SumAll(Var),
    Dropout { input: Var, mask: Vec<f64> },
    GatherRows { input: Var, index: Arc<Vec<usize>> },
    SegmentMax { input: Var, winner: Vec<usize> },
    KernelConv { feats: Var, weights: Var, corr: Arc<KernelCorrelation>, agg: Vec<f64> },
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Sentinel in [`Op::SegmentMax`] routing tables for outputs with no source.
const NO_WINNER: usize = usize::MAX;

#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

/// `c[n×m] += a[n×k] · b[k×m]`
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[n×k] += a[n×m] · b[k×m]ᵀ`
fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            c[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[k×m] += a[n×k]ᵀ · b[n×m]`
fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn log1p_exp(x: f64) -> f64 {
    // ln(1 + e^x) without overflow
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let shape = &self.node(v).shape;
        as_matrix(shape).ok_or_else(|| Error::dim(op, shape, &[0, 0]))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Rows and columns of a 2-D node.
    pub fn dims(&self, v: Var) -> (usize, usize) {
        as_matrix(self.shape(v)).expect("node is not a matrix")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        self.leaf(shape, value, false)
    }

    pub fn leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(Error::dim("leaf", &shape, &[value.len()]));
        }
        Ok(self.push(shape, value, Op::Leaf, requires_grad))
    }

    /// Bring a learnable parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.shape.clone(), p.value.clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix(a, "matmul")?;
        let (k2, m) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; n * m];
        gemm_acc(self.value(a), self.value(b), &mut out, n, k, m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![n, m], out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Elementwise maximum. Ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Maximum(a, b), "maximum", f64::max)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), rg)
    }

    /// Multiply every element of `a` by the single element of `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("mul_scalar", self.shape(a), self.shape(s)));
        }
        let sv = self.scalar(s);
        let out = self.value(a).iter().map(|x| x * sv).collect();
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(self.shape(a).to_vec(), out, Op::MulScalar(a, s), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix(a, "transpose")?;
        let v = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    /// `[a | b]` along the feature axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.matrix(a, "concat_cols")?;
        let (rb, cb) = self.matrix(b, "concat_cols")?;
        if ra != rb {
            return Err(Error::dim("concat_cols", self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&va[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&vb[i * cb..(i + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![ra, ca + cb], out, Op::ConcatCols(a, b), rg))
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat_rows"))?;
        let (_, c) = self.matrix(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        let mut rg = false;
        for &p in parts {
            let (r, pc) = self.matrix(p, "concat_rows")?;
            if pc != c {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
            rg |= self.rg(p);
        }
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::LeakyRelu(a, slope), rg)
    }

    /// Adds a `1×C` (or length-`C`) bias to every row of `a [N×C]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.matrix(a, "add_bias")?;
        if self.value(bias).len() != c {
            return Err(Error::dim("add_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddBias(a, bias), rg))
    }

    /// Row-wise softmax, stabilized by subtracting each row maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.matrix(a, "softmax_rows")?;
        if self.value(a).iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("NaN entering softmax".into()));
        }
        let mut out = self.value(a).to_vec();
        if c > 0 {
            for row in out.chunks_mut(c) {
                softmax_in_place(row);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::SoftmaxRows(a), rg))
    }

    /// Mean sigmoid cross-entropy of `logits [B×C]` against multi-hot targets.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        self.matrix(logits, "sigmoid_bce")?;
        let z = self.value(logits);
        if z.len() != targets.len() {
            return Err(Error::dim("sigmoid_bce", self.shape(logits), &[targets.len()]));
        }
        if let Some(t) = targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::Validation(format!("sigmoid_bce target {t} is not 0 or 1")));
        }
        if z.is_empty() {
            return Err(Error::EmptyInput("sigmoid_bce"));
        }
        let total: f64 = z
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + log1p_exp(-z.abs()))
            .sum();
        let loss = total / z.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1, 1],
            vec![loss],
            Op::SigmoidBce {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Mean per-row softmax cross-entropy. Rows labelled with a negative id
    /// are skipped; if every row is skipped the loss is zero.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[i64]) -> Result<Var> {
        let (n, c) = self.matrix(logits, "softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::dim("softmax_cross_entropy", self.shape(logits), &[labels.len()]));
        }
        let z = self.value(logits);
        let mut total = 0.0;
        let mut counted = 0;
        for (row, &label) in z.chunks(c).zip(labels) {
            if label < 0 {
                continue;
            }
            let label = label as usize;
            if label >= c {
                return Err(Error::Validation(format!("class {label} out of range for {c} logits")));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
            counted += 1;
        }
        let loss = if counted > 0 { total / counted as f64 } else { 0.0 };
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1, 1],
            vec![loss],
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                counted,
            },
            rg,
        ))
    }

    /// Column means: `[N×C] -> [1×C]`.
    pub fn global_average_pool(&mut self, a: Var) -> Result<Var> {
        let (n, c) = self.matrix(a, "global_average_pool")?;
        if n == 0 {
            return Err(Error::EmptyInput("global_average_pool"));
        }
        let mut out = vec![0.0; c];
        for row in self.value(a).chunks(c) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let rg = self.rg(a);
        Ok(self.push(vec![1, c], out, Op::GlobalAvgPool(a), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1, 1], vec![s], Op::SumAll(a), rg)
    }

    /// Inverted dropout. In eval mode, or with `rate == 0`, returns `a` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Validation(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Dropout { input: a, mask }, rg))
    }

    /// `out[i] = a[index[i]]`; the backward pass scatter-adds.
    pub fn gather_rows(&mut self, a: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let (r, c) = self.matrix(a, "gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::Validation(format!("gather index {bad} out of range for {r} rows")));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![index.len(), c], out, Op::GatherRows { input: a, index }, rg))
    }

    /// Contiguous row slice `[start, end)`.
    pub fn rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.gather_rows(a, Arc::new((start..end).collect()))
    }

    /// Per-group, per-column maximum over member rows. Empty groups produce
    /// zero rows. Ties route to the first member listed.
    pub fn segment_max(&mut self, a: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (r, c) = self.matrix(a, "segment_max")?;
        let v = self.value(a);
        let mut out = vec![0.0; groups.len() * c];
        let mut winner = vec![NO_WINNER; groups.len() * c];
        for (g, members) in groups.iter().enumerate() {
            for &m in members {
                if m >= r {
                    return Err(Error::Validation(format!("pool member {m} out of range for {r} rows")));
                }
                for ch in 0..c {
                    let slot = g * c + ch;
                    let x = v[m * c + ch];
                    if winner[slot] == NO_WINNER || x > out[slot] {
                        out[slot] = x;
                        winner[slot] = m;
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![groups.len(), c], out, Op::SegmentMax { input: a, winner }, rg))
    }

    /// Sparse kernel-point convolution:
    /// `out[i] = Σ_(j,k,h) h · feats[j] · weights[k]` over the correlation row of `i`.
    ///
    /// `weights` has shape `[K, Cin, Cout]`.
    pub fn kernel_conv(&mut self, feats: Var, weights: Var, corr: Arc<KernelCorrelation>) -> Result<Var> {
        let (m, cin) = self.matrix(feats, "kernel_conv")?;
        let wshape = self.shape(weights).to_vec();
        let &[k, wcin, cout] = wshape.as_slice() else {
            return Err(Error::dim("kernel_conv", self.shape(feats), &wshape));
        };
        if wcin != cin || k != corr.kernel_size || m != corr.num_supports {
            return Err(Error::dim("kernel_conv", self.shape(feats), &wshape));
        }
        let n = corr.num_queries;
        let f = self.value(feats);
        let w = self.value(weights);
        let mut agg = vec![0.0; n * k * cin];
        let mut out = vec![0.0; n * cout];
        for i in 0..n {
            let a = &mut agg[i * k * cin..(i + 1) * k * cin];
            for (j, kk, h) in corr.row(i) {
                let src = &f[j * cin..(j + 1) * cin];
                for (dst, &x) in a[kk * cin..(kk + 1) * cin].iter_mut().zip(src) {
                    *dst += h * x;
                }
            }
            // out_i = Σ_k agg_ik · W_k, i.e. one (1 × K·Cin)·(K·Cin × Cout) product
            gemm_acc(a, w, &mut out[i * cout..(i + 1) * cout], 1, k * cin, cout);
        }
        let rg = self.rg(feats) || self.rg(weights);
        Ok(self.push(
            vec![n, cout],
            out,
            Op::KernelConv {
                feats,
                weights,
                corr,
                agg,
            },
            rg,
        ))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let len = node.value.len();
        let g = node.grad.get_or_insert_with(|| vec![0.0; len]);
        f(g);
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into any
    /// gradient already present.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", self.shape(loss), &[1]));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.acc(loss, |g| g[0] += 1.0);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backward_op(idx, &op, &grad);
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(grad);
        }
        Ok(())
    }

    fn backward_op(&mut self, idx: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.dims(*a);
                let (_, m) = self.dims(*b);
                if self.rg(*a) {
                    let bv = self.value(*b).to_vec();
                    self.acc(*a, |ga| gemm_nt_acc(g, &bv, ga, n, m, k));
                }
                if self.rg(*b) {
                    let av = self.value(*a).to_vec();
                    self.acc(*b, |gb| gemm_tn_acc(&av, g, gb, n, k, m));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.acc(v, |gv| gv.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::Sub(a, b) => {
                self.acc(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc(*b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                self.acc(*a, |ga| {
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(&bv) {
                        *x += y * z;
                    }
                });
                self.acc(*b, |gb| {
                    for ((x, y), z) in gb.iter_mut().zip(g).zip(&av) {
                        *x += y * z;
                    }
                });
            }
            Op::Scale(a, s) => {
                self.acc(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
            }
            Op::MulScalar(a, s) => {
                let sv = self.scalar(*s);
                if self.rg(*s) {
                    let ds: f64 = self.value(*a).iter().zip(g).map(|(x, y)| x * y).sum();
                    self.acc(*s, |gs| gs[0] += ds);
                }
                self.acc(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += sv * y));
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a);
                self.acc(*a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = self.dims(*a);
                let (_, cb) = self.dims(*b);
                let w = ca + cb;
                self.acc(*a, |ga| {
                    for i in 0..r {
                        for j in 0..ca {
                            ga[i * ca + j] += g[i * w + j];
                        }
                    }
                });
                self.acc(*b, |gb| {
                    for i in 0..r {
                        for j in 0..cb {
                            gb[i * cb + j] += g[i * w + ca + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let slice = &g[offset..offset + len];
                    self.acc(p, |gp| gp.iter_mut().zip(slice).for_each(|(x, y)| *x += y));
                    offset += len;
                }
            }
            Op::Maximum(a, b) => {
                let first_wins: Vec<bool> = self
                    .value(*a)
                    .iter()
                    .zip(self.value(*b))
                    .map(|(x, y)| x >= y)
                    .collect();
                self.acc(*a, |ga| {
                    for ((x, y), &w) in ga.iter_mut().zip(g).zip(&first_wins) {
                        if w {
                            *x += y;
                        }
                    }
                });
                self.acc(*b, |gb| {
                    for ((x, y), &w) in gb.iter_mut().zip(g).zip(&first_wins) {
                        if !w {
                            *x += y;
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let av = self.value(*a).to_vec();
                self.acc(*a, |ga| {
                    for ((x, y), &v) in ga.iter_mut().zip(g).zip(&av) {
                        *x += if v > 0.0 { *y } else { slope * y };
                    }
                });
            }
            Op::AddBias(a, bias) => {
                let (_, c) = self.dims(*a);
                self.acc(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.acc(*bias, |gb| {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (_, c) = self.dims(*a);
                let y = self.nodes[idx].value.clone();
                self.acc(*a, |ga| {
                    for ((grow, yrow), ogrow) in ga.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yrow.iter().zip(ogrow).map(|(a, b)| a * b).sum();
                        for ((x, &yv), &gv) in grow.iter_mut().zip(yrow).zip(ogrow) {
                            *x += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::SigmoidBce { logits, targets } => {
                let scale = g[0] / targets.len() as f64;
                let z = self.value(*logits).to_vec();
                self.acc(*logits, |gz| {
                    for ((x, &zv), &t) in gz.iter_mut().zip(&z).zip(targets) {
                        *x += scale * (sigmoid(zv) - t);
                    }
                });
            }
            Op::SoftmaxXent { logits, labels, counted } => {
                if *counted == 0 {
                    return;
                }
                let (_, c) = self.dims(*logits);
                let scale = g[0] / *counted as f64;
                let z = self.value(*logits).to_vec();
                self.acc(*logits, |gz| {
                    for ((grow, zrow), &label) in gz.chunks_mut(c).zip(z.chunks(c)).zip(labels) {
                        if label < 0 {
                            continue;
                        }
                        let mut p = zrow.to_vec();
                        softmax_in_place(&mut p);
                        p[label as usize] -= 1.0;
                        grow.iter_mut().zip(&p).for_each(|(x, y)| *x += scale * y);
                    }
                });
            }
            Op::GlobalAvgPool(a) => {
                let (n, _) = self.dims(*a);
                let inv = 1.0 / n as f64;
                self.acc(*a, |ga| {
                    for row in ga.chunks_mut(g.len()) {
                        row.iter_mut().zip(g).for_each(|(x, y)| *x += inv * y);
                    }
                });
            }
            Op::SumAll(a) => {
                self.acc(*a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Dropout { input, mask } => {
                self.acc(*input, |ga| {
                    for ((x, y), m) in ga.iter_mut().zip(g).zip(mask) {
                        *x += y * m;
                    }
                });
            }
            Op::GatherRows { input, index } => {
                let (_, c) = self.dims(*input);
                self.acc(*input, |ga| {
                    for (row, &src) in index.iter().enumerate() {
                        for ch in 0..c {
                            ga[src * c + ch] += g[row * c + ch];
                        }
                    }
                });
            }
            Op::SegmentMax { input, winner } => {
                let (_, c) = self.dims(*input);
                self.acc(*input, |ga| {
                    for (slot, &w) in winner.iter().enumerate() {
                        if w != NO_WINNER {
                            ga[w * c + slot % c] += g[slot];
                        }
                    }
                });
            }
            Op::KernelConv {
                feats,
                weights,
                corr,
                agg,
            } => {
                let (_, cin) = self.dims(*feats);
                let k = corr.kernel_size;
                let cout = g.len() / corr.num_queries.max(1);
                if self.rg(*weights) {
                    self.acc(*weights, |gw| {
                        // dW += aggᵀ · dout, with agg viewed as [N × K·Cin]
                        gemm_tn_acc(agg, g, gw, corr.num_queries, k * cin, cout);
                    });
                }
                if self.rg(*feats) {
                    let w = self.value(*weights).to_vec();
                    let mut dagg = vec![0.0; k * cin];
                    self.acc(*feats, |gf| {
                        for i in 0..corr.num_queries {
                            let gi = &g[i * cout..(i + 1) * cout];
                            dagg.iter_mut().for_each(|x| *x = 0.0);
                            gemm_nt_acc(gi, &w, &mut dagg, 1, cout, k * cin);
                            for (j, kk, h) in corr.row(i) {
                                let src = &dagg[kk * cin..(kk + 1) * cin];
                                for (dst, &x) in gf[j * cin..(j + 1) * cin].iter_mut().zip(src) {
                                    *dst += h * x;
                                }
                            }
                        }
                    });
                }
            }
        }
    }

    /// Parameter leaves on this tape, paired with their gradients.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes.iter().filter_map(|n| match (&n.op, &n.grad) {
            (Op::Param(id), Some(g)) => Some((*id, g.as_slice())),
            _ => None,
        })
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}
