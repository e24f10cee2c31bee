//! Matrix-level reverse-mode differentiation and the token policy.
//!
//! A [`Tape`] records operations on dense row-major matrices. Parameter
//! leaves remember their offset into the flat parameter vector, so
//! [`Tape::grad`] returns a gradient laid out exactly like `θ`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_finite, check_len, Error, Result};
use crate::math::{exp, ln, sqrt, tanh};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("matrix data", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn column(data: Vec<f64>) -> Self {
        Self {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Mat) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a · b`
fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    out
}

/// `a · bᵀ`
fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b`
fn matmul_tn(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let brow = b.row(k);
        for i in 0..a.cols {
            let aki = a.data[k * a.cols + i];
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    out
}

fn log_softmax_rows(a: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows, a.cols);
    for r in 0..a.rows {
        let row = a.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + ln(row.iter().map(|&x| exp(x - max)).sum::<f64>());
        for (o, &x) in out.data[r * a.cols..(r + 1) * a.cols].iter_mut().zip(row) {
            *o = x - lse;
        }
    }
    out
}

/// Constant inputs of the clipped PPO surrogate.
#[derive(Debug, Clone)]
struct SurrogateSpec {
    anchor: Vec<f64>,
    adv: Vec<f64>,
    epsilon: f64,
}

#[derive(Debug, Clone)]
struct ValueSpec {
    returns: Vec<f64>,
    old: Vec<f64>,
    clip: f64,
}

#[derive(Debug, Clone)]
enum Op {
    Param { offset: usize },
    Const,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Square(usize),
    LogSoftmax(usize),
    Gather(usize, Vec<usize>),
    Sum(usize),
    Mean(usize),
    Surrogate(usize, SurrogateSpec),
    ValueLoss(usize, ValueSpec),
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Records a computation for one backward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    param_len: usize,
    nodes: Vec<Node>,
}

impl Tape {
    /// `param_len` is the length of the flat parameter vector gradients refer to.
    pub fn new(param_len: usize) -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            param_len,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert!(
            v.tape == self.id && v.index < self.nodes.len(),
            "variable belongs to another tape"
        );
        v.index
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[self.idx(v)].value
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data[0]
    }

    /// Parameter leaf over `theta[offset .. offset + rows*cols]`.
    pub fn param(&mut self, theta: &[f64], offset: usize, rows: usize, cols: usize) -> Var {
        let end = offset + rows * cols;
        assert!(end <= self.param_len && end <= theta.len(), "parameter slice out of range");
        let value = Mat {
            rows,
            cols,
            data: theta[offset..end].to_vec(),
        };
        self.push(value, Op::Param { offset }, true)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn unary(&mut self, a: Var, f: impl Fn(&Mat) -> Mat, op: impl Fn(usize) -> Op) -> Var {
        let i = self.idx(a);
        let value = f(&self.nodes[i].value);
        let needs = self.needs(i);
        self.push(value, op(i), needs)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(&Mat, &Mat) -> Mat, op: impl Fn(usize, usize) -> Op) -> Var {
        let (i, j) = (self.idx(a), self.idx(b));
        let value = f(&self.nodes[i].value, &self.nodes[j].value);
        let needs = self.needs(i) || self.needs(j);
        self.push(value, op(i, j), needs)
    }

    fn same_shape(&self, a: Var, b: Var) {
        let (x, y) = (self.value(a), self.value(b));
        assert!(x.rows == y.rows && x.cols == y.cols, "shape mismatch");
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).cols, self.value(b).rows, "matmul shape mismatch");
        self.binary(a, b, matmul, Op::MatMul)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b);
        self.binary(a, b, |x, y| x.zip(y, |p, q| p + q), Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b);
        self.binary(a, b, |x, y| x.zip(y, |p, q| p - q), Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b);
        self.binary(a, b, |x, y| x.zip(y, |p, q| p * q), Op::Mul)
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert!(r.rows == 1 && r.cols == x.cols, "bias shape mismatch");
        self.binary(
            a,
            row,
            |x, r| {
                let mut out = x.clone();
                for chunk in out.data.chunks_mut(x.cols) {
                    for (o, b) in chunk.iter_mut().zip(&r.data) {
                        *o += b;
                    }
                }
                out
            },
            Op::AddRow,
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x.map(|v| v * k), |i| Op::Scale(i, k))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.map(tanh), Op::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.map(|v| v.max(0.0)), Op::Relu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.map(exp), Op::Exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.map(|v| v * v), Op::Square)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        self.unary(a, log_softmax_rows, Op::LogSoftmax)
    }

    /// Picks `a[r, cols[r]]` for every row, giving an `rows×1` column.
    pub fn gather(&mut self, a: Var, cols: &[usize]) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows, cols.len(), "gather index count mismatch");
        assert!(cols.iter().all(|&c| c < x.cols), "gather index out of range");
        let idx = cols.to_vec();
        self.unary(
            a,
            |x| Mat::column(cols.iter().enumerate().map(|(r, &c)| x.get(r, c)).collect()),
            move |i| Op::Gather(i, idx.clone()),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.unary(a, |x| Mat::column(vec![x.data.iter().sum()]), Op::Sum)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| Mat::column(vec![x.data.iter().sum::<f64>() / x.data.len() as f64]),
            Op::Mean,
        )
    }

    /// `-mean_t min(u_t A_t, clip(u_t, 1-ε, 1+ε) A_t)` with
    /// `u_t = exp(logp_t - anchor_t)`. `logp` is a column.
    pub fn clipped_surrogate(&mut self, logp: Var, anchor: &[f64], adv: &[f64], epsilon: f64) -> Var {
        let x = self.value(logp);
        assert!(x.cols == 1 && x.rows == anchor.len() && x.rows == adv.len(), "surrogate shape mismatch");
        assert!(x.rows > 0, "surrogate over an empty batch");
        let spec = SurrogateSpec {
            anchor: anchor.to_vec(),
            adv: adv.to_vec(),
            epsilon,
        };
        let value = {
            let mut total = 0.0;
            for t in 0..x.rows {
                let u = exp(x.data[t] - anchor[t]);
                total += surrogate_term(u, adv[t], epsilon).0;
            }
            -total / x.rows as f64
        };
        let i = self.idx(logp);
        let needs = self.needs(i);
        self.push(Mat::column(vec![value]), Op::Surrogate(i, spec), needs)
    }

    /// `0.5 · mean_t max((v−R)², (clip(v, v_old ± c) − R)²)` for a value column.
    pub fn clipped_value_loss(&mut self, values: Var, returns: &[f64], old: &[f64], clip: f64) -> Var {
        let x = self.value(values);
        assert!(x.cols == 1 && x.rows == returns.len() && x.rows == old.len(), "value loss shape mismatch");
        assert!(x.rows > 0, "value loss over an empty batch");
        let mut total = 0.0;
        for t in 0..x.rows {
            total += value_term(x.data[t], returns[t], old[t], clip).0;
        }
        let value = 0.5 * total / x.rows as f64;
        let spec = ValueSpec {
            returns: returns.to_vec(),
            old: old.to_vec(),
            clip,
        };
        let i = self.idx(values);
        let needs = self.needs(i);
        self.push(Mat::column(vec![value]), Op::ValueLoss(i, spec), needs)
    }

    /// Gradient of a recorded `1×1` node with respect to every parameter leaf.
    pub fn grad(&self, loss: Var) -> Result<Vec<f64>> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(Error::domain("loss node is not recorded on this tape"));
        }
        let root = loss.index;
        let lv = &self.nodes[root].value;
        if lv.rows != 1 || lv.cols != 1 {
            return Err(Error::domain(format!(
                "loss must be 1x1, got {}x{}",
                lv.rows, lv.cols
            )));
        }
        let mut grad = vec![0.0; self.param_len];
        let mut adj: Vec<Option<Mat>> = vec![None; root + 1];
        adj[root] = Some(Mat::column(vec![1.0]));

        for i in (0..=root).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let node = &self.nodes[i];
            let send = |j: usize, d: Mat, adj: &mut Vec<Option<Mat>>| {
                if !self.nodes[j].needs_grad {
                    return;
                }
                match &mut adj[j] {
                    Some(acc) => acc.add_assign(&d),
                    slot => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Const => {}
                Op::Param { offset } => {
                    for (k, v) in g.data.iter().enumerate() {
                        grad[offset + k] += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.needs(*a) {
                        send(*a, matmul_nt(&g, bv), &mut adj);
                    }
                    if self.needs(*b) {
                        send(*b, matmul_tn(av, &g), &mut adj);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut adj);
                    send(*b, g, &mut adj);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|v| -v), &mut adj);
                    send(*a, g, &mut adj);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    send(*a, g.zip(bv, |p, q| p * q), &mut adj);
                    send(*b, g.zip(av, |p, q| p * q), &mut adj);
                }
                Op::AddRow(a, r) => {
                    let mut dr = Mat::zeros(1, g.cols);
                    for chunk in g.data.chunks(g.cols) {
                        for (o, v) in dr.data.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    send(*r, dr, &mut adj);
                    send(*a, g, &mut adj);
                }
                Op::Scale(a, k) => send(*a, g.map(|v| v * k), &mut adj),
                Op::Tanh(a) => send(*a, g.zip(&node.value, |d, y| d * (1.0 - y * y)), &mut adj),
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    send(*a, g.zip(x, |d, v| if v > 0.0 { d } else { 0.0 }), &mut adj)
                }
                Op::Exp(a) => send(*a, g.zip(&node.value, |d, y| d * y), &mut adj),
                Op::Square(a) => {
                    let x = &self.nodes[*a].value;
                    send(*a, g.zip(x, |d, v| 2.0 * d * v), &mut adj)
                }
                Op::LogSoftmax(a) => {
                    // dx = g - softmax * rowsum(g)
                    let y = &node.value;
                    let mut dx = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let gr = g.row(r);
                        let s: f64 = gr.iter().sum();
                        for c in 0..y.cols {
                            dx.data[r * y.cols + c] = gr[c] - exp(y.get(r, c)) * s;
                        }
                    }
                    send(*a, dx, &mut adj)
                }
                Op::Gather(a, cols) => {
                    let x = &self.nodes[*a].value;
                    let mut dx = Mat::zeros(x.rows, x.cols);
                    for (r, &c) in cols.iter().enumerate() {
                        dx.data[r * x.cols + c] = g.data[r];
                    }
                    send(*a, dx, &mut adj)
                }
                Op::Sum(a) => {
                    let x = &self.nodes[*a].value;
                    send(*a, Mat { rows: x.rows, cols: x.cols, data: vec![g.data[0]; x.data.len()] }, &mut adj)
                }
                Op::Mean(a) => {
                    let x = &self.nodes[*a].value;
                    let v = g.data[0] / x.data.len() as f64;
                    send(*a, Mat { rows: x.rows, cols: x.cols, data: vec![v; x.data.len()] }, &mut adj)
                }
                Op::Surrogate(a, spec) => {
                    let x = &self.nodes[*a].value;
                    let scale = -g.data[0] / x.rows as f64;
                    let data = (0..x.rows)
                        .map(|t| {
                            let u = exp(x.data[t] - spec.anchor[t]);
                            scale * surrogate_term(u, spec.adv[t], spec.epsilon).1 * u
                        })
                        .collect();
                    send(*a, Mat::column(data), &mut adj)
                }
                Op::ValueLoss(a, spec) => {
                    let x = &self.nodes[*a].value;
                    let scale = 0.5 * g.data[0] / x.rows as f64;
                    let data = (0..x.rows)
                        .map(|t| scale * value_term(x.data[t], spec.returns[t], spec.old[t], spec.clip).1)
                        .collect();
                    send(*a, Mat::column(data), &mut adj)
                }
            }
        }
        Ok(grad)
    }
}

/// Value and `d/du` of `min(u A, clip(u) A)`.
#[inline]
pub(crate) fn surrogate_term(u: f64, adv: f64, epsilon: f64) -> (f64, f64) {
    let clipped = u.clamp(1.0 - epsilon, 1.0 + epsilon);
    let plain = u * adv;
    let capped = clipped * adv;
    if plain <= capped {
        (plain, adv)
    } else {
        let inside = u > 1.0 - epsilon && u < 1.0 + epsilon;
        (capped, if inside { adv } else { 0.0 })
    }
}

/// Value and `d/dv` of `max((v−R)², (clip(v, v_old±c)−R)²)`.
#[inline]
pub(crate) fn value_term(v: f64, ret: f64, old: f64, clip: f64) -> (f64, f64) {
    let vc = old + (v - old).clamp(-clip, clip);
    let a = (v - ret) * (v - ret);
    let b = (vc - ret) * (vc - ret);
    if a >= b {
        (a, 2.0 * (v - ret))
    } else {
        let inside = (v - old).abs() < clip;
        (b, if inside { 2.0 * (vc - ret) } else { 0.0 })
    }
}

// ---------------------------------------------------------------------------
// Policy
// ---------------------------------------------------------------------------

/// Layer sizes of the token policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub value_hidden: usize,
    pub n_value_heads: usize,
}

impl Architecture {
    pub fn new(vocab_size: usize, n_value_heads: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 16,
            hidden_dim: 32,
            value_hidden: 32,
            n_value_heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::domain("vocabulary needs at least two tokens"));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.value_hidden == 0 {
            return Err(Error::domain("layer sizes must be positive"));
        }
        if self.n_value_heads == 0 {
            return Err(Error::domain("at least one value head is required"));
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self)
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

/// `(offset, rows, cols)` of one parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadLayout {
    pub w1: Block,
    pub b1: Block,
    pub w2: Block,
    pub b2: Block,
}

/// Offsets of every block inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub embed: Block,
    pub w1: Block,
    pub b1: Block,
    pub wp: Block,
    pub bp: Block,
    pub heads: Vec<HeadLayout>,
    pub total: usize,
}

impl ParamLayout {
    fn new(a: &Architecture) -> Self {
        let mut offset = 0;
        let mut block = |rows: usize, cols: usize| {
            let b = Block { offset, rows, cols };
            offset += rows * cols;
            b
        };
        let embed = block(a.vocab_size, a.embed_dim);
        let w1 = block(a.embed_dim, a.hidden_dim);
        let b1 = block(1, a.hidden_dim);
        let wp = block(a.hidden_dim, a.vocab_size);
        let bp = block(1, a.vocab_size);
        let heads = (0..a.n_value_heads)
            .map(|_| HeadLayout {
                w1: block(a.hidden_dim, a.value_hidden),
                b1: block(1, a.value_hidden),
                w2: block(a.value_hidden, 1),
                b2: block(1, 1),
            })
            .collect();
        Self {
            embed,
            w1,
            b1,
            wp,
            bp,
            heads,
            total: offset,
        }
    }

    /// Number of leading entries that belong to the policy (trunk + logits).
    pub fn policy_len(&self) -> usize {
        self.bp.offset + self.bp.len()
    }
}

/// How fresh parameters are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Random trunk; policy logits layer and last value layers start at zero,
    /// so the initial policy is uniform and every head predicts 0.
    ZeroHeads,
    /// Every block random.
    Random,
}

/// Policy parameters, the frozen reference copy and `N` value heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBundle {
    arch: Architecture,
    layout: ParamLayout,
    pub theta: Vec<f64>,
    ref_theta: Vec<f64>,
    pub seed: u64,
    /// Value heads read a detached copy of the trunk when set.
    pub stop_value_gradient: bool,
}

/// Graph nodes produced by [`PolicyBundle::build`].
#[derive(Debug, Clone)]
pub struct PolicyGraph {
    pub logits: Var,
    pub log_probs: Var,
    pub values: Vec<Var>,
}

impl PolicyBundle {
    pub fn new(arch: Architecture, seed: u64, init: Init) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; layout.total];
        let mut fill = |b: Block, bound: f64, theta: &mut [f64]| {
            for v in &mut theta[b.range()] {
                *v = rng.random_range(-bound..bound);
            }
        };
        let glorot = |b: Block| sqrt(6.0 / (b.rows + b.cols) as f64);
        fill(layout.embed, 1.0, &mut theta);
        fill(layout.w1, glorot(layout.w1), &mut theta);
        if init == Init::Random {
            fill(layout.b1, 0.1, &mut theta);
            fill(layout.wp, glorot(layout.wp), &mut theta);
            fill(layout.bp, 0.1, &mut theta);
        }
        for h in &layout.heads {
            fill(h.w1, glorot(h.w1), &mut theta);
            if init == Init::Random {
                fill(h.b1, 0.1, &mut theta);
                fill(h.w2, glorot(h.w2), &mut theta);
                fill(h.b2, 0.1, &mut theta);
            }
        }
        Ok(Self {
            arch,
            layout,
            ref_theta: theta.clone(),
            theta,
            seed,
            stop_value_gradient: false,
        })
    }

    /// Rebuilds a bundle from stored parameter vectors.
    pub fn from_parts(arch: Architecture, theta: Vec<f64>, ref_theta: Vec<f64>, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        check_len("theta", layout.total, theta.len())?;
        check_len("reference theta", layout.total, ref_theta.len())?;
        check_finite("theta", &theta)?;
        check_finite("reference theta", &ref_theta)?;
        Ok(Self {
            arch,
            layout,
            theta,
            ref_theta,
            seed,
            stop_value_gradient: false,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn ref_theta(&self) -> &[f64] {
        &self.ref_theta
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    /// Normalized token counts of a context (mean pooling as a linear map).
    pub fn context_features(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        context_features(tokens, self.arch.vocab_size)
    }

    /// Records the forward pass for a batch of context rows (`M × vocab`).
    pub fn build(&self, tape: &mut Tape, theta: &[f64], contexts: &Mat) -> PolicyGraph {
        let l = &self.layout;
        let p = |tape: &mut Tape, b: Block| tape.param(theta, b.offset, b.rows, b.cols);
        let ctx = tape.constant(contexts.clone());
        let embed = p(tape, l.embed);
        let pooled = tape.matmul(ctx, embed);
        let w1 = p(tape, l.w1);
        let b1 = p(tape, l.b1);
        let pre = tape.matmul(pooled, w1);
        let pre = tape.add_row(pre, b1);
        let hidden = tape.tanh(pre);
        let wp = p(tape, l.wp);
        let bp = p(tape, l.bp);
        let logits = tape.matmul(hidden, wp);
        let logits = tape.add_row(logits, bp);
        let log_probs = tape.log_softmax(logits);

        let head_input = if self.stop_value_gradient {
            tape.detach(hidden)
        } else {
            hidden
        };
        let values = l
            .heads
            .iter()
            .map(|h| {
                let w1 = p(tape, h.w1);
                let b1 = p(tape, h.b1);
                let z = tape.matmul(head_input, w1);
                let z = tape.add_row(z, b1);
                let z = tape.relu(z);
                let w2 = p(tape, h.w2);
                let b2 = p(tape, h.b2);
                let v = tape.matmul(z, w2);
                tape.add_row(v, b2)
            })
            .collect();
        PolicyGraph {
            logits,
            log_probs,
            values,
        }
    }

    /// Batched forward without keeping the tape: `(log-probs M×V, values N×M)`.
    pub fn forward_rows(&self, theta: &[f64], contexts: &Mat) -> (Mat, Vec<Vec<f64>>) {
        let mut tape = Tape::new(self.layout.total);
        let g = self.build(&mut tape, theta, contexts);
        let lp = tape.value(g.log_probs).clone();
        let values = g.values.iter().map(|&v| tape.value(v).data.clone()).collect();
        (lp, values)
    }

    /// Logits and the `N` value estimates for one state.
    pub fn forward(&self, state: &[u32]) -> Result<(Vec<f64>, Vec<f64>)> {
        let ctx = Mat::from_vec(1, self.arch.vocab_size, self.context_features(state)?)?;
        let mut tape = Tape::new(self.layout.total);
        let g = self.build(&mut tape, &self.theta, &ctx);
        let logits = tape.value(g.logits).data.clone();
        let values = g.values.iter().map(|&v| tape.scalar(v)).collect();
        Ok((logits, values))
    }

    /// `(log π_θ(a|s), log π_ref(a|s), π_θ/π_ref)`.
    pub fn log_prob_and_ratio(&self, state: &[u32], action: u32) -> Result<(f64, f64, f64)> {
        let a = action as usize;
        if a >= self.arch.vocab_size {
            return Err(Error::domain(format!("action {action} outside the vocabulary")));
        }
        let ctx = Mat::from_vec(1, self.arch.vocab_size, self.context_features(state)?)?;
        let (lp, _) = self.forward_rows(&self.theta, &ctx);
        let (rlp, _) = self.forward_rows(&self.ref_theta, &ctx);
        let logp = lp.get(0, a);
        let ref_logp = rlp.get(0, a);
        Ok((logp, ref_logp, exp(logp - ref_logp)))
    }

    /// `θ ← θ − η g`; the reference copy is untouched.
    pub fn sgd_step(&mut self, gradient: &[f64], eta: f64) -> Result<()> {
        check_len("gradient", self.theta.len(), gradient.len())?;
        check_finite("gradient", gradient)?;
        if !(eta > 0.0) {
            return Err(Error::domain("learning rate must be positive"));
        }
        for (t, g) in self.theta.iter_mut().zip(gradient) {
            *t -= eta * g;
        }
        Ok(())
    }
}

/// Normalized histogram of `tokens` over the vocabulary.
pub fn context_features(tokens: &[u32], vocab_size: usize) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::Empty("context"));
    }
    let mut out = vec![0.0; vocab_size];
    for &t in tokens {
        let t = t as usize;
        if t >= vocab_size {
            return Err(Error::domain(format!("token {t} outside the vocabulary of {vocab_size}")));
        }
        out[t] += 1.0;
    }
    let n = tokens.len() as f64;
    for v in &mut out {
        *v /= n;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let theta = [3.0, 1.0];
        let mut tape = Tape::new(2);
        let x = tape.param(&theta, 0, 1, 1);
        let y = tape.square(x);
        let g = tape.grad(y).unwrap();
        assert_eq!(g, vec![6.0, 0.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::new(3);
        let c = tape.constant(Mat::column(vec![2.0]));
        let s = tape.square(c);
        assert_eq!(tape.grad(s).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn foreign_or_non_scalar_loss_is_rejected() {
        let mut a = Tape::new(1);
        let b = Tape::new(1);
        let x = a.constant(Mat::column(vec![1.0, 2.0]));
        assert!(a.grad(x).is_err());
        assert!(b.grad(x).is_err());
    }

    #[test]
    fn zero_heads_give_uniform_policy() {
        let bundle = PolicyBundle::new(Architecture::new(12, 2), 5, Init::ZeroHeads).unwrap();
        let (logits, values) = bundle.forward(&[1, 2, 3]).unwrap();
        assert!(logits.iter().all(|&l| l == 0.0));
        assert_eq!(values, vec![0.0, 0.0]);
        let (lp, _, ratio) = bundle.log_prob_and_ratio(&[1, 2], 4).unwrap();
        assert!((exp(lp) - 1.0 / 12.0).abs() < 1e-15);
        assert_eq!(ratio, 1.0);
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let bundle = PolicyBundle::new(Architecture::new(7, 3), 5, Init::Random).unwrap();
        let a = bundle.forward(&[0, 6, 2]).unwrap();
        let b = bundle.forward(&[0, 6, 2]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.len(), 3);
        assert_eq!(a.0.len(), 7);
        assert!(bundle.forward(&[7]).is_err());
        assert!(bundle.log_prob_and_ratio(&[1], 7).is_err());
    }

    #[test]
    fn sgd_step_rules() {
        let mut bundle = PolicyBundle::new(Architecture::new(4, 1), 1, Init::Random).unwrap();
        let before = bundle.theta.clone();
        let d = bundle.param_count();
        bundle.sgd_step(&vec![0.0; d], 0.1).unwrap();
        assert_eq!(bundle.theta, before);
        let mut e0 = vec![0.0; d];
        e0[0] = 1.0;
        bundle.sgd_step(&e0, 1.0).unwrap();
        assert_eq!(bundle.theta[0], before[0] - 1.0);
        assert_eq!(bundle.ref_theta(), &before[..]);
        e0[1] = f64::NAN;
        assert!(bundle.sgd_step(&e0, 1.0).is_err());
        assert!(bundle.sgd_step(&vec![0.0; d], 0.0).is_err());
    }

    #[test]
    fn surrogate_terms() {
        assert_eq!(surrogate_term(1.5, 2.0, 0.2).0, 2.4);
        assert_eq!(surrogate_term(0.5, 2.0, 0.2).0, 1.0);
        assert_eq!(surrogate_term(3.0, 0.0, 0.2).0, 0.0);
        // negative advantage below the band is clipped
        assert_eq!(surrogate_term(0.5, -1.0, 0.2), (-0.8, 0.0));
    }
}
