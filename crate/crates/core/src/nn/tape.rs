//! Dense-tensor reverse-mode differentiation on a flat tape.
//!
//! A [`Tape`] records one forward computation as a sequence of nodes holding
//! 2-D row-major `f64` values; [`Tape::backward`] walks the tape in reverse
//! and accumulates gradients. Parameters live outside the tape in a
//! [`ParameterStore`](super::params::ParameterStore) and are inserted as leaf
//! nodes per pass, so the graph is rebuilt cheaply for every sample while
//! parameters persist across steps.
//!
//! The tape also folds every discrete branch taken during the forward pass
//! (ReLU signs, clamps, Smooth-L1 branches, plus caller-noted choices such as
//! argmax picks) into a branch hash. Finite-difference checking is only
//! meaningful when both perturbed evaluations stay on the same smooth piece;
//! the hash makes that detectable.

use super::params::ParameterStore;
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::sync::Arc;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Probabilities are clamped to this floor before logarithms.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Abs(usize),
    SoftmaxRows(usize),
    LnClamped(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize, usize),
    Gather(usize, Arc<Vec<i64>>),
    Bilinear(usize, Arc<Vec<[(usize, f64); 4]>>),
    SumAll(usize),
    SmoothL1Sum(usize),
}

struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// One recorded forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_leaves: Vec<(usize, String)>,
    param_cache: HashMap<(String, bool), Var>,
    branch_hash: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_leaves: Vec::new(),
            param_cache: HashMap::new(),
            branch_hash: FNV_OFFSET,
        }
    }

    fn push(
        &mut self,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Var {
        debug_assert_eq!(values.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            values,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.value(v).len(), 1);
        self.nodes[v.0].values[0]
    }

    /// Inserts a constant leaf (no gradient).
    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Var {
        assert_eq!(values.len(), rows * cols, "constant shape mismatch");
        self.push(rows, cols, values, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(1, 1, vec![v])
    }

    /// Inserts a differentiable leaf from raw values (used by tests and by
    /// gradient checks on non-parameter inputs).
    pub fn input(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Var {
        assert_eq!(values.len(), rows * cols, "input shape mismatch");
        self.push(rows, cols, values, Op::Leaf, true)
    }

    /// Inserts (or reuses) a leaf for a named parameter. A `trainable` leaf
    /// receives gradients and is listed for [`Tape::accumulate_param_grads`];
    /// a frozen one behaves as a constant.
    pub fn param(&mut self, store: &ParameterStore, name: &str, trainable: bool) -> Var {
        let key = (name.to_string(), trainable);
        if let Some(&v) = self.param_cache.get(&key) {
            return v;
        }
        let p = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        let v = self.push(p.rows, p.cols, p.values.clone(), Op::Leaf, trainable);
        if trainable {
            self.param_leaves.push((v.0, name.to_string()));
        }
        self.param_cache.insert(key, v);
        v
    }

    /// Folds caller-visible discrete choices (argmax picks, matching
    /// assignments) into the branch hash.
    pub fn note_branch(&mut self, v: u64) {
        self.branch_hash ^= v;
        self.branch_hash = self.branch_hash.wrapping_mul(FNV_PRIME);
    }

    fn note_bit_word(&mut self, word: u64) {
        self.note_branch(word);
    }

    fn note_bits<I: Iterator<Item = bool>>(&mut self, bits: I) {
        let mut word = 0u64;
        let mut n = 0u32;
        for b in bits {
            word = (word << 1) | b as u64;
            n += 1;
            if n == 64 {
                self.note_bit_word(word);
                word = 0;
                n = 0;
            }
        }
        if n > 0 {
            self.note_bit_word(word);
        }
    }

    /// Hash of every discrete branch taken so far in this forward pass.
    pub fn branch_hash(&self) -> u64 {
        self.branch_hash
    }

    // ---- operations ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = self.dims(a);
        let (kb, n) = self.dims(b);
        assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
        let mut out = vec![0.0; m * n];
        matmul_nn(self.value(a), self.value(b), &mut out, m, ka, n);
        let rg = self.needs_grad(&[a.0, b.0]);
        self.push(m, n, out, Op::Matmul(a.0, b.0), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let va = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = va[i * n + j];
            }
        }
        let rg = self.needs_grad(&[a.0]);
        self.push(n, m, out, Op::Transpose(a.0), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (m, n) = self.dims(a);
        assert_eq!(self.dims(b), (m, n), "elementwise shape mismatch");
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.needs_grad(&[a.0, b.0]);
        self.push(m, n, out, op, rg)
    }

    /// Adds a (1, n) row vector to every row of a (m, n) matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.dims(a);
        assert_eq!(self.dims(row), (1, n), "add_row shape mismatch");
        let mut out = self.value(a).to_vec();
        let r = self.value(row).to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += r[j];
            }
        }
        let rg = self.needs_grad(&[a.0, row.0]);
        self.push(m, n, out, Op::AddRow(a.0, row.0), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.needs_grad(&[a.0]);
        self.push(m, n, out, Op::Scale(a.0, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let va = self.value(a).to_vec();
        self.note_bits(va.iter().map(|&x| x > 0.0));
        let out: Vec<f64> = va.iter().map(|&x| x.max(0.0)).collect();
        let rg = self.needs_grad(&[a.0]);
        self.push(m, n, out, Op::Relu(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let rg = self.needs_grad(&[a.0]);
        self.push(m, n, out, Op::Sigmoid(a.0), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.value(a).iter().map(|&x| x.tanh()).collect();
        let rg = self.needs_grad(&[a.0]);
        self.push(m, n, out, Op::Tanh(a.0), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let va = self.value(a).to_vec();
        self.note_bits(va.iter().map(|&x| x > 0.0));
        let out: Vec<f64> = va.iter().map(|&x| x.abs()).collect();
        let rg = self.needs_grad(&[a.0]);
        self.push(m, n, out, Op::Abs(a.0), rg)
    }

    /// Row-wise softmax with a numerical-stability shift; outputs are floored
    /// at [`PROB_EPS`] (the floor almost never binds and carries no gradient
    /// when it does).
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let va = self.value(a).to_vec();
        let mut out = vec![0.0; m * n];
        let mut clamped = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &va[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                sum += e;
            }
            let mut floored_sum = 0.0;
            for j in 0..n {
                let p = out[i * n + j] / sum;
                clamped.push(p < PROB_EPS);
                out[i * n + j] = p.max(PROB_EPS);
                floored_sum += out[i * n + j];
            }
            // renormalize so the row sums to 1 even when the floor binds
            for j in 0..n {
                out[i * n + j] /= floored_sum;
            }
        }
        self.note_bits(clamped.into_iter());
        let rg = self.needs_grad(&[a.0]);
        self.push(m, n, out, Op::SoftmaxRows(a.0), rg)
    }

    /// `ln(max(x, PROB_EPS))`; gradient is zero where the clamp binds.
    pub fn ln_clamped(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let va = self.value(a).to_vec();
        self.note_bits(va.iter().map(|&x| x > PROB_EPS));
        let out: Vec<f64> = va.iter().map(|&x| x.max(PROB_EPS).ln()).collect();
        let rg = self.needs_grad(&[a.0]);
        self.push(m, n, out, Op::LnClamped(a.0), rg)
    }

    /// Concatenates along columns; all parts must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.dims(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = vec![0.0; m * total];
        let mut col = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            assert_eq!(pm, m, "concat_cols row mismatch");
            let vp = self.value(p);
            for i in 0..m {
                out[i * total + col..i * total + col + pn]
                    .copy_from_slice(&vp[i * pn..(i + 1) * pn]);
            }
            col += pn;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.needs_grad(&ids);
        self.push(m, total, out, Op::ConcatCols(ids), rg)
    }

    /// Stacks parts along rows; all parts must share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.dims(parts[0]).1;
        let total: usize = parts.iter().map(|&p| self.dims(p).0).sum();
        let mut out = Vec::with_capacity(total * n);
        for &p in parts {
            let (_, pn) = self.dims(p);
            assert_eq!(pn, n, "concat_rows column mismatch");
            out.extend_from_slice(self.value(p));
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.needs_grad(&ids);
        self.push(total, n, out, Op::ConcatRows(ids), rg)
    }

    /// Differentiable extraction of row `i` of a matrix as a (1, cols) row.
    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let (m, n) = self.dims(a);
        assert!(i < m, "row {i} out of range for {m} rows");
        let map: Vec<i64> = (i * n..(i + 1) * n).map(|x| x as i64).collect();
        self.gather(a, 1, n, Arc::new(map))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.dims(a);
        assert!(start + len <= n, "slice_cols out of range");
        let va = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&va[i * n + start..i * n + start + len]);
        }
        let rg = self.needs_grad(&[a.0]);
        self.push(m, len, out, Op::SliceCols(a.0, start, len), rg)
    }

    /// Gathers elements of `a` by flat index; `-1` entries produce zero
    /// (used for zero-padded im2col patches).
    pub fn gather(&mut self, a: Var, rows: usize, cols: usize, map: Arc<Vec<i64>>) -> Var {
        assert_eq!(map.len(), rows * cols, "gather map length mismatch");
        let va = self.value(a);
        let out: Vec<f64> = map
            .iter()
            .map(|&i| if i < 0 { 0.0 } else { va[i as usize] })
            .collect();
        let rg = self.needs_grad(&[a.0]);
        self.push(rows, cols, out, Op::Gather(a.0, map), rg)
    }

    /// Weighted 4-tap gather: element `i` of the (1, taps.len()) output is
    /// the weighted sum of four source elements (bilinear interpolation).
    pub fn bilinear(&mut self, a: Var, taps: Arc<Vec<[(usize, f64); 4]>>) -> Var {
        let va = self.value(a);
        let out: Vec<f64> = taps
            .iter()
            .map(|t| t.iter().map(|&(i, w)| va[i] * w).sum())
            .collect();
        let rg = self.needs_grad(&[a.0]);
        let n = taps.len();
        self.push(1, n, out, Op::Bilinear(a.0, taps), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        let rg = self.needs_grad(&[a.0]);
        self.push(1, 1, vec![s], Op::SumAll(a.0), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over elements of the Huber function with transition point 1:
    /// `0.5 x^2` for `|x| < 1`, else `|x| - 0.5`.
    pub fn smooth_l1_sum(&mut self, a: Var) -> Var {
        let va = self.value(a).to_vec();
        self.note_bits(va.iter().map(|&x| x.abs() < 1.0));
        let s: f64 = va
            .iter()
            .map(|&x| {
                if x.abs() < 1.0 {
                    0.5 * x * x
                } else {
                    x.abs() - 0.5
                }
            })
            .sum();
        let rg = self.needs_grad(&[a.0]);
        self.push(1, 1, vec![s], Op::SmoothL1Sum(a.0), rg)
    }

    /// `sum(|a - b|)`.
    pub fn l1_sum(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let ad = self.abs(d);
        self.sum_all(ad)
    }

    /// Cross entropy of a (1, K) probability row against a class index:
    /// `-ln(max(p[class], eps))`.
    pub fn cross_entropy(&mut self, probs: Var, class: usize) -> Var {
        let (m, k) = self.dims(probs);
        assert_eq!(m, 1, "cross_entropy expects a single probability row");
        assert!(
            class < k,
            "class index {class} out of range for {k} classes"
        );
        let p = self.slice_cols(probs, class, 1);
        let lp = self.ln_clamped(p);
        self.scale(lp, -1.0)
    }

    // ---- backward --------------------------------------------------------

    /// Runs reverse-mode accumulation from a scalar root.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn grad_buf(&mut self, id: usize) -> &mut Vec<f64> {
        if self.grads[id].is_none() {
            // rows*cols, not values.len(): values may be temporarily taken
            let n = self.nodes[id].rows * self.nodes[id].cols;
            self.grads[id] = Some(vec![0.0; n]);
        }
        self.grads[id].as_mut().unwrap()
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a].rows, self.nodes[a].cols);
                let n = self.nodes[b].cols;
                if self.nodes[a].requires_grad {
                    let bv = std::mem::take(&mut self.nodes[b].values);
                    {
                        let da = self.grad_buf(a);
                        matmul_nt_acc(g, &bv, da, m, n, k);
                    }
                    self.nodes[b].values = bv;
                }
                if self.nodes[b].requires_grad {
                    let av = std::mem::take(&mut self.nodes[a].values);
                    {
                        let db = self.grad_buf(b);
                        matmul_tn_acc(&av, g, db, m, k, n);
                    }
                    self.nodes[a].values = av;
                }
            }
            Op::Transpose(a) => {
                if self.nodes[a].requires_grad {
                    let (m, n) = (self.nodes[a].rows, self.nodes[a].cols);
                    let da = self.grad_buf(a);
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for id2 in [a, b] {
                    if self.nodes[id2].requires_grad {
                        let d = self.grad_buf(id2);
                        for (dv, &gv) in d.iter_mut().zip(g) {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.nodes[a].requires_grad {
                    let d = self.grad_buf(a);
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
                if self.nodes[b].requires_grad {
                    let d = self.grad_buf(b);
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a].requires_grad {
                    let bv = std::mem::take(&mut self.nodes[b].values);
                    {
                        let d = self.grad_buf(a);
                        for i in 0..g.len() {
                            d[i] += g[i] * bv[i];
                        }
                    }
                    self.nodes[b].values = bv;
                }
                if self.nodes[b].requires_grad {
                    let av = std::mem::take(&mut self.nodes[a].values);
                    {
                        let d = self.grad_buf(b);
                        for i in 0..g.len() {
                            d[i] += g[i] * av[i];
                        }
                    }
                    self.nodes[a].values = av;
                }
            }
            Op::AddRow(a, row) => {
                let (m, n) = (self.nodes[id].rows, self.nodes[id].cols);
                if self.nodes[a].requires_grad {
                    let d = self.grad_buf(a);
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
                if self.nodes[row].requires_grad {
                    let d = self.grad_buf(row);
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.nodes[a].requires_grad {
                    let d = self.grad_buf(a);
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += gv * c;
                    }
                }
            }
            Op::Relu(a) => {
                if self.nodes[a].requires_grad {
                    let av = std::mem::take(&mut self.nodes[a].values);
                    {
                        let d = self.grad_buf(a);
                        for i in 0..g.len() {
                            if av[i] > 0.0 {
                                d[i] += g[i];
                            }
                        }
                    }
                    self.nodes[a].values = av;
                }
            }
            Op::Sigmoid(a) => {
                if self.nodes[a].requires_grad {
                    let yv = std::mem::take(&mut self.nodes[id].values);
                    {
                        let d = self.grad_buf(a);
                        for i in 0..g.len() {
                            d[i] += g[i] * yv[i] * (1.0 - yv[i]);
                        }
                    }
                    self.nodes[id].values = yv;
                }
            }
            Op::Tanh(a) => {
                if self.nodes[a].requires_grad {
                    let yv = std::mem::take(&mut self.nodes[id].values);
                    {
                        let d = self.grad_buf(a);
                        for i in 0..g.len() {
                            d[i] += g[i] * (1.0 - yv[i] * yv[i]);
                        }
                    }
                    self.nodes[id].values = yv;
                }
            }
            Op::Abs(a) => {
                if self.nodes[a].requires_grad {
                    let av = std::mem::take(&mut self.nodes[a].values);
                    {
                        let d = self.grad_buf(a);
                        for i in 0..g.len() {
                            d[i] += g[i]
                                * if av[i] > 0.0 {
                                    1.0
                                } else if av[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                };
                        }
                    }
                    self.nodes[a].values = av;
                }
            }
            Op::SoftmaxRows(a) => {
                if self.nodes[a].requires_grad {
                    let (m, n) = (self.nodes[id].rows, self.nodes[id].cols);
                    let yv = std::mem::take(&mut self.nodes[id].values);
                    {
                        let d = self.grad_buf(a);
                        for i in 0..m {
                            let y = &yv[i * n..(i + 1) * n];
                            let gr = &g[i * n..(i + 1) * n];
                            let dot: f64 = y.iter().zip(gr).map(|(&yy, &gg)| yy * gg).sum();
                            for j in 0..n {
                                d[i * n + j] += y[j] * (gr[j] - dot);
                            }
                        }
                    }
                    self.nodes[id].values = yv;
                }
            }
            Op::LnClamped(a) => {
                if self.nodes[a].requires_grad {
                    let av = std::mem::take(&mut self.nodes[a].values);
                    {
                        let d = self.grad_buf(a);
                        for i in 0..g.len() {
                            if av[i] > PROB_EPS {
                                d[i] += g[i] / av[i];
                            }
                        }
                    }
                    self.nodes[a].values = av;
                }
            }
            Op::ConcatCols(parts) => {
                let n = self.nodes[id].cols;
                let m = self.nodes[id].rows;
                let mut col = 0;
                for p in parts {
                    let pn = self.nodes[p].cols;
                    if self.nodes[p].requires_grad {
                        let d = self.grad_buf(p);
                        for i in 0..m {
                            for j in 0..pn {
                                d[i * pn + j] += g[i * n + col + j];
                            }
                        }
                    }
                    col += pn;
                }
            }
            Op::ConcatRows(parts) => {
                let n = self.nodes[id].cols;
                let mut row = 0;
                for p in parts {
                    let pm = self.nodes[p].rows;
                    if self.nodes[p].requires_grad {
                        let d = self.grad_buf(p);
                        for i in 0..pm * n {
                            d[i] += g[row * n + i];
                        }
                    }
                    row += pm;
                }
            }
            Op::SliceCols(a, start, len) => {
                if self.nodes[a].requires_grad {
                    let (m, n) = (self.nodes[a].rows, self.nodes[a].cols);
                    let d = self.grad_buf(a);
                    for i in 0..m {
                        for j in 0..len {
                            d[i * n + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::Gather(a, map) => {
                if self.nodes[a].requires_grad {
                    let d = self.grad_buf(a);
                    for (k, &src) in map.iter().enumerate() {
                        if src >= 0 {
                            d[src as usize] += g[k];
                        }
                    }
                }
            }
            Op::Bilinear(a, taps) => {
                if self.nodes[a].requires_grad {
                    let d = self.grad_buf(a);
                    for (k, t) in taps.iter().enumerate() {
                        for &(i, w) in t {
                            d[i] += g[k] * w;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if self.nodes[a].requires_grad {
                    let d = self.grad_buf(a);
                    for dv in d.iter_mut() {
                        *dv += g[0];
                    }
                }
            }
            Op::SmoothL1Sum(a) => {
                if self.nodes[a].requires_grad {
                    let av = std::mem::take(&mut self.nodes[a].values);
                    {
                        let d = self.grad_buf(a);
                        for i in 0..av.len() {
                            let x = av[i];
                            let slope = if x.abs() < 1.0 {
                                x
                            } else if x > 0.0 {
                                1.0
                            } else {
                                -1.0
                            };
                            d[i] += g[0] * slope;
                        }
                    }
                    self.nodes[a].values = av;
                }
            }
        }
    }

    /// Gradient buffer of a node after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds `scale` times each trainable parameter leaf's gradient into the
    /// store's gradient buffers, in leaf insertion order.
    pub fn accumulate_param_grads(&self, store: &mut ParameterStore, scale: f64) -> Result<()> {
        for (id, name) in &self.param_leaves {
            if let Some(g) = &self.grads[*id] {
                store.accumulate_grad(name, g, scale)?;
            }
        }
        Ok(())
    }

    /// Gradients of trainable parameter leaves, keyed by name.
    pub fn param_grads(&self) -> HashMap<String, Vec<f64>> {
        let mut out = HashMap::new();
        for (id, name) in &self.param_leaves {
            if let Some(g) = &self.grads[*id] {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }

    /// Checks dims of an input against an expectation, for public layer
    /// contracts.
    pub fn expect_dims(&self, v: Var, rows: usize, cols: usize, what: &str) -> Result<()> {
        let d = self.dims(v);
        if d != (rows, cols) {
            return Err(Error::shape(format!(
                "{what}: expected ({rows}, {cols}), got ({}, {})",
                d.0, d.1
            )));
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out += a (m,k) * b (k,n)` with `out` pre-zeroed by the caller.
fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// `out += g (m,n) * b^T (n,k)`, i.e. dA for C = A*B.
fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (kk, o) in orow.iter_mut().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            *o += acc;
        }
    }
}

/// `out += a^T (k,m) * g (m,n)`, i.e. dB for C = A*B.
fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out[kk * n..(kk + 1) * n];
                for (o, &gv) in orow.iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
    }
}
