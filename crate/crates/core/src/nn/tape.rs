//! Reverse-mode automatic differentiation over row-major `f64` matrices.
//!
//! Every operation appends a node to a [`Tape`]; [`Tape::backward`] walks the
//! tape in reverse and accumulates gradients for every node that depends on
//! a leaf created with `requires_grad = true`.

use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Matrix};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Relu(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    PairProduct { x: Var, n: usize },
    PairSum { x: Var, n: usize },
    SymPairs { x: Var, mask: Vec<bool> },
    MaskRows { x: Var, mask: Vec<bool> },
    MaskPairs { x: Var, mask: Vec<bool> },
    SumAll(Var),
    Pick { x: Var, r: usize, c: usize },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
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

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.rows(), "matmul {:?} x {:?}", av.shape(), bv.shape());
        let out = av.matmul(bv);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols());
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = Matrix::zeros(m, n);
        matmul_nt_into(av.data(), bv.data(), out.data_mut(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulNT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// `a + 1·row` where `row` is `1 × cols(a)`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let rv = self.value(row);
        let av = self.value(a);
        assert_eq!(rv.rows(), 1);
        assert_eq!(rv.cols(), av.cols());
        let mut out = av.clone();
        let r = rv.data().to_vec();
        for i in 0..out.rows() {
            for (o, &x) in out.row_mut(i).iter_mut().zip(&r) {
                *o += x;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scaled(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// Per-row standardization (no affine parameters).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = av.row(r);
            let mean = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, &v) in out.row_mut(r).iter_mut().zip(x) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm { x: a, inv_std }, ng)
    }

    /// Row-wise softmax restricted to columns whose entry in `col_mask` is
    /// true; masked columns get probability 0. Rows with no admissible
    /// column are all zero.
    pub fn softmax_rows_masked(&mut self, a: Var, col_mask: &[bool]) -> Var {
        let av = self.value(a);
        assert_eq!(av.cols(), col_mask.len());
        let mut out = Matrix::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            let x = av.row(r);
            let max = x
                .iter()
                .zip(col_mask)
                .filter(|(_, &m)| m)
                .fold(f64::NEG_INFINITY, |m, (&v, _)| m.max(v));
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = out.row_mut(r);
            let mut z = 0.0;
            for ((ov, &xv), &m) in o.iter_mut().zip(x).zip(col_mask) {
                if m {
                    *ov = (xv - max).exp();
                    z += *ov;
                }
            }
            for ov in o.iter_mut() {
                *ov /= z;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..av.rows() {
            let o = out.row_mut(r);
            let max = o.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + o.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in o.iter_mut() {
                *v -= lse;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmaxRows(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols());
        let out = Matrix::from_fn(av.rows(), len, |r, c| av.get(r, start + c));
        let ng = self.ng(a);
        self.push(out, Op::SliceCols { x: a, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows);
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self
            .value(a)
            .clone()
            .reshape(rows, cols)
            .expect("reshape preserves element count");
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// `(n × d) → (n² × d)` with row `i·n + j` equal to `x_i ⊙ x_j`.
    pub fn pair_product(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, d) = av.shape();
        let mut out = Matrix::zeros(n * n, d);
        for i in 0..n {
            for j in 0..n {
                let (xi, xj) = (av.row(i), av.row(j));
                for ((o, &p), &q) in out.row_mut(i * n + j).iter_mut().zip(xi).zip(xj) {
                    *o = p * q;
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::PairProduct { x: a, n }, ng)
    }

    /// `(n × d) → (n² × d)` with row `i·n + j` equal to `x_i + x_j`.
    pub fn pair_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, d) = av.shape();
        let mut out = Matrix::zeros(n * n, d);
        for i in 0..n {
            for j in 0..n {
                let (xi, xj) = (av.row(i), av.row(j));
                for ((o, &p), &q) in out.row_mut(i * n + j).iter_mut().zip(xi).zip(xj) {
                    *o = p + q;
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::PairSum { x: a, n }, ng)
    }

    /// Symmetrize a pair-level `(n² × c)` tensor, zeroing the diagonal and
    /// pairs that touch a masked node.
    pub fn sym_pairs(&mut self, a: Var, mask: &[bool]) -> Var {
        let out = sym_pairs_value(self.value(a), mask);
        let ng = self.ng(a);
        self.push(
            out,
            Op::SymPairs {
                x: a,
                mask: mask.to_vec(),
            },
            ng,
        )
    }

    pub fn mask_rows(&mut self, a: Var, mask: &[bool]) -> Var {
        let out = mask_rows_value(self.value(a), mask);
        let ng = self.ng(a);
        self.push(
            out,
            Op::MaskRows {
                x: a,
                mask: mask.to_vec(),
            },
            ng,
        )
    }

    /// Zero pair rows `(i, j)` unless both `i` and `j` are unmasked. The
    /// diagonal is kept.
    pub fn mask_pairs(&mut self, a: Var, mask: &[bool]) -> Var {
        let out = mask_pairs_value(self.value(a), mask);
        let ng = self.ng(a);
        self.push(
            out,
            Op::MaskPairs {
                x: a,
                mask: mask.to_vec(),
            },
            ng,
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::SumAll(a), ng)
    }

    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Var {
        let out = Matrix::scalar(self.value(a).get(r, c));
        let ng = self.ng(a);
        self.push(out, Op::Pick { x: a, r, c }, ng)
    }

    /// Sum of squares of all entries.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        self.sum_all(sq)
    }

    /// Backpropagate from the scalar `root` (seed gradient 1).
    pub fn backward(&self, root: Var) -> Gradients {
        let root_val = self.value(root);
        assert_eq!(root_val.shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Matrix>], v: Var, f: impl FnOnce(&mut Matrix)) {
        if !self.ng(v) {
            return;
        }
        let (rows, cols) = self.value(v).shape();
        let slot = &mut grads[v.0];
        let m = slot.get_or_insert_with(|| Matrix::zeros(rows, cols));
        f(m);
    }

    fn backprop_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                self.acc_with(grads, *a, |ga| {
                    matmul_nt_into(g.data(), bv.data(), ga.data_mut(), m, n, k)
                });
                self.acc_with(grads, *b, |gb| {
                    matmul_tn_into(av.data(), g.data(), gb.data_mut(), m, k, n)
                });
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                self.acc_with(grads, *a, |ga| {
                    matmul_into(g.data(), bv.data(), ga.data_mut(), m, n, k)
                });
                self.acc_with(grads, *b, |gb| {
                    matmul_tn_into(g.data(), av.data(), gb.data_mut(), m, n, k)
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scaled(-1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.acc(grads, *a, g.zip_map(bv, |x, y| x * y));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.zip_map(av, |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                self.acc_with(grads, *row, |gr| {
                    let acc = gr.data_mut();
                    for r in 0..g.rows() {
                        for (s, &v) in acc.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.scaled(*s)),
            Op::Silu(a) => {
                let x = self.value(*a);
                self.acc(
                    grads,
                    *a,
                    g.zip_map(x, |gv, xv| {
                        let s = sigmoid(xv);
                        gv * s * (1.0 + xv * (1.0 - s))
                    }),
                );
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let cols = y.cols() as f64;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let mean_g = gr.iter().sum::<f64>() / cols;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols;
                    for ((o, &gv), &yv) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &gv), &yv) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.acc(grads, *a, gx);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let total: f64 = gr.iter().sum();
                    for ((o, &gv), &yv) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = gv - yv.exp() * total;
                    }
                }
                self.acc(grads, *a, gx);
            }
            Op::SliceCols { x, start } => {
                let len = g.cols();
                self.acc_with(grads, *x, |gx| {
                    for r in 0..g.rows() {
                        for (o, &v) in gx.row_mut(r)[*start..*start + len].iter_mut().zip(g.row(r))
                        {
                            *o += v;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc_with(grads, p, |gp| {
                        for r in 0..g.rows() {
                            for (o, &v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *o += v;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                self.acc(grads, *a, g.clone().reshape(r, c).expect("same size"));
            }
            Op::PairProduct { x, n } => {
                let xv = self.value(*x);
                let n = *n;
                self.acc_with(grads, *x, |gx| {
                    for i in 0..n {
                        for j in 0..n {
                            let gij = g.row(i * n + j);
                            let xj = xv.row(j).to_vec();
                            let xi = xv.row(i).to_vec();
                            for ((o, &gv), &v) in gx.row_mut(i).iter_mut().zip(gij).zip(&xj) {
                                *o += gv * v;
                            }
                            for ((o, &gv), &v) in gx.row_mut(j).iter_mut().zip(gij).zip(&xi) {
                                *o += gv * v;
                            }
                        }
                    }
                });
            }
            Op::PairSum { x, n } => {
                let n = *n;
                self.acc_with(grads, *x, |gx| {
                    for i in 0..n {
                        for j in 0..n {
                            let gij = g.row(i * n + j);
                            for (o, &gv) in gx.row_mut(i).iter_mut().zip(gij) {
                                *o += gv;
                            }
                            for (o, &gv) in gx.row_mut(j).iter_mut().zip(gij) {
                                *o += gv;
                            }
                        }
                    }
                });
            }
            Op::SymPairs { x, mask } => self.acc(grads, *x, sym_pairs_value(g, mask)),
            Op::MaskRows { x, mask } => self.acc(grads, *x, mask_rows_value(g, mask)),
            Op::MaskPairs { x, mask } => self.acc(grads, *x, mask_pairs_value(g, mask)),
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                self.acc(grads, *a, Matrix::filled(r, c, g.item()));
            }
            Op::Pick { x, r, c } => {
                let gv = g.item();
                self.acc_with(grads, *x, |gx| {
                    let v = gx.get(*r, *c);
                    gx.set(*r, *c, v + gv);
                });
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sym_pairs_value(x: &Matrix, mask: &[bool]) -> Matrix {
    let n = mask.len();
    assert_eq!(x.rows(), n * n, "pair tensor rows must be n²");
    let c = x.cols();
    let mut out = Matrix::zeros(n * n, c);
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        for j in i + 1..n {
            if !mask[j] {
                continue;
            }
            for k in 0..c {
                let v = 0.5 * (x.get(i * n + j, k) + x.get(j * n + i, k));
                out.set(i * n + j, k, v);
                out.set(j * n + i, k, v);
            }
        }
    }
    out
}

fn mask_rows_value(x: &Matrix, mask: &[bool]) -> Matrix {
    assert_eq!(x.rows(), mask.len());
    let mut out = x.clone();
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            out.row_mut(i).fill(0.0);
        }
    }
    out
}

fn mask_pairs_value(x: &Matrix, mask: &[bool]) -> Matrix {
    let n = mask.len();
    assert_eq!(x.rows(), n * n);
    let mut out = x.clone();
    for i in 0..n {
        for j in 0..n {
            if !(mask[i] && mask[j]) {
                out.row_mut(i * n + j).fill(0.0);
            }
        }
    }
    out
}
