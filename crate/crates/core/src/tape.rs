//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! A [`Tape`] records every primitive as a node holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse and returns the adjoint of
//! every parameter as one flat vector laid out exactly like the parameter
//! slice the tape was created over. Values are row-major `f64` matrices;
//! scalars are `1 x 1` matrices.
//!
//! The primitive set is what the micro policy and the policy-gradient
//! objective need: matrix products, elementwise arithmetic, row-wise
//! normalisations and softmaxes, row gathers and per-row picks.

use std::borrow::Cow;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Input,
    Param { offset: usize },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Min(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Silu(Var),
    Clamp(Var, f64, f64),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    CausalSoftmax(Var),
    LogSoftmax(Var),
    GatherRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Sum(Var),
}

struct Node<'a> {
    rows: usize,
    cols: usize,
    value: Cow<'a, [f64]>,
    op: Op,
}

/// Recording of one forward evaluation.
///
/// Parameter leaves borrow from the flat parameter slice passed to
/// [`Tape::new`], so registering the weights of a model costs no copies.
pub struct Tape<'a> {
    params: &'a [f64],
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a [f64]) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.shape(v), (1, 1));
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Cow<'a, [f64]>, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        self.push(rows, cols, Cow::Owned(value), op)
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(value.len(), rows * cols, "input shape mismatch");
        self.owned(rows, cols, value, Op::Input)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.input(1, 1, vec![value])
    }

    /// Parameter leaf viewing `params[offset .. offset + rows * cols]`.
    pub fn param(&mut self, offset: usize, rows: usize, cols: usize) -> Var {
        let end = offset + rows * cols;
        assert!(end <= self.params.len(), "parameter view out of range");
        let params = self.params;
        self.push(
            rows,
            cols,
            Cow::Borrowed(&params[offset..end]),
            Op::Param { offset },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        self.owned(m, n, out, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_bt inner dimension");
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &bv[j * k..(j + 1) * k]);
            }
        }
        self.owned(m, n, out, Op::MatMulBt(a, b))
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "elementwise shape mismatch");
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.owned(r, c, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, f64::min, Op::Min(a, b))
    }

    /// Adds the `1 x cols` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (1, c), "add_row expects a 1 x cols bias");
        let bv = self.value(b);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, &bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        self.owned(r, c, out, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.owned(r, c, out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x + s).collect();
        self.owned(r, c, out, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x.exp()).collect();
        self.owned(r, c, out, Op::Exp(a))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        self.owned(r, c, out, Op::Silu(a))
    }

    /// Clamp into `[lo, hi]`; the gradient passes only inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x.clamp(lo, hi)).collect();
        self.owned(r, c, out, Op::Clamp(a, lo, hi))
    }

    /// Per-row standardisation without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for (row, orow) in xv.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in orow.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        self.owned(r, c, out, Op::LayerNorm { x, inv_std })
    }

    /// Row-wise softmax of a square-or-wider score matrix where row `i` may
    /// only see columns `j <= i + (cols - rows)`.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        assert!(c >= r, "causal softmax needs cols >= rows");
        let shift = c - r;
        let av = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let visible = i + shift + 1;
            let row = &av[i * c..i * c + visible];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * c..i * c + visible];
            let mut s = 0.0;
            for (o, v) in orow.iter_mut().zip(row) {
                *o = (v - m).exp();
                s += *o;
            }
            for o in orow.iter_mut() {
                *o /= s;
            }
        }
        self.owned(r, c, out, Op::CausalSoftmax(a))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(c) {
            log_softmax_in_place(row);
        }
        self.owned(r, c, out, Op::LogSoftmax(a))
    }

    /// Selects rows of `a` by index (embedding lookup); indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "gather_rows index {i} out of range {r}");
            out.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        self.owned(idx.len(), c, out, Op::GatherRows(a, idx.to_vec()))
    }

    /// Picks element `(i, idx[i])` of every row, giving a `rows x 1` column.
    pub fn pick_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(idx.len(), r, "pick_cols needs one index per row");
        let av = self.value(a);
        let out = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < c, "pick_cols index {j} out of range {c}");
                av[i * c + j]
            })
            .collect();
        self.owned(r, 1, out, Op::PickCols(a, idx.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "slice_cols out of range");
        let av = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for row in av.chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        self.owned(r, len, out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let r = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = vec![0.0; r * total];
        let mut start = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            assert_eq!(pr, r, "concat_cols row mismatch");
            let pv = self.value(p);
            for i in 0..r {
                out[i * total + start..i * total + start + pc]
                    .copy_from_slice(&pv[i * pc..(i + 1) * pc]);
            }
            start += pc;
        }
        self.owned(r, total, out, Op::ConcatCols(parts.to_vec()))
    }

    /// Sum of all elements as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = pairwise_sum(self.value(a));
        self.owned(1, 1, vec![s], Op::Sum(a))
    }

    /// Adjoints of `output` (which must be `1 x 1`) with respect to every
    /// parameter, laid out like the parameter slice.
    pub fn backward(&self, output: Var) -> Vec<f64> {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        let mut out = vec![0.0; self.params.len()];

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let (r, c) = (node.rows, node.cols);
            match &node.op {
                Op::Input => {}
                Op::Param { offset } => {
                    for (o, gi) in out[*offset..*offset + g.len()].iter_mut().zip(&g) {
                        *o += gi;
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = c;
                    // dA = G * B^T ; dB = A^T * G
                    let bv = self.value(*b);
                    let ga = grad_buf(&mut grads, *a, m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            ga[i * k + kk] += dot(grow, &bv[kk * n..(kk + 1) * n]);
                        }
                    }
                    let av = self.value(*a);
                    let gb = grad_buf(&mut grads, *b, k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            if aik != 0.0 {
                                axpy(aik, grow, &mut gb[kk * n..(kk + 1) * n]);
                            }
                        }
                    }
                }
                Op::MatMulBt(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = c;
                    // C = A B^T: dA = G B ; dB = G^T A
                    let bv = self.value(*b);
                    let ga = grad_buf(&mut grads, *a, m * k);
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij != 0.0 {
                                axpy(gij, &bv[j * k..(j + 1) * k], &mut ga[i * k..(i + 1) * k]);
                            }
                        }
                    }
                    let av = self.value(*a);
                    let gb = grad_buf(&mut grads, *b, n * k);
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij != 0.0 {
                                axpy(gij, &av[i * k..(i + 1) * k], &mut gb[j * k..(j + 1) * k]);
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    let gb = grad_buf(&mut grads, *b, g.len());
                    for (o, gi) in gb.iter_mut().zip(&g) {
                        *o -= gi;
                    }
                }
                Op::Mul(a, b) => {
                    let bv = self.value(*b);
                    let ga = grad_buf(&mut grads, *a, g.len());
                    for ((o, gi), bi) in ga.iter_mut().zip(&g).zip(bv) {
                        *o += gi * bi;
                    }
                    let av = self.value(*a);
                    let gb = grad_buf(&mut grads, *b, g.len());
                    for ((o, gi), ai) in gb.iter_mut().zip(&g).zip(av) {
                        *o += gi * ai;
                    }
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let ga = grad_buf(&mut grads, *a, g.len());
                    for ((o, gi), bi) in ga.iter_mut().zip(&g).zip(bv) {
                        *o += gi / bi;
                    }
                    let av = self.value(*a);
                    let gb = grad_buf(&mut grads, *b, g.len());
                    for (((o, gi), ai), bi) in gb.iter_mut().zip(&g).zip(av).zip(bv) {
                        *o -= gi * ai / (bi * bi);
                    }
                }
                Op::Min(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let take_a: Vec<bool> = av.iter().zip(bv).map(|(x, y)| x <= y).collect();
                    let ga = grad_buf(&mut grads, *a, g.len());
                    for ((o, gi), &t) in ga.iter_mut().zip(&g).zip(&take_a) {
                        if t {
                            *o += gi;
                        }
                    }
                    let gb = grad_buf(&mut grads, *b, g.len());
                    for ((o, gi), &t) in gb.iter_mut().zip(&g).zip(&take_a) {
                        if !t {
                            *o += gi;
                        }
                    }
                }
                Op::AddRow(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    let gb = grad_buf(&mut grads, *b, c);
                    for row in g.chunks_exact(c) {
                        for (o, gi) in gb.iter_mut().zip(row) {
                            *o += gi;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let ga = grad_buf(&mut grads, *a, g.len());
                    axpy(*s, &g, ga);
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, &g),
                Op::Exp(a) => {
                    let yv = &node.value;
                    let ga = grad_buf(&mut grads, *a, g.len());
                    for ((o, gi), y) in ga.iter_mut().zip(&g).zip(yv.iter()) {
                        *o += gi * y;
                    }
                }
                Op::Silu(a) => {
                    let xv = self.value(*a);
                    let ga = grad_buf(&mut grads, *a, g.len());
                    for ((o, gi), &x) in ga.iter_mut().zip(&g).zip(xv) {
                        let s = sigmoid(x);
                        *o += gi * s * (1.0 + x * (1.0 - s));
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let xv = self.value(*a);
                    let ga = grad_buf(&mut grads, *a, g.len());
                    for ((o, gi), &x) in ga.iter_mut().zip(&g).zip(xv) {
                        if x >= *lo && x <= *hi {
                            *o += gi;
                        }
                    }
                }
                Op::LayerNorm { x, inv_std } => {
                    let yv = &node.value;
                    let gx = grad_buf(&mut grads, *x, r * c);
                    let n = c as f64;
                    for i in 0..r {
                        let gy = &g[i * c..(i + 1) * c];
                        let y = &yv[i * c..(i + 1) * c];
                        let mean_g = gy.iter().sum::<f64>() / n;
                        let mean_gy = dot(gy, y) / n;
                        let is = inv_std[i];
                        for j in 0..c {
                            gx[i * c + j] += is * (gy[j] - mean_g - y[j] * mean_gy);
                        }
                    }
                }
                Op::CausalSoftmax(a) => {
                    let yv = &node.value;
                    let ga = grad_buf(&mut grads, *a, r * c);
                    for i in 0..r {
                        let gy = &g[i * c..(i + 1) * c];
                        let y = &yv[i * c..(i + 1) * c];
                        let inner = dot(gy, y);
                        for j in 0..c {
                            ga[i * c + j] += y[j] * (gy[j] - inner);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let yv = &node.value;
                    let ga = grad_buf(&mut grads, *a, r * c);
                    for i in 0..r {
                        let gy = &g[i * c..(i + 1) * c];
                        let total: f64 = gy.iter().sum();
                        for j in 0..c {
                            ga[i * c + j] += gy[j] - yv[i * c + j].exp() * total;
                        }
                    }
                }
                Op::GatherRows(a, idx) => {
                    let (ar, _) = self.shape(*a);
                    let ga = grad_buf(&mut grads, *a, ar * c);
                    for (row, &src) in g.chunks_exact(c).zip(idx) {
                        for (o, gi) in ga[src * c..(src + 1) * c].iter_mut().zip(row) {
                            *o += gi;
                        }
                    }
                }
                Op::PickCols(a, idx) => {
                    let (_, ac) = self.shape(*a);
                    let ga = grad_buf(&mut grads, *a, r * ac);
                    for (i, &j) in idx.iter().enumerate() {
                        ga[i * ac + j] += g[i];
                    }
                }
                Op::SliceCols(a, start) => {
                    let (_, ac) = self.shape(*a);
                    let ga = grad_buf(&mut grads, *a, r * ac);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * ac + start + j] += g[i * c + j];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let (_, pc) = self.shape(p);
                        let gp = grad_buf(&mut grads, p, r * pc);
                        for i in 0..r {
                            for j in 0..pc {
                                gp[i * pc + j] += g[i * c + start + j];
                            }
                        }
                        start += pc;
                    }
                }
                Op::Sum(a) => {
                    let (ar, ac) = self.shape(*a);
                    let ga = grad_buf(&mut grads, *a, ar * ac);
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
        }
        out
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    let buf = grad_buf(grads, v, g.len());
    for (o, gi) in buf.iter_mut().zip(g) {
        *o += gi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik != 0.0 {
                axpy(aik, &b[kk * n..(kk + 1) * n], orow);
            }
        }
    }
}

/// In-place numerically stable log-softmax of one row.
pub fn log_softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Pairwise summation; keeps reduction order fixed and error at O(log n).
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}
