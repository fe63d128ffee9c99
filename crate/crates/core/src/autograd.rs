//! Minimal reverse-mode differentiation over row-major f64 matrices.
//!
//! Every value is a 2-D [`Tensor`]; vectors are `(1, n)`. A [`Graph`] records
//! operations as they are applied and [`Graph::backward`] propagates the
//! gradient of a scalar output back to every node. One graph is built per
//! example, which keeps the ops free of a batch dimension and lets examples
//! run on separate threads.

use std::sync::Arc;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor {rows}x{cols} given {} values", data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self { rows: 1, cols: data.len(), data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    // op(a) is m x k, op(b) is k x n
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Key indices for each query of a windowed attention, `queries x keys`.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub queries: usize,
    pub keys_per_query: usize,
    pub index: Vec<u32>,
}

impl Neighborhood {
    /// Clamped `window x window` neighbourhoods on an `h x w` token grid. Windows
    /// near the border shift inward so every query sees `min(window, h) *
    /// min(window, w)` keys.
    pub fn clamped(h: usize, w: usize, window: usize) -> Self {
        let kh = window.min(h);
        let kw = window.min(w);
        let mut index = Vec::with_capacity(h * w * kh * kw);
        for r in 0..h {
            let r0 = window_start(r, h, window);
            for c in 0..w {
                let c0 = window_start(c, w, window);
                for dr in 0..kh {
                    for dc in 0..kw {
                        index.push(((r0 + dr) * w + c0 + dc) as u32);
                    }
                }
            }
        }
        Self { queries: h * w, keys_per_query: kh * kw, index }
    }

    /// Every query attends to every token.
    pub fn global(n: usize) -> Self {
        let index = (0..n).flat_map(|_| 0..n as u32).collect();
        Self { queries: n, keys_per_query: n, index }
    }

    pub fn keys(&self, q: usize) -> &[u32] {
        &self.index[q * self.keys_per_query..(q + 1) * self.keys_per_query]
    }
}

/// First row (or column) of the clamped window around `pos`.
pub fn window_start(pos: usize, extent: usize, window: usize) -> usize {
    let k = window.min(extent);
    pos.saturating_sub(window / 2).min(extent - k)
}

/// Index table for [`Graph::gather`]: `out.data[j] = src.data[index[j]]`, or 0
/// where the entry is [`GATHER_ZERO`].
#[derive(Debug, Clone)]
pub struct GatherIndex {
    pub rows: usize,
    pub cols: usize,
    pub index: Vec<u32>,
}

pub const GATHER_ZERO: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Relu(Var),
    Geglu(Var),
    RmsNorm { x: Var, inv_rms: Vec<f64> },
    Modulate { x: Var, scale: Var, shift: Var },
    Lerp { weight: Var, a: Var, b: Var },
    ColSlice { x: Var, start: usize },
    RowSlice { x: Var, start: usize },
    Gather { x: Var, index: Arc<GatherIndex> },
    Attention { q: Var, k: Var, v: Var, heads: usize, nb: Arc<Neighborhood>, probs: Vec<f64> },
    Mse { x: Var, target: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

const RMS_EPS: f64 = 1e-6;

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Operation tape for one forward pass.
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.rows, "matmul {:?} x {:?}", ta.shape(), tb.shape());
        let mut out = Tensor::zeros(ta.rows, tb.cols);
        gemm(ta.rows, ta.cols, tb.cols, &ta.data, false, &tb.data, false, &mut out.data, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `x W + b` with `W` stored `(in, out)` and `b` a row vector.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.rows, ta.cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the row vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((1, ta.cols), tb.shape(), "add_row shape mismatch");
        let mut out = ta.clone();
        for row in out.data.chunks_mut(ta.cols) {
            for (o, &bb) in row.iter_mut().zip(&tb.data) {
                *o += bb;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::AddRow(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x *= s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x = f(*x));
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Splits columns into halves `(a, g)` and returns `a * gelu(g)`.
    pub fn geglu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        assert!(t.cols % 2 == 0, "geglu needs an even width");
        let half = t.cols / 2;
        let mut out = Tensor::zeros(t.rows, half);
        for (o, row) in out.data.chunks_mut(half).zip(t.data.chunks(t.cols)) {
            for j in 0..half {
                o[j] = row[j] * gelu(row[half + j]);
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Geglu(x), rg)
    }

    /// Row-wise `x / sqrt(mean(x²) + eps)`.
    pub fn rms_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = t.clone();
        let mut inv_rms = Vec::with_capacity(t.rows);
        for row in out.data.chunks_mut(t.cols) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / t.cols as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            row.iter_mut().for_each(|v| *v *= inv);
            inv_rms.push(inv);
        }
        let rg = self.rg(x);
        self.push(out, Op::RmsNorm { x, inv_rms }, rg)
    }

    /// `x * (1 + scale) + shift` with row-vector `scale` and `shift`.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (t, s, b) = (self.value(x), self.value(scale), self.value(shift));
        assert_eq!((1, t.cols), s.shape());
        assert_eq!((1, t.cols), b.shape());
        let mut out = t.clone();
        for row in out.data.chunks_mut(t.cols) {
            for ((o, &sc), &sh) in row.iter_mut().zip(&s.data).zip(&b.data) {
                *o = *o * (1.0 + sc) + sh;
            }
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        self.push(out, Op::Modulate { x, scale, shift }, rg)
    }

    /// Per-column interpolation `weight * a + (1 - weight) * b`.
    pub fn lerp(&mut self, weight: Var, a: Var, b: Var) -> Var {
        let (m, ta, tb) = (self.value(weight), self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape());
        assert_eq!((1, ta.cols), m.shape());
        let mut out = Tensor::zeros(ta.rows, ta.cols);
        for ((o, ra), rb) in out.data.chunks_mut(ta.cols).zip(ta.data.chunks(ta.cols)).zip(tb.data.chunks(ta.cols)) {
            for j in 0..ta.cols {
                o[j] = m.data[j] * ra[j] + (1.0 - m.data[j]) * rb[j];
            }
        }
        let rg = self.rg(weight) || self.rg(a) || self.rg(b);
        self.push(out, Op::Lerp { weight, a, b }, rg)
    }

    pub fn col_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        assert!(start + len <= t.cols);
        let mut data = Vec::with_capacity(t.rows * len);
        for row in t.data.chunks(t.cols) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::new(t.rows, len, data);
        let rg = self.rg(x);
        self.push(out, Op::ColSlice { x, start }, rg)
    }

    pub fn row_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        assert!(start + len <= t.rows, "row_slice {start}+{len} of {}", t.rows);
        let out = Tensor::new(len, t.cols, t.data[start * t.cols..(start + len) * t.cols].to_vec());
        let rg = self.rg(x);
        self.push(out, Op::RowSlice { x, start }, rg)
    }

    pub fn gather(&mut self, x: Var, index: Arc<GatherIndex>) -> Var {
        let t = self.value(x);
        let data = index
            .index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { t.data[i as usize] })
            .collect();
        let out = Tensor::new(index.rows, index.cols, data);
        let rg = self.rg(x);
        self.push(out, Op::Gather { x, index }, rg)
    }

    /// Multi-head scaled dot-product attention where query `i` only sees the
    /// keys listed in `nb.keys(i)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, nb: Arc<Neighborhood>) -> Var {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (n, c) = tq.shape();
        assert_eq!(tk.shape(), (n, c));
        assert_eq!(tv.shape(), (n, c));
        assert_eq!(nb.queries, n);
        assert!(c % heads == 0);
        let dh = c / heads;
        let kq = nb.keys_per_query;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; n * heads * kq];
        let mut out = Tensor::zeros(n, c);
        let mut scores = vec![0.0; kq];
        for i in 0..n {
            let keys = nb.keys(i);
            for h in 0..heads {
                let qi = &tq.data[i * c + h * dh..i * c + (h + 1) * dh];
                let mut max = f64::NEG_INFINITY;
                for (s, &j) in scores.iter_mut().zip(keys) {
                    let kj = &tk.data[j as usize * c + h * dh..j as usize * c + (h + 1) * dh];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let p = &mut probs[(i * heads + h) * kq..(i * heads + h + 1) * kq];
                let o = &mut out.data[i * c + h * dh..i * c + (h + 1) * dh];
                for ((pp, &s), &j) in p.iter_mut().zip(&scores).zip(keys) {
                    *pp = s / z;
                    let vj = &tv.data[j as usize * c + h * dh..j as usize * c + (h + 1) * dh];
                    for (oo, &vv) in o.iter_mut().zip(vj) {
                        *oo += *pp * vv;
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, Op::Attention { q, k, v, heads, nb, probs }, rg)
    }

    /// Mean squared error against a constant target, as a `(1, 1)` tensor.
    pub fn mse(&mut self, x: Var, target: Vec<f64>) -> Var {
        let t = self.value(x);
        assert_eq!(t.len(), target.len());
        let loss = t.data.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::new(1, 1, vec![loss]), Op::Mse { x, target }, rg)
    }

    /// Gradients of the scalar `output` with respect to every node. Entries
    /// are `None` for nodes that do not require gradients or are unreachable.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::new(1, 1, vec![1.0]));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    gemm(ta.rows, tb.cols, ta.cols, &g.data, false, &tb.data, true, &mut da.data, 0.0);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = Tensor::zeros(tb.rows, tb.cols);
                    gemm(ta.cols, ta.rows, tb.cols, &ta.data, true, &g.data, false, &mut db.data, 0.0);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let mut neg = g.clone();
                neg.data.iter_mut().for_each(|x| *x = -*x);
                self.accumulate(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = g.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
                let db = g.data.iter().zip(&ta.data).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, Tensor::new(g.rows, g.cols, da));
                self.accumulate(grads, *b, Tensor::new(g.rows, g.cols, db));
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    self.accumulate(grads, *b, col_sums(g));
                }
            }
            Op::Scale(a, s) => {
                let d = g.data.iter().map(|x| x * s).collect();
                self.accumulate(grads, *a, Tensor::new(g.rows, g.cols, d));
            }
            Op::Silu(a) => {
                let ta = self.value(*a);
                let d = g
                    .data
                    .iter()
                    .zip(&ta.data)
                    .map(|(gg, &x)| {
                        let s = sigmoid(x);
                        gg * (s + x * s * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.rows, g.cols, d));
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let d = g.data.iter().zip(&ta.data).map(|(gg, &x)| if x > 0.0 { *gg } else { 0.0 }).collect();
                self.accumulate(grads, *a, Tensor::new(g.rows, g.cols, d));
            }
            Op::Geglu(x) => {
                let t = self.value(*x);
                let half = t.cols / 2;
                let mut d = Tensor::zeros(t.rows, t.cols);
                for ((drow, row), grow) in d.data.chunks_mut(t.cols).zip(t.data.chunks(t.cols)).zip(g.data.chunks(half)) {
                    for j in 0..half {
                        let (a, gate) = (row[j], row[half + j]);
                        drow[j] = grow[j] * gelu(gate);
                        drow[half + j] = grow[j] * a * gelu_grad(gate);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::RmsNorm { x, inv_rms } => {
                let y = &node.value;
                let cols = y.cols as f64;
                let mut d = Tensor::zeros(y.rows, y.cols);
                for (r, ((drow, yrow), grow)) in
                    d.data.chunks_mut(y.cols).zip(y.data.chunks(y.cols)).zip(g.data.chunks(y.cols)).enumerate()
                {
                    let dot = yrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>() / cols;
                    for j in 0..y.cols {
                        drow[j] = inv_rms[r] * (grow[j] - yrow[j] * dot);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Modulate { x, scale, shift } => {
                let (tx, ts) = (self.value(*x), self.value(*scale));
                let c = tx.cols;
                if self.rg(*x) {
                    let mut dx = g.clone();
                    for row in dx.data.chunks_mut(c) {
                        for (v, &s) in row.iter_mut().zip(&ts.data) {
                            *v *= 1.0 + s;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*scale) {
                    let mut ds = Tensor::zeros(1, c);
                    for (grow, xrow) in g.data.chunks(c).zip(tx.data.chunks(c)) {
                        for j in 0..c {
                            ds.data[j] += grow[j] * xrow[j];
                        }
                    }
                    self.accumulate(grads, *scale, ds);
                }
                if self.rg(*shift) {
                    self.accumulate(grads, *shift, col_sums(g));
                }
            }
            Op::Lerp { weight, a, b } => {
                let (m, ta, tb) = (self.value(*weight), self.value(*a), self.value(*b));
                let c = ta.cols;
                if self.rg(*weight) {
                    let mut dm = Tensor::zeros(1, c);
                    for ((grow, ra), rb) in g.data.chunks(c).zip(ta.data.chunks(c)).zip(tb.data.chunks(c)) {
                        for j in 0..c {
                            dm.data[j] += grow[j] * (ra[j] - rb[j]);
                        }
                    }
                    self.accumulate(grads, *weight, dm);
                }
                if self.rg(*a) {
                    let mut da = g.clone();
                    for row in da.data.chunks_mut(c) {
                        row.iter_mut().zip(&m.data).for_each(|(v, w)| *v *= w);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = g.clone();
                    for row in db.data.chunks_mut(c) {
                        row.iter_mut().zip(&m.data).for_each(|(v, w)| *v *= 1.0 - w);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::ColSlice { x, start } => {
                let t = self.value(*x);
                let mut d = Tensor::zeros(t.rows, t.cols);
                for (drow, grow) in d.data.chunks_mut(t.cols).zip(g.data.chunks(g.cols)) {
                    drow[*start..*start + g.cols].copy_from_slice(grow);
                }
                self.accumulate(grads, *x, d);
            }
            Op::RowSlice { x, start } => {
                let t = self.value(*x);
                let mut d = Tensor::zeros(t.rows, t.cols);
                d.data[start * t.cols..(start + g.rows) * t.cols].copy_from_slice(&g.data);
                self.accumulate(grads, *x, d);
            }
            Op::Gather { x, index } => {
                let t = self.value(*x);
                let mut d = Tensor::zeros(t.rows, t.cols);
                for (&i, &gg) in index.index.iter().zip(&g.data) {
                    if i != GATHER_ZERO {
                        d.data[i as usize] += gg;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Attention { q, k, v, heads, nb, probs } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, c) = tq.shape();
                let dh = c / heads;
                let kq = nb.keys_per_query;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Tensor::zeros(n, c);
                let mut dk = Tensor::zeros(n, c);
                let mut dv = Tensor::zeros(n, c);
                let mut dp = vec![0.0; kq];
                for i in 0..n {
                    let keys = nb.keys(i);
                    for h in 0..*heads {
                        let lo = h * dh;
                        let go = &g.data[i * c + lo..i * c + lo + dh];
                        let p = &probs[(i * heads + h) * kq..(i * heads + h + 1) * kq];
                        let mut dot = 0.0;
                        for ((d, &pp), &j) in dp.iter_mut().zip(p).zip(keys) {
                            let j = j as usize;
                            let vj = &tv.data[j * c + lo..j * c + lo + dh];
                            *d = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                            dot += pp * *d;
                            for (dvv, &gg) in dv.data[j * c + lo..j * c + lo + dh].iter_mut().zip(go) {
                                *dvv += pp * gg;
                            }
                        }
                        let qi: Vec<f64> = tq.data[i * c + lo..i * c + lo + dh].to_vec();
                        for ((&d, &pp), &j) in dp.iter().zip(p).zip(keys) {
                            let j = j as usize;
                            let ds = pp * (d - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for e in 0..dh {
                                dq.data[i * c + lo + e] += ds * tk.data[j * c + lo + e];
                                dk.data[j * c + lo + e] += ds * qi[e];
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::Mse { x, target } => {
                let t = self.value(*x);
                let s = 2.0 * g.data[0] / t.len() as f64;
                let d = t.data.iter().zip(target).map(|(a, b)| s * (a - b)).collect();
                self.accumulate(grads, *x, Tensor::new(t.rows, t.cols, d));
            }
        }
    }
}

fn col_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols);
    for row in g.data.chunks(g.cols) {
        for (o, v) in out.data.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d loss / d leaf for every entry of every leaf.
    fn check<F>(leaves: Vec<Tensor>, build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let eval = |ls: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ls.iter().map(|t| g.leaf(t.clone())).collect();
            let out = build(&mut g, &vars);
            (g, vars, out)
        };
        let (g, vars, out) = eval(&leaves);
        let grads = g.backward(out);
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vars[li]).cloned().unwrap_or_else(|| Tensor::zeros(leaf.rows, leaf.cols));
            for e in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data[e] += h;
                let mut minus = leaves.clone();
                minus[li].data[e] -= h;
                let (gp, _, op) = eval(&plus);
                let (gm, _, om) = eval(&minus);
                let fd = (gp.value(op).data[0] - gm.value(om).data[0]) / (2.0 * h);
                let an = analytic.data[e];
                let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-6));
                assert!(err < 1e-5 || (fd - an).abs() < 1e-9, "leaf {li} entry {e}: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn grad_matmul_bias_silu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, 3, 4);
        let w = rand_tensor(&mut rng, 4, 5);
        let b = rand_tensor(&mut rng, 1, 5);
        let target: Vec<f64> = (0..15).map(|i| i as f64 * 0.1).collect();
        check(vec![x, w, b], move |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]));
            let y = g.silu(y);
            g.mse(y, target.clone())
        });
    }

    #[test]
    fn grad_norm_modulate_geglu() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, 4, 6);
        let s = rand_tensor(&mut rng, 1, 6);
        let sh = rand_tensor(&mut rng, 1, 6);
        check(vec![x, s, sh], |g, v| {
            let n = g.rms_norm(v[0]);
            let m = g.modulate(n, v[1], v[2]);
            let y = g.geglu(m);
            g.mse(y, vec![0.3; 12])
        });
    }

    #[test]
    fn grad_lerp_slices_gather_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = rand_tensor(&mut rng, 1, 3);
        let a = rand_tensor(&mut rng, 4, 3);
        let b = rand_tensor(&mut rng, 4, 3);
        let index = Arc::new(GatherIndex { rows: 2, cols: 3, index: vec![5, GATHER_ZERO, 0, 5, 11, 7] });
        check(vec![w, a, b], move |g, v| {
            let l = g.lerp(v[0], v[1], v[2]);
            let r = g.relu(l);
            let s = g.sub(r, v[2]);
            let m = g.mul(s, v[1]);
            let c = g.col_slice(m, 1, 2);
            let rr = g.row_slice(c, 1, 2);
            let gg = g.gather(m, index.clone());
            let sc = g.scale(gg, 0.7);
            let c2 = g.col_slice(sc, 0, 2);
            let sum = g.add(rr, c2);
            g.mse(sum, vec![0.1; 4])
        });
    }

    #[test]
    fn grad_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = rand_tensor(&mut rng, 9, 4);
        let k = rand_tensor(&mut rng, 9, 4);
        let v = rand_tensor(&mut rng, 9, 4);
        let nb = Arc::new(Neighborhood::clamped(3, 3, 3));
        let nb2 = Arc::new(Neighborhood::global(9));
        check(vec![q, k, v], move |g, vars| {
            let a = g.attention(vars[0], vars[1], vars[2], 2, nb.clone());
            let b = g.attention(a, vars[1], vars[2], 1, nb2.clone());
            g.mse(b, vec![0.2; 36])
        });
    }

    #[test]
    fn clamped_windows() {
        let nb = Neighborhood::clamped(5, 6, 3);
        assert_eq!(nb.keys_per_query, 9);
        // corner query sees rows 0..3, cols 0..3
        assert_eq!(nb.keys(0), &[0, 1, 2, 6, 7, 8, 12, 13, 14]);
        // window shifts inward at the far corner
        assert_eq!(nb.keys(29)[0], (2 * 6 + 3) as u32);
        let small = Neighborhood::clamped(2, 2, 7);
        assert_eq!(small.keys_per_query, 4);
        assert_eq!(window_start(3, 16, 7), 0);
        assert_eq!(window_start(8, 16, 7), 5);
        assert_eq!(window_start(15, 16, 7), 9);
    }

    #[test]
    fn gemm_transposes() {
        // [[1,2],[3,4]]^T * [[1,0],[0,1]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let id = [1.0, 0.0, 0.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, true, &id, false, &mut c, 0.0);
        assert_eq!(c, [1.0, 3.0, 2.0, 4.0]);
        gemm(2, 2, 2, &id, false, &a, true, &mut c, 0.0);
        assert_eq!(c, [1.0, 3.0, 2.0, 4.0]);
    }
}
