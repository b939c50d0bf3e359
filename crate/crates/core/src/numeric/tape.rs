//! Reverse-mode tape over row-major matrices.
//!
//! Every value on the tape is a `rows × cols` matrix (scalars are `1 × 1`).
//! Parameters are read in place from a borrowed [`ParamStore`]; their
//! gradients are collected into [`Gradients`] by [`Tape::backward`].

use super::kernels::{self, gemm, MatMut, MatRef};
use super::params::{Gradients, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub(crate) fn var_at(index: usize) -> Var {
    Var(index)
}

/// Key mask and causal flag for [`Tape::attention`].
#[derive(Clone, Debug, Default)]
pub struct AttnMask {
    /// `false` entries are excluded as keys.
    pub key_valid: Option<Vec<bool>>,
    /// Query `i` may only attend to keys `j <= i`.
    pub causal: bool,
}

impl AttnMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn causal() -> Self {
        Self {
            key_valid: None,
            causal: true,
        }
    }

    pub fn keys(valid: Vec<bool>) -> Self {
        Self {
            key_valid: Some(valid),
            causal: false,
        }
    }

    fn allows(&self, query: usize, key: usize) -> bool {
        !(self.causal && key > query) && self.key_valid.as_ref().is_none_or(|v| v[key])
    }
}

type Picks = Vec<(usize, usize, f64)>;

enum Op {
    Input,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    AddRowVec(Var, Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    Rows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Pick {
        x: Var,
        picks: Picks,
    },
    NegLogPick {
        x: Var,
        picks: Picks,
    },
    Sum(Var),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    decoder_passes: usize,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            decoder_passes: 0,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.node(v).op {
            Op::Param(id) => self.params.get(id).data(),
            _ => &self.node(v).value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn row(&self, v: Var, r: usize) -> &[f64] {
        let c = self.node(v).cols;
        &self.value(v)[r * c..(r + 1) * c]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        assert_eq!(self.shape(v), (1, 1), "not a scalar");
        self.value(v)[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Per-head attention probabilities (`heads × queries × keys`).
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.node(v).op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn note_decoder_pass(&mut self) {
        self.decoder_passes += 1;
    }

    pub fn decoder_passes(&self) -> usize {
        self.decoder_passes
    }

    // ---- leaves ----------------------------------------------------------

    pub fn input(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(value.len(), rows * cols, "input shape mismatch");
        self.push(rows, cols, value, false, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let t = self.params.get(id);
        let v = self.push(t.rows(), t.cols(), Vec::new(), true, Op::Param(id));
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Var {
        let id = self.params.expect_id(name);
        self.param(id)
    }

    // ---- ops -------------------------------------------------------------

    /// `a · b`, or `a · bᵀ` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (m, k) = self.shape(a);
        let (br, bc) = self.shape(b);
        let n = if trans_b { br } else { bc };
        let kb = if trans_b { bc } else { br };
        assert_eq!(k, kb, "matmul inner dimensions differ: {k} vs {kb}");
        let mut out = vec![0.0; m * n];
        let bref = if trans_b {
            MatRef::transposed(self.value(b), bc)
        } else {
            MatRef::rows(self.value(b), bc)
        };
        gemm(
            m,
            k,
            n,
            1.0,
            MatRef::rows(self.value(a), k),
            bref,
            0.0,
            MatMut::rows(&mut out, n),
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(m, n, out, ng, Op::MatMul { a, b, trans_b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(a) || self.ng(b);
        self.push(r, c, out, ng, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(a) || self.ng(b);
        self.push(r, c, out, ng, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(a);
        self.push(r, c, out, ng, Op::Scale(a, factor))
    }

    pub fn add_const(&mut self, a: Var, c0: f64) -> Var {
        let out = self.value(a).iter().map(|x| x + c0).collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(a);
        self.push(r, c, out, ng, Op::AddConst(a))
    }

    /// Adds the `1 × cols` row vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(b), (1, c), "add_row expects a 1×{c} bias");
        let bv = self.value(b);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let ng = self.ng(x) || self.ng(b);
        self.push(r, c, out, ng, Op::AddRowVec(x, b))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let (r, c) = self.shape(x);
        let ng = self.ng(x);
        self.push(r, c, out, ng, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let (r, c) = self.shape(x);
        let ng = self.ng(x);
        self.push(r, c, out, ng, Op::Relu(x))
    }

    /// Row-wise layer normalization with `1 × cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gain), (1, c), "layer_norm gain shape");
        assert_eq!(self.shape(bias), (1, c), "layer_norm bias shape");
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = Vec::with_capacity(r * c);
        let mut xhat = Vec::with_capacity(r * c);
        let mut rstds = Vec::with_capacity(r);
        for row in self.value(x).chunks(c) {
            let (mean, rstd) = kernels::moments(row, eps);
            rstds.push(rstd);
            for j in 0..c {
                let h = (row[j] - mean) * rstd;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            r,
            c,
            out,
            ng,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd: rstds,
            },
        )
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// queries (`n × d`), keys and values (`m × d`). Heads split `d` evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &AttnMask) -> Var {
        let (n, d) = self.shape(q);
        let (m, dk) = self.shape(k);
        assert_eq!(dk, d, "attention key width");
        assert_eq!(self.shape(v), (m, d), "attention value shape");
        assert!(
            heads > 0 && d % heads == 0,
            "heads must divide the model width"
        );
        if let Some(valid) = &mask.key_valid {
            assert_eq!(valid.len(), m, "key mask length");
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * d];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for h in 0..heads {
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            gemm(
                n,
                dh,
                m,
                scale,
                MatRef {
                    data: qv,
                    offset: h * dh,
                    row_stride: d,
                    col_stride: 1,
                },
                MatRef {
                    data: kv,
                    offset: h * dh,
                    row_stride: 1,
                    col_stride: d,
                },
                0.0,
                MatMut::rows(p, m),
            );
            for i in 0..n {
                let row = &mut p[i * m..(i + 1) * m];
                for (j, s) in row.iter_mut().enumerate() {
                    if !mask.allows(i, j) {
                        *s = f64::NEG_INFINITY;
                    }
                }
                kernels::softmax_in_place(row);
            }
            gemm(
                n,
                m,
                dh,
                1.0,
                MatRef::rows(p, m),
                MatRef {
                    data: vv,
                    offset: h * dh,
                    row_stride: d,
                    col_stride: 1,
                },
                0.0,
                MatMut {
                    data: &mut out,
                    offset: h * dh,
                    row_stride: d,
                    col_stride: 1,
                },
            );
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            n,
            d,
            out,
            ng,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    /// Embedding lookup: row `i` of the output is row `rows[i]` of `table`.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Var {
        let (tr, c) = self.shape(table);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            assert!(r < tr, "gather row {r} out of range {tr}");
            out.extend_from_slice(&tv[r * c..(r + 1) * c]);
        }
        let ng = self.ng(table);
        self.push(
            rows.len(),
            c,
            out,
            ng,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
        )
    }

    /// Rows `start..start + len` of `x`.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(x);
        assert!(start + len <= r && len > 0, "row slice out of range");
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let ng = self.ng(x);
        self.push(len, c, out, ng, Op::Rows { x, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let c = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.shape(p);
            assert_eq!(pc, c, "concat column mismatch");
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(rows, c, out, ng, Op::ConcatRows(parts.to_vec()))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut out = self.value(x).to_vec();
        out.chunks_mut(c).for_each(kernels::softmax_in_place);
        let ng = self.ng(x);
        self.push(r, c, out, ng, Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut out = self.value(x).to_vec();
        out.chunks_mut(c).for_each(kernels::log_softmax_in_place);
        let ng = self.ng(x);
        self.push(r, c, out, ng, Op::LogSoftmaxRows(x))
    }

    /// Scalar `Σ w · x[r, c]` over `(r, c, w)` picks.
    pub fn pick(&mut self, x: Var, picks: Picks) -> Var {
        let (_, c) = self.shape(x);
        let xv = self.value(x);
        let s = picks.iter().map(|&(r, j, w)| w * xv[r * c + j]).sum();
        let ng = self.ng(x);
        self.push(1, 1, vec![s], ng, Op::Pick { x, picks })
    }

    /// Scalar `Σ w · (−ln x[r, c])` over `(r, c, w)` picks.
    pub fn neg_log_pick(&mut self, x: Var, picks: Picks) -> Var {
        let (_, c) = self.shape(x);
        let xv = self.value(x);
        let s = picks.iter().map(|&(r, j, w)| -w * xv[r * c + j].ln()).sum();
        let ng = self.ng(x);
        self.push(1, 1, vec![s], ng, Op::NegLogPick { x, picks })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(1, 1, vec![s], ng, Op::Sum(x))
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.input(1, 1, vec![value])
    }

    // ---- reverse pass ----------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every parameter used.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::new(self.params.len());

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads, &mut out);
        }
        out
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Input => {}
            Op::Param(id) => out.accumulate_slice(*id, g),
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.shape(*a);
                let n = cols;
                let (_, bc) = self.shape(*b);
                if self.ng(*a) {
                    // da = g · bᵀ  (or g · b when b was used transposed)
                    let bref = if *trans_b {
                        MatRef::rows(self.value(*b), bc)
                    } else {
                        MatRef::transposed(self.value(*b), bc)
                    };
                    let da = grad_buf(grads, *a, m * k);
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        MatRef::rows(g, n),
                        bref,
                        1.0,
                        MatMut::rows(da, k),
                    );
                }
                if self.ng(*b) {
                    let av = self.value(*a);
                    let db = grad_buf(grads, *b, k * n);
                    if *trans_b {
                        // b is n×k: db = gᵀ · a
                        gemm(
                            n,
                            m,
                            k,
                            1.0,
                            MatRef::transposed(g, n),
                            MatRef::rows(av, k),
                            1.0,
                            MatMut::rows(db, k),
                        );
                    } else {
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            MatRef::transposed(av, k),
                            MatRef::rows(g, n),
                            1.0,
                            MatMut::rows(db, n),
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g, 1.0);
                self.accum(grads, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g, 1.0);
                self.accum(grads, *b, g, -1.0);
            }
            Op::Scale(a, f) => self.accum(grads, *a, g, *f),
            Op::AddConst(a) => self.accum(grads, *a, g, 1.0),
            Op::AddRowVec(x, b) => {
                self.accum(grads, *x, g, 1.0);
                if self.ng(*b) {
                    let db = grad_buf(grads, *b, cols);
                    for row in g.chunks(cols) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                }
            }
            Op::Gelu(x) => {
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let dx = grad_buf(grads, *x, rows * cols);
                    for i in 0..dx.len() {
                        dx[i] += g[i] * kernels::gelu_grad(xv[i]);
                    }
                }
            }
            Op::Relu(x) => {
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let dx = grad_buf(grads, *x, rows * cols);
                    for i in 0..dx.len() {
                        if xv[i] > 0.0 {
                            dx[i] += g[i];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                if self.ng(*x) {
                    let dx = grad_buf(grads, *x, rows * cols);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..cols {
                            dxhat[j] = gr[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * hr[j];
                        }
                        mean_d /= cols as f64;
                        mean_dh /= cols as f64;
                        let dr = &mut dx[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            dr[j] += rstd[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
                if self.ng(*gain) {
                    let dg = grad_buf(grads, *gain, cols);
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.ng(*bias) {
                    let db = grad_buf(grads, *bias, cols);
                    for gr in g.chunks(cols) {
                        db.iter_mut().zip(gr).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                self.attention_backward(*q, *k, *v, *heads, probs, rows, cols, g, grads);
            }
            Op::Gather { table, rows: idx } => {
                if self.ng(*table) {
                    let (tr, c) = self.shape(*table);
                    let dt = grad_buf(grads, *table, tr * c);
                    for (i, &r) in idx.iter().enumerate() {
                        let src = &g[i * c..(i + 1) * c];
                        dt[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Rows { x, start } => {
                if self.ng(*x) {
                    let (xr, c) = self.shape(*x);
                    let dx = grad_buf(grads, *x, xr * c);
                    dx[start * c..(start + rows) * c]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, s)| *d += s);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accum(grads, p, &g[off..off + n], 1.0);
                    off += n;
                }
            }
            Op::SoftmaxRows(x) => {
                if self.ng(*x) {
                    let y = &node.value;
                    let dx = grad_buf(grads, *x, rows * cols);
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            dx[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                if self.ng(*x) {
                    let y = &node.value;
                    let dx = grad_buf(grads, *x, rows * cols);
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let total: f64 = gr.iter().sum();
                        for j in 0..cols {
                            dx[r * cols + j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::Pick { x, picks } => {
                if self.ng(*x) {
                    let (xr, c) = self.shape(*x);
                    let dx = grad_buf(grads, *x, xr * c);
                    for &(r, j, w) in picks {
                        dx[r * c + j] += w * g[0];
                    }
                }
            }
            Op::NegLogPick { x, picks } => {
                if self.ng(*x) {
                    let (xr, c) = self.shape(*x);
                    let xv = self.value(*x);
                    let dx = grad_buf(grads, *x, xr * c);
                    for &(r, j, w) in picks {
                        dx[r * c + j] -= w * g[0] / xv[r * c + j];
                    }
                }
            }
            Op::Sum(x) => {
                if self.ng(*x) {
                    let n = self.value(*x).len();
                    let dx = grad_buf(grads, *x, n);
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        n: usize,
        d: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let m = self.shape(k).0;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; m * d];
        let mut dv = vec![0.0; m * d];
        let mut ds = vec![0.0; n * m];
        for h in 0..heads {
            let p = &probs[h * n * m..(h + 1) * n * m];
            let g_h = MatRef {
                data: g,
                offset: h * dh,
                row_stride: d,
                col_stride: 1,
            };
            // dP = dO_h · V_hᵀ
            gemm(
                n,
                dh,
                m,
                1.0,
                g_h,
                MatRef {
                    data: vv,
                    offset: h * dh,
                    row_stride: 1,
                    col_stride: d,
                },
                0.0,
                MatMut::rows(&mut ds, m),
            );
            // dV_h = Pᵀ · dO_h
            gemm(
                m,
                n,
                dh,
                1.0,
                MatRef::transposed(p, m),
                g_h,
                0.0,
                MatMut {
                    data: &mut dv,
                    offset: h * dh,
                    row_stride: d,
                    col_stride: 1,
                },
            );
            // dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for i in 0..n {
                let pr = &p[i * m..(i + 1) * m];
                let dr = &mut ds[i * m..(i + 1) * m];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for j in 0..m {
                    dr[j] = pr[j] * (dr[j] - dot);
                }
            }
            gemm(
                n,
                m,
                dh,
                scale,
                MatRef::rows(&ds, m),
                MatRef {
                    data: kv,
                    offset: h * dh,
                    row_stride: d,
                    col_stride: 1,
                },
                0.0,
                MatMut {
                    data: &mut dq,
                    offset: h * dh,
                    row_stride: d,
                    col_stride: 1,
                },
            );
            gemm(
                m,
                n,
                dh,
                scale,
                MatRef::transposed(&ds, m),
                MatRef {
                    data: qv,
                    offset: h * dh,
                    row_stride: d,
                    col_stride: 1,
                },
                0.0,
                MatMut {
                    data: &mut dk,
                    offset: h * dh,
                    row_stride: d,
                    col_stride: 1,
                },
            );
        }
        self.accum(grads, q, &dq, 1.0);
        self.accum(grads, k, &dk, 1.0);
        self.accum(grads, v, &dv, 1.0);
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], factor: f64) {
        if !self.ng(v) {
            return;
        }
        let buf = grad_buf(grads, v, g.len());
        if factor == 1.0 {
            buf.iter_mut().zip(g).for_each(|(d, s)| *d += s);
        } else {
            buf.iter_mut().zip(g).for_each(|(d, s)| *d += factor * s);
        }
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}
