//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and returns one gradient
//! buffer per node; [`Graph::accumulate_param_grads`] folds the gradients of
//! parameter leaves back into a [`ParamStore`].
//!
//! Operations are deliberately coarse (fused attention, depthwise
//! convolution, layer norm) so that a conformer forward pass produces a few
//! hundred nodes rather than millions.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Sequence layout of a row-stacked activation: `nseq` sequences of `n`
/// consecutive rows each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqLayout {
    pub nseq: usize,
    pub n: usize,
}

impl SeqLayout {
    pub fn rows(&self) -> usize {
        self.nseq * self.n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Centered window of radius `kernel / 2`.
    Same,
    /// Left-only padding of `kernel - 1`; output at `i` sees inputs `<= i`.
    Causal,
}

impl Padding {
    fn offset(self, kernel: usize) -> usize {
        match self {
            Padding::Same => kernel / 2,
            Padding::Causal => kernel - 1,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Swish(Var),
    Glu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: SeqLayout,
        heads: usize,
        probs: Vec<f64>,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
        b: Var,
        layout: SeqLayout,
        padding: Padding,
    },
    Im2Col {
        x: Var,
        layout: SeqLayout,
        kernel: usize,
        padding: Padding,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    ReplaceRows {
        x: Var,
        token: Var,
        rows: Vec<bool>,
    },
    ConcatCols(Vec<Var>),
    GroupChannels {
        x: Var,
        nseg: usize,
        channels: usize,
        n: usize,
    },
    MeanPool {
        x: Var,
        layout: SeqLayout,
    },
    GateMix {
        g: Var,
        inner: Var,
        prev: Var,
    },
    Huber {
        pred: Var,
        target: Tensor,
        rows: Vec<usize>,
        delta: f64,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of the loss with respect to every node on the tape.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).as_tensor(), Op::Param);
        self.param_vars.insert(id, v);
        v
    }

    /// Same as [`Graph::param`] but replaces the stored values, used by the
    /// finite-difference checker and by gate overrides.
    pub fn param_with_value(&mut self, id: ParamId, value: Tensor) -> Var {
        let v = self.push(value, Op::Param);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = super::tensor::matmul(self.value(a), self.value(b)).expect("matmul shapes");
        self.push(out, Op::MatMul(a, b))
    }

    /// `x + bias` with `bias` a `1 x cols` row broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(bias);
        assert_eq!(bv.len(), xv.cols, "bias width");
        let mut out = xv.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bv.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, bias))
    }

    /// Affine map `x w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let bv = self.value(b);
        assert!(av.same_shape(bv), "elementwise shape mismatch");
        Tensor {
            rows: av.rows,
            cols: av.cols,
            data: av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect(),
        }
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        Tensor {
            rows: av.rows,
            cols: av.cols,
            data: av.data.iter().map(|x| f(*x)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.map(a, |x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn swish(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x * sigmoid(x));
        self.push(out, Op::Swish(a))
    }

    /// Gated linear unit over the column axis: `[a | b] -> a * sigmoid(b)`.
    pub fn glu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert!(xv.cols % 2 == 0, "glu needs an even width");
        let half = xv.cols / 2;
        let mut out = Tensor::zeros(xv.rows, half);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let (a, b) = row.split_at(half);
            for ((o, a), b) in out.row_mut(r).iter_mut().zip(a).zip(b) {
                *o = a * sigmoid(*b);
            }
        }
        self.push(out, Op::Glu(x))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let gv = &self.value(gamma).data;
        let bv = &self.value(beta).data;
        let (rows, cols) = (xv.rows, xv.cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * gv[c] + bv[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Multi-head scaled dot-product attention. `q`, `k`, `v` are
    /// `(nseq * n) x d`; each sequence attends only within itself. Logits are
    /// scaled by `1 / sqrt(d / heads)`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: SeqLayout,
        heads: usize,
        causal: bool,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        assert_eq!(qv.rows, layout.rows());
        assert!(qv.same_shape(kv) && qv.same_shape(vv));
        assert!(heads > 0 && d % heads == 0, "width must divide into heads");
        let dh = d / heads;
        let n = layout.n;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; layout.nseq * heads * n * n];
        let mut out = Tensor::zeros(qv.rows, d);
        for s in 0..layout.nseq {
            for h in 0..heads {
                let base = s * n * d + h * dh;
                let p = &mut probs[(s * heads + h) * n * n..(s * heads + h + 1) * n * n];
                gemm(
                    n,
                    dh,
                    n,
                    scale,
                    &qv.data[base..],
                    d as isize,
                    1,
                    &kv.data[base..],
                    1,
                    d as isize,
                    0.0,
                    p,
                    n as isize,
                    1,
                );
                for i in 0..n {
                    let row = &mut p[i * n..(i + 1) * n];
                    let limit = if causal { i + 1 } else { n };
                    let max = row[..limit].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for x in row[..limit].iter_mut() {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    for x in row[..limit].iter_mut() {
                        *x /= sum;
                    }
                    for x in row[limit..].iter_mut() {
                        *x = 0.0;
                    }
                }
                gemm(
                    n,
                    n,
                    dh,
                    1.0,
                    p,
                    n as isize,
                    1,
                    &vv.data[base..],
                    d as isize,
                    1,
                    0.0,
                    &mut out.data[base..],
                    d as isize,
                    1,
                );
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            },
        )
    }

    /// Attention weights recorded by an attention node, laid out as
    /// `[seq][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Per-column convolution along the token axis. `w` is `kernel x d`,
    /// `b` is `1 x d`.
    pub fn depthwise_conv(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        layout: SeqLayout,
        padding: Padding,
    ) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let d = xv.cols;
        let kernel = wv.rows;
        assert_eq!(wv.cols, d);
        assert_eq!(xv.rows, layout.rows());
        let off = padding.offset(kernel);
        let n = layout.n;
        let mut out = Tensor::zeros(xv.rows, d);
        for s in 0..layout.nseq {
            for i in 0..n {
                let orow = &mut out.data[(s * n + i) * d..(s * n + i + 1) * d];
                orow.copy_from_slice(&bv.data);
                for kk in 0..kernel {
                    let j = i as isize + kk as isize - off as isize;
                    if j < 0 || j >= n as isize {
                        continue;
                    }
                    let xrow = xv.row(s * n + j as usize);
                    let wrow = wv.row(kk);
                    for c in 0..d {
                        orow[c] += wrow[c] * xrow[c];
                    }
                }
            }
        }
        self.push(
            out,
            Op::DepthwiseConv {
                x,
                w,
                b,
                layout,
                padding,
            },
        )
    }

    /// Unfolds each token's neighbourhood into columns: output row `i` is
    /// `[x[i - off], ..., x[i - off + kernel - 1]]` with zeros outside the
    /// sequence. Followed by a matmul this is a full 1-D convolution.
    pub fn im2col(&mut self, x: Var, layout: SeqLayout, kernel: usize, padding: Padding) -> Var {
        let xv = self.value(x);
        let cin = xv.cols;
        assert_eq!(xv.rows, layout.rows());
        let off = padding.offset(kernel);
        let n = layout.n;
        let mut out = Tensor::zeros(xv.rows, kernel * cin);
        for s in 0..layout.nseq {
            for i in 0..n {
                let orow = out.row_mut(s * n + i);
                for kk in 0..kernel {
                    let j = i as isize + kk as isize - off as isize;
                    if j < 0 || j >= n as isize {
                        continue;
                    }
                    orow[kk * cin..(kk + 1) * cin].copy_from_slice(xv.row(s * n + j as usize));
                }
            }
        }
        self.push(
            out,
            Op::Im2Col {
                x,
                layout,
                kernel,
                padding,
            },
        )
    }

    /// Row gather from an embedding table.
    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let tv = self.value(table);
        let mut out = Tensor::zeros(idx.len(), tv.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(i));
        }
        self.push(out, Op::GatherRows { table, idx })
    }

    /// Rows flagged in `rows` are replaced by the single-row `token`.
    pub fn replace_rows(&mut self, x: Var, token: Var, rows: Vec<bool>) -> Var {
        let xv = self.value(x);
        let tv = self.value(token);
        assert_eq!(rows.len(), xv.rows);
        assert_eq!(tv.len(), xv.cols);
        let mut out = xv.clone();
        for (r, &m) in rows.iter().enumerate() {
            if m {
                out.row_mut(r).copy_from_slice(&tv.data);
            }
        }
        self.push(out, Op::ReplaceRows { x, token, rows })
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in &parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows, rows);
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        self.push(out, Op::ConcatCols(parts))
    }

    /// Rearranges rows ordered `(segment, channel, token)` with width `d`
    /// into rows ordered `(segment, token)` with width `channels * d`.
    pub fn group_channels(&mut self, x: Var, nseg: usize, channels: usize, n: usize) -> Var {
        let xv = self.value(x);
        let d = xv.cols;
        assert_eq!(xv.rows, nseg * channels * n);
        let mut out = Tensor::zeros(nseg * n, channels * d);
        for b in 0..nseg {
            for c in 0..channels {
                for i in 0..n {
                    let src = xv.row((b * channels + c) * n + i);
                    let dst = (b * n + i) * channels * d + c * d;
                    out.data[dst..dst + d].copy_from_slice(src);
                }
            }
        }
        self.push(
            out,
            Op::GroupChannels {
                x,
                nseg,
                channels,
                n,
            },
        )
    }

    /// Mean over the rows of each sequence: `(nseq * n) x f -> nseq x f`.
    pub fn mean_pool(&mut self, x: Var, layout: SeqLayout) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows, layout.rows());
        let f = xv.cols;
        let mut out = Tensor::zeros(layout.nseq, f);
        let inv = 1.0 / layout.n as f64;
        for s in 0..layout.nseq {
            let orow = out.row_mut(s);
            for i in 0..layout.n {
                for (o, v) in orow.iter_mut().zip(xv.row(s * layout.n + i)) {
                    *o += v;
                }
            }
            orow.iter_mut().for_each(|o| *o *= inv);
        }
        self.push(out, Op::MeanPool { x, layout })
    }

    /// Per-row convex blend `g * inner + (1 - g) * prev` with `g` of width 1.
    pub fn gate_mix(&mut self, g: Var, inner: Var, prev: Var) -> Var {
        let (gv, iv, pv) = (self.value(g), self.value(inner), self.value(prev));
        assert_eq!(gv.cols, 1);
        assert_eq!(gv.rows, iv.rows);
        assert!(iv.same_shape(pv));
        let mut out = Tensor::zeros(iv.rows, iv.cols);
        for r in 0..iv.rows {
            let gr = gv.data[r];
            for ((o, a), b) in out.row_mut(r).iter_mut().zip(iv.row(r)).zip(pv.row(r)) {
                *o = gr * a + (1.0 - gr) * b;
            }
        }
        self.push(out, Op::GateMix { g, inner, prev })
    }

    /// Mean Huber loss over all columns of the selected `rows` of `pred`
    /// against a fixed `target` of the same shape.
    pub fn huber_rows(&mut self, pred: Var, target: Tensor, rows: Vec<usize>, delta: f64) -> Var {
        let pv = self.value(pred);
        assert!(pv.same_shape(&target), "huber target shape");
        let cols = pv.cols;
        let count = (rows.len() * cols).max(1) as f64;
        let mut sum = 0.0;
        for &r in &rows {
            for (p, t) in pv.row(r).iter().zip(target.row(r)) {
                sum += huber_elem(t - p, delta);
            }
        }
        self.push(
            Tensor::scalar(sum / count),
            Op::Huber {
                pred,
                target,
                rows,
                delta,
            },
        )
    }

    /// Mean cross-entropy of row-wise softmax over `logits` against labels.
    pub fn softmax_xent(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, labels.len());
        let k = lv.cols;
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            assert!(y < k, "label out of range");
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for c in 0..k {
                probs[r * k + c] = (row[c] - lse).exp();
            }
            loss += lse - row[y];
        }
        let b = labels.len().max(1) as f64;
        self.push(
            Tensor::scalar(loss / b),
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            },
        )
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, kk, n) = (av.rows, av.cols, bv.cols);
                    {
                        let ga = acc(&mut grads, &self.nodes, *a);
                        // dA += dC * B^T
                        gemm(m, n, kk, 1.0, &g, n as isize, 1, &bv.data, 1, n as isize, 1.0, ga, kk as isize, 1);
                    }
                    let gb = acc(&mut grads, &self.nodes, *b);
                    // dB += A^T * dC
                    gemm(kk, m, n, 1.0, &av.data, 1, kk as isize, &g, n as isize, 1, 1.0, gb, n as isize, 1);
                }
                Op::AddRow(x, b) => {
                    let cols = node.value.cols;
                    {
                        let gx = acc(&mut grads, &self.nodes, *x);
                        gx.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                    let gb = acc(&mut grads, &self.nodes, *b);
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        let gv = acc(&mut grads, &self.nodes, *v);
                        gv.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                }
                Op::Sub(a, b) => {
                    {
                        let ga = acc(&mut grads, &self.nodes, *a);
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                    let gb = acc(&mut grads, &self.nodes, *b);
                    gb.iter_mut().zip(&g).for_each(|(x, y)| *x -= y);
                }
                Op::Mul(a, b) => {
                    let av = &self.value(*a).data;
                    let bv = &self.value(*b).data;
                    {
                        let ga = acc(&mut grads, &self.nodes, *a);
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    }
                    let gb = acc(&mut grads, &self.nodes, *b);
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
                Op::Scale(a, s) => {
                    let ga = acc(&mut grads, &self.nodes, *a);
                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x += s * y);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value.data;
                    let ga = acc(&mut grads, &self.nodes, *a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value.data;
                    let ga = acc(&mut grads, &self.nodes, *a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
                Op::Swish(a) => {
                    let x = &self.value(*a).data;
                    let ga = acc(&mut grads, &self.nodes, *a);
                    for i in 0..g.len() {
                        let s = sigmoid(x[i]);
                        ga[i] += g[i] * (s + x[i] * s * (1.0 - s));
                    }
                }
                Op::Glu(x) => {
                    let xv = self.value(*x);
                    let half = xv.cols / 2;
                    let gx = acc(&mut grads, &self.nodes, *x);
                    for r in 0..xv.rows {
                        let row = xv.row(r);
                        for c in 0..half {
                            let a = row[c];
                            let s = sigmoid(row[half + c]);
                            let go = g[r * half + c];
                            gx[r * xv.cols + c] += go * s;
                            gx[r * xv.cols + half + c] += go * a * s * (1.0 - s);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let cols = node.value.cols;
                    let rows = node.value.rows;
                    let gam = &self.value(*gamma).data;
                    {
                        let gg = acc(&mut grads, &self.nodes, *gamma);
                        for r in 0..rows {
                            for c in 0..cols {
                                gg[c] += g[r * cols + c] * xhat[r * cols + c];
                            }
                        }
                    }
                    {
                        let gb = acc(&mut grads, &self.nodes, *beta);
                        for r in 0..rows {
                            for c in 0..cols {
                                gb[c] += g[r * cols + c];
                            }
                        }
                    }
                    let gx = acc(&mut grads, &self.nodes, *x);
                    let nf = cols as f64;
                    for r in 0..rows {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..cols {
                            let dh = g[r * cols + c] * gam[c];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * cols + c];
                        }
                        for c in 0..cols {
                            let dh = g[r * cols + c] * gam[c];
                            gx[r * cols + c] += rstd[r]
                                * (dh - sum_dh / nf - xhat[r * cols + c] * sum_dh_h / nf);
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    heads,
                    probs,
                } => {
                    let d = node.value.cols;
                    let dh = d / heads;
                    let n = layout.n;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = vec![0.0; node.value.len()];
                    let mut gk = vec![0.0; node.value.len()];
                    let mut gv = vec![0.0; node.value.len()];
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let mut dp = vec![0.0; n * n];
                    for s in 0..layout.nseq {
                        for h in 0..*heads {
                            let base = s * n * d + h * dh;
                            let p = &probs[(s * heads + h) * n * n..(s * heads + h + 1) * n * n];
                            // dV += P^T dO
                            gemm(n, n, dh, 1.0, p, 1, n as isize, &g[base..], d as isize, 1, 1.0, &mut gv[base..], d as isize, 1);
                            // dP = dO V^T
                            gemm(n, dh, n, 1.0, &g[base..], d as isize, 1, &vv.data[base..], 1, d as isize, 0.0, &mut dp, n as isize, 1);
                            for i in 0..n {
                                let prow = &p[i * n..(i + 1) * n];
                                let drow = &mut dp[i * n..(i + 1) * n];
                                let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                                for j in 0..n {
                                    drow[j] = prow[j] * (drow[j] - dot) * scale;
                                }
                            }
                            // dQ += dS K ; dK += dS^T Q
                            gemm(n, n, dh, 1.0, &dp, n as isize, 1, &kv.data[base..], d as isize, 1, 1.0, &mut gq[base..], d as isize, 1);
                            gemm(n, n, dh, 1.0, &dp, 1, n as isize, &qv.data[base..], d as isize, 1, 1.0, &mut gk[base..], d as isize, 1);
                        }
                    }
                    for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
                        let gacc = acc(&mut grads, &self.nodes, *var);
                        gacc.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
                    }
                }
                Op::DepthwiseConv {
                    x,
                    w,
                    b,
                    layout,
                    padding,
                } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let d = xv.cols;
                    let kernel = wv.rows;
                    let off = padding.offset(kernel);
                    let n = layout.n;
                    let mut gx = vec![0.0; xv.len()];
                    let mut gw = vec![0.0; wv.len()];
                    let mut gb = vec![0.0; d];
                    for s in 0..layout.nseq {
                        for i in 0..n {
                            let go = &g[(s * n + i) * d..(s * n + i + 1) * d];
                            for c in 0..d {
                                gb[c] += go[c];
                            }
                            for kk in 0..kernel {
                                let j = i as isize + kk as isize - off as isize;
                                if j < 0 || j >= n as isize {
                                    continue;
                                }
                                let xr = (s * n + j as usize) * d;
                                for c in 0..d {
                                    gw[kk * d + c] += go[c] * xv.data[xr + c];
                                    gx[xr + c] += go[c] * wv.data[kk * d + c];
                                }
                            }
                        }
                    }
                    for (var, buf) in [(x, gx), (w, gw), (b, gb)] {
                        let gacc = acc(&mut grads, &self.nodes, *var);
                        gacc.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
                    }
                }
                Op::Im2Col {
                    x,
                    layout,
                    kernel,
                    padding,
                } => {
                    let cin = self.value(*x).cols;
                    let off = padding.offset(*kernel);
                    let n = layout.n;
                    let gx = acc(&mut grads, &self.nodes, *x);
                    let wcols = kernel * cin;
                    for s in 0..layout.nseq {
                        for i in 0..n {
                            let orow = &g[(s * n + i) * wcols..(s * n + i + 1) * wcols];
                            for kk in 0..*kernel {
                                let j = i as isize + kk as isize - off as isize;
                                if j < 0 || j >= n as isize {
                                    continue;
                                }
                                let dst = (s * n + j as usize) * cin;
                                for c in 0..cin {
                                    gx[dst + c] += orow[kk * cin + c];
                                }
                            }
                        }
                    }
                }
                Op::GatherRows { table, idx } => {
                    let cols = node.value.cols;
                    let gt = acc(&mut grads, &self.nodes, *table);
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..cols {
                            gt[i * cols + c] += g[r * cols + c];
                        }
                    }
                }
                Op::ReplaceRows { x, token, rows } => {
                    let cols = node.value.cols;
                    {
                        let gx = acc(&mut grads, &self.nodes, *x);
                        for (r, &m) in rows.iter().enumerate() {
                            if !m {
                                for c in 0..cols {
                                    gx[r * cols + c] += g[r * cols + c];
                                }
                            }
                        }
                    }
                    let gt = acc(&mut grads, &self.nodes, *token);
                    for (r, &m) in rows.iter().enumerate() {
                        if m {
                            for c in 0..cols {
                                gt[c] += g[r * cols + c];
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let cols = node.value.cols;
                    let rows = node.value.rows;
                    let mut off = 0;
                    for p in parts {
                        let pc = self.value(*p).cols;
                        let gp = acc(&mut grads, &self.nodes, *p);
                        for r in 0..rows {
                            for c in 0..pc {
                                gp[r * pc + c] += g[r * cols + off + c];
                            }
                        }
                        off += pc;
                    }
                }
                Op::GroupChannels {
                    x,
                    nseg,
                    channels,
                    n,
                } => {
                    let d = self.value(*x).cols;
                    let gx = acc(&mut grads, &self.nodes, *x);
                    for b in 0..*nseg {
                        for c in 0..*channels {
                            for i in 0..*n {
                                let dst = ((b * channels + c) * n + i) * d;
                                let src = (b * n + i) * channels * d + c * d;
                                for j in 0..d {
                                    gx[dst + j] += g[src + j];
                                }
                            }
                        }
                    }
                }
                Op::MeanPool { x, layout } => {
                    let f = node.value.cols;
                    let inv = 1.0 / layout.n as f64;
                    let gx = acc(&mut grads, &self.nodes, *x);
                    for s in 0..layout.nseq {
                        for i in 0..layout.n {
                            let r = s * layout.n + i;
                            for c in 0..f {
                                gx[r * f + c] += g[s * f + c] * inv;
                            }
                        }
                    }
                }
                Op::GateMix { g: gate, inner, prev } => {
                    let cols = node.value.cols;
                    let gv = &self.value(*gate).data;
                    let iv = &self.value(*inner).data;
                    let pv = &self.value(*prev).data;
                    {
                        let gg = acc(&mut grads, &self.nodes, *gate);
                        for r in 0..gv.len() {
                            let mut s = 0.0;
                            for c in 0..cols {
                                let i = r * cols + c;
                                s += g[i] * (iv[i] - pv[i]);
                            }
                            gg[r] += s;
                        }
                    }
                    {
                        let gi = acc(&mut grads, &self.nodes, *inner);
                        for r in 0..gv.len() {
                            for c in 0..cols {
                                gi[r * cols + c] += gv[r] * g[r * cols + c];
                            }
                        }
                    }
                    let gp = acc(&mut grads, &self.nodes, *prev);
                    for r in 0..gv.len() {
                        for c in 0..cols {
                            gp[r * cols + c] += (1.0 - gv[r]) * g[r * cols + c];
                        }
                    }
                }
                Op::Huber {
                    pred,
                    target,
                    rows,
                    delta,
                } => {
                    let pv = self.value(*pred);
                    let cols = pv.cols;
                    let count = (rows.len() * cols).max(1) as f64;
                    let go = g[0] / count;
                    let gp = acc(&mut grads, &self.nodes, *pred);
                    for &r in rows {
                        for c in 0..cols {
                            let e = pv.data[r * cols + c] - target.data[r * cols + c];
                            gp[r * cols + c] += go * huber_deriv(e, *delta);
                        }
                    }
                }
                Op::SoftmaxXent {
                    logits,
                    labels,
                    probs,
                } => {
                    let k = node_cols(&self.nodes, *logits);
                    let b = labels.len().max(1) as f64;
                    let go = g[0] / b;
                    let gl = acc(&mut grads, &self.nodes, *logits);
                    for (r, &y) in labels.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == y { 1.0 } else { 0.0 };
                            gl[r * k + c] += go * (probs[r * k + c] - onehot);
                        }
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    /// Adds the gradients of every parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, grads: &Grads, store: &mut ParamStore) {
        for (id, var) in &self.param_vars {
            if let Some(g) = grads.get(*var) {
                let p = store.get_mut(*id);
                p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }

    /// Parameter leaves present on this tape.
    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.param_vars.iter().map(|(k, v)| (*k, *v))
    }
}

fn node_cols(nodes: &[Node], v: Var) -> usize {
    nodes[v.0].value.cols
}

/// Huber penalty of a single residual.
pub fn huber_elem(err: f64, delta: f64) -> f64 {
    let a = err.abs();
    if a <= delta {
        0.5 * err * err
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Derivative of [`huber_elem`] with respect to the residual.
pub fn huber_deriv(err: f64, delta: f64) -> f64 {
    if err.abs() <= delta {
        err
    } else {
        delta * err.signum()
    }
}
