//! Tape-based reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Graph`] records every operation of one forward pass. Values are stored
//! eagerly, so a graph doubles as the inference path; [`Graph::backward`] walks
//! the tape in reverse and returns gradients for every node that depends on a
//! leaf created with `requires_grad = true`.
//!
//! The op set is deliberately coarse: attention, layer normalization, pooling
//! and the two training losses are single fused nodes with hand-derived
//! backward passes. The finite-difference audit in [`crate::audit`] is what
//! keeps those derivations honest.

use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous run of rows belonging to one sequence in a ragged batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// One key-matching term: pool entry index plus the (constant) image and text queries.
#[derive(Debug, Clone)]
pub struct KeyTerm {
    pub entry: usize,
    pub image_query: Vec<f64>,
    pub text_query: Vec<f64>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    SelfAttention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        /// Per segment: `heads * len * len` softmax rows (zero above the diagonal).
        probs: Vec<Vec<f64>>,
    },
    CrossAttention {
        q: Var,
        k: Var,
        v: Var,
        keys_per_group: usize,
        /// `groups * n_queries * keys_per_group`.
        probs: Vec<f64>,
    },
    SegmentPool {
        x: Var,
        segments: Vec<Segment>,
        weights: Vec<Vec<f64>>,
    },
    InfoNce {
        query: Var,
        target: Var,
        scale: f64,
        unit_q: Tensor,
        unit_t: Tensor,
        norms_q: Vec<f64>,
        norms_t: Vec<f64>,
        softmax: Tensor,
    },
    KeyMatch {
        image_keys: Var,
        text_keys: Var,
        terms: Vec<KeyTerm>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "not a scalar node");
        t.data[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = crate::tensor::matmul(self.value(a), self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 x cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows, 1);
        assert_eq!(r.cols, self.value(x).cols);
        let r = r.data.clone();
        let mut out = self.value(x).clone();
        for chunk in out.data.chunks_mut(r.len()) {
            for (o, b) in chunk.iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// Row gather: output row `r` is row `rows[r]` of `src`.
    pub fn gather(&mut self, src: Var, rows: Vec<usize>) -> Var {
        let s = self.value(src);
        let mut out = Tensor::zeros(rows.len(), s.cols);
        for (r, &i) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(s.row(i));
        }
        self.push(out, Op::Gather(src, rows), &[src])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols, cols, "concat column mismatch");
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        let out = Tensor::from_vec(rows, cols, data);
        self.push(out, Op::Concat(parts.to_vec()), parts)
    }

    /// Row-wise layer normalization with learned gain and bias (`1 x cols` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xt = self.value(x);
        let (rows, cols) = xt.shape();
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = xt.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = g[c] * h + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = gelu(*v));
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Multi-head causal self-attention over independent row segments.
    ///
    /// `q`, `k`, `v` are `T x d` with heads laid out as contiguous column blocks.
    pub fn causal_self_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
    ) -> Var {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let d = qt.cols;
        assert_eq!(d % heads, 0, "model width not divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(qt.rows, d);
        let mut all_probs = Vec::with_capacity(segments.len());
        for seg in &segments {
            let n = seg.len;
            let mut probs = vec![0.0; heads * n * n];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..n {
                    let qi = &qt.row(seg.start + i)[off..off + dh];
                    let prow = &mut probs[(h * n + i) * n..(h * n + i) * n + n];
                    for (j, p) in prow.iter_mut().enumerate().take(i + 1) {
                        let kj = &kt.row(seg.start + j)[off..off + dh];
                        *p = scale * crate::tensor::dot(qi, kj);
                    }
                    softmax_in_place(&mut prow[..=i]);
                    let orow = &mut out.data[(seg.start + i) * d + off..(seg.start + i) * d + off + dh];
                    for (j, &p) in prow.iter().enumerate().take(i + 1) {
                        let vj = &vt.row(seg.start + j)[off..off + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
            all_probs.push(probs);
        }
        self.push(
            out,
            Op::SelfAttention {
                q,
                k,
                v,
                segments,
                heads,
                probs: all_probs,
            },
            &[q, k, v],
        )
    }

    /// Single-head cross-attention of a shared query set against grouped keys.
    ///
    /// `q` is `n_q x d_h`; `k` is `(G * p) x d_h`, `v` is `(G * p) x d_v`, with
    /// `p = keys_per_group`. Output is `(G * n_q) x d_v`, softmax over each group's `p` keys.
    pub fn cross_attention(&mut self, q: Var, k: Var, v: Var, keys_per_group: usize) -> Var {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let nq = qt.rows;
        let dh = qt.cols;
        assert_eq!(kt.cols, dh);
        assert_eq!(kt.rows % keys_per_group, 0);
        assert_eq!(kt.rows, vt.rows);
        let groups = kt.rows / keys_per_group;
        let dv = vt.cols;
        let p = keys_per_group;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; groups * nq * p];
        let mut out = Tensor::zeros(groups * nq, dv);
        for g in 0..groups {
            let kg = &kt.data[g * p * dh..(g + 1) * p * dh];
            let vg = &vt.data[g * p * dv..(g + 1) * p * dv];
            let pg = &mut probs[g * nq * p..(g + 1) * nq * p];
            gemm(nq, dh, p, scale, &qt.data, false, kg, true, 0.0, pg);
            for row in pg.chunks_mut(p) {
                softmax_in_place(row);
            }
            gemm(
                nq,
                p,
                dv,
                1.0,
                pg,
                false,
                vg,
                false,
                0.0,
                &mut out.data[g * nq * dv..(g + 1) * nq * dv],
            );
        }
        self.push(
            out,
            Op::CrossAttention {
                q,
                k,
                v,
                keys_per_group,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Weighted sum of each segment's rows; `weights[s]` has one entry per row of segment `s`.
    pub fn segment_pool(&mut self, x: Var, segments: Vec<Segment>, weights: Vec<Vec<f64>>) -> Var {
        let xt = self.value(x);
        let d = xt.cols;
        let mut out = Tensor::zeros(segments.len(), d);
        for (s, (seg, w)) in segments.iter().zip(&weights).enumerate() {
            assert_eq!(seg.len, w.len());
            let orow = &mut out.data[s * d..(s + 1) * d];
            for (i, wi) in w.iter().enumerate() {
                for (o, v) in orow.iter_mut().zip(xt.row(seg.start + i)) {
                    *o += wi * v;
                }
            }
        }
        self.push(
            out,
            Op::SegmentPool {
                x,
                segments,
                weights,
            },
            &[x],
        )
    }

    /// In-batch softmax cross-entropy over cosine similarities, query to target.
    ///
    /// Returns `None` if any row has (near) zero norm.
    pub fn info_nce(&mut self, query: Var, target: Var, scale: f64) -> Option<Var> {
        let (qv, tv) = (self.value(query), self.value(target));
        assert_eq!(qv.shape(), tv.shape());
        let n = qv.rows;
        let normalize = |t: &Tensor| -> Option<(Tensor, Vec<f64>)> {
            let mut u = t.clone();
            let mut norms = Vec::with_capacity(t.rows);
            for r in 0..t.rows {
                let nr = crate::tensor::norm(t.row(r));
                if nr < 1e-12 {
                    return None;
                }
                u.row_mut(r).iter_mut().for_each(|v| *v /= nr);
                norms.push(nr);
            }
            Some((u, norms))
        };
        let (unit_q, norms_q) = normalize(qv)?;
        let (unit_t, norms_t) = normalize(tv)?;
        let mut softmax = Tensor::zeros(n, n);
        gemm(
            n,
            qv.cols,
            n,
            scale,
            &unit_q.data,
            false,
            &unit_t.data,
            true,
            0.0,
            &mut softmax.data,
        );
        let mut loss = 0.0;
        for i in 0..n {
            let row = softmax.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[i];
            softmax_in_place(row);
        }
        loss /= n as f64;
        Some(self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::InfoNce {
                query,
                target,
                scale,
                unit_q,
                unit_t,
                norms_q,
                norms_t,
                softmax,
            },
            &[query, target],
        ))
    }

    /// Mean over `terms` of the summed cosine distances between each constant query
    /// pair and the referenced image/text key rows. Gradients reach the keys only.
    pub fn key_match(&mut self, image_keys: Var, text_keys: Var, terms: Vec<KeyTerm>) -> Var {
        let (ki, kt) = (self.value(image_keys), self.value(text_keys));
        let mut total = 0.0;
        for t in &terms {
            let ci = crate::tensor::cosine(&t.image_query, ki.row(t.entry)).unwrap_or(0.0);
            let ct = crate::tensor::cosine(&t.text_query, kt.row(t.entry)).unwrap_or(0.0);
            total += (1.0 - ci) + (1.0 - ct);
        }
        let loss = if terms.is_empty() {
            0.0
        } else {
            total / terms.len() as f64
        };
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::KeyMatch {
                image_keys,
                text_keys,
                terms,
            },
            &[image_keys, text_keys],
        )
    }

    /// Softmax probabilities retained by a self-attention node, per segment.
    pub fn attention_probs(&self, v: Var) -> Option<(&[Vec<f64>], &[Segment], usize)> {
        match &self.nodes[v.0].op {
            Op::SelfAttention {
                probs,
                segments,
                heads,
                ..
            } => Some((probs, segments, *heads)),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k, n) = (at.rows, at.cols, bt.cols);
                if self.needs(*a) {
                    let mut da = Tensor::zeros(m, k);
                    gemm(m, n, k, 1.0, &g.data, false, &bt.data, true, 0.0, &mut da.data);
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(k, n);
                    gemm(k, m, n, 1.0, &at.data, true, &g.data, false, 0.0, &mut db.data);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*row) {
                    let mut dr = Tensor::zeros(1, g.cols);
                    for chunk in g.data.chunks(g.cols) {
                        for (d, v) in dr.data.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::Scale(x, s) => {
                let mut dx = g.clone();
                dx.data.iter_mut().for_each(|v| *v *= s);
                self.accumulate(grads, *x, dx);
            }
            Op::Gather(src, rows) => {
                if self.needs(*src) {
                    let st = self.value(*src);
                    let mut ds = Tensor::zeros(st.rows, st.cols);
                    for (r, &i) in rows.iter().enumerate() {
                        for (d, v) in ds.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *src, ds);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).rows;
                    if self.needs(*p) {
                        self.accumulate(grads, *p, g.slice_rows(offset, offset + rows));
                    }
                    offset += rows;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = g.shape();
                let gv = &self.value(*gain).data;
                if self.needs(*gain) || self.needs(*bias) {
                    let mut dg = Tensor::zeros(1, cols);
                    let mut db = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let gy = g.data[r * cols + c];
                            dg.data[c] += gy * xhat[r * cols + c];
                            db.data[c] += gy;
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                    self.accumulate(grads, *bias, db);
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let d = g.data[r * cols + c] * gv[c];
                            mean_d += d;
                            mean_dx += d * xhat[r * cols + c];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for c in 0..cols {
                            let d = g.data[r * cols + c] * gv[c];
                            dx.data[r * cols + c] =
                                inv_std[r] * (d - mean_d - xhat[r * cols + c] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Gelu(x) => {
                let xt = self.value(*x);
                let mut dx = g.clone();
                for (d, v) in dx.data.iter_mut().zip(&xt.data) {
                    *d *= gelu_grad(*v);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SelfAttention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let (qt, kt, vt) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qt.cols;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Tensor::zeros(qt.rows, d);
                let mut dk = Tensor::zeros(kt.rows, d);
                let mut dv = Tensor::zeros(vt.rows, d);
                let mut dp = Vec::new();
                for (seg, pr) in segments.iter().zip(probs) {
                    let n = seg.len;
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..n {
                            let prow = &pr[(h * n + i) * n..(h * n + i) * n + i + 1];
                            let go = &g.row(seg.start + i)[off..off + dh];
                            dp.clear();
                            for (j, &p) in prow.iter().enumerate() {
                                let vj = &vt.row(seg.start + j)[off..off + dh];
                                dp.push(crate::tensor::dot(go, vj));
                                let dvj = &mut dv.row_mut(seg.start + j)[off..off + dh];
                                for (o, x) in dvj.iter_mut().zip(go) {
                                    *o += p * x;
                                }
                            }
                            let inner: f64 = prow.iter().zip(&dp).map(|(p, x)| p * x).sum();
                            let qi = &qt.row(seg.start + i)[off..off + dh];
                            for (j, &p) in prow.iter().enumerate() {
                                let ds = p * (dp[j] - inner) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kt.row(seg.start + j)[off..off + dh];
                                let dqi = &mut dq.row_mut(seg.start + i)[off..off + dh];
                                for (o, x) in dqi.iter_mut().zip(kj) {
                                    *o += ds * x;
                                }
                                let dkj = &mut dk.row_mut(seg.start + j)[off..off + dh];
                                for (o, x) in dkj.iter_mut().zip(qi) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::CrossAttention {
                q,
                k,
                v,
                keys_per_group,
                probs,
            } => {
                let (qt, kt, vt) = (self.value(*q), self.value(*k), self.value(*v));
                let (nq, dh, dvw, p) = (qt.rows, qt.cols, vt.cols, *keys_per_group);
                let groups = kt.rows / p;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Tensor::zeros(nq, dh);
                let mut dk = Tensor::zeros(kt.rows, dh);
                let mut dv = Tensor::zeros(vt.rows, dvw);
                let mut ds = vec![0.0; nq * p];
                for gi in 0..groups {
                    let pg = &probs[gi * nq * p..(gi + 1) * nq * p];
                    let go = &g.data[gi * nq * dvw..(gi + 1) * nq * dvw];
                    let vg = &vt.data[gi * p * dvw..(gi + 1) * p * dvw];
                    let kg = &kt.data[gi * p * dh..(gi + 1) * p * dh];
                    // dV_g = P^T dO
                    gemm(
                        p,
                        nq,
                        dvw,
                        1.0,
                        pg,
                        true,
                        go,
                        false,
                        0.0,
                        &mut dv.data[gi * p * dvw..(gi + 1) * p * dvw],
                    );
                    // dP = dO V^T
                    gemm(nq, dvw, p, 1.0, go, false, vg, true, 0.0, &mut ds);
                    for (prow, drow) in pg.chunks(p).zip(ds.chunks_mut(p)) {
                        let inner: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                        for (d, pv) in drow.iter_mut().zip(prow) {
                            *d = pv * (*d - inner) * scale;
                        }
                    }
                    gemm(nq, p, dh, 1.0, &ds, false, kg, false, 1.0, &mut dq.data);
                    gemm(
                        p,
                        nq,
                        dh,
                        1.0,
                        &ds,
                        true,
                        &qt.data,
                        false,
                        0.0,
                        &mut dk.data[gi * p * dh..(gi + 1) * p * dh],
                    );
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::SegmentPool {
                x,
                segments,
                weights,
            } => {
                if self.needs(*x) {
                    let xt = self.value(*x);
                    let mut dx = Tensor::zeros(xt.rows, xt.cols);
                    for (s, (seg, w)) in segments.iter().zip(weights).enumerate() {
                        let gs = g.row(s);
                        for (i, wi) in w.iter().enumerate() {
                            for (o, v) in dx.row_mut(seg.start + i).iter_mut().zip(gs) {
                                *o += wi * v;
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::InfoNce {
                query,
                target,
                scale,
                unit_q,
                unit_t,
                norms_q,
                norms_t,
                softmax,
            } => {
                let n = unit_q.rows;
                let d = unit_q.cols;
                let upstream = g.data[0];
                // dL/dS_ij = scale/n * (softmax_ij - [i == j])
                let mut dsim = softmax.clone();
                for i in 0..n {
                    dsim.data[i * n + i] -= 1.0;
                }
                let coef = upstream * scale / n as f64;
                dsim.data.iter_mut().for_each(|v| *v *= coef);
                let unit_back = |u: &Tensor, du: &Tensor, norms: &[f64]| {
                    let mut dv = du.clone();
                    for r in 0..u.rows {
                        let ur = u.row(r);
                        let proj = crate::tensor::dot(ur, du.row(r));
                        for (o, x) in dv.row_mut(r).iter_mut().zip(ur) {
                            *o = (*o - proj * x) / norms[r];
                        }
                    }
                    dv
                };
                if self.needs(*query) {
                    let mut duq = Tensor::zeros(n, d);
                    gemm(n, n, d, 1.0, &dsim.data, false, &unit_t.data, false, 0.0, &mut duq.data);
                    self.accumulate(grads, *query, unit_back(unit_q, &duq, norms_q));
                }
                if self.needs(*target) {
                    let mut dut = Tensor::zeros(n, d);
                    gemm(n, n, d, 1.0, &dsim.data, true, &unit_q.data, false, 0.0, &mut dut.data);
                    self.accumulate(grads, *target, unit_back(unit_t, &dut, norms_t));
                }
            }
            Op::KeyMatch {
                image_keys,
                text_keys,
                terms,
            } => {
                if terms.is_empty() {
                    return;
                }
                let coef = g.data[0] / terms.len() as f64;
                let cos_grad = |query: &[f64], key: &[f64], out: &mut [f64]| {
                    // d(1 - cos)/dk = -(q_hat - cos * k_hat) / |k|
                    let (nq, nk) = (crate::tensor::norm(query), crate::tensor::norm(key));
                    if nq < 1e-12 || nk < 1e-12 {
                        return;
                    }
                    let c = crate::tensor::dot(query, key) / (nq * nk);
                    for ((o, qv), kv) in out.iter_mut().zip(query).zip(key) {
                        *o -= coef * (qv / nq - c * kv / nk) / nk;
                    }
                };
                for (keys, image) in [(*image_keys, true), (*text_keys, false)] {
                    if !self.needs(keys) {
                        continue;
                    }
                    let kt = self.value(keys);
                    let mut dk = Tensor::zeros(kt.rows, kt.cols);
                    for t in terms {
                        let query = if image { &t.image_query } else { &t.text_query };
                        cos_grad(query, kt.row(t.entry), dk.row_mut(t.entry));
                    }
                    self.accumulate(grads, keys, dk);
                }
            }
        }
    }
}

/// Gradients from one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
