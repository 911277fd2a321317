//! Reverse-mode differentiation over row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! as leaves tied to a [`ParamStore`]; [`Tape::backward`] writes
//! `d loss / d value` into each parameter's gradient buffer.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::ops::{self, gemm, gemm_a_bt, gemm_at_b, LAYER_NORM_EPS, LOGIT_CLAMP};
use crate::numerics::{ParamId, ParamStore, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Keys and values for one attention call, partitioned into per-sample row
/// ranges. Several sources may feed the same query; their rows for sample
/// `b` are concatenated in order.
#[derive(Debug, Clone)]
pub struct KvSource {
    pub keys: Var,
    pub values: Var,
    pub groups: Vec<Range<usize>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        q_groups: Vec<Range<usize>>,
        sources: Vec<KvSource>,
        heads: usize,
        /// Per `(group, head)` row-major `[nq, nk]` probabilities.
        probs: Vec<Vec<f64>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDivergence {
        logits: Var,
        target: Tensor,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<u8>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite() || matches!(op, Op::Leaf), "non-finite value from {op:?}");
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::State("variable does not belong to this tape".into()));
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() < store.len() {
            self.param_vars.resize(store.len(), None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.cols();
        if vb.len() != c {
            return Err(Error::dim("add_bias", vx.shape(), vb.shape()));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (v, b) in row.iter_mut().zip(vb.data()) {
                *v += b;
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    /// `x W + b`
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, weight)?;
        self.add_bias(xw, bias)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(ops::gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let c = vx.cols();
        if vg.len() != c || vb.len() != c {
            return Err(Error::dim("layer_norm", vx.shape(), vg.shape()));
        }
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = vx.row(r);
            let (mean, is) = ops::row_moments(row, LAYER_NORM_EPS);
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Row selection; also serves as an embedding lookup.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Index {
                context: "gather_rows",
                index: bad,
                bound: n,
            });
        }
        let out = vx.gather_rows(rows);
        Ok(self.push(out, Op::GatherRows { x, rows: rows.to_vec() }))
    }

    /// Places row `i` of `x` at row `rows[i]` of a zero `[total_rows, cols]`
    /// matrix. Target rows must be distinct.
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], total_rows: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rows() != rows.len() {
            return Err(Error::dim("scatter_rows", vx.shape(), &[rows.len()]));
        }
        let c = vx.cols();
        let mut out = vec![0.0; total_rows * c];
        for (i, &r) in rows.iter().enumerate() {
            if r >= total_rows {
                return Err(Error::Index {
                    context: "scatter_rows",
                    index: r,
                    bound: total_rows,
                });
            }
            out[r * c..(r + 1) * c].copy_from_slice(vx.row(i));
        }
        let out = Tensor::from_parts(vec![total_rows, c], out);
        Ok(self.push(out, Op::ScatterRows { x, rows: rows.to_vec() }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(Error::dim("concat_rows", &[rows, c], v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_parts(vec![rows, c], data);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Scaled dot-product attention split over `heads`, per sample group.
    ///
    /// For each group `b` the queries are rows `q_groups[b]` of `q` and the
    /// keys/values are the concatenation of `src.groups[b]` over all sources.
    /// Head outputs are concatenated along the feature axis; no output
    /// projection is applied here.
    pub fn attention(
        &mut self,
        q: Var,
        q_groups: &[Range<usize>],
        sources: &[KvSource],
        heads: usize,
    ) -> Result<Var> {
        let vq = self.value(q);
        let d = vq.cols();
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Validation(format!("width {d} not divisible by {heads} heads")));
        }
        for s in sources {
            let (k, v) = (self.value(s.keys), self.value(s.values));
            if k.cols() != d || v.cols() != d || k.rows() != v.rows() {
                return Err(Error::dim("attention", k.shape(), v.shape()));
            }
            if s.groups.len() != q_groups.len() {
                return Err(Error::dim("attention groups", &[q_groups.len()], &[s.groups.len()]));
            }
            if s.groups.iter().any(|g| g.end > k.rows()) {
                return Err(Error::Validation("key group exceeds key rows".into()));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; vq.len()];
        let mut probs = Vec::with_capacity(q_groups.len() * heads);
        let qd = vq.data();
        for (b, qg) in q_groups.iter().enumerate() {
            let nk: usize = sources.iter().map(|s| s.groups[b].len()).sum();
            if nk == 0 {
                return Err(Error::Validation(format!("attention group {b} has no keys")));
            }
            let nq = qg.len();
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let mut p = vec![0.0; nq * nk];
                for (qi, qr) in qg.clone().enumerate() {
                    let qrow = &qd[qr * d + cols.start..qr * d + cols.end];
                    let mut j = 0;
                    for s in sources {
                        let kd = self.nodes[s.keys.index].value.data();
                        for kr in s.groups[b].clone() {
                            p[qi * nk + j] = scale * ops::dot(qrow, &kd[kr * d + cols.start..kr * d + cols.end]);
                            j += 1;
                        }
                    }
                    let prow = &mut p[qi * nk..(qi + 1) * nk];
                    ops::softmax_in_place(prow);
                    let orow = &mut out[qr * d + cols.start..qr * d + cols.end];
                    let mut j = 0;
                    for s in sources {
                        let vd = self.nodes[s.values.index].value.data();
                        for vr in s.groups[b].clone() {
                            let w = prow[j];
                            for (o, &x) in orow.iter_mut().zip(&vd[vr * d + cols.start..vr * d + cols.end]) {
                                *o += w * x;
                            }
                            j += 1;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let out = Tensor::from_parts(vq.shape().to_vec(), out);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                q_groups: q_groups.to_vec(),
                sources: sources.to_vec(),
                heads,
                probs,
            },
        ))
    }

    /// Mean cross-entropy; a zero scalar when `targets` is empty.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let loss = ops::cross_entropy(v, targets)?;
        let probs = ops::softmax(&Tensor::from_parts(vec![v.rows(), v.cols()], v.data().to_vec()), 1)?
            .into_data();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over rows of `KL(target || softmax(logits))`.
    pub fn kl_divergence(&mut self, target: &Tensor, logits: Var) -> Result<Var> {
        let v = self.value(logits);
        let loss = ops::kl_divergence(target, v)?;
        let probs = ops::softmax(&Tensor::from_parts(vec![v.rows(), v.cols()], v.data().to_vec()), 1)?
            .into_data();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::KlDivergence {
                logits,
                target: target.clone(),
                probs,
            },
        ))
    }

    /// Mean binary cross-entropy of clamped-sigmoid scores against labels.
    /// `logits` is `[n, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let v = self.value(logits);
        if v.len() != labels.len() {
            return Err(Error::dim("bce_with_logits", v.shape(), &[labels.len()]));
        }
        if labels.is_empty() {
            return Ok(self.push(Tensor::scalar(0.0), Op::BceWithLogits { logits, labels: vec![] }));
        }
        let loss = v
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| ops::binary_cross_entropy_with_logit(z, y))
            .sum::<f64>()
            / labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// `sum_i w_i * x_i` over scalar vars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::dim("weighted_sum", t.shape(), &[1]));
            }
            total += w * t.data()[0];
        }
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec())))
    }

    /// Fills every parameter gradient in `store` with `d loss / d value`.
    /// Parameters the loss does not reach get zero.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward pass".into()));
        }
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::State(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        store.zero_gradients();
        let grads = self.gradients(loss);
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                let dst = store.get_mut(*id).gradient.data_mut();
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
        Ok(())
    }

    fn gradients(&self, loss: Var) -> Vec<Option<Vec<f64>>> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.index] = Some(vec![1.0]);
        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Param(_) | Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        grads
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.index].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                gemm_a_bt(g, vb.data(), acc(grads, *a, m * k), m, k, n);
                gemm_at_b(va.data(), g, acc(grads, *b, k * n), m, k, n);
            }
            Op::Add(a, b) => {
                axpy(acc(grads, *a, g.len()), g, 1.0);
                axpy(acc(grads, *b, g.len()), g, 1.0);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                let ga = acc(grads, *a, g.len());
                for ((d, &gv), &y) in ga.iter_mut().zip(g).zip(vb) {
                    *d += gv * y;
                }
                let gb = acc(grads, *b, g.len());
                for ((d, &gv), &x) in gb.iter_mut().zip(g).zip(va) {
                    *d += gv * x;
                }
            }
            Op::AddBias(x, b) => {
                axpy(acc(grads, *x, g.len()), g, 1.0);
                let c = val(*b).len();
                let gb = acc(grads, *b, c);
                for row in g.chunks(c.max(1)) {
                    axpy(gb, row, 1.0);
                }
            }
            Op::Scale(x, s) => axpy(acc(grads, *x, g.len()), g, *s),
            Op::Gelu(x) => {
                let xs = val(*x).data();
                let gx = acc(grads, *x, g.len());
                for ((d, &gv), &xv) in gx.iter_mut().zip(g).zip(xs) {
                    *d += gv * ops::gelu_grad(xv);
                }
            }
            Op::Tanh(x) => {
                let ys = node.value.data();
                let gx = acc(grads, *x, g.len());
                for ((d, &gv), &y) in gx.iter_mut().zip(g).zip(ys) {
                    *d += gv * (1.0 - y * y);
                }
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                for d in acc(grads, *x, n).iter_mut() {
                    *d += g[0];
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = val(*gain).len();
                let gains = val(*gain).data();
                {
                    let gg = acc(grads, *gain, c);
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                {
                    let gb = acc(grads, *bias, c);
                    for grow in g.chunks(c) {
                        axpy(gb, grow, 1.0);
                    }
                }
                let gx = acc(grads, *x, g.len());
                let n = c as f64;
                let mut dh = vec![0.0; c];
                for (r, (grow, hrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                    for j in 0..c {
                        dh[j] = grow[j] * gains[j];
                    }
                    let mean_dh = dh.iter().sum::<f64>() / n;
                    let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n;
                    let out = &mut gx[r * c..(r + 1) * c];
                    for j in 0..c {
                        out[j] += inv_std[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let c = val(*x).cols();
                let gx = acc(grads, *x, val(*x).len());
                for (i, &r) in rows.iter().enumerate() {
                    axpy(&mut gx[r * c..(r + 1) * c], &g[i * c..(i + 1) * c], 1.0);
                }
            }
            Op::ScatterRows { x, rows } => {
                let c = val(*x).cols();
                let gx = acc(grads, *x, val(*x).len());
                for (i, &r) in rows.iter().enumerate() {
                    axpy(&mut gx[i * c..(i + 1) * c], &g[r * c..(r + 1) * c], 1.0);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    axpy(acc(grads, p, n), &g[offset..offset + n], 1.0);
                    offset += n;
                }
            }
            Op::Attention {
                q,
                q_groups,
                sources,
                heads,
                probs,
            } => self.backprop_attention(*q, q_groups, sources, *heads, probs, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if targets.is_empty() {
                    return;
                }
                let c = val(*logits).cols();
                let scale = g[0] / targets.len() as f64;
                let gl = acc(grads, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let y = if j == t { 1.0 } else { 0.0 };
                        gl[r * c + j] += scale * (probs[r * c + j] - y);
                    }
                }
            }
            Op::KlDivergence { logits, target, probs } => {
                let n = target.rows();
                if n == 0 {
                    return;
                }
                let scale = g[0] / n as f64;
                let gl = acc(grads, *logits, probs.len());
                // rows of the target sum to one, so d/dz = q - p
                for ((d, &q), &p) in gl.iter_mut().zip(probs).zip(target.data()) {
                    *d += scale * (q - p);
                }
            }
            Op::BceWithLogits { logits, labels } => {
                if labels.is_empty() {
                    return;
                }
                let scale = g[0] / labels.len() as f64;
                let zs = val(*logits).data();
                let gl = acc(grads, *logits, zs.len());
                for ((d, &z), &y) in gl.iter_mut().zip(zs).zip(labels) {
                    if z.abs() < LOGIT_CLAMP {
                        *d += scale * (ops::sigmoid(z) - f64::from(y));
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc(grads, v, 1)[0] += w * g[0];
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        q_groups: &[Range<usize>],
        sources: &[KvSource],
        heads: usize,
        probs: &[Vec<f64>],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let vq = &self.nodes[q.index].value;
        let d = vq.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = vq.data();
        let mut gq = vec![0.0; vq.len()];
        let mut gk: Vec<Vec<f64>> = sources
            .iter()
            .map(|s| vec![0.0; self.nodes[s.keys.index].value.len()])
            .collect();
        let mut gv: Vec<Vec<f64>> = gk.clone();
        for (b, qg) in q_groups.iter().enumerate() {
            let nk: usize = sources.iter().map(|s| s.groups[b].len()).sum();
            // (source, row) for each key slot of this group
            let slots: Vec<(usize, usize)> = sources
                .iter()
                .enumerate()
                .flat_map(|(si, s)| s.groups[b].clone().map(move |r| (si, r)))
                .collect();
            for h in 0..heads {
                let c0 = h * dh;
                let p = &probs[b * heads + h];
                let mut ds = vec![0.0; nk];
                for (qi, qr) in qg.clone().enumerate() {
                    let go = &g[qr * d + c0..qr * d + c0 + dh];
                    let prow = &p[qi * nk..(qi + 1) * nk];
                    for (j, &(si, r)) in slots.iter().enumerate() {
                        let vd = self.nodes[sources[si].values.index].value.data();
                        ds[j] = ops::dot(go, &vd[r * d + c0..r * d + c0 + dh]);
                        axpy(&mut gv[si][r * d + c0..r * d + c0 + dh], go, prow[j]);
                    }
                    let mean = ops::dot(prow, &ds);
                    let qrow = &qd[qr * d + c0..qr * d + c0 + dh];
                    for (j, &(si, r)) in slots.iter().enumerate() {
                        let w = prow[j] * (ds[j] - mean) * scale;
                        if w == 0.0 {
                            continue;
                        }
                        let kd = self.nodes[sources[si].keys.index].value.data();
                        axpy(&mut gq[qr * d + c0..qr * d + c0 + dh], &kd[r * d + c0..r * d + c0 + dh], w);
                        axpy(&mut gk[si][r * d + c0..r * d + c0 + dh], qrow, w);
                    }
                }
            }
        }
        axpy(acc(grads, q, gq.len()), &gq, 1.0);
        for (si, s) in sources.iter().enumerate() {
            axpy(acc(grads, s.keys, gk[si].len()), &gk[si], 1.0);
            axpy(acc(grads, s.values, gv[si].len()), &gv[si], 1.0);
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.index].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![0.3, -1.0, 2.0]));
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let loss = tape.sum(wv);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).gradient.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradient_of_half_square_is_identity() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![0.3, -1.0, 2.0]));
        let unused = store.add("unused", Tensor::vector(vec![5.0]));
        store.get_mut(unused).gradient = Tensor::vector(vec![9.0]);
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let sq = tape.mul(wv, wv).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).gradient.data(), &[0.3, -1.0, 2.0]);
        assert_eq!(store.get(unused).gradient.data(), &[0.0]);
    }

    #[test]
    fn backward_without_forward_is_a_state_error() {
        let mut store = ParamStore::new();
        let mut other = Tape::new();
        let v = other.constant(Tensor::scalar(1.0));
        let tape = Tape::new();
        assert!(matches!(tape.backward(v, &mut store), Err(Error::State(_))));
        let mut tape = Tape::new();
        tape.constant(Tensor::scalar(2.0));
        assert!(matches!(tape.backward(v, &mut store), Err(Error::State(_))));
    }

    /// Central differences over every entry of every parameter.
    fn check_grads(store: &mut ParamStore, f: impl Fn(&mut Tape, &ParamStore) -> Var) {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store);
        tape.backward(loss, store).unwrap();
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            for k in 0..store.get(id).value.len() {
                let orig = store.get(id).value.data()[k];
                let eval = |s: &mut ParamStore, x: f64| {
                    s.get_mut(id).value.data_mut()[k] = x;
                    let mut t = Tape::new();
                    let l = f(&mut t, s);
                    t.value(l).data()[0]
                };
                let h = 1e-5;
                let fd = (eval(store, orig + h) - eval(store, orig - h)) / (2.0 * h);
                store.get_mut(id).value.data_mut()[k] = orig;
                let an = store.get(id).gradient.data()[k];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-6, "{} [{k}]: analytic {an} fd {fd}", store.get(id).name);
            }
        }
    }

    #[test]
    fn layer_norm_gelu_tanh_gradients() {
        let mut rng = Rng::new(3);
        let mut store = ParamStore::new();
        let x = store.add("x", rand_tensor(&[3, 4], &mut rng));
        let w = store.add("w", rand_tensor(&[4, 5], &mut rng));
        let b = store.add("b", rand_tensor(&[5], &mut rng));
        let g = store.add("g", rand_tensor(&[5], &mut rng));
        let beta = store.add("beta", rand_tensor(&[5], &mut rng));
        let target = ops::softmax(&rand_tensor(&[3, 5], &mut rng), 1).unwrap();
        check_grads(&mut store, |t, s| {
            let (x, w, b, g, beta) = (t.param(s, x), t.param(s, w), t.param(s, b), t.param(s, g), t.param(s, beta));
            let h = t.linear(x, w, b).unwrap();
            let h = t.gelu(h);
            let h = t.layer_norm(h, g, beta).unwrap();
            let h = t.tanh(h);
            let l1 = t.kl_divergence(&target, h).unwrap();
            let l2 = t.cross_entropy(h, &[0, 4, 2]).unwrap();
            t.weighted_sum(&[(l1, 0.7), (l2, 1.3)]).unwrap()
        });
    }

    #[test]
    fn attention_and_row_ops_gradients() {
        let mut rng = Rng::new(11);
        let mut store = ParamStore::new();
        let q = store.add("q", rand_tensor(&[5, 4], &mut rng));
        let k1 = store.add("k1", rand_tensor(&[4, 4], &mut rng));
        let v1 = store.add("v1", rand_tensor(&[4, 4], &mut rng));
        let k2 = store.add("k2", rand_tensor(&[3, 4], &mut rng));
        let v2 = store.add("v2", rand_tensor(&[3, 4], &mut rng));
        let head = store.add("head", rand_tensor(&[4, 1], &mut rng));
        check_grads(&mut store, |t, s| {
            let (q, k1, v1, k2, v2, head) =
                (t.param(s, q), t.param(s, k1), t.param(s, v1), t.param(s, k2), t.param(s, v2), t.param(s, head));
            let sources = [
                KvSource { keys: k1, values: v1, groups: vec![0..2, 2..4] },
                KvSource { keys: k2, values: v2, groups: vec![0..1, 1..3] },
            ];
            let a = t.attention(q, &[0..3, 3..5], &sources, 2).unwrap();
            let picked = t.gather_rows(a, &[4, 0, 2]).unwrap();
            let spread = t.scatter_rows(picked, &[1, 0, 3], 4).unwrap();
            let both = t.concat_rows(&[spread, a]).unwrap();
            let z = t.matmul(both, head).unwrap();
            t.bce_with_logits(z, &[1, 0, 1, 1, 0, 0, 1, 0, 1]).unwrap()
        });
    }

    #[test]
    fn empty_attention_group_is_rejected() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::zeros(&[1, 2]));
        let k = t.constant(Tensor::zeros(&[1, 2]));
        let src = KvSource { keys: k, values: k, groups: vec![0..0] };
        assert!(matches!(t.attention(q, &[0..1], &[src], 1), Err(Error::Validation(_))));
    }
}
