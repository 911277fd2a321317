//! Forward kernels shared by the eager API and the tape.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Match logits are clamped to this magnitude before the sigmoid.
pub const LOGIT_CLAMP: f64 = 30.0;

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
pub(crate) fn gemm_at_b(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
pub(crate) fn gemm_a_bt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += dot(grow, brow);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::dim("matmul", sa, sb));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![0.0; m * n];
    gemm(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// `log softmax` of one row.
pub(crate) fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

/// Softmax along `axis`, stabilized by subtracting the running maximum.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Index {
            context: "softmax axis",
            index: axis,
            bound: shape.len(),
        });
    }
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = x.data().to_vec();
    let mut buf = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = out[base + j * inner];
            }
            softmax_in_place(&mut buf);
            for (j, &b) in buf.iter().enumerate() {
                out[base + j * inner] = b;
            }
        }
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// Row-wise layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.cols();
    if gain.len() != c || bias.len() != c {
        return Err(Error::dim("layer_norm", x.shape(), gain.shape()));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let (mean, inv_std) = row_moments(row, eps);
        for ((v, g), b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = (*v - mean) * inv_std * g + b;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn check_targets(logits: &Tensor, targets: &[usize], context: &'static str) -> Result<()> {
    if logits.rows() != targets.len() {
        return Err(Error::dim(context, logits.shape(), &[targets.len()]));
    }
    let c = logits.cols();
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::Index {
            context,
            index: bad,
            bound: c,
        });
    }
    Ok(())
}

/// Mean negative log-likelihood of `targets` under row-wise softmax.
/// Returns 0 for an empty batch.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    check_targets(logits, targets, "cross_entropy")?;
    if targets.is_empty() {
        return Ok(0.0);
    }
    let c = logits.cols();
    let mut lsm = vec![0.0; c];
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            log_softmax_row(logits.row(i), &mut lsm);
            -lsm[t]
        })
        .sum();
    Ok(total / targets.len() as f64)
}

pub(crate) fn validate_distribution(p: &Tensor, context: &str) -> Result<()> {
    for i in 0..p.rows() {
        let row = p.row(i);
        if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Validation(format!(
                "{context}: row {i} has a negative or non-finite entry"
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "{context}: row {i} sums to {s}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Mean over rows of `KL(p || softmax(q_logits))`, with `0 log 0 = 0`.
pub fn kl_divergence(p: &Tensor, q_logits: &Tensor) -> Result<f64> {
    if p.shape() != q_logits.shape() {
        return Err(Error::dim("kl_divergence", p.shape(), q_logits.shape()));
    }
    validate_distribution(p, "kl_divergence")?;
    let n = p.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let c = p.cols();
    let mut lsm = vec![0.0; c];
    let mut total = 0.0;
    for i in 0..n {
        log_softmax_row(q_logits.row(i), &mut lsm);
        total += kl_row(p.row(i), &lsm);
    }
    Ok(total / n as f64)
}

pub(crate) fn kl_row(p: &[f64], log_q: &[f64]) -> f64 {
    p.iter()
        .zip(log_q)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &lq)| pv * (pv.ln() - lq))
        .sum::<f64>()
        .max(0.0)
}

pub fn sigmoid(z: f64) -> f64 {
    let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    1.0 / (1.0 + (-z).exp())
}

/// `-y log s - (1 - y) log(1 - s)` for a score in `(0, 1)`.
pub fn binary_cross_entropy(score: f64, label: u8) -> f64 {
    let y = f64::from(label);
    -y * score.ln() - (1.0 - y) * (1.0 - score).ln()
}

/// Binary cross-entropy taken directly from a logit; equal to
/// `binary_cross_entropy(sigmoid(z), label)` but without cancellation.
pub fn binary_cross_entropy_with_logit(z: f64, label: u8) -> f64 {
    let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    let y = f64::from(label);
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
