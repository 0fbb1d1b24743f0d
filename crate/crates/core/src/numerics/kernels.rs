use super::Tensor;
use crate::{Error, Result};

/// Denominator guard for cosine similarity. A zero vector gets similarity 0
/// with everything instead of NaN.
pub(crate) const COSINE_EPS: f64 = 1e-8;

/// `out = a · b` for row-major `a: m×k`, `b: k×n`; `out` is overwritten.
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += aᵀ · g` for `a: m×k`, `g: m×n`, `out: k×n`.
pub(crate) fn gemm_at_b_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

/// `out += g · bᵀ` for `g: m×n`, `b: k×n`, `out: m×k`.
pub(crate) fn gemm_a_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
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

/// Matrix product of `a: M×K` and `b: K×N`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("{m}×{k} · {k2}×{n}")));
    }
    let mut out = vec![0.0; m * n];
    gemm(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)?.ensure_finite("matmul")
}

/// Softmax of `row / tau` in place, with max subtraction.
pub(crate) fn softmax_row_inplace(row: &mut [f64], tau: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / tau).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Accumulates the gradient w.r.t. the pre-softmax logits into `dlogits`,
/// given softmax output `y` and upstream gradient `dy`.
pub(crate) fn softmax_row_backward(y: &[f64], dy: &[f64], tau: f64, dlogits: &mut [f64]) {
    let inner = dot(y, dy);
    for ((d, &yi), &dyi) in dlogits.iter_mut().zip(y).zip(dy) {
        *d += yi * (dyi - inner) / tau;
    }
}

/// Softmax with temperature over the last axis.
pub fn rowwise_softmax(m: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be > 0, got {tau}"
        )));
    }
    let n = *m
        .shape()
        .last()
        .ok_or_else(|| Error::shape("rowwise_softmax", "scalar input"))?;
    let mut out = m.clone();
    if n > 0 {
        for row in out.data_mut().chunks_mut(n) {
            softmax_row_inplace(row, tau);
        }
    }
    out.ensure_finite("rowwise_softmax")
}

/// Log-determinant of a symmetric positive-definite matrix via Cholesky.
pub fn logdet_psd(m: &Tensor) -> Result<f64> {
    let (n, n2) = m.dims2()?;
    if n != n2 {
        return Err(Error::shape("logdet_psd", format!("{n}×{n2} is not square")));
    }
    let a = m.data();
    let mut l = vec![0.0; n * n];
    let mut logdet = 0.0;
    for j in 0..n {
        let mut diag = a[j * n + j];
        for p in 0..j {
            diag -= l[j * n + p] * l[j * n + p];
        }
        if !(diag > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: j, value: diag });
        }
        let ljj = diag.sqrt();
        l[j * n + j] = ljj;
        logdet += 2.0 * ljj.ln();
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            l[i * n + j] = s / ljj;
        }
    }
    if logdet.is_finite() {
        Ok(logdet)
    } else {
        Err(Error::NonFinite("logdet_psd"))
    }
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub(crate) fn cosine_sim(a: &[f64], b: &[f64], eps: f64) -> f64 {
    dot(a, b) / (norm(a) * norm(b) + eps)
}

/// Adds `upstream * ∂cos(a,b)/∂a` to `da` and the `b` counterpart to `db`.
pub(crate) fn cosine_backward(a: &[f64], b: &[f64], eps: f64, upstream: f64, da: &mut [f64], db: &mut [f64]) {
    if upstream == 0.0 {
        return;
    }
    let na = norm(a);
    let nb = norm(b);
    let num = dot(a, b);
    let den = na * nb + eps;
    let inv = upstream / den;
    // ∂den/∂a = nb * a / na; the term vanishes for a zero vector
    let ca = if na > 0.0 {
        upstream * num * nb / (den * den * na)
    } else {
        0.0
    };
    let cb = if nb > 0.0 {
        upstream * num * na / (den * den * nb)
    } else {
        0.0
    };
    for i in 0..a.len() {
        da[i] += inv * b[i] - ca * a[i];
        db[i] += inv * a[i] - cb * b[i];
    }
}

/// Pairwise cosine similarity between the rows of `a: P×D` and `b: Q×D`.
pub fn cosine_rows(a: &Tensor, b: &Tensor, eps: f64) -> Result<Tensor> {
    let (p, d) = a.dims2()?;
    let (q, d2) = b.dims2()?;
    if d != d2 {
        return Err(Error::shape("cosine_rows", format!("row lengths {d} and {d2}")));
    }
    if eps < 0.0 {
        return Err(Error::InvalidArgument(format!("cosine eps must be >= 0, got {eps}")));
    }
    let mut out = vec![0.0; p * q];
    for i in 0..p {
        for j in 0..q {
            out[i * q + j] = cosine_sim(a.row(i), b.row(j), eps);
        }
    }
    Tensor::new(&[p, q], out)?.ensure_finite("cosine_rows")
}
