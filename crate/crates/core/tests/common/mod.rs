//! Reference implementations written as plain nested loops over `Vec`s.
//! They share no code with the library.

#![allow(dead_code, clippy::needless_range_loop)]

use chanorm::Tensor;

pub type T3 = Vec<Vec<Vec<f64>>>;
pub type T2 = Vec<Vec<f64>>;

pub fn to3(t: &Tensor) -> T3 {
    let s = t.shape();
    let (b, c, d) = (s[0], s[1], s[2]);
    (0..b)
        .map(|i| {
            (0..c)
                .map(|j| (0..d).map(|k| t.data()[(i * c + j) * d + k]).collect())
                .collect()
        })
        .collect()
}

pub fn to2(t: &Tensor) -> T2 {
    let s = t.shape();
    (0..s[0]).map(|i| t.data()[i * s[1]..(i + 1) * s[1]].to_vec()).collect()
}

pub fn max_diff3(a: &T3, b: &T3) -> f64 {
    let mut m: f64 = 0.0;
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.len(), y.len());
        for (u, v) in x.iter().zip(y) {
            assert_eq!(u.len(), v.len());
            for (p, q) in u.iter().zip(v) {
                m = m.max((p - q).abs());
            }
        }
    }
    m
}

/// `(z - mean) / sqrt(var + eps)` over the feature axis of one token.
pub fn norm_token(z: &[f64], eps: f64) -> Vec<f64> {
    let n = z.len() as f64;
    let mut mean = 0.0;
    for v in z {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for v in z {
        var += (v - mean) * (v - mean);
    }
    var /= n;
    z.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect()
}

pub fn norm_all(z: &T3, eps: f64) -> T3 {
    z.iter()
        .map(|b| b.iter().map(|t| norm_token(t, eps)).collect())
        .collect()
}

pub fn ln_oracle(z: &T3, alpha: &[f64], beta: &[f64], eps: f64) -> T3 {
    let n = norm_all(z, eps);
    let mut out = n.clone();
    for b in 0..z.len() {
        for c in 0..z[0].len() {
            for d in 0..z[0][0].len() {
                out[b][c][d] = alpha[d] * n[b][c][d] + beta[d];
            }
        }
    }
    out
}

/// Standardizes each `(b, d)` column across channels.
pub fn in_oracle(z: &T3, alpha: &[f64], beta: &[f64], eps: f64) -> T3 {
    let (bn, cn, dn) = (z.len(), z[0].len(), z[0][0].len());
    let mut out = z.clone();
    for b in 0..bn {
        for d in 0..dn {
            let col: Vec<f64> = (0..cn).map(|c| z[b][c][d]).collect();
            let n = norm_token(&col, eps);
            for c in 0..cn {
                out[b][c][d] = alpha[d] * n[c] + beta[d];
            }
        }
    }
    out
}

/// CN as a triple loop over `b, c, d`.
pub fn cn_oracle(z: &T3, alpha: &T2, beta: &T2, eps: f64) -> T3 {
    let n = norm_all(z, eps);
    let mut out = z.clone();
    for b in 0..z.len() {
        for c in 0..z[0].len() {
            for d in 0..z[0][0].len() {
                out[b][c][d] = alpha[c][d] * n[b][c][d] + beta[c][d];
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub enum Metric {
    Cosine,
    NegL1,
    NegL2,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt() + 1e-8)
}

pub fn similarity(metric: Metric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        Metric::Cosine => cosine(a, b),
        Metric::NegL1 => {
            let mut s = 0.0;
            for i in 0..a.len() {
                s += (a[i] - b[i]).abs();
            }
            -s
        }
        Metric::NegL2 => {
            let mut s = 0.0;
            for i in 0..a.len() {
                s += (a[i] - b[i]) * (a[i] - b[i]);
            }
            -s.sqrt()
        }
    }
}

pub fn softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| ((v - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `Ŝ[b][c][i]` over channels of `basis: B×C×F`.
pub fn channel_sim_oracle(basis: &T3, tau: f64, metric: Metric) -> T3 {
    basis
        .iter()
        .map(|slab| {
            slab.iter()
                .map(|ci| {
                    let logits: Vec<f64> = slab.iter().map(|cj| similarity(metric, ci, cj)).collect();
                    softmax(&logits, tau)
                })
                .collect()
        })
        .collect()
}

pub struct AcnBanks<'a> {
    pub alpha_g: &'a T2,
    pub alpha_l: &'a T2,
    pub beta_g: &'a T2,
    pub beta_l: &'a T2,
}

/// ACN line by line: effective affine from the global row times the
/// similarity-weighted sum of local rows, then applied to `Norm(z)`.
pub fn acn_oracle(z: &T3, p: &AcnBanks, s: &T3, eps: f64) -> T3 {
    let (bn, cn, dn) = (z.len(), z[0].len(), z[0][0].len());
    let n = norm_all(z, eps);
    let mut out = z.clone();
    for b in 0..bn {
        for c in 0..cn {
            for d in 0..dn {
                let mut sa = 0.0;
                let mut sb = 0.0;
                for i in 0..cn {
                    sa += s[b][c][i] * p.alpha_l[i][d];
                    sb += s[b][c][i] * p.beta_l[i][d];
                }
                let alpha = p.alpha_g[c][d] * sa;
                let beta = p.beta_g[c][d] * sb;
                out[b][c][d] = alpha * n[b][c][d] + beta;
            }
        }
    }
    out
}

/// `h(x) = x W + b` per channel window.
pub fn project_oracle(windows: &T3, w: &T2, bias: &[f64]) -> T3 {
    let (l, d) = (w.len(), w[0].len());
    windows
        .iter()
        .map(|slab| {
            slab.iter()
                .map(|x| {
                    (0..d)
                        .map(|k| {
                            let mut s = bias[k];
                            for t in 0..l {
                                s += x[t] * w[t][k];
                            }
                            s
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn proto_sim_oracle(h: &T3, protos: &T2, tau: f64) -> T3 {
    h.iter()
        .map(|slab| {
            slab.iter()
                .map(|u| {
                    let logits: Vec<f64> = protos.iter().map(|p| cosine(u, p)).collect();
                    softmax(&logits, tau)
                })
                .collect()
        })
        .collect()
}

pub struct PcnBanks<'a> {
    pub alpha_p: &'a T2,
    pub beta_p: &'a T2,
    pub proj_w: &'a T2,
    pub proj_b: &'a [f64],
    pub tau: f64,
}

/// PCN line by line, computing both channel-prototype similarities through
/// the shared projection.
pub fn pcn_oracle(z: &T3, windows: &T3, p: &PcnBanks, eps: f64) -> T3 {
    let (bn, cn, dn) = (z.len(), z[0].len(), z[0][0].len());
    let k = p.alpha_p.len();
    let h = project_oracle(windows, p.proj_w, p.proj_b);
    let sa = proto_sim_oracle(&h, p.alpha_p, p.tau);
    let sb = proto_sim_oracle(&h, p.beta_p, p.tau);
    let n = norm_all(z, eps);
    let mut out = z.clone();
    for b in 0..bn {
        for c in 0..cn {
            for d in 0..dn {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                for i in 0..k {
                    alpha += sa[b][c][i] * p.alpha_p[i][d];
                    beta += sb[b][c][i] * p.beta_p[i][d];
                }
                out[b][c][d] = alpha * n[b][c][d] + beta;
            }
        }
    }
    out
}

/// Mean squared error of the best forecast that must be identical for both
/// toy channels: every aligned window gives the two channels the same input,
/// so a shared predictor can only output one value per step. The optimum is
/// found by brute force over a grid around the per-step target mean and
/// refined by ternary search, independently of any closed form.
pub fn brute_force_shared_mse(targets: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    let h = targets[0].0.len();
    let mut total = 0.0;
    for t in 0..h {
        let loss = |p: f64| -> f64 {
            targets
                .iter()
                .map(|(a, b)| (a[t] - p).powi(2) + (b[t] - p).powi(2))
                .sum::<f64>()
        };
        let lo0 = targets
            .iter()
            .flat_map(|(a, b)| [a[t], b[t]])
            .fold(f64::INFINITY, f64::min);
        let hi0 = targets
            .iter()
            .flat_map(|(a, b)| [a[t], b[t]])
            .fold(f64::NEG_INFINITY, f64::max);
        let steps = 2000;
        let mut best = lo0;
        for i in 0..=steps {
            let p = lo0 + (hi0 - lo0) * i as f64 / steps as f64;
            if loss(p) < loss(best) {
                best = p;
            }
        }
        let width = (hi0 - lo0) / steps as f64;
        let (mut lo, mut hi) = (best - width, best + width);
        for _ in 0..200 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if loss(m1) < loss(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        total += loss(0.5 * (lo + hi));
    }
    total / (2.0 * h as f64 * targets.len() as f64)
}
