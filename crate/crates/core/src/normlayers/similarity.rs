use super::{PcnParams, SimMetric, SimilarityMatrix};
use crate::numerics::{
    cosine_backward, cosine_sim, gemm, softmax_row_backward, softmax_row_inplace, Tensor, COSINE_EPS,
};
use crate::{Error, Result};

/// Which PCN prototype bank a similarity is measured against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrototypeBank {
    Alpha,
    Beta,
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")))
    }
}

pub(crate) fn raw_similarity(metric: SimMetric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        SimMetric::Cosine => cosine_sim(a, b, COSINE_EPS),
        SimMetric::NegL1 => -a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>(),
        SimMetric::NegL2 => -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
    }
}

/// Accumulates `upstream * ∂sim/∂a` into `da` and `upstream * ∂sim/∂b` into `db`.
/// At the kinks of the distance metrics (`a == b` coordinates) the zero
/// subgradient is used.
pub(crate) fn raw_similarity_backward(
    metric: SimMetric,
    a: &[f64],
    b: &[f64],
    upstream: f64,
    da: &mut [f64],
    db: &mut [f64],
) {
    match metric {
        SimMetric::Cosine => cosine_backward(a, b, COSINE_EPS, upstream, da, db),
        SimMetric::NegL1 => {
            for i in 0..a.len() {
                let diff = a[i] - b[i];
                let s = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                da[i] -= upstream * s;
                db[i] += upstream * s;
            }
        }
        SimMetric::NegL2 => {
            let dist = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            if dist > 0.0 {
                for i in 0..a.len() {
                    let g = upstream * (a[i] - b[i]) / dist;
                    da[i] -= g;
                    db[i] += g;
                }
            }
        }
    }
}

/// Channel-by-channel similarity of a `B×C×F` basis, softmaxed per row with
/// temperature `tau`.
pub fn channel_similarity(basis: &Tensor, tau: f64, metric: SimMetric) -> Result<SimilarityMatrix> {
    check_tau(tau)?;
    let (b, c, f) = basis.dims3()?;
    let data = basis.data();
    let mut raw = vec![0.0; b * c * c];
    for bi in 0..b {
        let slab = &data[bi * c * f..(bi + 1) * c * f];
        for i in 0..c {
            for j in 0..c {
                raw[(bi * c + i) * c + j] =
                    raw_similarity(metric, &slab[i * f..(i + 1) * f], &slab[j * f..(j + 1) * f]);
            }
        }
    }
    let raw = Tensor::new(&[b, c, c], raw)?.ensure_finite("channel_similarity")?;
    let mut weights = raw.clone();
    for row in weights.data_mut().chunks_mut(c) {
        softmax_row_inplace(row, tau);
    }
    Ok(SimilarityMatrix { weights, raw })
}

/// Gradient of the basis given the gradient of the softmaxed weights.
pub(crate) fn channel_similarity_backward(
    basis: &Tensor,
    sim: &SimilarityMatrix,
    tau: f64,
    metric: SimMetric,
    grad_weights: &[f64],
    grad_basis: &mut [f64],
) -> Result<()> {
    let (b, c, f) = basis.dims3()?;
    let data = basis.data();
    let mut draw = vec![0.0; c];
    let mut da = vec![0.0; f];
    let mut db = vec![0.0; f];
    for bi in 0..b {
        let slab = &data[bi * c * f..(bi + 1) * c * f];
        for i in 0..c {
            let r = (bi * c + i) * c;
            draw.fill(0.0);
            softmax_row_backward(&sim.weights.data()[r..r + c], &grad_weights[r..r + c], tau, &mut draw);
            for j in 0..c {
                if draw[j] == 0.0 {
                    continue;
                }
                da.fill(0.0);
                db.fill(0.0);
                raw_similarity_backward(
                    metric,
                    &slab[i * f..(i + 1) * f],
                    &slab[j * f..(j + 1) * f],
                    draw[j],
                    &mut da,
                    &mut db,
                );
                let gi = &mut grad_basis[(bi * c + i) * f..(bi * c + i + 1) * f];
                for (g, v) in gi.iter_mut().zip(&da) {
                    *g += v;
                }
                let gj = &mut grad_basis[(bi * c + j) * f..(bi * c + j + 1) * f];
                for (g, v) in gj.iter_mut().zip(&db) {
                    *g += v;
                }
            }
        }
    }
    Ok(())
}

/// `h(x) = x · W + b` applied to every channel window of a `B×C×L` batch.
pub(crate) fn project_windows(windows: &Tensor, p: &PcnParams) -> Result<Tensor> {
    let (b, c, l) = windows.dims3()?;
    let (l_in, d) = p.proj_w.dims2()?;
    if l != l_in {
        return Err(Error::shape(
            "prototype_similarity",
            format!("window length {l} but projection expects {l_in}"),
        ));
    }
    let mut out = vec![0.0; b * c * d];
    gemm(windows.data(), p.proj_w.data(), &mut out, b * c, l, d);
    for row in out.chunks_mut(d) {
        for (o, bias) in row.iter_mut().zip(p.proj_b.data()) {
            *o += bias;
        }
    }
    Tensor::new(&[b, c, d], out)
}

/// Cosine similarity of projected channels `u: B×C×D` to each prototype row,
/// softmaxed over the `K` prototypes.
pub(crate) fn prototype_weights(u: &Tensor, protos: &Tensor, tau: f64) -> Result<SimilarityMatrix> {
    check_tau(tau)?;
    let (b, c, d) = u.dims3()?;
    let (k, d2) = protos.dims2()?;
    if d != d2 {
        return Err(Error::shape(
            "prototype_similarity",
            format!("token width {d}, prototype width {d2}"),
        ));
    }
    let mut raw = vec![0.0; b * c * k];
    for (n, urow) in u.data().chunks(d).enumerate() {
        for j in 0..k {
            raw[n * k + j] = cosine_sim(urow, protos.row(j), COSINE_EPS);
        }
    }
    let raw = Tensor::new(&[b, c, k], raw)?.ensure_finite("prototype_similarity")?;
    let mut weights = raw.clone();
    for row in weights.data_mut().chunks_mut(k) {
        softmax_row_inplace(row, tau);
    }
    Ok(SimilarityMatrix { weights, raw })
}

/// Channel-to-prototype weights for one of PCN's banks. `windows` is the
/// channel-major data window `B×C×L`.
pub fn prototype_similarity(windows: &Tensor, p: &PcnParams, which: PrototypeBank) -> Result<SimilarityMatrix> {
    let u = project_windows(windows, p)?;
    let protos = match which {
        PrototypeBank::Alpha => &p.alpha_p,
        PrototypeBank::Beta => &p.beta_p,
    };
    prototype_weights(&u, protos, p.tau)
}

/// Backward through [`prototype_weights`]: accumulates into `grad_u` and
/// `grad_protos`.
pub(crate) fn prototype_weights_backward(
    u: &Tensor,
    protos: &Tensor,
    sim: &SimilarityMatrix,
    tau: f64,
    grad_weights: &[f64],
    grad_u: &mut [f64],
    grad_protos: &mut [f64],
) -> Result<()> {
    let (_, _, d) = u.dims3()?;
    let (k, _) = protos.dims2()?;
    let mut draw = vec![0.0; k];
    for (n, urow) in u.data().chunks(d).enumerate() {
        draw.fill(0.0);
        softmax_row_backward(
            &sim.weights.data()[n * k..(n + 1) * k],
            &grad_weights[n * k..(n + 1) * k],
            tau,
            &mut draw,
        );
        let gu = &mut grad_u[n * d..(n + 1) * d];
        for j in 0..k {
            let gp = &mut grad_protos[j * d..(j + 1) * d];
            cosine_backward(urow, protos.row(j), COSINE_EPS, draw[j], gu, gp);
        }
    }
    Ok(())
}
