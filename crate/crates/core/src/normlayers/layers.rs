use super::similarity::{channel_similarity_backward, project_windows, prototype_weights, prototype_weights_backward};
use super::stats::{standardize, standardize_backward};
use super::{
    channel_similarity, normalize_core, AcnParams, CnParams, DynamicAffine, LnParams, NormParamSet, PcnParams,
    SimSpace, SimilarityMatrix,
};
use crate::numerics::{gemm, gemm_a_bt_acc, gemm_at_b_acc, Tensor};
use crate::{Error, Result};

/// Everything a layer's backward pass needs from its forward pass.
#[derive(Clone, Debug)]
pub enum NormCache {
    Identity,
    Ln {
        normed: Tensor,
        sigma: Tensor,
    },
    In {
        normed: Tensor,
        /// `B×D`, statistics across channels
        sigma: Tensor,
    },
    Cn {
        normed: Tensor,
        sigma: Tensor,
    },
    Acn {
        normed: Tensor,
        sigma: Tensor,
        basis: Tensor,
        sim: SimilarityMatrix,
        /// dynamic local banks `α̂_L`, `β̂_L`
        local: DynamicAffine,
    },
    Pcn {
        normed: Tensor,
        sigma: Tensor,
        windows: Tensor,
        projected: Tensor,
        sim_alpha: SimilarityMatrix,
        sim_beta: SimilarityMatrix,
        affine: DynamicAffine,
    },
}

impl NormCache {
    /// Similarity weights produced by the forward pass, if any.
    pub fn similarity(&self) -> Option<&SimilarityMatrix> {
        match self {
            NormCache::Acn { sim, .. } => Some(sim),
            NormCache::Pcn { sim_alpha, .. } => Some(sim_alpha),
            _ => None,
        }
    }
}

fn check_len(op: &'static str, t: &Tensor, len: usize) -> Result<()> {
    if t.len() == len {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("parameter bank {:?} does not match width {len}", t.shape()),
        ))
    }
}

fn check_rows(op: &'static str, t: &Tensor, rows: usize, d: usize) -> Result<()> {
    if t.shape() == [rows, d] {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("parameter bank {:?} does not match {rows} channels × {d}", t.shape()),
        ))
    }
}

/// `α ⊙ Norm(z) + β` with one `D`-vector pair shared by all channels.
pub fn ln_forward(z: &Tensor, p: &LnParams, eps_norm: f64) -> Result<Tensor> {
    ln_forward_cached(z, p, eps_norm).map(|(out, _, _)| out)
}

fn ln_forward_cached(z: &Tensor, p: &LnParams, eps_norm: f64) -> Result<(Tensor, Tensor, Tensor)> {
    let (_, _, d) = z.dims3()?;
    check_len("ln_forward", &p.alpha, d)?;
    check_len("ln_forward", &p.beta, d)?;
    let (normed, stats) = normalize_core(z, eps_norm)?;
    let mut out = normed.clone();
    for row in out.data_mut().chunks_mut(d) {
        for ((v, a), b) in row.iter_mut().zip(p.alpha.data()).zip(p.beta.data()) {
            *v = a * *v + b;
        }
    }
    Ok((out.ensure_finite("ln_forward")?, normed, stats.sigma))
}

/// Instance normalization over channel tokens: each `(b, d)` slice is
/// standardized across the channel axis, then a per-feature affine is applied.
pub fn in_forward(z: &Tensor, p: &LnParams, eps_norm: f64) -> Result<Tensor> {
    in_forward_cached(z, p, eps_norm).map(|(out, _, _)| out)
}

fn in_forward_cached(z: &Tensor, p: &LnParams, eps_norm: f64) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, c, d) = z.dims3()?;
    if c < 2 {
        return Err(Error::InvalidArgument(format!(
            "instance normalization across channels needs C >= 2, got {c}"
        )));
    }
    if !(eps_norm > 0.0) {
        return Err(Error::InvalidArgument(format!("eps_norm must be > 0, got {eps_norm}")));
    }
    check_len("in_forward", &p.alpha, d)?;
    check_len("in_forward", &p.beta, d)?;
    let mut normed = z.clone();
    let mut sigma = vec![0.0; b * d];
    let mut column = vec![0.0; c];
    for bi in 0..b {
        let slab = &mut normed.data_mut()[bi * c * d..(bi + 1) * c * d];
        for di in 0..d {
            for ci in 0..c {
                column[ci] = slab[ci * d + di];
            }
            let (_, s) = standardize(&mut column, eps_norm);
            sigma[bi * d + di] = s;
            for ci in 0..c {
                slab[ci * d + di] = column[ci];
            }
        }
    }
    let mut out = normed.clone();
    for row in out.data_mut().chunks_mut(d) {
        for ((v, a), bb) in row.iter_mut().zip(p.alpha.data()).zip(p.beta.data()) {
            *v = a * *v + bb;
        }
    }
    Ok((out.ensure_finite("in_forward")?, normed, Tensor::new(&[b, d], sigma)?))
}

/// `α_c ⊙ Norm(z) + β_c` with a parameter row per channel.
pub fn cn_forward(z: &Tensor, p: &CnParams, eps_norm: f64) -> Result<Tensor> {
    cn_forward_cached(z, p, eps_norm).map(|(out, _, _)| out)
}

fn cn_forward_cached(z: &Tensor, p: &CnParams, eps_norm: f64) -> Result<(Tensor, Tensor, Tensor)> {
    let (_, c, d) = z.dims3()?;
    if p.alpha.shape()[0] != c {
        return Err(Error::shape(
            "cn_forward",
            format!(
                "layer was built for {} channels but the batch has {c}",
                p.alpha.shape()[0]
            ),
        ));
    }
    check_rows("cn_forward", &p.alpha, c, d)?;
    check_rows("cn_forward", &p.beta, c, d)?;
    let (normed, stats) = normalize_core(z, eps_norm)?;
    let mut out = normed.clone();
    for (n, row) in out.data_mut().chunks_mut(d).enumerate() {
        let ci = n % c;
        for ((v, a), b) in row.iter_mut().zip(p.alpha.row(ci)).zip(p.beta.row(ci)) {
            *v = a * *v + b;
        }
    }
    Ok((out.ensure_finite("cn_forward")?, normed, stats.sigma))
}

/// Mixes parameter rows with per-batch weights: `out[b] = weights[b] · bank`
/// for `weights: B×C×R` and `bank: R×D`.
fn mix_rows(weights: &Tensor, bank: &Tensor) -> Result<Tensor> {
    let (b, c, r) = weights.dims3()?;
    let (r2, d) = bank.dims2()?;
    debug_assert_eq!(r, r2);
    let mut out = vec![0.0; b * c * d];
    for bi in 0..b {
        gemm(
            &weights.data()[bi * c * r..(bi + 1) * c * r],
            bank.data(),
            &mut out[bi * c * d..(bi + 1) * c * d],
            c,
            r2,
            d,
        );
    }
    Tensor::new(&[b, c, d], out)
}

/// Adaptive channel normalization.
///
/// `basis` is what channel similarity is measured on: the layer input `z`
/// for latent-space similarity or the `B×C×L` data window otherwise.
/// Returns the output, the channel similarity and the dynamic local banks
/// `α̂_L = Ŝ · α_L`, `β̂_L = Ŝ · β_L`. The effective scale is `α_G ⊙ α̂_L`.
pub fn acn_forward(
    z: &Tensor,
    p: &AcnParams,
    basis: &Tensor,
    eps_norm: f64,
) -> Result<(Tensor, SimilarityMatrix, DynamicAffine)> {
    let (out, _, _, sim, local) = acn_forward_cached(z, p, basis, eps_norm)?;
    Ok((out, sim, local))
}

type AcnForward = (Tensor, Tensor, Tensor, SimilarityMatrix, DynamicAffine);

fn acn_forward_cached(z: &Tensor, p: &AcnParams, basis: &Tensor, eps_norm: f64) -> Result<AcnForward> {
    let (b, c, d) = z.dims3()?;
    for bank in [&p.alpha_g, &p.alpha_l, &p.beta_g, &p.beta_l] {
        check_rows("acn_forward", bank, c, d)?;
    }
    let (bb, bc, _) = basis.dims3()?;
    if (bb, bc) != (b, c) {
        return Err(Error::shape(
            "acn_forward",
            format!(
                "similarity basis {:?} does not match tokens {:?}",
                basis.shape(),
                z.shape()
            ),
        ));
    }
    let sim = channel_similarity(basis, p.tau, p.metric)?;
    let alpha_hat = mix_rows(&sim.weights, &p.alpha_l)?;
    let beta_hat = mix_rows(&sim.weights, &p.beta_l)?;
    let (normed, stats) = normalize_core(z, eps_norm)?;
    let mut out = normed.clone();
    for (n, row) in out.data_mut().chunks_mut(d).enumerate() {
        let ci = n % c;
        let ag = p.alpha_g.row(ci);
        let bg = p.beta_g.row(ci);
        let ah = &alpha_hat.data()[n * d..(n + 1) * d];
        let bh = &beta_hat.data()[n * d..(n + 1) * d];
        for k in 0..d {
            row[k] = ag[k] * ah[k] * row[k] + bg[k] * bh[k];
        }
    }
    let local = DynamicAffine { alpha_hat, beta_hat };
    Ok((out.ensure_finite("acn_forward")?, normed, stats.sigma, sim, local))
}

/// Prototypical channel normalization.
///
/// `windows` is the channel-major data window `B×C×L` that the projection
/// `h` maps into prototype space. Works for any channel count. Returns the
/// output, `Ŝ^α`, `Ŝ^β` and the dynamic banks `α̂_P`, `β̂_P`.
pub fn pcn_forward(
    z: &Tensor,
    windows: &Tensor,
    p: &PcnParams,
    eps_norm: f64,
) -> Result<(Tensor, SimilarityMatrix, SimilarityMatrix, DynamicAffine)> {
    let f = pcn_forward_cached(z, windows, p, eps_norm)?;
    Ok((f.out, f.sim_alpha, f.sim_beta, f.affine))
}

struct PcnForward {
    out: Tensor,
    normed: Tensor,
    sigma: Tensor,
    projected: Tensor,
    sim_alpha: SimilarityMatrix,
    sim_beta: SimilarityMatrix,
    affine: DynamicAffine,
}

fn pcn_forward_cached(z: &Tensor, windows: &Tensor, p: &PcnParams, eps_norm: f64) -> Result<PcnForward> {
    let (b, c, d) = z.dims3()?;
    let (wb, wc, _) = windows.dims3()?;
    if (wb, wc) != (b, c) {
        return Err(Error::shape(
            "pcn_forward",
            format!("windows {:?} do not match tokens {:?}", windows.shape(), z.shape()),
        ));
    }
    let k = p.alpha_p.shape()[0];
    check_rows("pcn_forward", &p.alpha_p, k, d)?;
    check_rows("pcn_forward", &p.beta_p, k, d)?;
    let projected = project_windows(windows, p)?;
    let sim_alpha = prototype_weights(&projected, &p.alpha_p, p.tau)?;
    let sim_beta = prototype_weights(&projected, &p.beta_p, p.tau)?;
    let alpha_hat = mix_rows(&sim_alpha.weights, &p.alpha_p)?;
    let beta_hat = mix_rows(&sim_beta.weights, &p.beta_p)?;
    let (normed, stats) = normalize_core(z, eps_norm)?;
    let mut out = normed.clone();
    for ((v, a), bb) in out.data_mut().iter_mut().zip(alpha_hat.data()).zip(beta_hat.data()) {
        *v = a * *v + bb;
    }
    Ok(PcnForward {
        out: out.ensure_finite("pcn_forward")?,
        normed,
        sigma: stats.sigma,
        projected,
        sim_alpha,
        sim_beta,
        affine: DynamicAffine { alpha_hat, beta_hat },
    })
}

pub(super) fn forward(
    params: &NormParamSet,
    z: &Tensor,
    windows: Option<&Tensor>,
    eps_norm: f64,
) -> Result<(Tensor, NormCache)> {
    match params {
        NormParamSet::Identity => Ok((z.clone(), NormCache::Identity)),
        NormParamSet::Ln(p) => {
            let (out, normed, sigma) = ln_forward_cached(z, p, eps_norm)?;
            Ok((out, NormCache::Ln { normed, sigma }))
        }
        NormParamSet::In(p) => {
            let (out, normed, sigma) = in_forward_cached(z, p, eps_norm)?;
            Ok((out, NormCache::In { normed, sigma }))
        }
        NormParamSet::Cn(p) => {
            let (out, normed, sigma) = cn_forward_cached(z, p, eps_norm)?;
            Ok((out, NormCache::Cn { normed, sigma }))
        }
        NormParamSet::Acn(p) => {
            let basis = match p.space {
                SimSpace::Latent => z,
                SimSpace::Data => {
                    windows.ok_or_else(|| Error::InvalidArgument("data-space ACN needs the input windows".into()))?
                }
            };
            let (out, normed, sigma, sim, local) = acn_forward_cached(z, p, basis, eps_norm)?;
            Ok((
                out,
                NormCache::Acn {
                    normed,
                    sigma,
                    basis: basis.clone(),
                    sim,
                    local,
                },
            ))
        }
        NormParamSet::Pcn(p) => {
            let windows = windows.ok_or_else(|| Error::InvalidArgument("PCN needs the input windows".into()))?;
            let f = pcn_forward_cached(z, windows, p, eps_norm)?;
            Ok((
                f.out,
                NormCache::Pcn {
                    normed: f.normed,
                    sigma: f.sigma,
                    windows: windows.clone(),
                    projected: f.projected,
                    sim_alpha: f.sim_alpha,
                    sim_beta: f.sim_beta,
                    affine: f.affine,
                },
            ))
        }
    }
}

/// Backward through `Norm(z)` given the gradient w.r.t. the normalized values.
fn normalize_backward(normed: &Tensor, sigma: &Tensor, dn: &[f64]) -> Result<Tensor> {
    let (b, c, d) = normed.dims3()?;
    let mut dz = vec![0.0; b * c * d];
    for (n, ((nrow, dnrow), dzrow)) in normed
        .data()
        .chunks(d)
        .zip(dn.chunks(d))
        .zip(dz.chunks_mut(d))
        .enumerate()
    {
        standardize_backward(nrow, sigma.data()[n], dnrow, dzrow);
    }
    Tensor::new(&[b, c, d], dz)
}

pub(super) fn backward(params: &NormParamSet, cache: &NormCache, g: &Tensor) -> Result<(Tensor, NormParamSet)> {
    let mut grads = params.zeros_like();
    match (params, cache, &mut grads) {
        (NormParamSet::Identity, NormCache::Identity, _) => Ok((g.clone(), grads)),
        (NormParamSet::Ln(p), NormCache::Ln { normed, sigma }, NormParamSet::Ln(gp)) => {
            check_same(normed, g)?;
            let d = p.alpha.len();
            let mut dn = g.data().to_vec();
            for ((dnrow, grow), nrow) in dn.chunks_mut(d).zip(g.data().chunks(d)).zip(normed.data().chunks(d)) {
                for k in 0..d {
                    gp.alpha.data_mut()[k] += grow[k] * nrow[k];
                    gp.beta.data_mut()[k] += grow[k];
                    dnrow[k] *= p.alpha.data()[k];
                }
            }
            Ok((normalize_backward(normed, sigma, &dn)?, grads))
        }
        (NormParamSet::In(p), NormCache::In { normed, sigma }, NormParamSet::In(gp)) => {
            check_same(normed, g)?;
            let (b, c, d) = normed.dims3()?;
            let mut dz = vec![0.0; b * c * d];
            let mut ncol = vec![0.0; c];
            let mut dncol = vec![0.0; c];
            let mut dzcol = vec![0.0; c];
            for bi in 0..b {
                let base = bi * c * d;
                for di in 0..d {
                    for ci in 0..c {
                        let idx = base + ci * d + di;
                        let gv = g.data()[idx];
                        let nv = normed.data()[idx];
                        gp.alpha.data_mut()[di] += gv * nv;
                        gp.beta.data_mut()[di] += gv;
                        ncol[ci] = nv;
                        dncol[ci] = gv * p.alpha.data()[di];
                    }
                    dzcol.fill(0.0);
                    standardize_backward(&ncol, sigma.data()[bi * d + di], &dncol, &mut dzcol);
                    for ci in 0..c {
                        dz[base + ci * d + di] = dzcol[ci];
                    }
                }
            }
            Ok((Tensor::new(&[b, c, d], dz)?, grads))
        }
        (NormParamSet::Cn(p), NormCache::Cn { normed, sigma }, NormParamSet::Cn(gp)) => {
            check_same(normed, g)?;
            let (_, c, d) = normed.dims3()?;
            let mut dn = g.data().to_vec();
            for (n, ((dnrow, grow), nrow)) in dn
                .chunks_mut(d)
                .zip(g.data().chunks(d))
                .zip(normed.data().chunks(d))
                .enumerate()
            {
                let ci = n % c;
                let arow = p.alpha.row(ci);
                for k in 0..d {
                    gp.alpha.data_mut()[ci * d + k] += grow[k] * nrow[k];
                    gp.beta.data_mut()[ci * d + k] += grow[k];
                    dnrow[k] *= arow[k];
                }
            }
            Ok((normalize_backward(normed, sigma, &dn)?, grads))
        }
        (
            NormParamSet::Acn(p),
            NormCache::Acn {
                normed,
                sigma,
                basis,
                sim,
                local,
            },
            NormParamSet::Acn(gp),
        ) => {
            check_same(normed, g)?;
            let (b, c, d) = normed.dims3()?;
            let mut dn = vec![0.0; b * c * d];
            let mut d_alpha_hat = vec![0.0; b * c * d];
            let mut d_beta_hat = vec![0.0; b * c * d];
            for n in 0..b * c {
                let ci = n % c;
                let r = n * d..(n + 1) * d;
                let (grow, nrow) = (&g.data()[r.clone()], &normed.data()[r.clone()]);
                let (ah, bh) = (&local.alpha_hat.data()[r.clone()], &local.beta_hat.data()[r.clone()]);
                for k in 0..d {
                    let ag = p.alpha_g.data()[ci * d + k];
                    let bg = p.beta_g.data()[ci * d + k];
                    let d_alpha_eff = grow[k] * nrow[k];
                    gp.alpha_g.data_mut()[ci * d + k] += d_alpha_eff * ah[k];
                    gp.beta_g.data_mut()[ci * d + k] += grow[k] * bh[k];
                    d_alpha_hat[n * d + k] = d_alpha_eff * ag;
                    d_beta_hat[n * d + k] = grow[k] * bg;
                    dn[n * d + k] = grow[k] * ag * ah[k];
                }
            }
            let mut d_weights = vec![0.0; b * c * c];
            for bi in 0..b {
                let w = &sim.weights.data()[bi * c * c..(bi + 1) * c * c];
                let slab = bi * c * d..(bi + 1) * c * d;
                gemm_at_b_acc(w, &d_alpha_hat[slab.clone()], gp.alpha_l.data_mut(), c, c, d);
                gemm_at_b_acc(w, &d_beta_hat[slab.clone()], gp.beta_l.data_mut(), c, c, d);
                let dw = &mut d_weights[bi * c * c..(bi + 1) * c * c];
                gemm_a_bt_acc(&d_alpha_hat[slab.clone()], p.alpha_l.data(), dw, c, d, c);
                gemm_a_bt_acc(&d_beta_hat[slab], p.beta_l.data(), dw, c, d, c);
            }
            let mut dz = normalize_backward(normed, sigma, &dn)?;
            if p.space == SimSpace::Latent {
                channel_similarity_backward(basis, sim, p.tau, p.metric, &d_weights, dz.data_mut())?;
            }
            Ok((dz, grads))
        }
        (
            NormParamSet::Pcn(p),
            NormCache::Pcn {
                normed,
                sigma,
                windows,
                projected,
                sim_alpha,
                sim_beta,
                affine,
            },
            NormParamSet::Pcn(gp),
        ) => {
            check_same(normed, g)?;
            let (b, c, d) = normed.dims3()?;
            let (_, _, l) = windows.dims3()?;
            let k = p.alpha_p.shape()[0];
            let mut dn = vec![0.0; b * c * d];
            let mut d_alpha_hat = vec![0.0; b * c * d];
            for i in 0..b * c * d {
                let gv = g.data()[i];
                d_alpha_hat[i] = gv * normed.data()[i];
                dn[i] = gv * affine.alpha_hat.data()[i];
            }
            let d_beta_hat = g.data();
            let mut dwa = vec![0.0; b * c * k];
            let mut dwb = vec![0.0; b * c * k];
            for bi in 0..b {
                let slab = bi * c * d..(bi + 1) * c * d;
                let ws = bi * c * k..(bi + 1) * c * k;
                gemm_at_b_acc(
                    &sim_alpha.weights.data()[ws.clone()],
                    &d_alpha_hat[slab.clone()],
                    gp.alpha_p.data_mut(),
                    c,
                    k,
                    d,
                );
                gemm_at_b_acc(
                    &sim_beta.weights.data()[ws.clone()],
                    &d_beta_hat[slab.clone()],
                    gp.beta_p.data_mut(),
                    c,
                    k,
                    d,
                );
                gemm_a_bt_acc(
                    &d_alpha_hat[slab.clone()],
                    p.alpha_p.data(),
                    &mut dwa[ws.clone()],
                    c,
                    d,
                    k,
                );
                gemm_a_bt_acc(&d_beta_hat[slab], p.beta_p.data(), &mut dwb[ws], c, d, k);
            }
            let mut du = vec![0.0; b * c * d];
            prototype_weights_backward(
                projected,
                &p.alpha_p,
                sim_alpha,
                p.tau,
                &dwa,
                &mut du,
                gp.alpha_p.data_mut(),
            )?;
            prototype_weights_backward(
                projected,
                &p.beta_p,
                sim_beta,
                p.tau,
                &dwb,
                &mut du,
                gp.beta_p.data_mut(),
            )?;
            gemm_at_b_acc(windows.data(), &du, gp.proj_w.data_mut(), b * c, l, d);
            for row in du.chunks(d) {
                for (o, v) in gp.proj_b.data_mut().iter_mut().zip(row) {
                    *o += v;
                }
            }
            Ok((normalize_backward(normed, sigma, &dn)?, grads))
        }
        _ => Err(Error::MissingCache),
    }
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(
            "norm_backward",
            format!("grad {:?} vs cached {:?}", b.shape(), a.shape()),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normlayers::{NormKind, NormSpec, SimMetric};
    use crate::numerics::{ParamSet, RngState};

    fn randomize(p: &mut NormParamSet, rng: &mut impl rand::Rng) {
        for b in p.banks_mut() {
            let shape = b.tensor.shape().to_vec();
            *b.tensor = Tensor::randn(&shape, 0.7, rng);
        }
    }

    fn weighted_sum(p: &NormParamSet, z: &Tensor, x: &Tensor, r: &Tensor) -> f64 {
        let (out, _) = p.forward(z, Some(x), 1e-5).unwrap();
        out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    }

    fn check_grads(spec: NormSpec) {
        let mut rng = RngState::new(3).stream("layers-fd");
        let (b, c, d, l) = (2, 3, 4, 6);
        let mut p = NormParamSet::init(&spec, c, d, l, &mut rng);
        randomize(&mut p, &mut rng);
        let z = Tensor::randn(&[b, c, d], 1.0, &mut rng);
        let x = Tensor::randn(&[b, c, l], 1.0, &mut rng);
        let r = Tensor::randn(&[b, c, d], 1.0, &mut rng);
        let (_, cache) = p.forward(&z, Some(&x), 1e-5).unwrap();
        let (gz, gp) = p.backward(&cache, &r).unwrap();
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / (1e-8f64).max(a.abs() + n.abs());
        let mut worst = 0.0f64;
        for i in 0..z.len() {
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp.data_mut()[i] += h;
            zm.data_mut()[i] -= h;
            let num = (weighted_sum(&p, &zp, &x, &r) - weighted_sum(&p, &zm, &x, &r)) / (2.0 * h);
            worst = worst.max(rel(gz.data()[i], num));
        }
        let names: Vec<String> = p.banks().iter().map(|b| b.name.clone()).collect();
        for (bi, name) in names.iter().enumerate() {
            let n = p.banks()[bi].tensor.len();
            for i in 0..n {
                let mut pp = p.clone();
                pp.banks_mut()[bi].tensor.data_mut()[i] += h;
                let mut pm = p.clone();
                pm.banks_mut()[bi].tensor.data_mut()[i] -= h;
                let num = (weighted_sum(&pp, &z, &x, &r) - weighted_sum(&pm, &z, &x, &r)) / (2.0 * h);
                let ana = gp.banks()[bi].tensor.data()[i];
                assert!(rel(ana, num) < 1e-5, "{} {name}[{i}]: {ana} vs {num}", spec.kind);
            }
        }
        assert!(worst < 1e-5, "{} input grad rel err {worst}", spec.kind);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in NormKind::ALL {
            check_grads(NormSpec::with_kind(kind));
        }
        for metric in SimMetric::ALL {
            for space in [SimSpace::Latent, SimSpace::Data] {
                check_grads(NormSpec {
                    metric,
                    space,
                    tau: 0.5,
                    ..NormSpec::with_kind(NormKind::Acn)
                });
            }
        }
    }

    #[test]
    fn identity_at_init() {
        let mut rng = RngState::new(1).stream("identity");
        let z = Tensor::randn(&[3, 4, 5], 2.0, &mut rng);
        let x = Tensor::randn(&[3, 4, 7], 1.0, &mut rng);
        let (core, _) = normalize_core(&z, 1e-5).unwrap();
        for kind in [NormKind::Ln, NormKind::Cn, NormKind::Acn, NormKind::Pcn] {
            let p = NormParamSet::init(&NormSpec::with_kind(kind), 4, 5, 7, &mut rng);
            let (out, _) = p.forward(&z, Some(&x), 1e-5).unwrap();
            assert!(out.max_abs_diff(&core) <= 1e-12, "{kind}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = RngState::new(2).stream("zero");
        let z = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let x = Tensor::randn(&[2, 3, 5], 1.0, &mut rng);
        for kind in NormKind::ALL {
            let mut p = NormParamSet::init(&NormSpec::with_kind(kind), 3, 4, 5, &mut rng);
            randomize(&mut p, &mut rng);
            let (_, cache) = p.forward(&z, Some(&x), 1e-5).unwrap();
            let (gz, gp) = p.backward(&cache, &Tensor::zeros(&[2, 3, 4])).unwrap();
            assert_eq!(gz.max_abs(), 0.0);
            assert!(gp.banks().iter().all(|b| b.tensor.max_abs() == 0.0));
        }
    }

    #[test]
    fn ln_scale_shift_example() {
        let z = Tensor::new(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = LnParams {
            alpha: Tensor::full(&[3], 2.0),
            beta: Tensor::full(&[3], 1.0),
        };
        let out = ln_forward(&z, &p, 1e-12).unwrap();
        for (a, b) in out.data().iter().zip([-1.4495, 1.0, 3.4495]) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn cn_separates_identical_channels_ln_does_not() {
        let z = Tensor::new(&[1, 2, 3], vec![1.0, 4.0, 2.0, 1.0, 4.0, 2.0]).unwrap();
        let ln = ln_forward(&z, &LnParams::identity(3), 1e-5).unwrap();
        assert!(ln.row(0)[..3] == ln.data()[3..]);
        let mut p = CnParams::identity(2, 3);
        p.alpha.row_mut(1).iter_mut().for_each(|v| *v += 0.1);
        let cn = cn_forward(&z, &p, 1e-5).unwrap();
        let gap = cn.data()[..3]
            .iter()
            .zip(&cn.data()[3..])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(gap > 1e-6);
    }

    #[test]
    fn cn_rejects_wrong_channel_count() {
        let z = Tensor::zeros(&[1, 3, 2]);
        assert!(matches!(
            cn_forward(&z, &CnParams::identity(2, 2), 1e-5),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn instance_norm_centres_each_feature_across_channels() {
        let mut rng = RngState::new(4).stream("in");
        let z = Tensor::randn(&[2, 4, 3], 1.0, &mut rng);
        let out = in_forward(&z, &LnParams::identity(3), 1e-5).unwrap();
        for b in 0..2 {
            for d in 0..3 {
                let m: f64 = (0..4).map(|c| out.at(&[b, c, d])).sum::<f64>() / 4.0;
                assert!(m.abs() < 1e-12);
            }
        }
        assert!(in_forward(&Tensor::zeros(&[1, 1, 3]), &LnParams::identity(3), 1e-5).is_err());
    }

    #[test]
    fn acn_with_ones_local_banks_is_cn() {
        let mut rng = RngState::new(5).stream("acn-cn");
        let z = Tensor::randn(&[3, 4, 5], 1.0, &mut rng);
        let mut p = AcnParams::identity(4, 5, 0.1, SimMetric::Cosine, SimSpace::Latent);
        p.alpha_g = Tensor::randn(&[4, 5], 1.0, &mut rng);
        p.beta_g = Tensor::randn(&[4, 5], 1.0, &mut rng);
        p.beta_l = Tensor::ones(&[4, 5]);
        let (out, _, _) = acn_forward(&z, &p, &z, 1e-5).unwrap();
        let cn = cn_forward(
            &z,
            &CnParams {
                alpha: p.alpha_g.clone(),
                beta: p.beta_g.clone(),
            },
            1e-5,
        )
        .unwrap();
        assert!(out.max_abs_diff(&cn) <= 1e-12);
    }

    #[test]
    fn pcn_with_one_prototype_is_ln() {
        let mut rng = RngState::new(6).stream("pcn-ln");
        let z = Tensor::randn(&[3, 4, 5], 1.0, &mut rng);
        let x = Tensor::randn(&[3, 4, 6], 1.0, &mut rng);
        let mut p = PcnParams::identity(1, 5, 6, 0.1, &mut rng);
        p.alpha_p = Tensor::randn(&[1, 5], 1.0, &mut rng);
        p.beta_p = Tensor::randn(&[1, 5], 1.0, &mut rng);
        let (out, _, _, _) = pcn_forward(&z, &x, &p, 1e-5).unwrap();
        let ln = ln_forward(
            &z,
            &LnParams {
                alpha: p.alpha_p.reshape(&[5]).unwrap(),
                beta: p.beta_p.reshape(&[5]).unwrap(),
            },
            1e-5,
        )
        .unwrap();
        assert!(out.max_abs_diff(&ln) <= 1e-12);
    }

    #[test]
    fn pcn_accepts_any_channel_count() {
        let mut rng = RngState::new(7).stream("pcn-any");
        let p = PcnParams::identity(3, 4, 5, 0.1, &mut rng);
        for c in [3, 7] {
            let z = Tensor::randn(&[2, c, 4], 1.0, &mut rng);
            let x = Tensor::randn(&[2, c, 5], 1.0, &mut rng);
            let (out, sa, _, _) = pcn_forward(&z, &x, &p, 1e-5).unwrap();
            assert_eq!(out.shape(), [2, c, 4]);
            assert_eq!(sa.weights.shape(), [2, c, 3]);
        }
    }

    #[test]
    fn mismatched_cache_is_rejected() {
        let p = NormParamSet::Ln(LnParams::identity(2));
        let g = Tensor::zeros(&[1, 1, 2]);
        assert!(matches!(p.backward(&NormCache::Identity, &g), Err(Error::MissingCache)));
    }
}
