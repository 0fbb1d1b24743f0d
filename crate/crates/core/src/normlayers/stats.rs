use crate::numerics::Tensor;
use crate::{Error, Result};

/// Per-token mean and standard deviation of a `B×C×D` batch.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    /// `B×C`
    pub mu: Tensor,
    /// `B×C`, `sqrt(var + eps_norm)`
    pub sigma: Tensor,
    pub eps_norm: f64,
}

/// Standardizes every token over the feature axis:
/// `(z - μ) / sqrt(var + eps_norm)` with the population variance.
pub fn normalize_core(z: &Tensor, eps_norm: f64) -> Result<(Tensor, NormStats)> {
    let (b, c, d) = z.dims3()?;
    if d == 0 {
        return Err(Error::shape("normalize_core", "feature axis is empty"));
    }
    if !(eps_norm > 0.0) {
        return Err(Error::InvalidArgument(format!("eps_norm must be > 0, got {eps_norm}")));
    }
    let mut out = z.clone();
    let mut mu = Vec::with_capacity(b * c);
    let mut sigma = Vec::with_capacity(b * c);
    for row in out.data_mut().chunks_mut(d) {
        let (m, s) = standardize(row, eps_norm);
        mu.push(m);
        sigma.push(s);
    }
    let stats = NormStats {
        mu: Tensor::new(&[b, c], mu)?,
        sigma: Tensor::new(&[b, c], sigma)?,
        eps_norm,
    };
    Ok((out.ensure_finite("normalize_core")?, stats))
}

/// Standardizes `row` in place; returns `(mean, sigma)`.
pub(crate) fn standardize(row: &mut [f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sigma = (var + eps).sqrt();
    for v in row.iter_mut() {
        *v = (*v - mean) / sigma;
    }
    (mean, sigma)
}

/// Backward through [`standardize`] for one row:
/// `dz = (dn - mean(dn) - n * mean(dn * n)) / sigma`, accumulated into `dz`.
pub(crate) fn standardize_backward(normed: &[f64], sigma: f64, dn: &[f64], dz: &mut [f64]) {
    let n = normed.len() as f64;
    let mean_dn = dn.iter().sum::<f64>() / n;
    let mean_dn_n = dn.iter().zip(normed).map(|(g, x)| g * x).sum::<f64>() / n;
    for ((o, &g), &x) in dz.iter_mut().zip(dn).zip(normed) {
        *o += (g - mean_dn - x * mean_dn_n) / sigma;
    }
}
