use rand::Rng;

use crate::numerics::{gemm, gemm_a_bt_acc, gemm_at_b_acc, softmax_row_backward, softmax_row_inplace, Tensor};
use crate::{Error, Result};

/// Affine map applied row-wise: `y = x · W + b` with `W: in×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// `W ~ N(0, 1/in)`, `b = 0`.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w: Tensor::randn(&[input, output], 1.0 / (input as f64).sqrt(), rng),
            b: Tensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Tensor::zeros(&[input, output]),
            b: Tensor::zeros(&[output]),
        }
    }

    pub fn input(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn output(&self) -> usize {
        self.w.shape()[1]
    }

    /// Applies the map to `rows` rows stored contiguously in `x`.
    pub(crate) fn forward(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        let (i, o) = (self.input(), self.output());
        if x.len() != rows * i {
            return Err(Error::shape(
                "linear",
                format!("{} values for {rows} rows of width {i}", x.len()),
            ));
        }
        let mut out = vec![0.0; rows * o];
        gemm(x, self.w.data(), &mut out, rows, i, o);
        for row in out.chunks_mut(o) {
            for (v, b) in row.iter_mut().zip(self.b.data()) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients into `grad` and returns `dx`.
    pub(crate) fn backward(&self, x: &[f64], rows: usize, dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        let (i, o) = (self.input(), self.output());
        gemm_at_b_acc(x, dy, grad.w.data_mut(), rows, i, o);
        for row in dy.chunks(o) {
            for (g, v) in grad.b.data_mut().iter_mut().zip(row) {
                *g += v;
            }
        }
        let mut dx = vec![0.0; rows * i];
        gemm_a_bt_acc(dy, self.w.data(), &mut dx, rows, o, i);
        dx
    }
}

/// Two-layer ReLU MLP applied to each token independently.
#[derive(Clone, Debug, PartialEq)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct FfnCache {
    input: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    rows: usize,
}

impl Ffn {
    pub fn init<R: Rng + ?Sized>(d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::init(d, hidden, rng),
            down: Linear::init(hidden, d, rng),
        }
    }

    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            up: Linear::zeros(d, hidden),
            down: Linear::zeros(hidden, d),
        }
    }

    pub(crate) fn forward(&self, x: &[f64], rows: usize) -> Result<(Vec<f64>, FfnCache)> {
        let pre = self.up.forward(x, rows)?;
        let act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
        let out = self.down.forward(&act, rows)?;
        Ok((
            out,
            FfnCache {
                input: x.to_vec(),
                pre,
                act,
                rows,
            },
        ))
    }

    pub(crate) fn backward(&self, cache: &FfnCache, dy: &[f64], grad: &mut Ffn) -> Vec<f64> {
        let mut dact = self.down.backward(&cache.act, cache.rows, dy, &mut grad.down);
        for (g, &p) in dact.iter_mut().zip(&cache.pre) {
            if p <= 0.0 {
                *g = 0.0;
            }
        }
        self.up.backward(&cache.input, cache.rows, &dact, &mut grad.up)
    }
}

/// Multi-head scaled dot-product self-attention across the channel axis.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub query: Linear,
    /// Its bias stays zero: softmax ignores a shift shared by a whole row of scores.
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct AttentionCache {
    input: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `B×heads×C×C`
    pub(crate) probs: Tensor,
    concat: Vec<f64>,
}

impl AttentionBlock {
    pub fn init<R: Rng + ?Sized>(d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::init(d, d, rng),
            key: Linear::init(d, d, rng),
            value: Linear::init(d, d, rng),
            out: Linear::init(d, d, rng),
            heads,
        }
    }

    pub fn zeros(d: usize, heads: usize) -> Self {
        Self {
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            out: Linear::zeros(d, d),
            heads,
        }
    }

    /// `z: B×C×D` flattened; returns the block output (same layout) and cache.
    pub(crate) fn forward(&self, z: &[f64], b: usize, c: usize) -> Result<(Vec<f64>, AttentionCache)> {
        let d = self.query.input();
        let heads = self.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let rows = b * c;
        let q = self.query.forward(z, rows)?;
        let k = self.key.forward(z, rows)?;
        let v = self.value.forward(z, rows)?;
        let mut probs = vec![0.0; b * heads * c * c];
        let mut concat = vec![0.0; rows * d];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                let pslab = &mut probs[(bi * heads + h) * c * c..(bi * heads + h + 1) * c * c];
                for i in 0..c {
                    let qi = &q[(bi * c + i) * d + off..(bi * c + i) * d + off + dh];
                    let prow = &mut pslab[i * c..(i + 1) * c];
                    for j in 0..c {
                        let kj = &k[(bi * c + j) * d + off..(bi * c + j) * d + off + dh];
                        prow[j] = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                    }
                    softmax_row_inplace(prow, 1.0);
                    let orow = &mut concat[(bi * c + i) * d + off..(bi * c + i) * d + off + dh];
                    for j in 0..c {
                        let p = prow[j];
                        let vj = &v[(bi * c + j) * d + off..(bi * c + j) * d + off + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let out = self.out.forward(&concat, rows)?;
        Ok((
            out,
            AttentionCache {
                input: z.to_vec(),
                q,
                k,
                v,
                probs: Tensor::new(&[b, heads, c, c], probs)?,
                concat,
            },
        ))
    }

    pub(crate) fn backward(&self, cache: &AttentionCache, dy: &[f64], grad: &mut AttentionBlock) -> Vec<f64> {
        let d = self.query.input();
        let heads = self.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (b, c) = (cache.probs.shape()[0], cache.probs.shape()[2]);
        let rows = b * c;
        let dconcat = self.out.backward(&cache.concat, rows, dy, &mut grad.out);
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dp = vec![0.0; c];
        let mut dscore = vec![0.0; c];
        let probs = cache.probs.data();
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                let pslab = &probs[(bi * heads + h) * c * c..(bi * heads + h + 1) * c * c];
                for i in 0..c {
                    let prow = &pslab[i * c..(i + 1) * c];
                    let ri = (bi * c + i) * d + off;
                    let doi = &dconcat[ri..ri + dh];
                    for j in 0..c {
                        let rj = (bi * c + j) * d + off;
                        dp[j] = doi.iter().zip(&cache.v[rj..rj + dh]).map(|(x, y)| x * y).sum();
                        for t in 0..dh {
                            dv[rj + t] += prow[j] * doi[t];
                        }
                    }
                    dscore.fill(0.0);
                    softmax_row_backward(prow, &dp, 1.0, &mut dscore);
                    for (j, &ds) in dscore.iter().enumerate() {
                        let s = ds * scale;
                        if s == 0.0 {
                            continue;
                        }
                        let rj = (bi * c + j) * d + off;
                        for t in 0..dh {
                            dq[ri + t] += s * cache.k[rj + t];
                            dk[rj + t] += s * cache.q[ri + t];
                        }
                    }
                }
            }
        }
        let mut dz = self.query.backward(&cache.input, rows, &dq, &mut grad.query);
        for (acc, v) in dz
            .iter_mut()
            .zip(self.key.backward(&cache.input, rows, &dk, &mut grad.key))
        {
            *acc += v;
        }
        for (acc, v) in dz
            .iter_mut()
            .zip(self.value.backward(&cache.input, rows, &dv, &mut grad.value))
        {
            *acc += v;
        }
        dz
    }
}
