use super::blocks::{AttentionCache, FfnCache};
use super::{
    AttentionBlock, AttentionTrace, BackboneConfig, BackboneKind, Ffn, ForecastBatch, IdentifierMode, Linear,
    SeriesBatch, IO_NORM_EPS,
};
use crate::normlayers::{NormCache, NormParamSet};
use crate::numerics::{Bank, BankMut, ParamSet, RngState, Tensor};
use crate::{Error, Result};

#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq)]
pub enum EncoderLayer {
    /// attention → residual → norm → MLP → residual → norm
    Attention {
        attn: AttentionBlock,
        norm1: NormParamSet,
        ffn: Ffn,
        norm2: NormParamSet,
    },
    /// MLP → residual → norm, no mixing across channels
    Mlp { ffn: Ffn, norm: NormParamSet },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embed: Linear,
    /// `C×D` bank added to the channel tokens.
    pub identifier: Option<Tensor>,
    pub identifier_frozen: bool,
    pub layers: Vec<EncoderLayer>,
    pub head: Linear,
}

impl ModelParams {
    /// Seeded initialization. Each bank draws from its own named stream, so
    /// models that differ only in their norm layers share every other weight.
    pub fn init(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let rng = RngState::new(seed);
        let d = cfg.d_model;
        let identifier = match cfg.identifier {
            IdentifierMode::None => None,
            IdentifierMode::Learnable => Some(Tensor::zeros(&[cfg.channels, d])),
            IdentifierMode::FixedConstant => Some(Tensor::randn(
                &[cfg.channels, d],
                1.0,
                &mut rng.stream("init/identifier"),
            )),
        };
        let norm = |name: String| NormParamSet::init(&cfg.norm, cfg.channels, d, cfg.lookback, &mut rng.stream(&name));
        let layers = match cfg.kind {
            BackboneKind::Linear => Vec::new(),
            BackboneKind::ChannelAttention => (0..cfg.depth)
                .map(|i| EncoderLayer::Attention {
                    attn: AttentionBlock::init(d, cfg.heads, &mut rng.stream(&format!("init/layers.{i}.attn"))),
                    norm1: norm(format!("init/layers.{i}.norm1")),
                    ffn: Ffn::init(d, cfg.ffn_hidden, &mut rng.stream(&format!("init/layers.{i}.ffn"))),
                    norm2: norm(format!("init/layers.{i}.norm2")),
                })
                .collect(),
            BackboneKind::ResidualMlp => (0..cfg.depth)
                .map(|i| EncoderLayer::Mlp {
                    ffn: Ffn::init(d, cfg.ffn_hidden, &mut rng.stream(&format!("init/layers.{i}.ffn"))),
                    norm: norm(format!("init/layers.{i}.norm")),
                })
                .collect(),
        };
        Ok(Self {
            embed: Linear::init(cfg.lookback, d, &mut rng.stream("init/embed")),
            identifier,
            identifier_frozen: cfg.identifier == IdentifierMode::FixedConstant,
            layers,
            head: Linear::init(d, cfg.horizon, &mut rng.stream("init/head")),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for b in out.banks_mut() {
            b.tensor.data_mut().fill(0.0);
        }
        out
    }

    /// Every norm layer in encoder order.
    pub fn norm_layers(&self) -> Vec<&NormParamSet> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                EncoderLayer::Attention { norm1, norm2, .. } => vec![norm1, norm2],
                EncoderLayer::Mlp { norm, .. } => vec![norm],
            })
            .collect()
    }

    pub fn norm_layers_mut(&mut self) -> Vec<&mut NormParamSet> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                EncoderLayer::Attention { norm1, norm2, .. } => vec![norm1, norm2],
                EncoderLayer::Mlp { norm, .. } => vec![norm],
            })
            .collect()
    }
}

fn linear_banks<'a>(prefix: &str, l: &'a Linear, out: &mut Vec<Bank<'a>>) {
    out.push(crate::numerics::bank(format!("{prefix}.w"), &l.w));
    out.push(crate::numerics::bank(format!("{prefix}.b"), &l.b));
}

fn linear_banks_mut<'a>(prefix: &str, l: &'a mut Linear, out: &mut Vec<BankMut<'a>>) {
    out.push(crate::numerics::bank_mut(format!("{prefix}.w"), &mut l.w));
    out.push(crate::numerics::bank_mut(format!("{prefix}.b"), &mut l.b));
}

fn norm_banks<'a>(prefix: &str, n: &'a NormParamSet, out: &mut Vec<Bank<'a>>) {
    for mut b in n.banks() {
        b.name = format!("{prefix}.{}", b.name);
        out.push(b);
    }
}

fn norm_banks_mut<'a>(prefix: &str, n: &'a mut NormParamSet, out: &mut Vec<BankMut<'a>>) {
    for mut b in n.banks_mut() {
        b.name = format!("{prefix}.{}", b.name);
        out.push(b);
    }
}

impl ParamSet for ModelParams {
    fn banks(&self) -> Vec<Bank<'_>> {
        let mut out = Vec::new();
        linear_banks("embed", &self.embed, &mut out);
        if let Some(id) = &self.identifier {
            out.push(Bank {
                name: "identifier".into(),
                tensor: id,
                trainable: !self.identifier_frozen,
            });
        }
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                EncoderLayer::Attention {
                    attn,
                    norm1,
                    ffn,
                    norm2,
                } => {
                    linear_banks(&format!("layers.{i}.attn.query"), &attn.query, &mut out);
                    out.push(crate::numerics::bank(format!("layers.{i}.attn.key.w"), &attn.key.w));
                    linear_banks(&format!("layers.{i}.attn.value"), &attn.value, &mut out);
                    linear_banks(&format!("layers.{i}.attn.out"), &attn.out, &mut out);
                    norm_banks(&format!("layers.{i}.norm1"), norm1, &mut out);
                    linear_banks(&format!("layers.{i}.ffn.up"), &ffn.up, &mut out);
                    linear_banks(&format!("layers.{i}.ffn.down"), &ffn.down, &mut out);
                    norm_banks(&format!("layers.{i}.norm2"), norm2, &mut out);
                }
                EncoderLayer::Mlp { ffn, norm } => {
                    linear_banks(&format!("layers.{i}.ffn.up"), &ffn.up, &mut out);
                    linear_banks(&format!("layers.{i}.ffn.down"), &ffn.down, &mut out);
                    norm_banks(&format!("layers.{i}.norm"), norm, &mut out);
                }
            }
        }
        linear_banks("head", &self.head, &mut out);
        out
    }

    fn banks_mut(&mut self) -> Vec<BankMut<'_>> {
        let mut out = Vec::new();
        linear_banks_mut("embed", &mut self.embed, &mut out);
        let frozen = self.identifier_frozen;
        if let Some(id) = &mut self.identifier {
            out.push(BankMut {
                name: "identifier".into(),
                tensor: id,
                trainable: !frozen,
            });
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                EncoderLayer::Attention {
                    attn,
                    norm1,
                    ffn,
                    norm2,
                } => {
                    linear_banks_mut(&format!("layers.{i}.attn.query"), &mut attn.query, &mut out);
                    out.push(crate::numerics::bank_mut(
                        format!("layers.{i}.attn.key.w"),
                        &mut attn.key.w,
                    ));
                    linear_banks_mut(&format!("layers.{i}.attn.value"), &mut attn.value, &mut out);
                    linear_banks_mut(&format!("layers.{i}.attn.out"), &mut attn.out, &mut out);
                    norm_banks_mut(&format!("layers.{i}.norm1"), norm1, &mut out);
                    linear_banks_mut(&format!("layers.{i}.ffn.up"), &mut ffn.up, &mut out);
                    linear_banks_mut(&format!("layers.{i}.ffn.down"), &mut ffn.down, &mut out);
                    norm_banks_mut(&format!("layers.{i}.norm2"), norm2, &mut out);
                }
                EncoderLayer::Mlp { ffn, norm } => {
                    linear_banks_mut(&format!("layers.{i}.ffn.up"), &mut ffn.up, &mut out);
                    linear_banks_mut(&format!("layers.{i}.ffn.down"), &mut ffn.down, &mut out);
                    norm_banks_mut(&format!("layers.{i}.norm"), norm, &mut out);
                }
            }
        }
        linear_banks_mut("head", &mut self.head, &mut out);
        out
    }
}

#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
enum LayerCache {
    Attention {
        attn: AttentionCache,
        norm1: NormCache,
        ffn: FfnCache,
        norm2: NormCache,
    },
    Mlp {
        ffn: FfnCache,
        norm: NormCache,
    },
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelCache {
    /// Channel-major input windows after optional standardization, `B×C×L`.
    windows: Tensor,
    /// Per-(b, c) mean and std used to standardize the input.
    io_stats: Option<(Vec<f64>, Vec<f64>)>,
    layers: Vec<LayerCache>,
    encoded: Tensor,
    trace: AttentionTrace,
}

impl ModelCache {
    /// Encoder output tokens, `B×C×D`.
    pub fn encoded(&self) -> &Tensor {
        &self.encoded
    }

    pub fn trace(&self) -> &AttentionTrace {
        &self.trace
    }

    /// Norm-layer caches in encoder order.
    pub fn norm_caches(&self) -> Vec<&NormCache> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                LayerCache::Attention { norm1, norm2, .. } => vec![norm1, norm2],
                LayerCache::Mlp { norm, .. } => vec![norm],
            })
            .collect()
    }

    /// Channel-major windows the model actually consumed, `B×C×L`.
    pub fn windows(&self) -> &Tensor {
        &self.windows
    }
}

/// Maps every channel's lookback window through one shared linear map:
/// `z[b, c] = x[b, :, c] · W + bias`, giving `B×C×D`.
pub fn embed_channels(x: &SeriesBatch, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (l, d) = w.dims2()?;
    if l != x.lookback() {
        return Err(Error::shape(
            "embed_channels",
            format!("embedding expects windows of {l}, got {}", x.lookback()),
        ));
    }
    if b.len() != d {
        return Err(Error::shape(
            "embed_channels",
            format!("bias of {} for width {d}", b.len()),
        ));
    }
    let lin = Linear {
        w: w.clone(),
        b: b.clone(),
    };
    let windows = x.channel_major();
    let out = lin.forward(windows.data(), x.batch() * x.channels())?;
    Tensor::new(&[x.batch(), x.channels(), d], out)?.ensure_finite("embed_channels")
}

/// Adds row `c` of `bank` to every token of channel `c`.
pub fn add_channel_identifier(z: &Tensor, bank: &Tensor, mode: IdentifierMode) -> Result<Tensor> {
    if mode == IdentifierMode::None {
        return Err(Error::InvalidArgument("identifier mode is none".into()));
    }
    let (_, c, d) = z.dims3()?;
    if bank.shape() != [c, d] {
        return Err(Error::shape(
            "add_channel_identifier",
            format!("bank {:?} for {c} channels × {d}", bank.shape()),
        ));
    }
    let mut out = z.clone();
    for (n, row) in out.data_mut().chunks_mut(d).enumerate() {
        for (v, e) in row.iter_mut().zip(bank.row(n % c)) {
            *v += e;
        }
    }
    Ok(out)
}

fn check_tokens(z: &Tensor, d_model: usize) -> Result<(usize, usize, usize)> {
    let (b, c, d) = z.dims3()?;
    if d != d_model {
        return Err(Error::shape(
            "encoder",
            format!("token width {d}, model width {d_model}"),
        ));
    }
    Ok((b, c, d))
}

fn add_into(acc: &mut [f64], other: &[f64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

fn encode(
    layers: &[EncoderLayer],
    z: &Tensor,
    windows: Option<&Tensor>,
    eps_norm: f64,
) -> Result<(Tensor, Vec<LayerCache>, AttentionTrace)> {
    let (b, c, d) = z.dims3()?;
    let mut h = z.clone();
    let mut caches = Vec::with_capacity(layers.len());
    let mut trace = AttentionTrace::default();
    for layer in layers {
        match layer {
            EncoderLayer::Attention {
                attn,
                norm1,
                ffn,
                norm2,
            } => {
                let (a, attn_cache) = attn.forward(h.data(), b, c)?;
                let mut r1 = h.clone();
                add_into(r1.data_mut(), &a);
                let (z1, n1) = norm1.forward(&r1, windows, eps_norm)?;
                let (f, ffn_cache) = ffn.forward(z1.data(), b * c)?;
                let mut r2 = z1;
                add_into(r2.data_mut(), &f);
                let (z2, n2) = norm2.forward(&r2, windows, eps_norm)?;
                trace.layers.push(attn_cache.probs.clone());
                caches.push(LayerCache::Attention {
                    attn: attn_cache,
                    norm1: n1,
                    ffn: ffn_cache,
                    norm2: n2,
                });
                h = z2;
            }
            EncoderLayer::Mlp { ffn, norm } => {
                let (f, ffn_cache) = ffn.forward(h.data(), b * c)?;
                let mut r = h;
                add_into(r.data_mut(), &f);
                let (out, n) = norm.forward(&r, windows, eps_norm)?;
                caches.push(LayerCache::Mlp {
                    ffn: ffn_cache,
                    norm: n,
                });
                h = out;
            }
        }
    }
    debug_assert_eq!(h.shape(), [b, c, d]);
    Ok((h.ensure_finite("encoder")?, caches, trace))
}

fn encode_backward(
    layers: &[EncoderLayer],
    caches: &[LayerCache],
    grad: Tensor,
    grads: &mut [EncoderLayer],
) -> Result<Tensor> {
    let mut g = grad;
    for ((layer, cache), lg) in layers.iter().zip(caches).zip(grads.iter_mut()).rev() {
        match (layer, cache, lg) {
            (
                EncoderLayer::Attention {
                    attn,
                    norm1,
                    ffn,
                    norm2,
                },
                LayerCache::Attention {
                    attn: ac,
                    norm1: n1c,
                    ffn: fc,
                    norm2: n2c,
                },
                EncoderLayer::Attention {
                    attn: ga,
                    norm1: gn1,
                    ffn: gf,
                    norm2: gn2,
                },
            ) => {
                let (dr2, pg2) = norm2.backward(n2c, &g)?;
                accumulate_norm(gn2, &pg2)?;
                let mut dz1 = dr2.clone();
                add_into(dz1.data_mut(), &ffn.backward(fc, dr2.data(), gf));
                let (dr1, pg1) = norm1.backward(n1c, &dz1)?;
                accumulate_norm(gn1, &pg1)?;
                let mut dz = dr1.clone();
                add_into(dz.data_mut(), &attn.backward(ac, dr1.data(), ga));
                g = dz;
            }
            (
                EncoderLayer::Mlp { ffn, norm },
                LayerCache::Mlp { ffn: fc, norm: nc },
                EncoderLayer::Mlp { ffn: gf, norm: gn },
            ) => {
                let (dr, pg) = norm.backward(nc, &g)?;
                accumulate_norm(gn, &pg)?;
                let mut dz = dr.clone();
                add_into(dz.data_mut(), &ffn.backward(fc, dr.data(), gf));
                g = dz;
            }
            _ => return Err(Error::MissingCache),
        }
    }
    Ok(g)
}

fn accumulate_norm(acc: &mut NormParamSet, grad: &NormParamSet) -> Result<()> {
    for (a, g) in acc.banks_mut().into_iter().zip(grad.banks()) {
        a.tensor.axpy(1.0, g.tensor)?;
    }
    Ok(())
}

fn validate_layers(layers: &[EncoderLayer], want_attention: bool) -> Result<()> {
    let ok = layers
        .iter()
        .all(|l| matches!(l, EncoderLayer::Attention { .. }) == want_attention);
    if ok && !layers.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "expected a non-empty stack of {} layers",
            if want_attention { "attention" } else { "MLP" }
        )))
    }
}

/// Runs a stack of attention layers over `z: B×C×D`. `windows` (`B×C×L`)
/// is required when a norm layer measures similarity in data space.
pub fn channel_attention_encoder(
    z: &Tensor,
    cfg: &BackboneConfig,
    layers: &[EncoderLayer],
    windows: Option<&Tensor>,
) -> Result<(Tensor, AttentionTrace)> {
    check_tokens(z, cfg.d_model)?;
    validate_layers(layers, true)?;
    let (out, _, trace) = encode(layers, z, windows, cfg.norm.eps_norm)?;
    Ok((out, trace))
}

/// Runs a stack of channel-independent residual MLP layers over `z: B×C×D`.
pub fn residual_mlp_encoder(
    z: &Tensor,
    cfg: &BackboneConfig,
    layers: &[EncoderLayer],
    windows: Option<&Tensor>,
) -> Result<Tensor> {
    check_tokens(z, cfg.d_model)?;
    validate_layers(layers, false)?;
    let (out, _, _) = encode(layers, z, windows, cfg.norm.eps_norm)?;
    Ok(out)
}

/// Shared linear head `D → H` for every channel, returned as `B×H×C`.
pub fn project_forecast(z: &Tensor, w: &Tensor, b: &Tensor) -> Result<ForecastBatch> {
    let (bs, c, d) = z.dims3()?;
    let (d2, h) = w.dims2()?;
    if d != d2 || b.len() != h {
        return Err(Error::shape(
            "project_forecast",
            format!("tokens {:?}, head {:?}, bias {}", z.shape(), w.shape(), b.len()),
        ));
    }
    let lin = Linear {
        w: w.clone(),
        b: b.clone(),
    };
    let y = Tensor::new(&[bs, c, h], lin.forward(z.data(), bs * c)?)?;
    ForecastBatch::new(y.swap_last2()?.ensure_finite("project_forecast")?)
}

/// A backbone configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: BackboneConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    fn check_input(&self, x: &SeriesBatch) -> Result<()> {
        if x.lookback() != self.config.lookback {
            return Err(Error::shape(
                "forward_forecast",
                format!(
                    "model lookback {} but windows of {}",
                    self.config.lookback,
                    x.lookback()
                ),
            ));
        }
        if self.config.is_channel_bound() && x.channels() != self.config.channels {
            return Err(Error::shape(
                "forward_forecast",
                format!(
                    "model has per-channel parameters for {} channels but input has {}",
                    self.config.channels,
                    x.channels()
                ),
            ));
        }
        Ok(())
    }

    /// Full pipeline: standardize → embed → identifier → encoder → head → de-standardize.
    pub fn forward(&self, x: &SeriesBatch) -> Result<(ForecastBatch, ModelCache)> {
        self.check_input(x)?;
        let (b, c, l) = (x.batch(), x.channels(), x.lookback());
        let d = self.config.d_model;
        let mut windows = x.channel_major();
        let io_stats = if self.config.instance_norm_io {
            let mut means = Vec::with_capacity(b * c);
            let mut stds = Vec::with_capacity(b * c);
            for row in windows.data_mut().chunks_mut(l) {
                let (m, s) = crate::normlayers::standardize_row(row, IO_NORM_EPS);
                means.push(m);
                stds.push(s);
            }
            Some((means, stds))
        } else {
            None
        };
        let mut z = Tensor::new(&[b, c, d], self.params.embed.forward(windows.data(), b * c)?)?;
        if let Some(bank) = &self.params.identifier {
            z = add_channel_identifier(&z, bank, self.config.identifier)?;
        }
        let (encoded, layers, trace) = encode(&self.params.layers, &z, Some(&windows), self.config.norm.eps_norm)?;
        let h = self.config.horizon;
        let mut y = self.params.head.forward(encoded.data(), b * c)?;
        if let Some((means, stds)) = &io_stats {
            for ((row, m), s) in y.chunks_mut(h).zip(means).zip(stds) {
                for v in row.iter_mut() {
                    *v = *v * s + m;
                }
            }
        }
        let y = Tensor::new(&[b, c, h], y)?
            .swap_last2()?
            .ensure_finite("forward_forecast")?;
        Ok((
            ForecastBatch::new(y)?,
            ModelCache {
                windows,
                io_stats,
                layers,
                encoded,
                trace,
            },
        ))
    }

    pub fn predict(&self, x: &SeriesBatch) -> Result<ForecastBatch> {
        self.forward(x).map(|(y, _)| y)
    }

    /// Parameter gradients given `∂loss/∂forecast` (`B×H×C`).
    pub fn backward(&self, cache: &ModelCache, grad: &ForecastBatch) -> Result<ModelParams> {
        let (b, c, d) = cache.encoded.dims3()?;
        let h = self.config.horizon;
        if grad.values().shape() != [b, h, c] {
            return Err(Error::shape(
                "model backward",
                format!("gradient {:?} for forecast {:?}", grad.values().shape(), [b, h, c]),
            ));
        }
        let mut grads = self.params.zeros_like();
        let mut dy = grad.values().swap_last2()?;
        if let Some((_, stds)) = &cache.io_stats {
            for (row, s) in dy.data_mut().chunks_mut(h).zip(stds) {
                for v in row.iter_mut() {
                    *v *= s;
                }
            }
        }
        let dz = self
            .params
            .head
            .backward(cache.encoded.data(), b * c, dy.data(), &mut grads.head);
        let dz = Tensor::new(&[b, c, d], dz)?;
        let dz = encode_backward(&self.params.layers, &cache.layers, dz, &mut grads.layers)?;
        if let Some(gid) = &mut grads.identifier {
            for (n, row) in dz.data().chunks(d).enumerate() {
                for (g, v) in gid.row_mut(n % c).iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        self.params
            .embed
            .backward(cache.windows.data(), b * c, dz.data(), &mut grads.embed);
        Ok(grads)
    }
}
