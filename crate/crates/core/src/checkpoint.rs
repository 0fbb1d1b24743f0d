//! Binary parameter containers and model checkpoints.
//!
//! A norm container is a fixed header
//! `{layer_kind: u8, C: u32, K: u32, D: u32, L_in: u32, tau: f64}` followed by
//! the layer's banks in declaration order. Each bank is
//! `{name_len: u16, name: utf-8, len: u32, values: len × f64}`. All integers
//! and floats are little-endian.
//!
//! A model checkpoint is the backbone configuration as `key = value` text,
//! an empty line, a `u32` count of norm containers and the containers in
//! encoder order, then a `u32` count of the remaining banks and those banks.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::backbones::{BackboneConfig, BackboneKind, Model};
use crate::config::{backbone_entries, parse_pairs, set_backbone};
use crate::normlayers::{NormKind, NormParamSet, NormSpec, SimMetric, SimSpace};
use crate::numerics::{ParamSet, Tensor};
use crate::{Error, Result};

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| bad(format!("truncated while reading {what}: {e}")))
}

fn read_u8<R: Read>(r: &mut R, what: &str) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b, what)?;
    Ok(b[0])
}

fn read_u16<R: Read>(r: &mut R, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| bad(format!("{what} {v} does not fit in u32")))
}

pub fn write_bank<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| bad(format!("bank name `{name}` too long")))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&to_u32(t.len(), "bank length")?.to_le_bytes())?;
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one bank and returns its name and values.
pub fn read_bank<R: Read>(r: &mut R) -> Result<(String, Vec<f64>)> {
    let n = read_u16(r, "bank name length")? as usize;
    let mut name = vec![0u8; n];
    read_exact(r, &mut name, "bank name")?;
    let name = String::from_utf8(name).map_err(|_| bad("bank name is not UTF-8"))?;
    let len = read_u32(r, "bank length")? as usize;
    let mut values = Vec::with_capacity(len.min(1 << 24));
    for _ in 0..len {
        values.push(read_f64(r, &name)?);
    }
    Ok((name, values))
}

/// Reads a bank into `target`, checking its name and length.
fn read_bank_into<R: Read>(r: &mut R, expected: &str, target: &mut Tensor) -> Result<()> {
    let (name, values) = read_bank(r)?;
    if name != expected {
        return Err(bad(format!("expected bank `{expected}`, found `{name}`")));
    }
    if values.len() != target.len() {
        return Err(bad(format!(
            "bank `{name}` has {} values, expected {}",
            values.len(),
            target.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(bad(format!("bank `{name}` holds non-finite values")));
    }
    target.data_mut().copy_from_slice(&values);
    Ok(())
}

/// Header fields of a norm container.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormHeader {
    pub kind: NormKind,
    pub channels: usize,
    pub prototypes: usize,
    pub d: usize,
    pub l_in: usize,
    pub tau: f64,
}

impl NormHeader {
    pub fn of(layer: &NormParamSet, d: usize) -> Self {
        let (channels, prototypes, l_in) = match layer {
            NormParamSet::Cn(p) => (p.channels(), 0, 0),
            NormParamSet::Acn(p) => (p.channels(), 0, 0),
            NormParamSet::Pcn(p) => (0, p.prototypes(), p.input_len()),
            _ => (0, 0, 0),
        };
        Self {
            kind: layer.kind(),
            channels,
            prototypes,
            d,
            l_in,
            tau: layer.tau(),
        }
    }
}

pub fn write_norm_container<W: Write>(w: &mut W, layer: &NormParamSet, d: usize) -> Result<()> {
    let h = NormHeader::of(layer, d);
    w.write_all(&[h.kind.code()])?;
    for v in [h.channels, h.prototypes, h.d, h.l_in] {
        w.write_all(&to_u32(v, "header field")?.to_le_bytes())?;
    }
    w.write_all(&h.tau.to_le_bytes())?;
    for b in layer.banks() {
        write_bank(w, &b.name, b.tensor)?;
    }
    Ok(())
}

/// Reads a container. `metric` and `space` are not stored in the header and
/// only matter for ACN.
pub fn read_norm_container<R: Read>(
    r: &mut R,
    metric: SimMetric,
    space: SimSpace,
) -> Result<(NormHeader, NormParamSet)> {
    let code = read_u8(r, "layer kind")?;
    let kind = NormKind::from_code(code).ok_or_else(|| bad(format!("unknown layer kind code {code}")))?;
    let channels = read_u32(r, "channel count")? as usize;
    let prototypes = read_u32(r, "prototype count")? as usize;
    let d = read_u32(r, "width")? as usize;
    let l_in = read_u32(r, "input length")? as usize;
    let tau = read_f64(r, "tau")?;
    let header = NormHeader {
        kind,
        channels,
        prototypes,
        d,
        l_in,
        tau,
    };
    let spec = NormSpec {
        kind,
        tau: if tau > 0.0 { tau } else { NormSpec::default().tau },
        prototypes: prototypes.max(1),
        metric,
        space,
        ..NormSpec::default()
    };
    let mut layer = NormParamSet::init(
        &spec,
        channels,
        d,
        l_in,
        &mut crate::numerics::RngState::new(0).stream("checkpoint"),
    );
    let names: Vec<String> = layer.banks().iter().map(|b| b.name.clone()).collect();
    for (name, bank) in names.iter().zip(layer.banks_mut()) {
        read_bank_into(r, name, bank.tensor)?;
    }
    Ok((header, layer))
}

fn is_norm_bank(name: &str) -> bool {
    name.split('.').any(|seg| seg.starts_with("norm"))
}

pub fn write_model<W: Write>(w: &mut W, model: &Model) -> Result<()> {
    let mut entries = BTreeMap::new();
    backbone_entries(&model.config, &mut entries);
    entries.insert("model.channels".into(), model.config.channels.to_string());
    for (k, v) in &entries {
        writeln!(w, "{k} = {v}")?;
    }
    writeln!(w)?;
    let norms = model.params.norm_layers();
    w.write_all(&to_u32(norms.len(), "norm layer count")?.to_le_bytes())?;
    for n in norms {
        write_norm_container(w, n, model.config.d_model)?;
    }
    let rest: Vec<_> = model
        .params
        .banks()
        .into_iter()
        .filter(|b| !is_norm_bank(&b.name))
        .collect();
    w.write_all(&to_u32(rest.len(), "bank count")?.to_le_bytes())?;
    for b in rest {
        write_bank(w, &b.name, b.tensor)?;
    }
    Ok(())
}

pub fn read_model<R: Read>(r: &mut R) -> Result<Model> {
    let mut text = Vec::new();
    loop {
        let mut line = Vec::new();
        loop {
            let b = read_u8(r, "config text")?;
            if b == b'\n' {
                break;
            }
            line.push(b);
        }
        if line.is_empty() {
            break;
        }
        text.extend_from_slice(&line);
        text.push(b'\n');
    }
    let text = String::from_utf8(text).map_err(|_| bad("config text is not UTF-8"))?;
    let mut cfg = BackboneConfig::new(BackboneKind::ChannelAttention, 1, 1, 1);
    for (k, v) in parse_pairs(&text)? {
        if !set_backbone(&mut cfg, &k, &v)? {
            return Err(bad(format!("unexpected key `{k}` in checkpoint config")));
        }
    }
    cfg.validate()?;
    let mut model = Model::new(cfg, 0)?;
    let count = read_u32(r, "norm layer count")? as usize;
    let expected = model.params.norm_layers().len();
    if count != expected {
        return Err(bad(format!("{count} norm layers stored, model has {expected}")));
    }
    let (metric, space, d) = (model.config.norm.metric, model.config.norm.space, model.config.d_model);
    for slot in model.params.norm_layers_mut() {
        let (header, layer) = read_norm_container(r, metric, space)?;
        if header.kind != slot.kind() || header.d != d {
            return Err(bad(format!(
                "stored {} layer of width {} does not match the configured {} of width {d}",
                header.kind,
                header.d,
                slot.kind()
            )));
        }
        if layer
            .banks()
            .iter()
            .map(|b| b.tensor.shape().to_vec())
            .ne(slot.banks().iter().map(|b| b.tensor.shape().to_vec()))
        {
            return Err(bad("stored norm bank shapes do not match the configuration"));
        }
        *slot = layer;
    }
    let count = read_u32(r, "bank count")? as usize;
    let mut banks: Vec<_> = model
        .params
        .banks_mut()
        .into_iter()
        .filter(|b| !is_norm_bank(&b.name))
        .collect();
    if count != banks.len() {
        return Err(bad(format!("{count} backbone banks stored, model has {}", banks.len())));
    }
    for b in &mut banks {
        let name = b.name.clone();
        read_bank_into(r, &name, b.tensor)?;
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    Ok(model)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_model(&mut buf, model)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    read_model(&mut bytes.as_slice())
}
