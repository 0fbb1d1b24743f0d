//! Synthetic generators, CSV input/output, chronological splits and
//! sliding-window extraction.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbones::{ForecastBatch, SeriesBatch};
use crate::numerics::{RngState, Tensor};
use crate::{Error, Result};

/// A multivariate series, `T×C`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    matrix: Tensor,
    pub channel_names: Vec<String>,
    pub timestamps: Option<Vec<String>>,
}

impl RawSeries {
    pub fn new(matrix: Tensor, channel_names: Vec<String>, timestamps: Option<Vec<String>>) -> Result<Self> {
        let (t, c) = matrix.dims2()?;
        if channel_names.len() != c {
            return Err(Error::Data(format!(
                "{} channel names for {c} channels",
                channel_names.len()
            )));
        }
        if let Some(ts) = &timestamps {
            if ts.len() != t {
                return Err(Error::Data(format!("{} timestamps for {t} rows", ts.len())));
            }
        }
        if !matrix.is_finite() {
            return Err(Error::Data("series contains non-finite values".into()));
        }
        Ok(Self {
            matrix,
            channel_names,
            timestamps,
        })
    }

    /// Builds a series with default channel names `ch0, ch1, ...`.
    pub fn from_matrix(matrix: Tensor) -> Result<Self> {
        let (_, c) = matrix.dims2()?;
        Self::new(matrix, default_names(c), None)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        self.matrix.data().chunks(self.channels()).map(|r| r[c]).collect()
    }

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let c = self.channels();
        let matrix =
            Tensor::new(&[end - start, c], self.matrix.data()[start * c..end * c].to_vec()).expect("valid range");
        Self {
            matrix,
            channel_names: self.channel_names.clone(),
            timestamps: self.timestamps.as_ref().map(|ts| ts[start..end].to_vec()),
        }
    }

    /// Keeps only the listed channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        let c = self.channels();
        if let Some(&bad) = channels.iter().find(|&&k| k >= c) {
            return Err(Error::Data(format!("channel {bad} out of range for {c} channels")));
        }
        let data = self
            .matrix
            .data()
            .chunks(c)
            .flat_map(|row| channels.iter().map(move |&k| row[k]))
            .collect();
        Self::new(
            Tensor::new(&[self.len(), channels.len()], data)?,
            channels.iter().map(|&k| self.channel_names[k].clone()).collect(),
            self.timestamps.clone(),
        )
    }
}

fn default_names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("ch{i}")).collect()
}

/// Parameters of the two-channel identifiability toy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CidToySpec {
    pub lookback: usize,
    pub horizon: usize,
    pub amplitude: f64,
    pub periods: usize,
    pub noise: f64,
    pub seed: u64,
}

impl CidToySpec {
    pub fn period(&self) -> usize {
        self.lookback + self.horizon
    }

    /// Lowest per-element MSE any predictor that treats both channels the
    /// same can reach on period-aligned windows: `A²(H+1)(2H+1)/(6H²)`.
    pub fn shared_prediction_bound(&self) -> f64 {
        let h = self.horizon as f64;
        self.amplitude * self.amplitude * (h + 1.0) * (2.0 * h + 1.0) / (6.0 * h * h)
    }
}

/// Two channels that share every lookback segment but continue in opposite
/// directions.
///
/// Each period of length `L + H` is a common smooth segment `w` of length
/// `L` followed by `w[L-1] + A·t/H` on channel 0 and `w[L-1] - A·t/H` on
/// channel 1 for `t = 1..=H`. Windows starting at a period boundary have
/// identical inputs and targets that differ by `2A·t/H`.
pub fn gen_cid_toy(spec: &CidToySpec) -> Result<RawSeries> {
    let CidToySpec {
        lookback: l,
        horizon: h,
        amplitude: a,
        periods,
        noise,
        seed,
    } = *spec;
    if l < 2 || h < 1 {
        return Err(Error::InvalidArgument(format!(
            "toy needs L >= 2 and H >= 1, got L={l}, H={h}"
        )));
    }
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::InvalidArgument(format!("amplitude must be > 0, got {a}")));
    }
    if periods < 4 {
        return Err(Error::InvalidArgument(format!(
            "toy needs at least 4 periods, got {periods}"
        )));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::InvalidArgument(format!("noise must be >= 0, got {noise}")));
    }
    let rng = RngState::new(seed);
    let w = smooth_segment(l, a / 2.0, &mut rng.stream("toy/shape"));
    let mut noise_rng = rng.stream("toy/noise");
    let period = l + h;
    let mut data = Vec::with_capacity(periods * period * 2);
    for _ in 0..periods {
        for &v in &w {
            data.extend([v, v]);
        }
        let last = w[l - 1];
        for t in 1..=h {
            let ramp = a * t as f64 / h as f64;
            data.extend([last + ramp, last - ramp]);
        }
    }
    if noise > 0.0 {
        for v in &mut data {
            *v += noise * noise_rng.sample::<f64, _>(StandardNormal);
        }
    }
    RawSeries::new(
        Tensor::new(&[periods * period, 2], data)?,
        vec!["up".into(), "down".into()],
        None,
    )
}

/// Sum of three random-phase sinusoids rescaled to peak magnitude `peak`.
fn smooth_segment<R: Rng>(len: usize, peak: f64, rng: &mut R) -> Vec<f64> {
    let comps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let cycles = rng.gen_range(0.5..3.0);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let amp = rng.gen_range(0.3..1.0);
            (cycles, phase, amp)
        })
        .collect();
    let raw: Vec<f64> = (0..len)
        .map(|i| {
            let s = i as f64 / len as f64;
            comps.iter().map(|(f, p, a)| a * (2.0 * PI * f * s + p).sin()).sum()
        })
        .collect();
    let max = raw.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    raw.into_iter().map(|v| v * peak / max).collect()
}

/// Parameters of the clustered sine mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineMixtureSpec {
    pub channels: usize,
    pub length: usize,
    /// Multiplies every sinusoid amplitude; 0 leaves pure noise.
    pub amplitude: f64,
    pub noise: f64,
    pub seed: u64,
}

impl SineMixtureSpec {
    pub fn new(channels: usize, length: usize, seed: u64) -> Self {
        Self {
            channels,
            length,
            amplitude: 1.0,
            noise: 0.1,
            seed,
        }
    }
}

/// Base periods (in steps) of the four shared frequencies. Channels in the
/// same cluster weight the same pair heavily and share phases up to jitter.
const SINE_PERIODS: [f64; 4] = [24.0, 17.0, 40.0, 9.0];

/// Channels drawn from two frequency clusters; even channels favour the
/// first pair of frequencies, odd channels the second.
pub fn gen_sine_mixture(spec: &SineMixtureSpec) -> Result<RawSeries> {
    let &SineMixtureSpec {
        channels: c,
        length: t,
        amplitude,
        noise,
        seed,
    } = spec;
    if c < 2 {
        return Err(Error::InvalidArgument(format!("sine mixture needs C >= 2, got {c}")));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("sine mixture needs T >= 1".into()));
    }
    let rng = RngState::new(seed);
    let mut r = rng.stream("sine/params");
    let cluster_phase: Vec<[f64; 4]> = (0..2)
        .map(|_| std::array::from_fn(|_| r.gen_range(0.0..2.0 * PI)))
        .collect();
    let params: Vec<[(f64, f64); 4]> = (0..c)
        .map(|ch| {
            let cluster = ch % 2;
            std::array::from_fn(|j| {
                let strong = j / 2 == cluster;
                let a = if strong {
                    r.gen_range(0.8..1.2)
                } else {
                    r.gen_range(0.0..0.15)
                };
                let phase = cluster_phase[cluster][j] + 0.3 * r.sample::<f64, _>(StandardNormal);
                (a * amplitude, phase)
            })
        })
        .collect();
    let mut nr = rng.stream("sine/noise");
    let mut data = Vec::with_capacity(t * c);
    for step in 0..t {
        for p in &params {
            let v: f64 = p
                .iter()
                .zip(SINE_PERIODS)
                .map(|((a, ph), period)| a * (2.0 * PI * step as f64 / period + ph).sin())
                .sum();
            data.push(v + noise * nr.sample::<f64, _>(StandardNormal));
        }
    }
    RawSeries::from_matrix(Tensor::new(&[t, c], data)?)
}

/// Reads a rectangular numeric CSV. A first row containing any
/// non-numeric value cell is treated as a header. When `has_timestamp_col`
/// is set, the first column is kept as opaque timestamp text.
pub fn load_csv(path: impl AsRef<Path>, has_timestamp_col: bool) -> Result<RawSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    read_csv(file, has_timestamp_col)
}

pub fn read_csv<R: std::io::Read>(reader: R, has_timestamp_col: bool) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let skip = usize::from(has_timestamp_col);
    let mut names: Option<Vec<String>> = None;
    let mut timestamps = Vec::new();
    let mut data = Vec::new();
    let mut width: Option<usize> = None;
    for (row_idx, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("row {}: {e}", row_idx + 1)))?;
        if record.len() == 1 && record.get(0).is_none_or(str::is_empty) {
            continue;
        }
        if record.len() <= skip {
            return Err(Error::Data(format!("row {}: no value columns", row_idx + 1)));
        }
        let values: Vec<&str> = record.iter().skip(skip).collect();
        if row_idx == 0 && values.iter().any(|v| v.parse::<f64>().is_err()) {
            names = Some(values.iter().map(|s| s.to_string()).collect());
            width = Some(values.len());
            continue;
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::Data(format!(
                    "row {}: expected {w} value columns, found {}",
                    row_idx + 1,
                    values.len()
                )))
            }
            _ => {}
        }
        for (col, cell) in values.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!(
                    "row {}, column {}: cannot parse {cell:?} as a number",
                    row_idx + 1,
                    col + skip + 1
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "row {}, column {}: non-finite value",
                    row_idx + 1,
                    col + skip + 1
                )));
            }
            data.push(v);
        }
        if has_timestamp_col {
            timestamps.push(record.get(0).unwrap_or_default().to_string());
        }
    }
    let c = width.ok_or_else(|| Error::Data("CSV has no rows".into()))?;
    let t = data.len() / c;
    if t == 0 {
        return Err(Error::Data("CSV has a header but no data rows".into()));
    }
    RawSeries::new(
        Tensor::new(&[t, c], data)?,
        names.unwrap_or_else(|| default_names(c)),
        has_timestamp_col.then_some(timestamps),
    )
}

/// Writes a header row of channel names (preceded by `timestamp` when
/// present) and one row per step. Values use the shortest round-trip form.
pub fn write_csv(series: &RawSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path)?;
    write_csv_to(series, file)
}

pub fn write_csv_to<W: std::io::Write>(series: &RawSeries, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Data(format!("writing CSV: {e}"));
    let mut header: Vec<String> = Vec::new();
    if series.timestamps.is_some() {
        header.push("timestamp".into());
    }
    header.extend(series.channel_names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (i, row) in series.matrix.data().chunks(series.channels()).enumerate() {
        let mut rec: Vec<String> = Vec::with_capacity(row.len() + 1);
        if let Some(ts) = &series.timestamps {
            rec.push(ts[i].clone());
        }
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Train/validation/test fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitSpec {
    pub const SIX_TWO_TWO: SplitSpec = SplitSpec {
        train: 0.6,
        val: 0.2,
        test: 0.2,
    };
    pub const SEVEN_ONE_TWO: SplitSpec = SplitSpec {
        train: 0.7,
        val: 0.1,
        test: 0.2,
    };

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(*p > 0.0) || !p.is_finite()) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be positive and sum to 1, got {}:{}:{}",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }

    /// Segment lengths for a series of `t` steps; the test part takes the
    /// rounding remainder.
    pub fn lengths(&self, t: usize) -> (usize, usize, usize) {
        let train = (t as f64 * self.train).round() as usize;
        let val = ((t as f64 * self.val).round() as usize).min(t - train.min(t));
        let train = train.min(t);
        (train, val, t - train - val)
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self::SIX_TWO_TWO
    }
}

/// Contiguous, unshuffled split. Every part must hold at least `min_len`
/// steps (normally `L + H`).
pub fn chronological_split(
    s: &RawSeries,
    spec: &SplitSpec,
    min_len: usize,
) -> Result<(RawSeries, RawSeries, RawSeries)> {
    spec.validate()?;
    let (a, b, c) = spec.lengths(s.len());
    for (name, n) in [("train", a), ("validation", b), ("test", c)] {
        if n < min_len {
            return Err(Error::Data(format!(
                "{name} split has {n} steps, fewer than the {min_len} one window needs"
            )));
        }
    }
    Ok((s.slice(0, a), s.slice(a, a + b), s.slice(a + b, a + b + c)))
}

/// Aligned input/target windows.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub inputs: SeriesBatch,
    pub targets: ForecastBatch,
    pub stride: usize,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.inputs.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select(indices),
            targets: self.targets.select(indices),
            stride: self.stride,
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            inputs: self.inputs.slice(start, end),
            targets: self.targets.slice(start, end),
            stride: self.stride,
        }
    }
}

/// Number of windows `make_windows` produces.
pub fn window_count(t: usize, l: usize, h: usize, stride: usize) -> usize {
    if stride == 0 || t < l + h {
        0
    } else {
        (t - l - h) / stride + 1
    }
}

/// Sliding windows `(x[t..t+L], y[t+L..t+L+H])` for `t = 0, stride, 2·stride, ...`.
pub fn make_windows(s: &RawSeries, l: usize, h: usize, stride: usize) -> Result<WindowSet> {
    if l == 0 || h == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "lookback, horizon and stride must be positive, got {l}, {h}, {stride}"
        )));
    }
    let t = s.len();
    if t < l + h {
        return Err(Error::Data(format!(
            "series of {t} steps is shorter than one window of {}",
            l + h
        )));
    }
    let n = window_count(t, l, h, stride);
    let c = s.channels();
    let m = s.matrix.data();
    let mut x = Vec::with_capacity(n * l * c);
    let mut y = Vec::with_capacity(n * h * c);
    for w in 0..n {
        let start = w * stride;
        x.extend_from_slice(&m[start * c..(start + l) * c]);
        y.extend_from_slice(&m[(start + l) * c..(start + l + h) * c]);
    }
    Ok(WindowSet {
        inputs: SeriesBatch::new(Tensor::new(&[n, l, c], x)?)?,
        targets: ForecastBatch::new(Tensor::new(&[n, h, c], y)?)?,
        stride,
    })
}
