//! Synthetic data: in-context linear regression and the (damped) harmonic
//! oscillator, generated from exact closed-form solutions.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, streams};

/// `|γ − ω₀| < CRITICAL_TOL · ω₀` is treated as critically damped.
pub const CRITICAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OscParams {
    pub omega0: f64,
    pub gamma: f64,
    pub dt: f64,
    pub x0: f64,
    pub v0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    Undamped,
    Underdamped,
    Critical,
    Overdamped,
}

impl OscParams {
    pub fn new(omega0: f64, gamma: f64, dt: f64, x0: f64, v0: f64) -> Self {
        Self {
            omega0,
            gamma,
            dt,
            x0,
            v0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.omega0, self.gamma, self.dt, self.x0, self.v0]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.omega0 <= 0.0 || self.gamma < 0.0 || self.dt < 0.0 {
            return Err(Error::usage(format!("invalid oscillator parameters {self}")));
        }
        Ok(())
    }

    pub fn regime(&self) -> Regime {
        if self.gamma == 0.0 {
            Regime::Undamped
        } else if (self.gamma - self.omega0).abs() < CRITICAL_TOL * self.omega0 {
            Regime::Critical
        } else if self.gamma < self.omega0 {
            Regime::Underdamped
        } else {
            Regime::Overdamped
        }
    }

    /// `sqrt(|γ² − ω₀²|)`, the oscillation (or decay-split) frequency.
    pub fn omega(&self) -> f64 {
        ((self.gamma - self.omega0) * (self.gamma + self.omega0)).abs().sqrt()
    }
}

impl fmt::Display for OscParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "omega0={} gamma={} dt={} x0={} v0={}",
            self.omega0, self.gamma, self.dt, self.x0, self.v0
        )
    }
}

/// Exact state `(x_k, v_k)` at time `k·dt`.
///
/// Each regime uses its textbook trajectory form. The overdamped branch is
/// rearranged so that only decaying exponentials appear and the
/// `(e^{ωt} − e^{−ωt})/ω` difference goes through `expm1`.
pub fn closed_form_state(p: &OscParams, k: usize) -> Result<(f64, f64)> {
    p.validate()?;
    let t = k as f64 * p.dt;
    let (x0, v0, g, w0) = (p.x0, p.v0, p.gamma, p.omega0);
    let (x, v) = match p.regime() {
        Regime::Undamped => {
            let (s, c) = (w0 * t).sin_cos();
            (x0 * c + v0 / w0 * s, v0 * c - w0 * x0 * s)
        }
        Regime::Underdamped => {
            let w = p.omega();
            let (s, c) = (w * t).sin_cos();
            let decay = (-g * t).exp();
            let b = (v0 + g * x0) / w;
            (
                decay * (x0 * c + b * s),
                decay * (v0 * c - (b * g + w * x0) * s),
            )
        }
        Regime::Critical => {
            let decay = (-g * t).exp();
            (
                decay * (x0 + (v0 + g * x0) * t),
                decay * (v0 - g * (v0 + g * x0) * t),
            )
        }
        Regime::Overdamped => {
            let w = p.omega();
            let slow = (-(g - w) * t).exp();
            let fast = (-(g + w) * t).exp();
            // (1 − e^{−2ωt}) / ω, finite as ω → 0
            let split = if w * t < 1e-300 {
                2.0 * t
            } else {
                -(-2.0 * w * t).exp_m1() / w
            };
            (
                0.5 * (x0 * (slow + fast) + (v0 + g * x0) * slow * split),
                0.5 * (v0 * (slow + fast) - (w0 * w0 * x0 + g * v0) * slow * split),
            )
        }
    };
    if !x.is_finite() || !v.is_finite() {
        return Err(Error::Generation {
            series: 0,
            params: p.to_string(),
            reason: format!("non-finite state at k={k}"),
        });
    }
    Ok((x, v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub params: OscParams,
    pub states: Vec<(f64, f64)>,
}

impl Trajectory {
    pub fn from_params(params: OscParams, length: usize) -> Result<Self> {
        let states = (0..length)
            .map(|k| closed_form_state(&params, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { params, states })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSeries {
    pub w: f64,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Linreg,
    ShoUndamped,
    ShoUnderdamped,
    ShoOverdamped,
    ShoDampedMixed,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 5] = [
        DatasetKind::Linreg,
        DatasetKind::ShoUndamped,
        DatasetKind::ShoUnderdamped,
        DatasetKind::ShoOverdamped,
        DatasetKind::ShoDampedMixed,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetKind::Linreg => "linreg",
            DatasetKind::ShoUndamped => "sho-undamped",
            DatasetKind::ShoUnderdamped => "sho-underdamped",
            DatasetKind::ShoOverdamped => "sho-overdamped",
            DatasetKind::ShoDampedMixed => "sho-damped-mixed",
        }
    }

    pub fn is_sho(&self) -> bool {
        !matches!(self, DatasetKind::Linreg)
    }

    pub fn is_damped(&self) -> bool {
        matches!(
            self,
            DatasetKind::ShoUnderdamped | DatasetKind::ShoOverdamped | DatasetKind::ShoDampedMixed
        )
    }

    /// Token width: scalar tokens for regression, `(x, v)` for oscillators.
    pub fn token_dim(&self) -> usize {
        if self.is_sho() {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown dataset kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    OodTest,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::OodTest => "ood-test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "ood-test" | "ood" | "test" => Ok(Split::OodTest),
            _ => Err(Error::Parse(format!("unknown split `{s}`"))),
        }
    }
}

/// A union of closed intervals sampled uniformly over its total length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bands(pub Vec<(f64, f64)>);

impl Bands {
    pub fn single(lo: f64, hi: f64) -> Self {
        Bands(vec![(lo, hi)])
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.0.is_empty() || self.0.iter().any(|&(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::usage(format!("empty or inverted range for {what}: {:?}", self.0)));
        }
        Ok(())
    }

    /// Pick a band with probability proportional to its width, then draw
    /// uniformly inside it. Zero-width unions fall back to the first band.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let total: f64 = self.0.iter().map(|(lo, hi)| hi - lo).sum();
        if total <= 0.0 {
            return self.0[0].0;
        }
        let mut u = seed::uniform(rng, 0.0, total);
        for &(lo, hi) in &self.0 {
            let width = hi - lo;
            if u <= width {
                return lo + u;
            }
            u -= width;
        }
        self.0[self.0.len() - 1].1
    }

    pub fn contains(&self, v: f64) -> bool {
        self.0.iter().any(|&(lo, hi)| v >= lo && v <= hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinregConfig {
    pub n_series: usize,
    pub length: usize,
    pub w: Bands,
    pub x: Bands,
    pub split: Split,
}

impl LinregConfig {
    pub fn train(n_series: usize, length: usize) -> Self {
        Self {
            n_series,
            length,
            w: Bands::single(-0.75, 0.75),
            x: Bands::single(-0.75, 0.75),
            split: Split::Train,
        }
    }

    /// Out-of-distribution weights with `0.75 ≤ |w| ≤ 1`.
    pub fn ood(n_series: usize, length: usize) -> Self {
        Self {
            w: Bands(vec![(-1.0, -0.75), (0.75, 1.0)]),
            split: Split::OodTest,
            ..Self::train(n_series, length)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShoConfig {
    pub kind: DatasetKind,
    pub n_series: usize,
    pub length: usize,
    pub omega0: Bands,
    /// Upper bound of Δt is `2π / (dt_divisor · ω₀)`.
    pub dt_divisor: f64,
    pub x0: Bands,
    pub v0: Bands,
    /// Upper bound of the overdamped γ range.
    pub gamma_max: f64,
    pub split: Split,
}

impl ShoConfig {
    /// Default training configuration for a regime.
    pub fn train(kind: DatasetKind) -> Result<Self> {
        let (length, dt_divisor) = match kind {
            DatasetKind::Linreg => {
                return Err(Error::usage("linreg is not an oscillator dataset"))
            }
            DatasetKind::ShoUndamped => (65, 1.0),
            _ => (32, 13.0),
        };
        Ok(Self {
            kind,
            n_series: 5000,
            length,
            omega0: Bands::single(PI / 4.0, 5.0 * PI / 4.0),
            dt_divisor,
            x0: Bands::single(-1.0, 1.0),
            v0: Bands::single(-1.0, 1.0),
            gamma_max: 1.5 * PI,
            split: Split::Train,
        })
    }

    /// Out-of-distribution ω₀ from `[0, π/4] ∪ [5π/4, 3π/2]`.
    pub fn ood(kind: DatasetKind) -> Result<Self> {
        Ok(Self {
            omega0: Bands(vec![(0.0, PI / 4.0), (5.0 * PI / 4.0, 1.5 * PI)]),
            split: Split::OodTest,
            ..Self::train(kind)?
        })
    }

    pub fn with_size(mut self, n_series: usize, length: usize) -> Self {
        self.n_series = n_series;
        self.length = length;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum GenConfig {
    Linreg(LinregConfig),
    Sho(ShoConfig),
}

impl GenConfig {
    pub fn kind(&self) -> DatasetKind {
        match self {
            GenConfig::Linreg(_) => DatasetKind::Linreg,
            GenConfig::Sho(c) => c.kind,
        }
    }

    pub fn split(&self) -> Split {
        match self {
            GenConfig::Linreg(c) => c.split,
            GenConfig::Sho(c) => c.split,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SeriesSet {
    Regression(Vec<RegressionSeries>),
    Oscillator(Vec<Trajectory>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub split: Split,
    pub seed: u64,
    pub config: GenConfig,
    pub series: SeriesSet,
}

impl Dataset {
    pub fn n_series(&self) -> usize {
        match &self.series {
            SeriesSet::Regression(s) => s.len(),
            SeriesSet::Oscillator(s) => s.len(),
        }
    }

    /// Timesteps (or regression pairs) per series.
    pub fn length(&self) -> usize {
        match &self.series {
            SeriesSet::Regression(s) => s.first().map_or(0, |r| r.xs.len()),
            SeriesSet::Oscillator(s) => s.first().map_or(0, |t| t.len()),
        }
    }

    pub fn regression(&self) -> Option<&[RegressionSeries]> {
        match &self.series {
            SeriesSet::Regression(s) => Some(s),
            SeriesSet::Oscillator(_) => None,
        }
    }

    pub fn trajectories(&self) -> Option<&[Trajectory]> {
        match &self.series {
            SeriesSet::Oscillator(s) => Some(s),
            SeriesSet::Regression(_) => None,
        }
    }

    pub fn generate(config: &GenConfig, seed: u64) -> Result<Self> {
        match config {
            GenConfig::Linreg(c) => generate_linreg(c, seed),
            GenConfig::Sho(c) => generate_sho(c, seed),
        }
    }

    /// Keep only the first `n` series (used for smaller probing subsets).
    pub fn truncated(&self, n: usize) -> Dataset {
        let mut out = self.clone();
        match &mut out.series {
            SeriesSet::Regression(s) => s.truncate(n),
            SeriesSet::Oscillator(s) => s.truncate(n),
        }
        out
    }
}

const F_W: u64 = 0;
const F_X: u64 = 1;
const F_OMEGA: u64 = 0;
const F_GAMMA: u64 = 1;
const F_DT: u64 = 2;
const F_X0: u64 = 3;
const F_V0: u64 = 4;
const F_REGIME: u64 = 5;

pub fn generate_linreg(config: &LinregConfig, seed: u64) -> Result<Dataset> {
    if config.n_series == 0 || config.length == 0 {
        return Err(Error::usage("n_series and length must be positive"));
    }
    config.w.validate("w")?;
    config.x.validate("x")?;
    let series = (0..config.n_series)
        .into_par_iter()
        .map(|i| {
            let w = config.w.sample(&mut seed::rng_for(seed, streams::LINREG, i as u64, F_W));
            let mut xr = seed::rng_for(seed, streams::LINREG, i as u64, F_X);
            let xs: Vec<f64> = (0..config.length).map(|_| config.x.sample(&mut xr)).collect();
            let ys = xs.iter().map(|x| w * x).collect();
            RegressionSeries { w, xs, ys }
        })
        .collect();
    Ok(Dataset {
        kind: DatasetKind::Linreg,
        split: config.split,
        seed,
        config: GenConfig::Linreg(config.clone()),
        series: SeriesSet::Regression(series),
    })
}

/// Draw the physical parameters for series `index`.
pub fn sample_params(config: &ShoConfig, seed: u64, index: usize) -> OscParams {
    let draw = |field| seed::rng_for(seed, streams::SHO, index as u64, field);
    let omega0 = config.omega0.sample(&mut draw(F_OMEGA));
    let regime = match config.kind {
        DatasetKind::ShoDampedMixed => {
            let coin = seed::uniform(&mut draw(F_REGIME), 0.0, 1.0);
            if coin < 0.5 {
                DatasetKind::ShoUnderdamped
            } else {
                DatasetKind::ShoOverdamped
            }
        }
        k => k,
    };
    let gamma = match regime {
        DatasetKind::ShoUnderdamped => seed::uniform(&mut draw(F_GAMMA), 0.0, omega0),
        DatasetKind::ShoOverdamped => {
            seed::uniform(&mut draw(F_GAMMA), omega0, config.gamma_max.max(omega0))
        }
        _ => 0.0,
    };
    let dt_max = 2.0 * PI / (config.dt_divisor * omega0);
    OscParams {
        omega0,
        gamma,
        dt: seed::uniform(&mut draw(F_DT), 0.0, dt_max),
        x0: config.x0.sample(&mut draw(F_X0)),
        v0: config.v0.sample(&mut draw(F_V0)),
    }
}

pub fn generate_sho(config: &ShoConfig, seed: u64) -> Result<Dataset> {
    if !config.kind.is_sho() {
        return Err(Error::usage("oscillator generator needs an sho-* kind"));
    }
    if config.n_series == 0 || config.length == 0 {
        return Err(Error::usage("n_series and length must be positive"));
    }
    config.omega0.validate("omega0")?;
    config.x0.validate("x0")?;
    config.v0.validate("v0")?;
    let series = (0..config.n_series)
        .into_par_iter()
        .map(|i| {
            let params = sample_params(config, seed, i);
            if !(params.omega0 > 0.0) {
                return Err(Error::Generation {
                    series: i,
                    params: params.to_string(),
                    reason: "omega0 must be positive".into(),
                });
            }
            Trajectory::from_params(params, config.length).map_err(|e| match e {
                Error::Generation { params, reason, .. } => Error::Generation {
                    series: i,
                    params,
                    reason,
                },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let tiny_dt = series.iter().filter(|t| t.params.dt < 1e-6).count();
    if tiny_dt > 0 {
        log::info!("{tiny_dt} series drew dt < 1e-6 (near-constant trajectories)");
    }
    Ok(Dataset {
        kind: config.kind,
        split: config.split,
        seed,
        config: GenConfig::Sho(config.clone()),
        series: SeriesSet::Oscillator(series),
    })
}

/// Token sequences with a next-token loss mask shared by every series.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenized {
    pub token_dim: usize,
    pub n_series: usize,
    pub seq_len: usize,
    /// `n_series × seq_len × token_dim`, row-major.
    pub tokens: Vec<f64>,
    /// `mask[t]` marks positions whose prediction is scored against token `t + 1`.
    pub mask: Vec<bool>,
}

impl Tokenized {
    pub fn series(&self, i: usize) -> &[f64] {
        let w = self.seq_len * self.token_dim;
        &self.tokens[i * w..(i + 1) * w]
    }

    /// Positions that carry a prediction, in order; index into this list is
    /// the context position `c`.
    pub fn ctx_positions(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(t, &m)| m.then_some(t))
            .collect()
    }

    /// Number of tokens that must be fed to the model to produce every
    /// masked prediction.
    pub fn input_len(&self) -> usize {
        self.mask.iter().rposition(|&m| m).map_or(0, |p| p + 1)
    }

    pub fn target(&self, series: usize, pos: usize) -> &[f64] {
        let s = self.series(series);
        &s[(pos + 1) * self.token_dim..(pos + 2) * self.token_dim]
    }

    /// A view onto a subset of series (used for batches).
    pub fn subset(&self, idx: &[usize]) -> Tokenized {
        let mut tokens = Vec::with_capacity(idx.len() * self.seq_len * self.token_dim);
        for &i in idx {
            tokens.extend_from_slice(self.series(i));
        }
        Tokenized {
            token_dim: self.token_dim,
            n_series: idx.len(),
            seq_len: self.seq_len,
            tokens,
            mask: self.mask.clone(),
        }
    }
}

/// Linear regression becomes `x₁, y₁, x₂, y₂, …` with predictions read at
/// the x positions; oscillators become one `(x, v)` token per timestep with
/// a prediction at every position but the last.
pub fn tokenize(dataset: &Dataset) -> Tokenized {
    match &dataset.series {
        SeriesSet::Regression(series) => {
            let len = dataset.length();
            let mut tokens = Vec::with_capacity(series.len() * 2 * len);
            for s in series {
                for (x, y) in s.xs.iter().zip(&s.ys) {
                    tokens.push(*x);
                    tokens.push(*y);
                }
            }
            let mask = (0..2 * len).map(|t| t % 2 == 0).collect();
            Tokenized {
                token_dim: 1,
                n_series: series.len(),
                seq_len: 2 * len,
                tokens,
                mask,
            }
        }
        SeriesSet::Oscillator(series) => {
            let len = dataset.length();
            let mut tokens = Vec::with_capacity(series.len() * 2 * len);
            for t in series {
                for &(x, v) in &t.states {
                    tokens.push(x);
                    tokens.push(v);
                }
            }
            let mask = (0..len).map(|t| t + 1 < len).collect();
            Tokenized {
                token_dim: 2,
                n_series: series.len(),
                seq_len: len,
                tokens,
                mask,
            }
        }
    }
}

const CSV_META: [&str; 4] = ["kind", "seed", "split", "config"];
const CSV_SHO: [&str; 9] = ["series_id", "k", "x", "v", "omega0", "gamma", "dt", "x0", "v0"];
const CSV_LINREG: [&str; 5] = ["series_id", "k", "x", "y", "w"];

impl Dataset {
    /// CSV with a metadata record (`kind, seed, split, config` JSON), a
    /// column header, then one row per `(series, step)`.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        use crate::io::fmt_f64;
        let mut w = csv::WriterBuilder::new()
            .flexible(true)
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(CSV_META)?;
        w.write_record([
            self.kind.as_str().to_string(),
            self.seed.to_string(),
            self.split.as_str().to_string(),
            serde_json::to_string(&self.config)?,
        ])?;
        match &self.series {
            SeriesSet::Regression(series) => {
                w.write_record(CSV_LINREG)?;
                for (i, s) in series.iter().enumerate() {
                    for (k, (x, y)) in s.xs.iter().zip(&s.ys).enumerate() {
                        w.write_record([i.to_string(), k.to_string(), fmt_f64(*x), fmt_f64(*y), fmt_f64(s.w)])?;
                    }
                }
            }
            SeriesSet::Oscillator(series) => {
                w.write_record(CSV_SHO)?;
                for (i, t) in series.iter().enumerate() {
                    let p = &t.params;
                    for (k, (x, v)) in t.states.iter().enumerate() {
                        w.write_record([
                            i.to_string(),
                            k.to_string(),
                            fmt_f64(*x),
                            fmt_f64(*v),
                            fmt_f64(p.omega0),
                            fmt_f64(p.gamma),
                            fmt_f64(p.dt),
                            fmt_f64(p.x0),
                            fmt_f64(p.v0),
                        ])?;
                    }
                }
            }
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(bytes);
        let mut records = rdr.records();
        let mut next = |what: &str| -> Result<csv::StringRecord> {
            records
                .next()
                .ok_or_else(|| Error::Parse(format!("dataset csv: missing {what}")))?
                .map_err(Error::from)
        };
        let meta_head = next("metadata header")?;
        if meta_head.iter().ne(CSV_META) {
            return Err(Error::Parse("dataset csv: bad metadata header".into()));
        }
        let meta = next("metadata")?;
        let kind: DatasetKind = meta[0].parse()?;
        let seed: u64 = meta[1].parse().map_err(|_| Error::Parse("dataset csv: bad seed".into()))?;
        let split: Split = meta[2].parse()?;
        let config: GenConfig = serde_json::from_str(&meta[3])?;
        let head = next("column header")?;
        let num = |r: &csv::StringRecord, i: usize| -> Result<f64> {
            r[i].parse()
                .map_err(|_| Error::Parse(format!("dataset csv: bad number `{}`", &r[i])))
        };
        let idx = |r: &csv::StringRecord, i: usize| -> Result<usize> {
            r[i].parse()
                .map_err(|_| Error::Parse(format!("dataset csv: bad index `{}`", &r[i])))
        };
        let series = if kind.is_sho() {
            if head.iter().ne(CSV_SHO) {
                return Err(Error::Parse("dataset csv: bad oscillator header".into()));
            }
            let mut out: Vec<Trajectory> = Vec::new();
            for r in records {
                let r = r?;
                let (i, k) = (idx(&r, 0)?, idx(&r, 1)?);
                if i == out.len() {
                    let params = OscParams::new(num(&r, 4)?, num(&r, 5)?, num(&r, 6)?, num(&r, 7)?, num(&r, 8)?);
                    out.push(Trajectory { params, states: Vec::new() });
                }
                let t = out
                    .get_mut(i)
                    .filter(|t| t.states.len() == k)
                    .ok_or_else(|| Error::Parse(format!("dataset csv: row ({i}, {k}) out of order")))?;
                t.states.push((num(&r, 2)?, num(&r, 3)?));
            }
            SeriesSet::Oscillator(out)
        } else {
            if head.iter().ne(CSV_LINREG) {
                return Err(Error::Parse("dataset csv: bad regression header".into()));
            }
            let mut out: Vec<RegressionSeries> = Vec::new();
            for r in records {
                let r = r?;
                let (i, k) = (idx(&r, 0)?, idx(&r, 1)?);
                if i == out.len() {
                    out.push(RegressionSeries { w: num(&r, 4)?, xs: Vec::new(), ys: Vec::new() });
                }
                let s = out
                    .get_mut(i)
                    .filter(|s| s.xs.len() == k)
                    .ok_or_else(|| Error::Parse(format!("dataset csv: row ({i}, {k}) out of order")))?;
                s.xs.push(num(&r, 2)?);
                s.ys.push(num(&r, 3)?);
            }
            SeriesSet::Regression(out)
        };
        Ok(Self { kind, split, seed, config, series })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_csv()?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_csv(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn half_period_of_cosine() {
        let p = OscParams::new(PI, 0.0, 1.0, 1.0, 0.0);
        let (x, v) = closed_form_state(&p, 1).unwrap();
        assert_abs_diff_eq!(x, -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn step_zero_is_initial_state() {
        for gamma in [0.0, 0.5, 2.0, 3.0] {
            let p = OscParams::new(2.0, gamma, 0.3, 0.7, -0.4);
            assert_eq!(closed_form_state(&p, 0).unwrap(), (0.7, -0.4));
        }
    }

    #[test]
    fn regime_classification() {
        let p = |g| OscParams::new(2.0, g, 0.1, 1.0, 0.0).regime();
        assert_eq!(p(0.0), Regime::Undamped);
        assert_eq!(p(1.0), Regime::Underdamped);
        assert_eq!(p(2.0), Regime::Critical);
        assert_eq!(p(2.0 + 1e-12), Regime::Critical);
        assert_eq!(p(3.0), Regime::Overdamped);
    }

    #[test]
    fn overdamped_overflow_is_reported() {
        // huge t with a tiny decay rate still underflows gracefully, but a
        // non-finite input must be rejected
        let p = OscParams::new(1.0, 2.0, f64::INFINITY, 1.0, 0.0);
        assert!(closed_form_state(&p, 1).is_err());
    }

    #[test]
    fn linreg_degenerate_ranges() {
        let cfg = LinregConfig {
            n_series: 1,
            length: 1,
            w: Bands::single(0.5, 0.5),
            x: Bands::single(2.0, 2.0),
            split: Split::Train,
        };
        let d = generate_linreg(&cfg, 3).unwrap();
        let s = &d.regression().unwrap()[0];
        assert_eq!((s.w, s.xs[0], s.ys[0]), (0.5, 2.0, 1.0));
    }

    #[test]
    fn linreg_shapes_and_ood_band() {
        let d = generate_linreg(&LinregConfig::train(5000, 65), 11).unwrap();
        assert_eq!(d.n_series(), 5000);
        assert_eq!(d.length(), 65);
        let ood = generate_linreg(&LinregConfig::ood(500, 8), 11).unwrap();
        for s in ood.regression().unwrap() {
            assert!(s.w.abs() >= 0.75 && s.w.abs() <= 1.0);
            for (x, y) in s.xs.iter().zip(&s.ys) {
                assert!((y - s.w * x).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn sho_undamped_shape_and_ranges() {
        let d = generate_sho(&ShoConfig::train(DatasetKind::ShoUndamped).unwrap(), 5).unwrap();
        assert_eq!((d.n_series(), d.length()), (5000, 65));
        for t in d.trajectories().unwrap() {
            let p = t.params;
            assert_eq!(p.gamma, 0.0);
            assert!(p.omega0 >= PI / 4.0 && p.omega0 <= 5.0 * PI / 4.0);
            assert!(p.dt <= 2.0 * PI / p.omega0);
            assert_eq!(t.states[0], (p.x0, p.v0));
        }
    }

    #[test]
    fn sho_damped_regimes() {
        let under = generate_sho(&ShoConfig::train(DatasetKind::ShoUnderdamped).unwrap(), 1).unwrap();
        assert_eq!(under.length(), 32);
        for t in under.trajectories().unwrap() {
            assert!(t.params.gamma >= 0.0 && t.params.gamma <= t.params.omega0);
            assert!(t.params.dt <= 2.0 * PI / (13.0 * t.params.omega0));
        }
        let over = generate_sho(&ShoConfig::train(DatasetKind::ShoOverdamped).unwrap(), 1).unwrap();
        for t in over.trajectories().unwrap() {
            assert!(t.params.gamma >= t.params.omega0 && t.params.gamma <= 1.5 * PI);
        }
        let mixed = generate_sho(
            &ShoConfig::train(DatasetKind::ShoDampedMixed).unwrap().with_size(2000, 8),
            1,
        )
        .unwrap();
        let n_under = mixed
            .trajectories()
            .unwrap()
            .iter()
            .filter(|t| t.params.gamma < t.params.omega0)
            .count();
        assert!((800..1200).contains(&n_under));
    }

    #[test]
    fn ood_union_has_mass_in_both_bands() {
        let cfg = ShoConfig::ood(DatasetKind::ShoUndamped).unwrap().with_size(4000, 2);
        let d = generate_sho(&cfg, 9).unwrap();
        let low = d
            .trajectories()
            .unwrap()
            .iter()
            .filter(|t| t.params.omega0 <= PI / 4.0)
            .count();
        // widths π/4 and π/4: equal mass per band
        assert!((1800..2200).contains(&low), "low band count {low}");
        assert!(d
            .trajectories()
            .unwrap()
            .iter()
            .all(|t| cfg.omega0.contains(t.params.omega0)));
    }

    #[test]
    fn tokenize_regression_pairs() {
        let d = Dataset {
            kind: DatasetKind::Linreg,
            split: Split::Train,
            seed: 0,
            config: GenConfig::Linreg(LinregConfig::train(1, 2)),
            series: SeriesSet::Regression(vec![RegressionSeries {
                w: 2.0,
                xs: vec![1.0, 3.0],
                ys: vec![2.0, 6.0],
            }]),
        };
        let tok = tokenize(&d);
        assert_eq!(tok.tokens, vec![1.0, 2.0, 3.0, 6.0]);
        assert_eq!(tok.ctx_positions(), vec![0, 2]);
        assert_eq!(tok.target(0, 2), &[6.0]);
        assert_eq!(tok.input_len(), 3);
    }

    #[test]
    fn tokenize_trajectory() {
        let cfg = ShoConfig::train(DatasetKind::ShoUndamped).unwrap().with_size(3, 65);
        let tok = tokenize(&generate_sho(&cfg, 2).unwrap());
        assert_eq!(tok.seq_len, 65);
        assert_eq!(tok.token_dim, 2);
        assert_eq!(tok.ctx_positions(), (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn csv_round_trip() {
        for config in [
            GenConfig::Linreg(LinregConfig::train(3, 5)),
            GenConfig::Sho(ShoConfig::train(DatasetKind::ShoDampedMixed).unwrap().with_size(4, 6)),
        ] {
            let d = Dataset::generate(&config, 11).unwrap();
            let back = Dataset::from_csv(&d.to_csv().unwrap()).unwrap();
            assert_eq!(back, d);
        }
        assert!(Dataset::from_csv(b"nope\n").is_err());
    }
}
