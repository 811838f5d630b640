//! Linear probes, CCA-based Taylor probes and reverse probes over captured
//! hidden states.
//!
//! Every forward fit standardizes the hidden-state columns on the training
//! rows and adds a ridge of `λ = 1e-6 · trace(C)/dim` to the standardized
//! covariance `C`, which makes the fit invariant to per-dimension scaling.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Dataset, SeriesSet};
use crate::error::{Error, Result};
use crate::linalg::{self, ColumnScaler};
use crate::numethods::{self, Method};
use crate::seed::{self, streams};
use crate::transformer::{CaptureSpec, HiddenStateCapture, Model, Site};

pub const RIDGE_SCALE: f64 = 1e-6;
pub const MAX_TAYLOR_DEGREE: usize = 5;
/// A cell needs more than `hidden + MIN_EXTRA_SAMPLES` rows.
pub const MIN_EXTRA_SAMPLES: usize = 10;
const DEGENERATE_SS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitPolicy {
    /// Fit on a seeded 80% of the rows, score on the other 20%.
    Holdout { seed: u64 },
    /// Fit and score on every row.
    InSample,
}

impl SplitPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitPolicy::Holdout { .. } => "heldout",
            SplitPolicy::InSample => "insample",
        }
    }

    /// `(fit rows, evaluation rows)`; a pure function of `(n, seed)`.
    pub fn partition(&self, n: usize) -> (Vec<usize>, Vec<usize>) {
        match *self {
            SplitPolicy::InSample => ((0..n).collect(), (0..n).collect()),
            SplitPolicy::Holdout { seed } => {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut seed::rng_for(seed, streams::SPLIT, n as u64, 0));
                let n_test = (n as f64 * 0.2).round() as usize;
                let test = idx[..n_test].to_vec();
                let mut train = idx[n_test..].to_vec();
                let mut test = test;
                train.sort_unstable();
                test.sort_unstable();
                (train, test)
            }
        }
    }
}

impl Default for SplitPolicy {
    fn default() -> Self {
        SplitPolicy::Holdout { seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeKind {
    Linear,
    Taylor { degree: usize },
    Reverse,
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProbeKind::Linear => f.write_str("linear"),
            ProbeKind::Taylor { degree } => write!(f, "taylor{degree}"),
            ProbeKind::Reverse => f.write_str("reverse"),
        }
    }
}

impl FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ProbeKind::Linear),
            "reverse" => Ok(ProbeKind::Reverse),
            _ => s
                .strip_prefix("taylor")
                .and_then(|d| d.parse().ok())
                .map(|degree| ProbeKind::Taylor { degree })
                .ok_or_else(|| Error::Parse(format!("unknown probe kind `{s}`"))),
        }
    }
}

/// Why a cell carries no score.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeFlag {
    DegenerateTarget,
    DegenerateHidden,
    TooFewSamples,
    MissingCapture,
}

impl ProbeFlag {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeFlag::DegenerateTarget => "degenerate-target",
            ProbeFlag::DegenerateHidden => "degenerate-hidden",
            ProbeFlag::TooFewSamples => "too-few-samples",
            ProbeFlag::MissingCapture => "missing-capture",
        }
    }
}

impl FromStr for ProbeFlag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            ProbeFlag::DegenerateTarget,
            ProbeFlag::DegenerateHidden,
            ProbeFlag::TooFewSamples,
            ProbeFlag::MissingCapture,
        ]
        .into_iter()
        .find(|f| f.as_str() == s)
        .ok_or_else(|| Error::Parse(format!("unknown probe flag `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub target: String,
    pub method: String,
    pub site: Site,
    pub ctx: usize,
    pub kind: ProbeKind,
    pub split: SplitPolicy,
}

/// Result of one probe fit. `r2` is `None` for flagged cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub r2: Option<f64>,
    pub mse: Option<f64>,
    pub n_samples: usize,
    pub flag: Option<ProbeFlag>,
}

impl Fit {
    fn flagged(flag: ProbeFlag, n_samples: usize) -> Self {
        Self {
            coefficients: Vec::new(),
            intercept: 0.0,
            r2: None,
            mse: None,
            n_samples,
            flag: Some(flag),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub spec: ProbeSpec,
    pub fit: Fit,
}

/// Hidden states of one cell, standardized and factorized once so that
/// many targets can share the work.
pub struct PreparedHidden {
    n: usize,
    hidden: usize,
    train: Vec<usize>,
    test: Vec<usize>,
    scaler: ColumnScaler,
    z_train: DMatrix<f64>,
    z_test: DMatrix<f64>,
    /// `(ZᵀZ/n + λI)` Cholesky factor.
    chol: Option<nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>>,
    /// `(ZᵀZ/n + λI)^{-1/2}` for the CCA whitening.
    whiten: DMatrix<f64>,
}

fn ridge_lambda(active: usize, dim: usize) -> f64 {
    // trace of a standardized covariance is the number of active columns
    RIDGE_SCALE * active.max(1) as f64 / dim.max(1) as f64
}

impl PreparedHidden {
    pub fn new(hs: &DMatrix<f64>, split: SplitPolicy) -> Self {
        let n = hs.nrows();
        let hidden = hs.ncols();
        let (train, test) = split.partition(n);
        let x_train = linalg::select_rows(hs, &train);
        let scaler = ColumnScaler::fit(&x_train);
        let z_train = scaler.transform(&x_train);
        let z_test = scaler.transform(&linalg::select_rows(hs, &test));
        let m = train.len().max(1) as f64;
        let lambda = ridge_lambda(scaler.active(), hidden);
        let mut cov = z_train.transpose() * &z_train / m;
        for i in 0..hidden {
            cov[(i, i)] += lambda;
        }
        let whiten = linalg::inv_sqrt_sym(&cov, 0.0);
        let chol = cov.cholesky();
        Self {
            n,
            hidden,
            train,
            test,
            scaler,
            z_train,
            z_test,
            chol,
            whiten,
        }
    }

    fn check(&self, target: &[f64]) -> Result<(), ProbeFlag> {
        if self.n <= self.hidden + MIN_EXTRA_SAMPLES {
            return Err(ProbeFlag::TooFewSamples);
        }
        if target.len() != self.n {
            return Err(ProbeFlag::MissingCapture);
        }
        if self.scaler.active() == 0 || self.chol.is_none() {
            return Err(ProbeFlag::DegenerateHidden);
        }
        Ok(())
    }

    /// Ridge regression `target ≈ w·hs + b`.
    pub fn fit_linear(&self, target: &[f64]) -> Fit {
        if let Err(flag) = self.check(target) {
            return Fit::flagged(flag, self.n);
        }
        let y_train = linalg::select(target, &self.train);
        let y_test = linalg::select(target, &self.test);
        let y_mean = y_train.iter().sum::<f64>() / y_train.len() as f64;
        let m = self.train.len() as f64;
        let yc = DVector::from_iterator(y_train.len(), y_train.iter().map(|v| v - y_mean));
        let rhs = self.z_train.transpose() * yc / m;
        let beta = self.chol.as_ref().expect("checked").solve(&rhs);

        let pred = &self.z_test * &beta;
        let test_mean = y_test.iter().sum::<f64>() / y_test.len() as f64;
        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        for (i, y) in y_test.iter().enumerate() {
            ss_res += (y - y_mean - pred[i]).powi(2);
            ss_tot += (y - test_mean).powi(2);
        }
        if ss_tot < DEGENERATE_SS {
            return Fit::flagged(ProbeFlag::DegenerateTarget, self.n);
        }
        let coefficients: Vec<f64> = beta
            .iter()
            .zip(self.scaler.scale.iter())
            .map(|(b, s)| b * s)
            .collect();
        let intercept = y_mean
            - coefficients
                .iter()
                .zip(self.scaler.mean.iter())
                .map(|(c, mu)| c * mu)
                .sum::<f64>();
        Fit {
            coefficients,
            intercept,
            r2: Some(1.0 - ss_res / ss_tot),
            mse: Some(ss_res / y_test.len() as f64),
            n_samples: self.n,
            flag: None,
        }
    }

    /// First canonical correlation between `[I, I², …, I^degree]` and the
    /// hidden state; the score is `ρ²` on the evaluation rows.
    ///
    /// `coefficients` holds the polynomial weights (`a₁…a_n`, original
    /// scale) followed by the hidden-state direction.
    pub fn fit_taylor(&self, target: &[f64], degree: usize) -> Fit {
        if let Err(flag) = self.check(target) {
            return Fit::flagged(flag, self.n);
        }
        let degree = degree.clamp(1, MAX_TAYLOR_DEGREE);
        let features = DMatrix::from_fn(self.n, degree, |r, c| target[r].powi(c as i32 + 1));
        let f_train = linalg::select_rows(&features, &self.train);
        let fscaler = ColumnScaler::fit(&f_train);
        if fscaler.active() == 0 {
            return Fit::flagged(ProbeFlag::DegenerateTarget, self.n);
        }
        let u_train = fscaler.transform(&f_train);
        let u_test = fscaler.transform(&linalg::select_rows(&features, &self.test));
        let m = self.train.len() as f64;
        let mut cxx = u_train.transpose() * &u_train / m;
        let lambda = ridge_lambda(fscaler.active(), degree);
        for i in 0..degree {
            cxx[(i, i)] += lambda;
        }
        let cxy = u_train.transpose() * &self.z_train / m;
        let kx = linalg::inv_sqrt_sym(&cxx, 0.0);
        let t = &kx * cxy * &self.whiten;
        let svd = t.svd(true, true);
        let best = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, s)| if *s > acc.1 { (i, *s) } else { acc })
            .0;
        let a = &kx * svd.u.as_ref().expect("u").column(best);
        let b = &self.whiten * svd.v_t.as_ref().expect("v").row(best).transpose();

        let fu = &u_test * &a;
        let hv = &self.z_test * &b;
        let Some(rho) = crate::stats::pearson(fu.as_slice(), hv.as_slice()) else {
            let flag = if crate::stats::variance(fu.as_slice()) <= 0.0 {
                ProbeFlag::DegenerateTarget
            } else {
                ProbeFlag::DegenerateHidden
            };
            return Fit::flagged(flag, self.n);
        };
        let r2 = rho * rho;
        let mut coefficients: Vec<f64> = a.iter().zip(fscaler.scale.iter()).map(|(c, s)| c * s).collect();
        coefficients.extend(b.iter().zip(self.scaler.scale.iter()).map(|(c, s)| c * s));
        Fit {
            coefficients,
            intercept: 0.0,
            r2: Some(r2),
            // residual variance of the unit-variance feature variate
            mse: Some(1.0 - r2),
            n_samples: self.n,
            flag: None,
        }
    }
}

/// Ridge linear probe on an 80/20 split (or in-sample).
pub fn fit_linear(hs: &DMatrix<f64>, target: &[f64], split: SplitPolicy) -> Fit {
    PreparedHidden::new(hs, split).fit_linear(target)
}

/// CCA Taylor probe of the given polynomial degree.
pub fn fit_taylor_cca(hs: &DMatrix<f64>, target: &[f64], degree: usize, split: SplitPolicy) -> Fit {
    PreparedHidden::new(hs, split).fit_taylor(target, degree)
}

/// Linear map from intermediate features to hidden states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReverseProbe {
    /// `features × hidden`, row-major.
    pub map: Vec<f64>,
    pub intercept: Vec<f64>,
    pub n_features: usize,
    pub hidden: usize,
    pub variance_explained: Option<f64>,
    pub residual_variance: Vec<f64>,
    pub n_samples: usize,
    pub flag: Option<ProbeFlag>,
}

impl ReverseProbe {
    /// Hidden state predicted from one row of features.
    pub fn reconstruct(&self, features: &[f64]) -> Vec<f64> {
        let mut out = self.intercept.clone();
        for (i, f) in features.iter().enumerate().take(self.n_features) {
            for (o, m) in out.iter_mut().zip(&self.map[i * self.hidden..(i + 1) * self.hidden]) {
                *o += f * m;
            }
        }
        out
    }
}

/// Least squares `hs ≈ features·B + c`, scored in-sample by the fraction of
/// total hidden-state variance it explains.
pub fn fit_reverse(features: &DMatrix<f64>, hs: &DMatrix<f64>) -> ReverseProbe {
    let n = hs.nrows();
    let (m, hidden) = (features.ncols(), hs.ncols());
    let hs_scaler = ColumnScaler::fit(hs);
    let hs_var: Vec<f64> = hs_scaler
        .scale
        .iter()
        .enumerate()
        .map(|(c, _)| crate::stats::variance(hs.column(c).as_slice()))
        .collect();
    let total: f64 = hs_var.iter().sum();
    let flagged = |flag| ReverseProbe {
        map: vec![0.0; m * hidden],
        intercept: hs_scaler.mean.iter().copied().collect(),
        n_features: m,
        hidden,
        variance_explained: None,
        residual_variance: hs_var.clone(),
        n_samples: n,
        flag: Some(flag),
    };
    if n == 0 || total <= 0.0 || !total.is_finite() {
        return flagged(ProbeFlag::DegenerateHidden);
    }
    if n <= m + 1 {
        return flagged(ProbeFlag::TooFewSamples);
    }
    let fscaler = ColumnScaler::fit(features);
    let u = fscaler.transform(features);
    let mut hc = hs.clone();
    for c in 0..hidden {
        let mu = hs_scaler.mean[c];
        hc.column_mut(c).apply(|v| *v -= mu);
    }
    let gram = u.transpose() * &u;
    let b_std = linalg::pinv_solve_sym(&gram, &(u.transpose() * &hc), 1e-12);
    let resid = &hc - &u * &b_std;
    let residual_variance: Vec<f64> = (0..hidden)
        .map(|c| crate::stats::variance(resid.column(c).as_slice()))
        .collect();
    let ve = (1.0 - residual_variance.iter().sum::<f64>() / total).clamp(0.0, 1.0);

    // back to the original feature scale
    let mut map = vec![0.0; m * hidden];
    let mut intercept: Vec<f64> = hs_scaler.mean.iter().copied().collect();
    for i in 0..m {
        let (mu, s) = (fscaler.mean[i], fscaler.scale[i]);
        for o in 0..hidden {
            let coef = b_std[(i, o)] * s;
            map[i * hidden + o] = coef;
            intercept[o] -= coef * mu;
        }
    }
    ReverseProbe {
        map,
        intercept,
        n_features: m,
        hidden,
        variance_explained: Some(ve),
        residual_variance,
        n_samples: n,
        flag: None,
    }
}

/// A per-series scalar to probe for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub name: String,
    /// `lm`, `taylor`, `exp` or `linreg`.
    pub method: String,
    pub values: Vec<f64>,
}

/// Probe targets of a dataset. Oscillators get the intermediates of each
/// requested method; regression gets `w` (and `w2` for reverse probes).
pub fn targets_for(dataset: &Dataset, methods: &[Method], taylor_power: u32) -> Vec<Target> {
    match &dataset.series {
        SeriesSet::Regression(series) => vec![
            Target {
                name: "w".into(),
                method: "linreg".into(),
                values: series.iter().map(|s| s.w).collect(),
            },
            Target {
                name: "w2".into(),
                method: "linreg".into(),
                values: series.iter().map(|s| s.w * s.w).collect(),
            },
        ],
        SeriesSet::Oscillator(series) => {
            let mut out: Vec<Target> = Vec::new();
            for &method in methods {
                let Some(first) = series.first() else { continue };
                let names: Vec<String> = numethods::intermediates(method, &first.params, taylor_power)
                    .names()
                    .iter()
                    .map(|s| s.to_string())
                    .collect();
                let mut columns = vec![Vec::with_capacity(series.len()); names.len()];
                for t in series {
                    let set = numethods::intermediates(method, &t.params, taylor_power);
                    for (col, name) in columns.iter_mut().zip(&names) {
                        let v = set.targets.iter().find(|(n, _)| n == name).map_or(f64::NAN, |(_, v)| *v);
                        col.push(v);
                    }
                }
                out.extend(names.into_iter().zip(columns).map(|(name, values)| Target {
                    name,
                    method: method.tag().into(),
                    values,
                }));
            }
            out
        }
    }
}

/// Targets of one method as an `n × m` feature matrix.
pub fn feature_matrix(targets: &[&Target]) -> DMatrix<f64> {
    let n = targets.first().map_or(0, |t| t.values.len());
    DMatrix::from_fn(n, targets.len(), |r, c| targets[c].values[r])
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOptions {
    pub split: SplitPolicy,
    pub kinds: Vec<ProbeKind>,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            split: SplitPolicy::default(),
            kinds: vec![ProbeKind::Linear],
        }
    }
}

/// One probe result per `(target, kind, site, ctx)`, in that nesting order.
pub fn probe_capture(
    capture: &HiddenStateCapture,
    targets: &[Target],
    sites: &[Site],
    ctxs: &[usize],
    opts: &GridOptions,
) -> Vec<ProbeResult> {
    let cells: Vec<(Site, usize)> = sites
        .iter()
        .flat_map(|s| ctxs.iter().map(move |c| (*s, *c)))
        .collect();
    let per_cell: Vec<Vec<ProbeResult>> = cells
        .par_iter()
        .map(|&(site, ctx)| {
            let located = capture.site_index(site).zip(capture.ctx_index(ctx));
            let prepared = located.map(|(si, ci)| PreparedHidden::new(&capture.matrix(si, ci), opts.split));
            let mut out = Vec::with_capacity(targets.len() * opts.kinds.len());
            for t in targets {
                for &kind in &opts.kinds {
                    let fit = match (&prepared, kind) {
                        (None, _) => Fit::flagged(ProbeFlag::MissingCapture, capture.n_series),
                        (Some(p), ProbeKind::Linear) => p.fit_linear(&t.values),
                        (Some(p), ProbeKind::Taylor { degree }) => p.fit_taylor(&t.values, degree),
                        (Some(_), ProbeKind::Reverse) => continue,
                    };
                    out.push(ProbeResult {
                        spec: ProbeSpec {
                            target: t.name.clone(),
                            method: t.method.clone(),
                            site,
                            ctx,
                            kind,
                            split: opts.split,
                        },
                        fit,
                    });
                }
            }
            out
        })
        .collect();
    // reorder to (target, kind, site, ctx)
    let mut all: Vec<ProbeResult> = per_cell.into_iter().flatten().collect();
    let t_order: BTreeMap<&str, usize> = targets
        .iter()
        .enumerate()
        .map(|(i, t)| (t.name.as_str(), i))
        .collect();
    all.sort_by_key(|r| {
        (
            t_order.get(r.spec.target.as_str()).copied().unwrap_or(usize::MAX),
            r.spec.kind,
            r.spec.site,
            r.spec.ctx,
        )
    });
    all
}

/// Capture the model on `dataset` and probe every target at every
/// `(site, context)` pair.
pub fn probe_grid(
    model: &Model,
    dataset: &Dataset,
    targets: &[Target],
    sites: &[Site],
    ctxs: &[usize],
    opts: &GridOptions,
) -> Result<Vec<ProbeResult>> {
    let tok = crate::dynamics::tokenize(dataset);
    let mut spec = CaptureSpec::at_contexts(model, &tok, ctxs)?;
    spec.sites = sites.to_vec();
    let out = model.run(&tok, Some(&spec), None)?;
    let capture = out.capture.expect("capture requested");
    Ok(probe_capture(&capture, targets, sites, ctxs, opts))
}

/// Reverse probe for one `(site, ctx)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReverseResult {
    pub method: String,
    pub features: Vec<String>,
    pub site: Site,
    pub ctx: usize,
    pub probe: ReverseProbe,
}

/// Reverse probes from each feature group to every `(site, ctx)` cell.
pub fn reverse_grid(
    capture: &HiddenStateCapture,
    groups: &[(String, Vec<&Target>)],
    sites: &[Site],
    ctxs: &[usize],
) -> Vec<ReverseResult> {
    let cells: Vec<(usize, Site, usize)> = (0..groups.len())
        .flat_map(|g| sites.iter().flat_map(move |s| ctxs.iter().map(move |c| (g, *s, *c))))
        .collect();
    cells
        .par_iter()
        .map(|&(g, site, ctx)| {
            let (method, feats) = &groups[g];
            let probe = match capture.site_index(site).zip(capture.ctx_index(ctx)) {
                Some((si, ci)) => fit_reverse(&feature_matrix(feats), &capture.matrix(si, ci)),
                None => ReverseProbe {
                    map: Vec::new(),
                    intercept: Vec::new(),
                    n_features: feats.len(),
                    hidden: capture.hidden,
                    variance_explained: None,
                    residual_variance: Vec::new(),
                    n_samples: capture.n_series,
                    flag: Some(ProbeFlag::MissingCapture),
                },
            };
            ReverseResult {
                method: method.clone(),
                features: feats.iter().map(|t| t.name.clone()).collect(),
                site,
                ctx,
                probe,
            }
        })
        .collect()
}

/// Per-site mean over context lengths, skipping flagged cells; returns the
/// best site and its mean. `None` if every cell is flagged.
pub fn max_mean<'a>(cells: impl IntoIterator<Item = (Site, Option<f64>)> + 'a) -> Option<(f64, Site)> {
    let mut by_site: BTreeMap<Site, (f64, usize)> = BTreeMap::new();
    for (site, score) in cells {
        if let Some(v) = score {
            let e = by_site.entry(site).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    by_site
        .into_iter()
        .map(|(s, (sum, n))| (sum / n as f64, s))
        .fold(None, |best: Option<(f64, Site)>, (v, s)| match best {
            Some((bv, _)) if bv >= v => best,
            _ => Some((v, s)),
        })
}

/// `max(R̄²)` for one target and probe kind.
pub fn max_mean_r2(table: &[ProbeResult], target: &str, kind: ProbeKind) -> Option<(f64, Site)> {
    max_mean(
        table
            .iter()
            .filter(|r| r.spec.target == target && r.spec.kind == kind)
            .map(|r| (r.spec.site, r.fit.r2)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn planted(n: usize, h: usize, seed: u64, signal: impl Fn(f64) -> f64, noise: f64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = seed::rng_for(seed, 99, 0, 0);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-0.75..0.75)).collect();
        let dir: Vec<f64> = (0..h).map(|_| StandardNormal.sample(&mut rng)).collect();
        let hs = DMatrix::from_fn(n, h, |r, c| {
            let e: f64 = StandardNormal.sample(&mut rng);
            dir[c] * signal(w[r]) + noise * e
        });
        (hs, w)
    }

    #[test]
    fn partition_is_eighty_twenty_and_pure() {
        let split = SplitPolicy::Holdout { seed: 3 };
        let (train, test) = split.partition(100);
        assert_eq!((train.len(), test.len()), (80, 20));
        assert_eq!(split.partition(100), (train.clone(), test.clone()));
        let mut all: Vec<usize> = train.into_iter().chain(test).collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn perfect_column_encoding() {
        let (hs, w) = planted(400, 4, 1, |w| w, 0.3);
        let mut hs = hs;
        hs.column_mut(0).copy_from_slice(&w);
        let fit = fit_linear(&hs, &w, SplitPolicy::default());
        assert!(fit.r2.unwrap() >= 0.999);
    }

    #[test]
    fn constant_target_is_flagged() {
        let (hs, _) = planted(200, 4, 2, |w| w, 0.1);
        let fit = fit_linear(&hs, &[0.25; 200], SplitPolicy::default());
        assert_eq!(fit.flag, Some(ProbeFlag::DegenerateTarget));
        assert_eq!(fit.r2, None);
    }

    #[test]
    fn too_few_samples_is_flagged() {
        let (hs, w) = planted(20, 16, 2, |w| w, 0.1);
        assert_eq!(fit_linear(&hs, &w, SplitPolicy::default()).flag, Some(ProbeFlag::TooFewSamples));
    }

    #[test]
    fn reverse_probe_exact_structure() {
        let (_, w) = planted(300, 3, 4, |w| w, 0.0);
        let feats = DMatrix::from_fn(300, 2, |r, c| if c == 0 { w[r] } else { w[r] * w[r] });
        let map = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 0.3, 0.0, 4.0]);
        let hs = &feats * &map;
        let rp = fit_reverse(&feats, &hs);
        assert!(rp.variance_explained.unwrap() >= 0.999);
        let rec = rp.reconstruct(&[0.5, 0.25]);
        for (got, want) in rec.iter().zip([0.575, -1.0, 1.25]) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn reverse_probe_zero_variance_flagged() {
        let feats = DMatrix::from_fn(50, 1, |r, _| r as f64);
        let hs = DMatrix::from_element(50, 3, 1.5);
        assert_eq!(fit_reverse(&feats, &hs).flag, Some(ProbeFlag::DegenerateHidden));
    }

    #[test]
    fn max_mean_picks_best_site() {
        let s1 = Site::EMBED;
        let s2 = Site::new(0, crate::transformer::InLayerPos::Mlp);
        let cells = vec![(s1, Some(0.2)), (s1, Some(0.4)), (s2, Some(0.6)), (s2, Some(0.8)), (s2, None)];
        let (v, s) = max_mean(cells).unwrap();
        assert!((v - 0.7).abs() < 1e-12);
        assert_eq!(s, s2);
        assert_eq!(max_mean(vec![(s1, None)]), None);
        assert_eq!(max_mean(vec![(s1, Some(0.42))]), Some((0.42, s1)));
    }

    #[test]
    fn probe_kind_names() {
        for k in [ProbeKind::Linear, ProbeKind::Taylor { degree: 3 }, ProbeKind::Reverse] {
            assert_eq!(k.to_string().parse::<ProbeKind>().unwrap(), k);
        }
    }
}
