//! The four criteria, the causal interventions and the synthetic
//! byproduct analysis.
//!
//! Criterion 1 and 3 summaries are the largest per-model value. Criterion 2
//! is the Pearson correlation between `ln(mean MSE)` and the encoding error
//! `1 − c1`, so a positive value means better models encode more strongly.
//! Criterion 4 is the fraction of models whose replacement intervention
//! beats the dataset-mean predictor.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, Dataset, OscParams, SeriesSet, Tokenized};
use crate::error::{Error, Result};
use crate::numethods::{self, Method};
use crate::probes::{self, ProbeKind, ProbeResult, ReverseProbe, ReverseResult, SplitPolicy, Target};
use crate::seed::{self, streams};
use crate::stats;
use crate::transformer::{CaptureSpec, Model, Patch, Site};

/// `median |ŵ − w′|` below this is a success.
pub const SET_W_SUCCESS: f64 = 0.05;
/// Spread bound for the partial classes.
pub const SET_W_PARTIAL: f64 = 0.2;
/// Readouts with `|x| <` this are dropped.
pub const SET_W_MIN_X: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterventionMode {
    Replace,
    ModifyDt,
    ModifyOmega,
    ModifyBoth,
    SetW,
}

impl InterventionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            InterventionMode::Replace => "replace",
            InterventionMode::ModifyDt => "modify-dt",
            InterventionMode::ModifyOmega => "modify-omega",
            InterventionMode::ModifyBoth => "modify-both",
            InterventionMode::SetW => "set-w",
        }
    }
}

impl fmt::Display for InterventionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InterventionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            InterventionMode::Replace,
            InterventionMode::ModifyDt,
            InterventionMode::ModifyOmega,
            InterventionMode::ModifyBoth,
            InterventionMode::SetW,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| Error::Parse(format!("unknown intervention mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classification {
    Success,
    PartialLinear,
    PartialNonlinear,
    Fail,
}

impl Classification {
    pub fn as_str(&self) -> &'static str {
        match self {
            Classification::Success => "success",
            Classification::PartialLinear => "partial-linear",
            Classification::PartialNonlinear => "partial-nonlinear",
            Classification::Fail => "fail",
        }
    }
}

impl FromStr for Classification {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Classification::Success,
            Classification::PartialLinear,
            Classification::PartialNonlinear,
            Classification::Fail,
        ]
        .into_iter()
        .find(|c| c.as_str() == s)
        .ok_or_else(|| Error::Parse(format!("unknown classification `{s}`")))
    }
}

/// Medians of the parameters the patched model behaves as if it saw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpliedParams {
    /// Median of `Δt_implied / Δt′`.
    pub dt_ratio: Option<f64>,
    /// Median of `ω₀_implied / ω₀′`.
    pub omega_ratio: Option<f64>,
    /// Median `ŵ` for set-w runs.
    pub w: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionOutcome {
    pub model_id: String,
    pub site: Site,
    /// `lm`, `taylor`, `exp` or `linreg`.
    pub method: String,
    pub mode: InterventionMode,
    /// Multiplier on `Δt` (modify modes) or the `w′` value (set-w).
    pub dt_scale: f64,
    pub omega_scale: f64,
    pub w_prime: Option<f64>,
    pub mse: f64,
    pub baseline_mse: f64,
    pub copy_last_mse: f64,
    pub unpatched_mse: f64,
    pub implied: ImpliedParams,
    pub classification: Classification,
}

/// Overwrites one site at the prediction positions with fixed rows.
struct RowPatch {
    site: Site,
    positions: Vec<usize>,
    hidden: usize,
    /// Per series, `positions.len() × hidden`.
    rows: Vec<Vec<f64>>,
}

impl Patch for RowPatch {
    fn apply(&self, series: usize, site: Site, act: &mut [f64]) {
        if site != self.site {
            return;
        }
        let h = self.hidden;
        for (i, &pos) in self.positions.iter().enumerate() {
            act[pos * h..(pos + 1) * h].copy_from_slice(&self.rows[series][i * h..(i + 1) * h]);
        }
    }
}

/// MSE of predicting the per-dimension mean of `targets` (rows of width `d`).
pub fn mean_baseline_mse(targets: &[f64], d: usize) -> f64 {
    let n = targets.len() / d;
    if n == 0 {
        return f64::NAN;
    }
    (0..d)
        .map(|j| {
            let col: Vec<f64> = targets.iter().skip(j).step_by(d).copied().collect();
            stats::variance(&col)
        })
        .sum::<f64>()
        / d as f64
}

fn mse(preds: &[f64], targets: &[f64]) -> f64 {
    preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / preds.len().max(1) as f64
}

/// Reverse probes at every prediction position of one site, ready to
/// drive replacement and modification interventions.
pub struct InterventionSetup<'a> {
    pub model_id: String,
    model: &'a Model,
    dataset: &'a Dataset,
    tok: Tokenized,
    pub site: Site,
    method: Option<Method>,
    taylor_power: u32,
    feature_names: Vec<String>,
    /// One probe per context index.
    pub probes: Vec<ReverseProbe>,
    unpatched: Vec<f64>,
}

impl<'a> InterventionSetup<'a> {
    /// `method` is `None` for regression data, whose features are `[w, w²]`.
    pub fn new(
        model_id: &str,
        model: &'a Model,
        dataset: &'a Dataset,
        method: Option<Method>,
        site: Site,
        taylor_power: u32,
    ) -> Result<Self> {
        if !model.config.sites().contains(&site) {
            return Err(Error::usage(format!("site {site} not in model")));
        }
        match (&dataset.series, method) {
            (SeriesSet::Regression(_), Some(m)) => {
                return Err(Error::usage(format!("method `{}` needs oscillator data", m.tag())))
            }
            (SeriesSet::Oscillator(_), None) => {
                return Err(Error::usage("oscillator data needs a method"))
            }
            _ => {}
        }
        let tok = dynamics::tokenize(dataset);
        let n_ctx = tok.ctx_positions().len();
        let spec = CaptureSpec {
            sites: vec![site],
            positions: tok.ctx_positions(),
            ctx: (0..n_ctx).collect(),
        };
        let out = model.run(&tok, Some(&spec), None)?;
        let capture = out.capture.as_ref().expect("capture requested");
        let targets = match method {
            Some(m) => probes::targets_for(dataset, &[m], taylor_power),
            None => probes::targets_for(dataset, &[], taylor_power),
        };
        let refs: Vec<&Target> = targets.iter().collect();
        let features = probes::feature_matrix(&refs);
        let probes: Vec<ReverseProbe> = (0..n_ctx)
            .into_par_iter()
            .map(|c| probes::fit_reverse(&features, &capture.matrix(0, c)))
            .collect();
        Ok(Self {
            model_id: model_id.to_string(),
            model,
            dataset,
            feature_names: targets.iter().map(|t| t.name.clone()).collect(),
            tok,
            site,
            method,
            taylor_power,
            probes,
            unpatched: out.preds,
        })
    }

    fn method_tag(&self) -> String {
        self.method.map_or("linreg".to_string(), |m| m.tag().to_string())
    }

    /// Run with the site overwritten by reconstructions of per-series
    /// features.
    fn run_with(&self, features: &[Vec<f64>]) -> Result<Vec<f64>> {
        let h = self.model.config.hidden;
        let rows: Vec<Vec<f64>> = features
            .iter()
            .map(|f| self.probes.iter().flat_map(|p| p.reconstruct(f)).collect())
            .collect();
        let patch = RowPatch {
            site: self.site,
            positions: self.tok.ctx_positions(),
            hidden: h,
            rows,
        };
        Ok(self.model.run(&self.tok, None, Some(&patch))?.preds)
    }

    fn oscillator_features(&self, params: &[OscParams]) -> Vec<Vec<f64>> {
        let method = self.method.expect("oscillator setup");
        params
            .iter()
            .map(|p| {
                let set = numethods::intermediates(method, p, self.taylor_power);
                self.feature_names
                    .iter()
                    .map(|n| set.targets.iter().find(|(m, _)| m == n).map_or(0.0, |(_, v)| *v))
                    .collect()
            })
            .collect()
    }

    fn true_targets(&self) -> Vec<f64> {
        let ctx = self.tok.ctx_positions();
        (0..self.tok.n_series)
            .flat_map(|s| ctx.iter().flat_map(move |&p| self.tok.target(s, p).to_vec()))
            .collect()
    }

    fn copy_last(&self, targets: &[f64]) -> f64 {
        let d = self.tok.token_dim;
        let ctx = self.tok.ctx_positions();
        let last: Vec<f64> = (0..self.tok.n_series)
            .flat_map(|s| {
                ctx.iter().flat_map(move |&p| {
                    let series = self.tok.series(s);
                    // the most recent input of the same kind as the target
                    let src = if d == 1 { p.saturating_sub(1) } else { p };
                    series[src * d..(src + 1) * d].to_vec()
                })
            })
            .collect();
        mse(&last, targets)
    }

    /// Overwrite the site with reconstructions from the true intermediates.
    pub fn replace(&self) -> Result<InterventionOutcome> {
        match self.dataset.trajectories() {
            Some(_) => self.modify(1.0, 1.0),
            None => {
                let features: Vec<Vec<f64>> = self
                    .dataset
                    .regression()
                    .expect("regression data")
                    .iter()
                    .map(|s| vec![s.w, s.w * s.w])
                    .collect();
                let preds = self.run_with(&features)?;
                let targets = self.true_targets();
                let baseline = mean_baseline_mse(&targets, 1);
                let post = mse(&preds, &targets);
                Ok(InterventionOutcome {
                    model_id: self.model_id.clone(),
                    site: self.site,
                    method: self.method_tag(),
                    mode: InterventionMode::Replace,
                    dt_scale: 1.0,
                    omega_scale: 1.0,
                    w_prime: None,
                    mse: post,
                    baseline_mse: baseline,
                    copy_last_mse: self.copy_last(&targets),
                    unpatched_mse: mse(&self.unpatched, &targets),
                    implied: ImpliedParams { dt_ratio: None, omega_ratio: None, w: None },
                    classification: if post < baseline { Classification::Success } else { Classification::Fail },
                })
            }
        }
    }

    /// Reconstruct from intermediates of `Δt·dt_scale`, `ω₀·omega_scale` and
    /// score against one exact step of the modified system from each input
    /// state.
    pub fn modify(&self, dt_scale: f64, omega_scale: f64) -> Result<InterventionOutcome> {
        let trajectories = self
            .dataset
            .trajectories()
            .ok_or_else(|| Error::usage("modify interventions need oscillator data"))?;
        let modified: Vec<OscParams> = trajectories
            .iter()
            .map(|t| {
                let mut p = t.params;
                p.dt *= dt_scale;
                p.omega0 *= omega_scale;
                p
            })
            .collect();
        if let Some(cfg) = match &self.dataset.config {
            dynamics::GenConfig::Sho(c) => Some(c),
            _ => None,
        } {
            let outside = modified
                .iter()
                .filter(|p| !cfg.omega0.contains(p.omega0) || p.dt * p.omega0 > std::f64::consts::TAU / cfg.dt_divisor)
                .count();
            if outside > 0 {
                log::warn!("{outside} modified series fall outside the training support");
            }
        }
        let preds = self.run_with(&self.oscillator_features(&modified))?;
        let ctx = self.tok.ctx_positions();
        let targets: Vec<f64> = modified
            .iter()
            .enumerate()
            .flat_map(|(s, p)| {
                let step = numethods::mat_exp(&numethods::system_matrix(p.omega0, p.gamma), p.dt);
                let series = self.tok.series(s);
                ctx.iter()
                    .flat_map(move |&c| step.apply([series[2 * c], series[2 * c + 1]]))
                    .collect::<Vec<_>>()
            })
            .collect();
        let post = mse(&preds, &targets);
        let baseline = mean_baseline_mse(&targets, 2);
        let mode = match (dt_scale != 1.0, omega_scale != 1.0) {
            (false, false) => InterventionMode::Replace,
            (true, false) => InterventionMode::ModifyDt,
            (false, true) => InterventionMode::ModifyOmega,
            (true, true) => InterventionMode::ModifyBoth,
        };
        let implied = if modified.iter().all(|p| p.gamma == 0.0) {
            implied_params(&self.tok, &preds, &modified)
        } else {
            ImpliedParams { dt_ratio: None, omega_ratio: None, w: None }
        };
        Ok(InterventionOutcome {
            model_id: self.model_id.clone(),
            site: self.site,
            method: self.method_tag(),
            mode,
            dt_scale,
            omega_scale,
            w_prime: None,
            mse: post,
            baseline_mse: baseline,
            copy_last_mse: self.copy_last(&targets),
            unpatched_mse: mse(&self.unpatched, &targets),
            implied,
            classification: if post < baseline { Classification::Success } else { Classification::Fail },
        })
    }

    /// Insert the reconstruction of `[w′, w′²]` and read back `ŵ = ŷ/x`.
    pub fn set_w(&self, w_prime: f64) -> Result<InterventionOutcome> {
        let series = self
            .dataset
            .regression()
            .ok_or_else(|| Error::usage("set-w needs regression data"))?;
        let features = vec![vec![w_prime, w_prime * w_prime]; series.len()];
        let preds = self.run_with(&features)?;
        let ctx = self.tok.ctx_positions();
        let n_ctx = ctx.len();
        let mut targets = Vec::with_capacity(preds.len());
        let mut w_hat = Vec::new();
        for s in 0..self.tok.n_series {
            let toks = self.tok.series(s);
            for (c, &pos) in ctx.iter().enumerate() {
                let x = toks[pos];
                targets.push(w_prime * x);
                if c >= n_ctx / 2 && x.abs() >= SET_W_MIN_X {
                    w_hat.push(preds[s * n_ctx + c] / x);
                }
            }
        }
        let post = mse(&preds, &targets);
        let true_targets = self.true_targets();
        Ok(InterventionOutcome {
            model_id: self.model_id.clone(),
            site: self.site,
            method: "linreg".into(),
            mode: InterventionMode::SetW,
            dt_scale: 1.0,
            omega_scale: 1.0,
            w_prime: Some(w_prime),
            mse: post,
            baseline_mse: mean_baseline_mse(&targets, 1),
            copy_last_mse: self.copy_last(&targets),
            unpatched_mse: mse(&self.unpatched, &true_targets),
            implied: ImpliedParams { dt_ratio: None, omega_ratio: None, w: stats::median(&w_hat) },
            classification: classify_set_w(&w_hat, w_prime),
        })
    }
}

/// Classify observed `ŵ` readouts against the requested `w′`.
pub fn classify_set_w(w_hat: &[f64], w_prime: f64) -> Classification {
    let dev: Vec<f64> = w_hat.iter().map(|w| (w - w_prime).abs()).collect();
    let Some(med) = stats::median(&dev) else {
        return Classification::Fail;
    };
    if med < SET_W_SUCCESS {
        return Classification::Success;
    }
    if med < SET_W_PARTIAL {
        return Classification::PartialLinear;
    }
    let folded: Vec<f64> = w_hat
        .iter()
        .map(|w| (w - w_prime).abs().min((w + w_prime).abs()))
        .collect();
    match stats::median(&folded) {
        Some(m) if m < SET_W_PARTIAL => Classification::PartialNonlinear,
        _ => Classification::Fail,
    }
}

/// Per-series least-squares `ŷ_c ≈ W u_c`, read as `e^{AΔt}` of an
/// undamped oscillator.
fn implied_params(tok: &Tokenized, preds: &[f64], modified: &[OscParams]) -> ImpliedParams {
    let ctx = tok.ctx_positions();
    let n_ctx = ctx.len();
    let mut dt_ratio = Vec::new();
    let mut omega_ratio = Vec::new();
    for (s, p) in modified.iter().enumerate() {
        let toks = tok.series(s);
        let mut uu = [[0.0; 2]; 2];
        let mut yu = [[0.0; 2]; 2];
        for (c, &pos) in ctx.iter().enumerate() {
            let u = [toks[2 * pos], toks[2 * pos + 1]];
            let y = &preds[(s * n_ctx + c) * 2..(s * n_ctx + c) * 2 + 2];
            for i in 0..2 {
                for j in 0..2 {
                    uu[i][j] += u[i] * u[j];
                    yu[i][j] += y[i] * u[j];
                }
            }
        }
        let det = uu[0][0] * uu[1][1] - uu[0][1] * uu[1][0];
        if det.abs() < 1e-12 {
            continue;
        }
        let inv = [[uu[1][1] / det, -uu[0][1] / det], [-uu[1][0] / det, uu[0][0] / det]];
        let w = |i: usize, j: usize| yu[i][0] * inv[0][j] + yu[i][1] * inv[1][j];
        let (w00, w01, w10, w11) = (w(0, 0), w(0, 1), w(1, 0), w(1, 1));
        let cross = -w01 * w10;
        let ratio = -w10 / w01;
        if cross <= 0.0 || ratio <= 0.0 || !ratio.is_finite() {
            continue;
        }
        let theta = cross.sqrt().atan2((w00 + w11) / 2.0);
        let omega0 = ratio.sqrt();
        omega_ratio.push(omega0 / p.omega0);
        dt_ratio.push(theta / omega0 / p.dt);
    }
    ImpliedParams {
        dt_ratio: stats::median(&dt_ratio),
        omega_ratio: stats::median(&omega_ratio),
        w: None,
    }
}

/// Entry point for a single replacement intervention.
pub fn intervene_replace(
    model_id: &str,
    model: &Model,
    dataset: &Dataset,
    method: Option<Method>,
    site: Site,
) -> Result<InterventionOutcome> {
    InterventionSetup::new(model_id, model, dataset, method, site, numethods::DEFAULT_TAYLOR_POWER)?.replace()
}

/// Entry point for a single parameter-modification intervention.
pub fn intervene_modify(
    model_id: &str,
    model: &Model,
    dataset: &Dataset,
    method: Method,
    site: Site,
    dt_scale: f64,
    omega_scale: f64,
) -> Result<InterventionOutcome> {
    InterventionSetup::new(model_id, model, dataset, Some(method), site, numethods::DEFAULT_TAYLOR_POWER)?
        .modify(dt_scale, omega_scale)
}

/// Entry point for the regression `w′` intervention.
pub fn intervene_set_w(model_id: &str, model: &Model, dataset: &Dataset, site: Site, w_prime: f64) -> Result<InterventionOutcome> {
    InterventionSetup::new(model_id, model, dataset, None, site, numethods::DEFAULT_TAYLOR_POWER)?.set_w(w_prime)
}

/// MSE with the site zeroed at every prediction position.
pub fn ablate_zero(model: &Model, tok: &Tokenized, site: Site) -> Result<f64> {
    let positions = tok.ctx_positions();
    let h = model.config.hidden;
    let patch = RowPatch {
        site,
        rows: vec![vec![0.0; positions.len() * h]; tok.n_series],
        positions,
        hidden: h,
    };
    let out = model.run(tok, None, Some(&patch))?;
    Ok(crate::transformer::mse_by_context(&out, tok).iter().sum::<f64>() / out.n_ctx.max(1) as f64)
}

/// Everything the criteria need about one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub model_id: String,
    pub layers: usize,
    pub hidden: usize,
    /// `MSE_M(c)` for every context index.
    pub mse_by_ctx: Vec<f64>,
    pub probes: Vec<ProbeResult>,
    pub reverse: Vec<ReverseResult>,
    pub interventions: Vec<InterventionOutcome>,
}

impl ModelEvaluation {
    pub fn mean_mse(&self) -> f64 {
        stats::mean(&self.mse_by_ctx)
    }
}

/// Per-model criterion-1 value: the mean over the method's targets of
/// `max(R̄²)` from linear probes, with each target's best site.
pub fn criterion1(table: &[ProbeResult], method: &str) -> Option<(f64, BTreeMap<String, Site>)> {
    let mut names: Vec<&str> = table
        .iter()
        .filter(|r| r.spec.method == method && r.spec.kind == ProbeKind::Linear)
        .map(|r| r.spec.target.as_str())
        .collect();
    names.sort_unstable();
    names.dedup();
    let mut scores = Vec::new();
    let mut sites = BTreeMap::new();
    for name in names {
        if let Some((v, site)) = probes::max_mean_r2(table, name, ProbeKind::Linear) {
            scores.push(v);
            sites.insert(name.to_string(), site);
        }
    }
    (!scores.is_empty()).then(|| (stats::mean(&scores), sites))
}

/// Across-model correlation between `ln(mean MSE)` and `1 − score`; needs
/// at least three finite points with non-zero spread.
pub fn criterion2(points: &[(f64, f64)]) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(m, s)| *m > 0.0 && m.is_finite() && s.is_finite())
        .map(|(m, s)| (m.ln(), 1.0 - s))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    // fixed order keeps the sum independent of how models were listed
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    stats::pearson(&x, &y)
}

/// Per-model correlation over context length between `MSE_M(c)` and
/// `1 − r²(c)`, where `r²(c)` averages the method's targets at their best
/// sites.
pub fn criterion2_by_context(eval: &ModelEvaluation, method: &str) -> Option<f64> {
    let (_, sites) = criterion1(&eval.probes, method)?;
    let mut per_ctx: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in &eval.probes {
        if r.spec.kind != ProbeKind::Linear || r.spec.method != method {
            continue;
        }
        if sites.get(&r.spec.target) == Some(&r.spec.site) {
            if let Some(v) = r.fit.r2 {
                per_ctx.entry(r.spec.ctx).or_default().push(v);
            }
        }
    }
    let (mse, err): (Vec<f64>, Vec<f64>) = per_ctx
        .into_iter()
        .filter_map(|(c, v)| eval.mse_by_ctx.get(c).map(|m| (*m, 1.0 - stats::mean(&v))))
        .unzip();
    if mse.len() < 3 {
        return None;
    }
    stats::pearson(&mse, &err)
}

/// Per-model criterion-3 value: best site by mean variance explained over
/// context lengths.
pub fn criterion3(reverse: &[ReverseResult], method: &str) -> Option<(f64, Site)> {
    probes::max_mean(
        reverse
            .iter()
            .filter(|r| r.method == method)
            .map(|r| (r.site, r.probe.variance_explained)),
    )
}

/// Fraction of outcomes that beat the mean baseline.
pub fn criterion4(outcomes: &[&InterventionOutcome]) -> Option<f64> {
    if outcomes.is_empty() {
        return None;
    }
    let wins = outcomes.iter().filter(|o| o.mse < o.baseline_mse).count();
    Some(wins as f64 / outcomes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub method: String,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub c3: Option<f64>,
    pub c4: Option<f64>,
    pub c1_model: Option<String>,
    pub c3_model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDetail {
    pub model_id: String,
    pub method: String,
    pub layers: usize,
    pub hidden: usize,
    pub mean_mse: f64,
    pub c1: Option<f64>,
    pub c2_by_context: Option<f64>,
    pub c3: Option<f64>,
    pub c3_site: Option<Site>,
    pub replace_mse: Option<f64>,
    pub baseline_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriteriaSummary {
    pub methods: Vec<MethodScores>,
    pub details: Vec<ModelDetail>,
}

impl CriteriaSummary {
    pub fn method(&self, tag: &str) -> Option<&MethodScores> {
        self.methods.iter().find(|m| m.method == tag)
    }
}

fn best(values: impl Iterator<Item = (Option<f64>, String)>) -> (Option<f64>, Option<String>) {
    let mut out: (Option<f64>, Option<String>) = (None, None);
    let mut all: Vec<(f64, String)> = values.filter_map(|(v, id)| v.map(|v| (v, id))).collect();
    // ties resolve to the smallest id whatever the input order
    all.sort_by(|a, b| a.1.cmp(&b.1));
    for (v, id) in all {
        if out.0.is_none_or(|b| v > b) {
            out = (Some(v), Some(id));
        }
    }
    out
}

/// Score every method over a set of trained models.
pub fn summarize(models: &[ModelEvaluation], methods: &[&str]) -> CriteriaSummary {
    let mut details = Vec::new();
    let mut scores = Vec::new();
    for &method in methods {
        let rows: Vec<ModelDetail> = models
            .iter()
            .map(|m| {
                let c3 = criterion3(&m.reverse, method);
                let replace = m
                    .interventions
                    .iter()
                    .find(|o| o.method == method && o.mode == InterventionMode::Replace);
                ModelDetail {
                    model_id: m.model_id.clone(),
                    method: method.to_string(),
                    layers: m.layers,
                    hidden: m.hidden,
                    mean_mse: m.mean_mse(),
                    c1: criterion1(&m.probes, method).map(|(v, _)| v),
                    c2_by_context: criterion2_by_context(m, method),
                    c3: c3.map(|(v, _)| v),
                    c3_site: c3.map(|(_, s)| s),
                    replace_mse: replace.map(|o| o.mse),
                    baseline_mse: replace.map(|o| o.baseline_mse),
                }
            })
            .collect();
        let (c1, c1_model) = best(rows.iter().map(|r| (r.c1, r.model_id.clone())));
        let (c3, c3_model) = best(rows.iter().map(|r| (r.c3, r.model_id.clone())));
        let c2 = criterion2(
            &rows
                .iter()
                .filter_map(|r| r.c1.map(|c| (r.mean_mse, c)))
                .collect::<Vec<_>>(),
        );
        let outcomes: Vec<&InterventionOutcome> = models
            .iter()
            .filter_map(|m| {
                m.interventions
                    .iter()
                    .find(|o| o.method == method && o.mode == InterventionMode::Replace)
            })
            .collect();
        scores.push(MethodScores {
            method: method.to_string(),
            c1,
            c2,
            c3,
            c4: criterion4(&outcomes),
            c1_model,
            c3_model,
        });
        details.extend(rows);
    }
    CriteriaSummary { methods: scores, details }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ByproductConfig {
    pub hidden: usize,
    /// Standard deviation of the additive gaussian noise.
    pub sigma: f64,
    /// Set to `false` for a noise-only null.
    pub signal: bool,
    pub seed: u64,
}

impl Default for ByproductConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            sigma: 0.0,
            signal: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ByproductRow {
    pub method: String,
    pub synthetic_c1: Option<f64>,
    pub synthetic_c3: Option<f64>,
    pub real_c1: Option<f64>,
    pub real_c3: Option<f64>,
    pub sigma: f64,
}

/// Hidden states built as a random linear image of the matrix-exponential
/// intermediates, probed for every method's targets.
pub fn synthetic_hidden(dataset: &Dataset, cfg: &ByproductConfig) -> Result<DMatrix<f64>> {
    if dataset.trajectories().is_none() {
        return Err(Error::usage("byproduct analysis needs oscillator data"));
    }
    let exp = probes::targets_for(dataset, &[Method::MatrixExponential], numethods::DEFAULT_TAYLOR_POWER);
    let refs: Vec<&Target> = exp.iter().collect();
    let features = probes::feature_matrix(&refs);
    let mut rng = seed::rng_for(cfg.seed, streams::SYNTHETIC, 0, 0);
    let map = DMatrix::from_fn(features.ncols(), cfg.hidden, |_, _| StandardNormal.sample(&mut rng));
    let mut hs = if cfg.signal {
        features * map
    } else {
        DMatrix::zeros(features.nrows(), cfg.hidden)
    };
    if cfg.sigma > 0.0 {
        let mut rng = seed::rng_for(cfg.seed, streams::SYNTHETIC, 1, 0);
        hs.iter_mut().for_each(|v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += cfg.sigma * e;
        });
    }
    Ok(hs)
}

/// Criterion 1 and 3 for each method against synthetic hidden states,
/// next to the real-model values when given.
pub fn synthetic_byproduct(
    dataset: &Dataset,
    cfg: &ByproductConfig,
    split: SplitPolicy,
    real: Option<&CriteriaSummary>,
) -> Result<Vec<ByproductRow>> {
    let hs = synthetic_hidden(dataset, cfg)?;
    let prepared = probes::PreparedHidden::new(&hs, split);
    let methods = [Method::LinearMultistep, Method::Taylor, Method::MatrixExponential];
    let mut rows = Vec::new();
    for method in methods {
        let targets = probes::targets_for(dataset, &[method], numethods::DEFAULT_TAYLOR_POWER);
        let r2: Vec<f64> = targets
            .iter()
            .filter_map(|t| prepared.fit_linear(&t.values).r2)
            .collect();
        let refs: Vec<&Target> = targets.iter().collect();
        let reverse = probes::fit_reverse(&probes::feature_matrix(&refs), &hs);
        let real_row = real.and_then(|s| s.method(method.tag()));
        rows.push(ByproductRow {
            method: method.tag().to_string(),
            synthetic_c1: (!r2.is_empty()).then(|| stats::mean(&r2)),
            synthetic_c3: reverse.variance_explained,
            real_c1: real_row.and_then(|r| r.c1),
            real_c3: real_row.and_then(|r| r.c3),
            sigma: cfg.sigma,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probes::{Fit, ProbeSpec};
    use crate::transformer::InLayerPos;

    fn cell(target: &str, method: &str, site: Site, ctx: usize, r2: Option<f64>) -> ProbeResult {
        ProbeResult {
            spec: ProbeSpec {
                target: target.into(),
                method: method.into(),
                site,
                ctx,
                kind: ProbeKind::Linear,
                split: SplitPolicy::default(),
            },
            fit: Fit {
                coefficients: vec![],
                intercept: 0.0,
                r2,
                mse: r2.map(|v| 1.0 - v),
                n_samples: 100,
                flag: None,
            },
        }
    }

    #[test]
    fn set_w_classes() {
        assert_eq!(classify_set_w(&[0.5, 0.51, 0.49], 0.5), Classification::Success);
        assert_eq!(classify_set_w(&[0.6, 0.4, 0.62], 0.5), Classification::PartialLinear);
        assert_eq!(
            classify_set_w(&[0.5, -0.5, -0.49, -0.52, 0.51], 0.5),
            Classification::PartialNonlinear
        );
        assert_eq!(classify_set_w(&[3.0, -2.0, 0.0], 0.5), Classification::Fail);
        assert_eq!(classify_set_w(&[], 0.5), Classification::Fail);
    }

    #[test]
    fn single_target_criterion1() {
        let s = Site::new(0, InLayerPos::Mlp);
        let table = vec![cell("exp.m00", "exp", s, 3, Some(0.8))];
        let (v, sites) = criterion1(&table, "exp").unwrap();
        assert_eq!(v, 0.8);
        assert_eq!(sites["exp.m00"], s);
        assert!(criterion1(&table, "lm").is_none());
    }

    #[test]
    fn criterion2_sign_and_degeneracy() {
        // lower error goes with higher score: strength 1
        let pts: Vec<(f64, f64)> = (1..=5).map(|i| ((i as f64).exp(), 1.0 - i as f64 / 10.0)).collect();
        assert!((criterion2(&pts).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(criterion2(&pts[..2]), None);
        let flat: Vec<(f64, f64)> = pts.iter().map(|(m, _)| (*m, 0.4)).collect();
        assert_eq!(criterion2(&flat), None);
    }

    #[test]
    fn criterion4_ratio() {
        let o = |mse: f64| InterventionOutcome {
            model_id: "m".into(),
            site: Site::EMBED,
            method: "exp".into(),
            mode: InterventionMode::Replace,
            dt_scale: 1.0,
            omega_scale: 1.0,
            w_prime: None,
            mse,
            baseline_mse: 1.0,
            copy_last_mse: 1.0,
            unpatched_mse: 0.0,
            implied: ImpliedParams { dt_ratio: None, omega_ratio: None, w: None },
            classification: Classification::Fail,
        };
        let (a, b, c) = (o(0.5), o(2.0), o(0.1));
        assert_eq!(criterion4(&[&a, &b, &c]), Some(2.0 / 3.0));
        assert_eq!(criterion4(&[]), None);
    }

    #[test]
    fn mean_baseline_is_variance() {
        assert_eq!(mean_baseline_mse(&[1.0, 3.0], 1), 1.0);
        assert_eq!(mean_baseline_mse(&[1.0, 0.0, 3.0, 0.0], 2), 0.5);
    }
}
