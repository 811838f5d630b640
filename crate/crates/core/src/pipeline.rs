//! End-to-end orchestration: generate, train, probe, reverse-probe,
//! intervene, score and report, with every artifact recorded in a
//! [`Registry`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::criteria::{self, CriteriaSummary, InterventionOutcome, InterventionSetup, ModelEvaluation};
use crate::dynamics::{tokenize, Dataset, DatasetKind, GenConfig, LinregConfig, ShoConfig, Split};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::numethods::{Method, DEFAULT_TAYLOR_POWER};
use crate::probes::{self, GridOptions, ProbeKind, ProbeResult, ReverseResult, SplitPolicy, Target};
use crate::registry::{
    InterventionRecord, ModelRecord, ModelSidecar, ModelStatus, ProbeRecord, Registry, ReportBundle,
};
use crate::transformer::{self, CaptureSpec, HiddenStateCapture, Model, ModelConfig, Site, TrainHyper};

/// Default regression length in `(x, y)` pairs.
pub const LINREG_LENGTH: usize = 65;

/// Training configuration for one dataset kind.
pub fn dataset_config(kind: DatasetKind, n_series: usize, length: Option<usize>, split: Split) -> Result<GenConfig> {
    Ok(match kind {
        DatasetKind::Linreg => {
            let len = length.unwrap_or(LINREG_LENGTH);
            GenConfig::Linreg(match split {
                Split::Train => LinregConfig::train(n_series, len),
                Split::OodTest => LinregConfig::ood(n_series, len),
            })
        }
        k => {
            let base = match split {
                Split::Train => ShoConfig::train(k)?,
                Split::OodTest => ShoConfig::ood(k)?,
            };
            let len = length.unwrap_or(base.length);
            GenConfig::Sho(base.with_size(n_series, len))
        }
    })
}

/// Seed of the out-of-distribution companion of a training set.
pub fn ood_seed(seed: u64) -> u64 {
    seed.wrapping_add(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub kind: DatasetKind,
    pub n_series: usize,
    pub length: Option<usize>,
    pub ood_series: usize,
    pub layers: usize,
    pub hidden: usize,
    pub hyper: TrainHyper,
    pub seed: u64,
}

/// Everything produced by training one model.
pub struct Trained {
    pub record: ModelRecord,
    pub model: Model,
    pub data: Dataset,
}

/// Train one model and record it (checkpoint under `models/`).
pub fn train_and_register(reg: &mut Registry, spec: &TrainSpec) -> Result<Trained> {
    let data_cfg = dataset_config(spec.kind, spec.n_series, spec.length, Split::Train)?;
    let data = Dataset::generate(&data_cfg, spec.seed)?;
    let tok = tokenize(&data);
    let ood = if spec.ood_series > 0 {
        let cfg = dataset_config(spec.kind, spec.ood_series, spec.length, Split::OodTest)?;
        Some(tokenize(&Dataset::generate(&cfg, ood_seed(spec.seed))?))
    } else {
        None
    };
    let config = ModelConfig::new(spec.layers, spec.hidden, tok.token_dim, tok.seq_len, spec.seed);
    let mut model = Model::init(config)?;
    let mut record = ModelRecord {
        datatype: spec.kind.as_str().to_string(),
        emb: spec.hidden,
        layer: spec.layers,
        epoch: spec.hyper.epochs,
        cl: tok.seq_len,
        lr: spec.hyper.lr,
        total_epochs: spec.hyper.epochs,
        batch: spec.hyper.batch,
        model_path: String::new(),
        seed: spec.seed,
        mse: None,
        status: ModelStatus::Complete,
    };
    let id = record.id();
    let ckpt = reg.root().join("models").join(format!("{id}.json"));
    let mut hyper = spec.hyper.clone();
    hyper.checkpoint_dir = None;
    match transformer::train(&mut model, &tok, ood.as_ref(), &hyper) {
        Ok(report) => {
            log::info!("{id}: trained in {:.1}s", report.wall_clock_secs);
            model.save(&ckpt, report.epochs)?;
            record.model_path = reg.relative(&ckpt);
            record.mse = Some(crate::stats::mean(&report.train_mse_by_ctx));
            reg.write_sidecar(
                &id,
                &ModelSidecar {
                    model: config,
                    hyper,
                    data: data_cfg,
                    data_seed: spec.seed,
                    loss_curve: report.loss_curve,
                    train_mse_by_ctx: report.train_mse_by_ctx,
                    ood_mse_by_ctx: report.ood_mse_by_ctx,
                },
            )?;
        }
        Err(e @ Error::Training { .. }) => {
            log::warn!("{id}: {e}");
            record.status = ModelStatus::Diverged;
            reg.append_model(&record)?;
            return Err(e);
        }
        Err(e) => return Err(e),
    }
    reg.append_model(&record)?;
    Ok(Trained { record, model, data })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    /// Context indices to probe; `None` probes every prediction position.
    pub ctxs: Option<Vec<usize>>,
    pub methods: Vec<Method>,
    pub split: SplitPolicy,
    /// Also record in-sample scores next to the held-out ones.
    pub in_sample_too: bool,
    /// Forward probe kinds for regression data (oscillators use linear only).
    pub linreg_kinds: Vec<ProbeKind>,
    pub forward: bool,
    pub reverse: bool,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            ctxs: None,
            methods: vec![Method::LinearMultistep, Method::Taylor, Method::MatrixExponential],
            split: SplitPolicy::default(),
            in_sample_too: false,
            linreg_kinds: vec![ProbeKind::Linear, ProbeKind::Taylor { degree: 2 }],
            forward: true,
            reverse: true,
        }
    }
}

/// Feature groups for reverse probes: one per method, or `[w, w²]`.
pub fn reverse_groups<'t>(dataset: &Dataset, targets: &'t [Target]) -> Vec<(String, Vec<&'t Target>)> {
    if dataset.regression().is_some() {
        return vec![("linreg".to_string(), targets.iter().collect())];
    }
    let mut groups: Vec<(String, Vec<&Target>)> = Vec::new();
    for t in targets {
        match groups.iter_mut().find(|(m, _)| *m == t.method) {
            Some((_, g)) => g.push(t),
            None => groups.push((t.method.clone(), vec![t])),
        }
    }
    groups
}

#[derive(Serialize)]
struct ProbeArtifact<'a> {
    forward: &'a [ProbeResult],
    reverse: &'a [ReverseResult],
}

/// Probe one model on `dataset`, write the coefficients and append the
/// cells to the registry. Returns the evaluation for the chosen split.
pub fn probe_and_register(
    reg: &mut Registry,
    record: &ModelRecord,
    model: &Model,
    dataset: &Dataset,
    opts: &ProbeOptions,
) -> Result<ModelEvaluation> {
    let tok = tokenize(dataset);
    let ctxs = opts.ctxs.clone().unwrap_or_else(|| (0..tok.ctx_positions().len()).collect());
    let spec = CaptureSpec::at_contexts(model, &tok, &ctxs)?;
    let out = model.run(&tok, Some(&spec), None)?;
    let capture = out.capture.expect("capture requested");
    probe_capture_and_register(reg, record, &capture, dataset, opts)
}

/// Probe a stored capture; see [`probe_and_register`].
pub fn probe_capture_and_register(
    reg: &mut Registry,
    record: &ModelRecord,
    capture: &HiddenStateCapture,
    dataset: &Dataset,
    opts: &ProbeOptions,
) -> Result<ModelEvaluation> {
    if capture.n_series != dataset.n_series() {
        return Err(Error::usage(format!(
            "capture has {} series but the dataset has {}",
            capture.n_series,
            dataset.n_series()
        )));
    }
    let sites = capture.sites.clone();
    let ctxs = match &opts.ctxs {
        Some(c) => c.clone(),
        None => capture.ctx.clone(),
    };
    let targets = probes::targets_for(dataset, &opts.methods, DEFAULT_TAYLOR_POWER);
    let kinds = if dataset.regression().is_some() {
        opts.linreg_kinds.clone()
    } else {
        vec![ProbeKind::Linear]
    };
    let groups = reverse_groups(dataset, &targets);
    let reverse = if opts.reverse {
        probes::reverse_grid(capture, &groups, &sites, &ctxs)
    } else {
        Vec::new()
    };

    let mut policies = vec![opts.split];
    if opts.in_sample_too && opts.split != SplitPolicy::InSample {
        policies.push(SplitPolicy::InSample);
    }
    let id = record.id();
    let mut primary = None;
    for policy in policies {
        let grid = GridOptions {
            split: policy,
            kinds: kinds.clone(),
        };
        let forward = if opts.forward {
            probes::probe_capture(capture, &targets, &sites, &ctxs, &grid)
        } else {
            Vec::new()
        };
        let save = reg.root().join("probes").join(&id).join(format!(
            "{}-{}-{}{}.json",
            dataset.kind.as_str(),
            dataset.split.as_str(),
            policy.as_str(),
            match (opts.forward, opts.reverse) {
                (true, false) => "-forward",
                (false, true) => "-reverse",
                _ => "",
            }
        ));
        let mut json = serde_json::to_string(&ProbeArtifact {
            forward: &forward,
            reverse: &reverse,
        })?;
        json.push('\n');
        write_atomic(&save, json.as_bytes())?;
        let savepath = reg.relative(&save);
        let base = |kind, method: &str, target: String, site, cl, r2, mse, n, flag| ProbeRecord {
            model: record.clone(),
            datatype: dataset.kind.as_str().to_string(),
            dataset_split: dataset.split.as_str().to_string(),
            probe_split: policy.as_str().to_string(),
            kind,
            method: method.to_string(),
            target,
            site,
            cl,
            r2,
            mse,
            n,
            flag,
            savepath: savepath.clone(),
        };
        let mut rows: Vec<ProbeRecord> = forward
            .iter()
            .map(|r| {
                base(
                    r.spec.kind,
                    &r.spec.method,
                    r.spec.target.clone(),
                    r.spec.site,
                    r.spec.ctx,
                    r.fit.r2,
                    r.fit.mse,
                    r.fit.n_samples,
                    r.fit.flag.clone(),
                )
            })
            .collect();
        rows.extend(reverse.iter().map(|r| {
            let resid = &r.probe.residual_variance;
            base(
                ProbeKind::Reverse,
                &r.method,
                r.features.join("+"),
                r.site,
                r.ctx,
                r.probe.variance_explained,
                (!resid.is_empty()).then(|| crate::stats::mean(resid)),
                r.probe.n_samples,
                r.probe.flag.clone(),
            )
        }));
        reg.append_probes(&rows)?;
        if primary.is_none() {
            primary = Some(forward);
        }
    }
    let mse_by_ctx = reg.read_sidecar(&id).map(|s| s.train_mse_by_ctx).unwrap_or_default();
    Ok(ModelEvaluation {
        model_id: id,
        layers: record.layer,
        hidden: record.emb,
        mse_by_ctx,
        probes: primary.unwrap_or_default(),
        reverse,
        interventions: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionOptions {
    /// Multipliers on `Δt` for the modification sweep (1 is the replacement).
    pub dt_scales: Vec<f64>,
    /// Multipliers on `ω₀`.
    pub omega_scales: Vec<f64>,
    pub w_prime: f64,
}

impl Default for InterventionOptions {
    fn default() -> Self {
        Self {
            dt_scales: vec![0.5, 0.75, 1.0, 1.25, 1.5],
            omega_scales: vec![],
            w_prime: 0.5,
        }
    }
}

/// Intervention site for a method: the best reverse-probe site, else the
/// last site of the model.
pub fn intervention_site(eval: &ModelEvaluation, method: &str, model: &Model) -> Site {
    criteria::criterion3(&eval.reverse, method)
        .map(|(_, s)| s)
        .unwrap_or_else(|| *model.config.sites().last().expect("at least the embedding"))
}

/// Run the replacement, modification sweep and (for regression) set-w
/// interventions at each method's best reverse-probe site.
pub fn intervene_and_register(
    reg: &mut Registry,
    record: &ModelRecord,
    model: &Model,
    dataset: &Dataset,
    eval: &ModelEvaluation,
    methods: &[Method],
    opts: &InterventionOptions,
) -> Result<Vec<InterventionOutcome>> {
    let id = record.id();
    let mut outcomes = Vec::new();
    if dataset.regression().is_some() {
        let site = intervention_site(eval, "linreg", model);
        let setup = InterventionSetup::new(&id, model, dataset, None, site, DEFAULT_TAYLOR_POWER)?;
        outcomes.push(setup.replace()?);
        outcomes.push(setup.set_w(opts.w_prime)?);
    } else {
        for &method in methods {
            let site = intervention_site(eval, method.tag(), model);
            let setup = InterventionSetup::new(&id, model, dataset, Some(method), site, DEFAULT_TAYLOR_POWER)?;
            outcomes.push(setup.replace()?);
            for &s in opts.dt_scales.iter().filter(|&&s| s != 1.0) {
                outcomes.push(setup.modify(s, 1.0)?);
            }
            for &s in opts.omega_scales.iter().filter(|&&s| s != 1.0) {
                outcomes.push(setup.modify(1.0, s)?);
            }
        }
    }
    let rows: Vec<InterventionRecord> = outcomes
        .iter()
        .map(|o| InterventionRecord {
            datatype: dataset.kind.as_str().to_string(),
            outcome: o.clone(),
        })
        .collect();
    reg.append_interventions(&rows)?;
    Ok(outcomes)
}

/// A full experiment over a model grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub kind: DatasetKind,
    pub n_series: usize,
    pub length: Option<usize>,
    pub ood_series: usize,
    pub layers: Vec<usize>,
    pub hidden: Vec<usize>,
    pub hyper: TrainHyper,
    pub seed: u64,
    /// Series used for probing and interventions (a prefix of the
    /// training set).
    pub probe_series: usize,
    pub probe: ProbeOptions,
    pub intervention: InterventionOptions,
}

impl PipelineConfig {
    /// Desk-scale defaults: `L ∈ {1,2,4}`, `H ∈ {4,16}`.
    pub fn desk(kind: DatasetKind, seed: u64) -> Self {
        Self {
            kind,
            n_series: 5000,
            length: None,
            ood_series: 1000,
            layers: vec![1, 2, 4],
            hidden: vec![4, 16],
            hyper: TrainHyper::desk(seed),
            seed,
            probe_series: 1000,
            probe: ProbeOptions::default(),
            intervention: InterventionOptions::default(),
        }
    }

    /// The 25-model grid `L ∈ {1..5}`, `H ∈ {2,4,8,16,32}`.
    pub fn full_grid(mut self) -> Self {
        self.layers = vec![1, 2, 3, 4, 5];
        self.hidden = vec![2, 4, 8, 16, 32];
        self
    }

    pub fn methods(&self) -> Vec<&'static str> {
        if self.kind == DatasetKind::Linreg {
            vec!["linreg"]
        } else {
            self.probe.methods.iter().map(|m| m.tag()).collect()
        }
    }
}

pub struct PipelineOutput {
    pub evaluations: Vec<ModelEvaluation>,
    pub summary: CriteriaSummary,
    pub bundle: ReportBundle,
    /// Models that failed to train, with the error text.
    pub failures: Vec<(String, String)>,
}

/// Train every grid model, probe, intervene, score and write the report
/// under `report_dir`.
pub fn run(registry_root: &Path, cfg: &PipelineConfig, report_dir: &Path) -> Result<PipelineOutput> {
    let mut reg = Registry::open(registry_root)?;
    let mut evaluations = Vec::new();
    let mut failures = Vec::new();
    for &layers in &cfg.layers {
        for &hidden in &cfg.hidden {
            let spec = TrainSpec {
                kind: cfg.kind,
                n_series: cfg.n_series,
                length: cfg.length,
                ood_series: cfg.ood_series,
                layers,
                hidden,
                hyper: TrainHyper {
                    shuffle_seed: cfg.seed,
                    ..cfg.hyper.clone()
                },
                seed: cfg.seed,
            };
            let trained = match train_and_register(&mut reg, &spec) {
                Ok(t) => t,
                Err(e @ Error::Training { .. }) => {
                    failures.push((format!("L{layers}-H{hidden}-seed{}", cfg.seed), e.to_string()));
                    continue;
                }
                Err(e) => return Err(e),
            };
            let subset = trained.data.truncated(cfg.probe_series);
            let mut eval = probe_and_register(&mut reg, &trained.record, &trained.model, &subset, &cfg.probe)?;
            eval.interventions = intervene_and_register(
                &mut reg,
                &trained.record,
                &trained.model,
                &subset,
                &eval,
                &cfg.probe.methods,
                &cfg.intervention,
            )?;
            evaluations.push(eval);
        }
    }
    let summary = criteria::summarize(&evaluations, &cfg.methods());
    let bundle = crate::registry::report(&reg, &summary, report_dir)?;
    Ok(PipelineOutput {
        evaluations,
        summary,
        bundle,
        failures,
    })
}

/// Recompute the summary from registry contents alone.
pub fn summary_from_registry(reg: &Registry, kind: DatasetKind, probe_split: SplitPolicy) -> Result<CriteriaSummary> {
    let evals = reg.evaluations(kind.as_str(), Split::Train.as_str(), probe_split.as_str())?;
    let methods: Vec<&str> = if kind == DatasetKind::Linreg {
        vec!["linreg"]
    } else {
        vec!["lm", "taylor", "exp"]
    };
    Ok(criteria::summarize(&evals, &methods))
}

/// Registry path from a flag, the environment, or `./registry`.
pub fn default_registry(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(crate::registry::REGISTRY_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("registry"))
}
