use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use oscilloprobe::config::ConfigFile;
use oscilloprobe::criteria::{self, ByproductConfig, InterventionSetup};
use oscilloprobe::dynamics::{self, Dataset, DatasetKind, OscParams, Split};
use oscilloprobe::io::fmt_f64;
use oscilloprobe::numethods::{self, Method, Stepper};
use oscilloprobe::pipeline::{self, ProbeOptions, TrainSpec};
use oscilloprobe::probes::{ProbeKind, SplitPolicy};
use oscilloprobe::registry::{self, InterventionRecord, ModelRecord, Registry, REGISTRY_ENV};
use oscilloprobe::transformer::{CaptureSpec, EpochMode, HiddenStateCapture, Model, Site, TrainHyper};
use oscilloprobe::{Error, Result};

/// Which numerical method does a transformer use on the harmonic oscillator?
#[derive(Parser, Debug)]
#[command(name = "oscilloprobe", version, args_override_self = true)]
struct Cli {
    /// Master seed for data, initialization, shuffling and probe splits.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Registry directory.
    #[arg(long, global = true, env = REGISTRY_ENV)]
    registry: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// `key = value` file supplying defaults for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a dataset CSV.
    Gen(GenArgs),
    /// Train one model and record it in the registry.
    Train(TrainArgs),
    /// Capture hidden states, one file per site.
    Capture(CaptureArgs),
    /// Integrate one oscillator with a numerical method.
    Step(StepArgs),
    /// Fit forward probes and record the cells.
    Probe(ProbeArgs),
    /// Fit reverse probes and record the cells.
    Reverse(ProbeArgs),
    /// Run one intervention and record the outcome.
    Intervene(InterveneArgs),
    /// Score the four criteria from the registry.
    Criteria(CriteriaArgs),
    /// Write the report bundle.
    Report(ReportArgs),
    /// Print registry rows matching a filter.
    Query(QueryArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    kind: DatasetKind,
    #[arg(long, default_value_t = 5000)]
    n: usize,
    /// Steps per series (defaults by kind).
    #[arg(long)]
    len: Option<usize>,
    #[arg(long, default_value = "train")]
    split: Split,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    kind: DatasetKind,
    #[arg(long = "L", default_value_t = 2)]
    layers: usize,
    #[arg(long = "H", default_value_t = 16)]
    hidden: usize,
    #[arg(long, default_value_t = 2000)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 5000)]
    n: usize,
    #[arg(long)]
    len: Option<usize>,
    /// Out-of-distribution series evaluated after training.
    #[arg(long, default_value_t = 1000)]
    ood_n: usize,
    /// `batch` (one update per epoch) or `full-pass`.
    #[arg(long, default_value = "batch")]
    epoch_mode: String,
    /// Also write the final checkpoint here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CaptureArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `all` or a comma list such as `embed,0:mlp-res`.
    #[arg(long, default_value = "all")]
    sites: String,
    /// `all` or a comma list of context indices.
    #[arg(long, default_value = "all")]
    ctx: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StepArgs {
    /// `euler`, `abN`, `taylor:K` or `exp`.
    #[arg(long)]
    method: Stepper,
    #[arg(long)]
    omega0: f64,
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    #[arg(long)]
    dt: f64,
    #[arg(long, default_value_t = 1.0)]
    x0: f64,
    #[arg(long, default_value_t = 0.0)]
    v0: f64,
    #[arg(long, default_value_t = 64)]
    steps: usize,
    /// Output CSV (stdout if absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Capture directory; captured on the fly if absent.
    #[arg(long)]
    hs: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "lm,taylor,exp")]
    methods: String,
    /// Forward probe kinds for regression data.
    #[arg(long, default_value = "linear,taylor2")]
    kinds: String,
    /// `heldout` or `insample`.
    #[arg(long, default_value = "heldout")]
    probe_split: String,
    /// Record in-sample scores next to the held-out ones.
    #[arg(long)]
    in_sample_too: bool,
    #[arg(long, default_value = "all")]
    ctx: String,
}

#[derive(Args, Debug)]
struct InterveneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `lm`, `taylor`, `exp`, or `linreg` for regression models.
    #[arg(long, default_value = "exp")]
    method: String,
    /// `auto` (best reverse-probe site) or a site such as `1:mlp`.
    #[arg(long, default_value = "auto")]
    site: String,
    /// `replace`, `modify-dt`, `modify-omega`, `modify-both` or `set-w`.
    #[arg(long, default_value = "replace")]
    mode: String,
    #[arg(long, default_value_t = 1.0)]
    dt_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    omega_scale: f64,
    #[arg(long, default_value_t = 0.5)]
    w_prime: f64,
}

#[derive(Args, Debug)]
struct CriteriaArgs {
    #[arg(long, default_value = "sho-undamped")]
    kind: DatasetKind,
    #[arg(long, default_value = "heldout")]
    probe_split: String,
    /// Directory for `summary.csv`, `summary.txt` and `detail.csv`.
    #[arg(long, default_value = "criteria")]
    out: PathBuf,
    /// Also write `byproduct.csv` for these noise levels (comma list).
    #[arg(long)]
    byproduct_sigma: Option<String>,
    #[arg(long, default_value_t = 1000)]
    byproduct_n: usize,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long, default_value = "sho-undamped")]
    kind: DatasetKind,
    #[arg(long, default_value = "heldout")]
    probe_split: String,
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct QueryArgs {
    /// `models`, `probes` or `interventions`.
    #[arg(long, default_value = "probes")]
    table: String,
    /// Filter such as `model-layer=2 & probe-R2>0.5`.
    #[arg(long = "where", default_value = "")]
    filter: String,
}

fn split_policy(name: &str, seed: u64) -> Result<SplitPolicy> {
    match name {
        "heldout" => Ok(SplitPolicy::Holdout { seed }),
        "insample" => Ok(SplitPolicy::InSample),
        _ => Err(Error::Usage(format!("probe split must be heldout or insample, got `{name}`"))),
    }
}

fn list<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<Vec<T>> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(str::parse).collect()
}

fn sites_arg(s: &str, model: &Model) -> Result<Vec<Site>> {
    if s == "all" {
        return Ok(model.config.sites());
    }
    let sites: Vec<Site> = list(s)?;
    match sites.iter().find(|s| !model.config.sites().contains(s)) {
        Some(bad) => Err(Error::Usage(format!("site {bad} not in model"))),
        None => Ok(sites),
    }
}

fn ctx_arg(s: &str, n_ctx: usize) -> Result<Vec<usize>> {
    if s == "all" {
        return Ok((0..n_ctx).collect());
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Usage(format!("bad context index `{t}`")))
        })
        .collect()
}

/// The registered model whose checkpoint is `ckpt`.
fn lookup_model(reg: &Registry, ckpt: &Path) -> Result<ModelRecord> {
    let want = ckpt.canonicalize()?;
    reg.model_records()?
        .into_iter()
        .find(|m| reg.resolve(&m.model_path).canonicalize().ok().as_deref() == Some(want.as_path()))
        .ok_or_else(|| {
            Error::Usage(format!(
                "{} is not in the registry; train it with `oscilloprobe train`",
                ckpt.display()
            ))
        })
}

fn write_out(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => oscilloprobe::io::write_atomic(p, bytes),
        None => Ok(std::io::stdout().write_all(bytes)?),
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    let reg_path = pipeline::default_registry(cli.registry.clone());
    match cli.cmd {
        Cmd::Gen(a) => {
            let cfg = pipeline::dataset_config(a.kind, a.n, a.len, a.split)?;
            Dataset::generate(&cfg, seed)?.save(&a.out)?;
            println!("wrote {}", a.out.display());
        }
        Cmd::Train(a) => {
            let epoch_mode = match a.epoch_mode.as_str() {
                "batch" => EpochMode::Batch,
                "full-pass" => EpochMode::FullPass,
                m => return Err(Error::Usage(format!("epoch mode must be batch or full-pass, got `{m}`"))),
            };
            let mut reg = Registry::open(&reg_path)?;
            let spec = TrainSpec {
                kind: a.kind,
                n_series: a.n,
                length: a.len,
                ood_series: a.ood_n,
                layers: a.layers,
                hidden: a.hidden,
                hyper: TrainHyper {
                    epochs: a.epochs,
                    lr: a.lr,
                    batch: a.batch,
                    epoch_mode,
                    ..TrainHyper::desk(seed)
                },
                seed,
            };
            let trained = pipeline::train_and_register(&mut reg, &spec)?;
            if let Some(out) = a.out {
                trained.model.save(&out.join("final.json"), spec.hyper.epochs)?;
            }
            println!(
                "{} mse={} checkpoint={}",
                trained.record.id(),
                trained.record.mse.map(fmt_f64).unwrap_or_default(),
                reg.resolve(&trained.record.model_path).display()
            );
        }
        Cmd::Capture(a) => {
            let (model, _) = Model::load(&a.model)?;
            let data = Dataset::load(&a.data)?;
            let tok = dynamics::tokenize(&data);
            let ctx = ctx_arg(&a.ctx, tok.ctx_positions().len())?;
            let mut spec = CaptureSpec::at_contexts(&model, &tok, &ctx)?;
            spec.sites = sites_arg(&a.sites, &model)?;
            let out = model.run(&tok, Some(&spec), None)?;
            let files = out.capture.expect("capture requested").save_dir(&a.out)?;
            println!("wrote {} site files to {}", files.len(), a.out.display());
        }
        Cmd::Step(a) => {
            let p = OscParams::new(a.omega0, a.gamma, a.dt, a.x0, a.v0);
            p.validate()?;
            let states = a.method.run(&numethods::system_matrix(p.omega0, p.gamma), p.dt, [p.x0, p.v0], a.steps)?;
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(Vec::new());
            w.write_record(["k", "x", "v", "x_exact", "v_exact", "abs_err"])?;
            for (k, s) in states.iter().enumerate() {
                let (x, v) = dynamics::closed_form_state(&p, k)?;
                let err = (s[0] - x).abs().max((s[1] - v).abs());
                w.write_record([k.to_string(), fmt_f64(s[0]), fmt_f64(s[1]), fmt_f64(x), fmt_f64(v), fmt_f64(err)])?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            write_out(a.out.as_deref(), &bytes)?;
        }
        Cmd::Probe(a) => probe_cmd(&reg_path, seed, a, true)?,
        Cmd::Reverse(a) => probe_cmd(&reg_path, seed, a, false)?,
        Cmd::Intervene(a) => {
            let mut reg = Registry::open(&reg_path)?;
            let record = lookup_model(&reg, &a.model)?;
            let (model, _) = Model::load(&a.model)?;
            let data = Dataset::load(&a.data)?;
            let method: Option<Method> = match a.method.as_str() {
                "linreg" => None,
                m => Some(m.parse()?),
            };
            let site = if a.site == "auto" {
                let evals = reg.evaluations(&record.datatype, data.split.as_str(), SplitPolicy::Holdout { seed }.as_str())?;
                let eval = evals.iter().find(|e| e.model_id == record.id());
                match eval {
                    Some(e) => pipeline::intervention_site(e, &a.method, &model),
                    None => *model.config.sites().last().expect("embedding site"),
                }
            } else {
                a.site.parse()?
            };
            let setup = InterventionSetup::new(&record.id(), &model, &data, method, site, numethods::DEFAULT_TAYLOR_POWER)?;
            let outcome = match a.mode.as_str() {
                "replace" => setup.replace()?,
                "modify-dt" => setup.modify(a.dt_scale, 1.0)?,
                "modify-omega" => setup.modify(1.0, a.omega_scale)?,
                "modify-both" => setup.modify(a.dt_scale, a.omega_scale)?,
                "set-w" => setup.set_w(a.w_prime)?,
                m => return Err(Error::Usage(format!("unknown mode `{m}`"))),
            };
            println!(
                "{} {} {} at {}: mse={} baseline={} -> {}",
                outcome.model_id,
                outcome.method,
                outcome.mode,
                outcome.site,
                fmt_f64(outcome.mse),
                fmt_f64(outcome.baseline_mse),
                outcome.classification.as_str()
            );
            reg.append_interventions(&[InterventionRecord {
                datatype: data.kind.as_str().to_string(),
                outcome,
            }])?;
        }
        Cmd::Criteria(a) => {
            let reg = Registry::open(&reg_path)?;
            let policy = split_policy(&a.probe_split, seed)?;
            let summary = pipeline::summary_from_registry(&reg, a.kind, policy)?;
            registry::write_summary(&summary, &a.out)?;
            print!("{}", registry::summary_text(&summary));
            if let Some(sigmas) = a.byproduct_sigma {
                byproduct_cmd(&reg, &summary, &sigmas, a.byproduct_n, seed, policy, &a.out.join("byproduct.csv"))?;
            }
        }
        Cmd::Report(a) => {
            let reg = Registry::open(&reg_path)?;
            let policy = split_policy(&a.probe_split, seed)?;
            let summary = pipeline::summary_from_registry(&reg, a.kind, policy)?;
            let bundle = registry::report(&reg, &summary, &a.out)?;
            println!("wrote {} files to {}", bundle.files.len(), a.out.display());
            for m in &bundle.missing {
                println!("missing input: {m}");
            }
        }
        Cmd::Query(a) => {
            let reg = Registry::open(&reg_path)?;
            let table = reg.table(&a.table)?;
            let rows = table.query(&a.filter)?;
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(std::io::stdout());
            w.write_record(table.columns())?;
            for r in rows {
                w.write_record(r)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn probe_cmd(reg_path: &Path, seed: u64, a: ProbeArgs, forward: bool) -> Result<()> {
    let mut reg = Registry::open(reg_path)?;
    let record = lookup_model(&reg, &a.model)?;
    let (model, _) = Model::load(&a.model)?;
    let data = Dataset::load(&a.data)?;
    let tok = dynamics::tokenize(&data);
    let capture = match &a.hs {
        Some(dir) => {
            let present: Vec<Site> = model
                .config
                .sites()
                .into_iter()
                .filter(|s| dir.join(HiddenStateCapture::file_name(*s)).exists())
                .collect();
            HiddenStateCapture::load_dir(dir, &present)?
        }
        None => {
            let ctx = ctx_arg(&a.ctx, tok.ctx_positions().len())?;
            let spec = CaptureSpec::at_contexts(&model, &tok, &ctx)?;
            model.run(&tok, Some(&spec), None)?.capture.expect("capture requested")
        }
    };
    let opts = ProbeOptions {
        ctxs: (a.ctx != "all").then(|| ctx_arg(&a.ctx, tok.ctx_positions().len())).transpose()?,
        methods: list(&a.methods)?,
        split: split_policy(&a.probe_split, seed)?,
        in_sample_too: a.in_sample_too,
        linreg_kinds: list::<ProbeKind>(&a.kinds)?,
        forward,
        reverse: !forward,
    };
    let eval = pipeline::probe_capture_and_register(&mut reg, &record, &capture, &data, &opts)?;
    if forward {
        let mut targets: Vec<&str> = eval.probes.iter().map(|p| p.spec.target.as_str()).collect();
        targets.dedup();
        for t in targets {
            let best = oscilloprobe::probes::max_mean_r2(&eval.probes, t, ProbeKind::Linear);
            match best {
                Some((v, site)) => println!("{t}: max mean r2 {v:.4} at {site}"),
                None => println!("{t}: undefined (all cells flagged)"),
            }
        }
    } else {
        let mut methods: Vec<&str> = eval.reverse.iter().map(|r| r.method.as_str()).collect();
        methods.dedup();
        for m in methods {
            match criteria::criterion3(&eval.reverse, m) {
                Some((v, site)) => println!("{m}: variance explained {v:.4} at {site}"),
                None => println!("{m}: undefined (all cells flagged)"),
            }
        }
    }
    Ok(())
}

fn byproduct_cmd(
    reg: &Registry,
    summary: &criteria::CriteriaSummary,
    sigmas: &str,
    n: usize,
    seed: u64,
    policy: SplitPolicy,
    out: &Path,
) -> Result<()> {
    let first = reg
        .model_records()?
        .into_iter()
        .find(|m| m.datatype == DatasetKind::ShoUndamped.as_str())
        .ok_or_else(|| Error::Usage("byproduct analysis needs a trained sho-undamped model".into()))?;
    let side = reg.read_sidecar(&first.id())?;
    let data = Dataset::generate(&side.data, side.data_seed)?.truncated(n);
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(["sigma", "method", "synthetic-c1", "synthetic-c3", "real-c1", "real-c3"])?;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for sigma in sigmas.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let sigma: f64 = sigma.parse().map_err(|_| Error::Usage(format!("bad sigma `{sigma}`")))?;
        let cfg = ByproductConfig {
            sigma,
            seed,
            ..ByproductConfig::default()
        };
        for r in criteria::synthetic_byproduct(&data, &cfg, policy, Some(summary))? {
            w.write_record([fmt_f64(sigma), r.method, opt(r.synthetic_c1), opt(r.synthetic_c3), opt(r.real_c1), opt(r.real_c3)])?;
        }
    }
    oscilloprobe::io::write_atomic(out, &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
}

/// Arguments from `--config`, placed after the subcommand token, for every
/// key the subcommand accepts and the command line does not already set.
fn with_config(raw: Vec<String>) -> Result<Vec<String>> {
    let Some(i) = raw.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(raw);
    };
    let path = match raw[i].strip_prefix("--config=") {
        Some(p) => p.to_string(),
        None => raw
            .get(i + 1)
            .cloned()
            .ok_or_else(|| Error::Usage("--config needs a path".into()))?,
    };
    let cfg = ConfigFile::load(Path::new(&path))?;
    let mut cmd = Cli::command();
    cmd.build();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    let Some(sub_at) = raw.iter().skip(1).position(|a| names.contains(a)).map(|p| p + 1) else {
        return Ok(raw);
    };
    let sub = cmd.find_subcommand(&raw[sub_at]).expect("known subcommand");
    let known = |key: &str| {
        cmd.get_subcommands()
            .flat_map(|s| s.get_arguments())
            .chain(cmd.get_arguments())
            .any(|a| a.get_long() == Some(key))
    };
    if let Some((k, _)) = cfg.pairs.iter().find(|(k, _)| !known(k)) {
        return Err(Error::Usage(format!("{path}: unknown key `{k}`")));
    }
    let given = |key: &str| {
        let flag = format!("--{key}");
        raw.iter().any(|a| *a == flag || a.starts_with(&format!("{flag}=")))
    };
    let accepted = |key: &str| key != "config" && !given(key) && sub.get_arguments().any(|a| a.get_long() == Some(key));
    let is_switch = |key: &str| {
        sub.get_arguments()
            .find(|a| a.get_long() == Some(key))
            .is_some_and(|a| !a.get_action().takes_values())
    };
    let extra = cfg.to_args(accepted, is_switch)?;
    let mut out = raw[..=sub_at].to_vec();
    out.extend(extra);
    out.extend_from_slice(&raw[sub_at + 1..]);
    Ok(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let raw: Vec<String> = std::env::args().collect();
    let args = match with_config(raw) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::command().try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::UnknownColumn(_) | Error::Parse(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
