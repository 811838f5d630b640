//! CSV-backed experiment registry: model, probe and intervention tables, a
//! JSON sidecar per model, a small filter language and report emission.
//!
//! A registry is a directory:
//!
//! ```text
//! models.csv          one row per trained model
//! probes.csv          forward and reverse probe cells, model columns repeated
//! interventions.csv   one row per intervention run
//! sidecars/ID.json    model config, training hyperparameters, MSE curves
//! ```
//!
//! Paths stored in the tables are relative to the registry root, so two
//! registries built from the same seeds are byte-identical.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::criteria::{
    Classification, CriteriaSummary, ImpliedParams, InterventionOutcome, ModelEvaluation,
};
use crate::dynamics::GenConfig;
use crate::error::{Error, Result};
use crate::io::{fmt_f64, write_atomic};
use crate::probes::{Fit, ProbeFlag, ProbeKind, ProbeResult, ProbeSpec, ReverseProbe, ReverseResult, SplitPolicy};
use crate::transformer::{InLayerPos, ModelConfig, Site, TrainHyper};

pub const MODELS: &str = "models.csv";
pub const PROBES: &str = "probes.csv";
pub const INTERVENTIONS: &str = "interventions.csv";
pub const SIDECARS: &str = "sidecars";
/// Environment variable holding the default registry directory.
pub const REGISTRY_ENV: &str = "OSCILLOPROBE_REGISTRY";

const MODEL_COLUMNS: &[&str] = &[
    "model-id",
    "model-datatype",
    "model-emb",
    "model-layer",
    "model-epoch",
    "model-CL",
    "model-lr",
    "model-totalepochs",
    "model-batch",
    "model-modelpath",
    "seed",
    "model-mse",
    "model-status",
];

const PROBE_COLUMNS: &[&str] = &[
    "probe-datatype",
    "probe-traintest",
    "probe-split",
    "probe-kind",
    "probe-targetmethod",
    "probe-targetname",
    "probe-layer",
    "probe-inlayerpos",
    "probe-CL",
    "probe-R2",
    "probe-MSE",
    "probe-n",
    "probe-flag",
    "probe-savepath",
];

const INTERVENTION_COLUMNS: &[&str] = &[
    "model-id",
    "probe-datatype",
    "method",
    "mode",
    "probe-layer",
    "probe-inlayerpos",
    "dt-scale",
    "omega-scale",
    "w-prime",
    "mse",
    "baseline-mse",
    "copy-last-mse",
    "unpatched-mse",
    "implied-dt-ratio",
    "implied-omega-ratio",
    "implied-w",
    "classification",
];

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn parse_num<T: std::str::FromStr>(col: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Parse(format!("column `{col}`: cannot parse `{s}`")))
}

fn parse_opt(col: &str, s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_num(col, s).map(Some)
    }
}

/// A typed table row.
pub trait Record: Sized {
    fn columns() -> Vec<&'static str>;
    /// Columns whose values must be unique together.
    fn key() -> Vec<&'static str>;
    fn to_row(&self) -> Vec<String>;
    fn from_row(row: &[String]) -> Result<Self>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelStatus {
    Complete,
    Diverged,
}

impl ModelStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelStatus::Complete => "complete",
            ModelStatus::Diverged => "diverged",
        }
    }
}

impl std::str::FromStr for ModelStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "complete" => Ok(ModelStatus::Complete),
            "diverged" => Ok(ModelStatus::Diverged),
            _ => Err(Error::Parse(format!("unknown model status `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub datatype: String,
    pub emb: usize,
    pub layer: usize,
    /// Epoch of the stored checkpoint.
    pub epoch: usize,
    /// Sequence length in tokens.
    pub cl: usize,
    pub lr: f64,
    pub total_epochs: usize,
    pub batch: usize,
    pub model_path: String,
    pub seed: u64,
    /// Mean training MSE over context lengths.
    pub mse: Option<f64>,
    pub status: ModelStatus,
}

impl ModelRecord {
    pub fn id(&self) -> String {
        format!(
            "{}-L{}-H{}-s{}-e{}",
            self.datatype, self.layer, self.emb, self.seed, self.total_epochs
        )
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.id(),
            self.datatype.clone(),
            self.emb.to_string(),
            self.layer.to_string(),
            self.epoch.to_string(),
            self.cl.to_string(),
            fmt_f64(self.lr),
            self.total_epochs.to_string(),
            self.batch.to_string(),
            self.model_path.clone(),
            self.seed.to_string(),
            opt(self.mse),
            self.status.as_str().to_string(),
        ]
    }

    fn from_fields(row: &[String]) -> Result<Self> {
        let c = MODEL_COLUMNS;
        let rec = Self {
            datatype: row[1].clone(),
            emb: parse_num(c[2], &row[2])?,
            layer: parse_num(c[3], &row[3])?,
            epoch: parse_num(c[4], &row[4])?,
            cl: parse_num(c[5], &row[5])?,
            lr: parse_num(c[6], &row[6])?,
            total_epochs: parse_num(c[7], &row[7])?,
            batch: parse_num(c[8], &row[8])?,
            model_path: row[9].clone(),
            seed: parse_num(c[10], &row[10])?,
            mse: parse_opt(c[11], &row[11])?,
            status: row[12].parse()?,
        };
        if rec.id() != row[0] {
            return Err(Error::Parse(format!("model-id `{}` does not match its fields", row[0])));
        }
        Ok(rec)
    }
}

impl Record for ModelRecord {
    fn columns() -> Vec<&'static str> {
        MODEL_COLUMNS.to_vec()
    }

    fn key() -> Vec<&'static str> {
        vec!["model-datatype", "model-layer", "model-emb", "seed", "model-totalepochs"]
    }

    fn to_row(&self) -> Vec<String> {
        self.fields()
    }

    fn from_row(row: &[String]) -> Result<Self> {
        Self::from_fields(row)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub model: ModelRecord,
    pub datatype: String,
    /// Dataset split the hidden states came from (`train` or `ood-test`).
    pub dataset_split: String,
    /// Probe evaluation policy (`heldout` or `insample`).
    pub probe_split: String,
    pub kind: ProbeKind,
    pub method: String,
    /// Target name; reverse probes join their features with `+`.
    pub target: String,
    pub site: Site,
    pub cl: usize,
    /// `R²` for forward probes, variance explained for reverse probes.
    pub r2: Option<f64>,
    pub mse: Option<f64>,
    pub n: usize,
    pub flag: Option<ProbeFlag>,
    pub savepath: String,
}

impl Record for ProbeRecord {
    fn columns() -> Vec<&'static str> {
        MODEL_COLUMNS.iter().chain(PROBE_COLUMNS).copied().collect()
    }

    fn key() -> Vec<&'static str> {
        vec![
            "model-id",
            "probe-datatype",
            "probe-traintest",
            "probe-split",
            "probe-kind",
            "probe-targetname",
            "probe-layer",
            "probe-inlayerpos",
            "probe-CL",
        ]
    }

    fn to_row(&self) -> Vec<String> {
        let mut row = self.model.fields();
        row.extend([
            self.datatype.clone(),
            self.dataset_split.clone(),
            self.probe_split.clone(),
            self.kind.to_string(),
            self.method.clone(),
            self.target.clone(),
            self.site.layer.to_string(),
            self.site.pos.as_str().to_string(),
            self.cl.to_string(),
            opt(self.r2),
            opt(self.mse),
            self.n.to_string(),
            self.flag.as_ref().map(|f| f.as_str().to_string()).unwrap_or_default(),
            self.savepath.clone(),
        ]);
        row
    }

    fn from_row(row: &[String]) -> Result<Self> {
        let model = ModelRecord::from_fields(&row[..MODEL_COLUMNS.len()])?;
        let p = &row[MODEL_COLUMNS.len()..];
        let c = PROBE_COLUMNS;
        let pos: InLayerPos = p[7].parse()?;
        Ok(Self {
            model,
            datatype: p[0].clone(),
            dataset_split: p[1].clone(),
            probe_split: p[2].clone(),
            kind: p[3].parse()?,
            method: p[4].clone(),
            target: p[5].clone(),
            site: Site::new(parse_num(c[6], &p[6])?, pos),
            cl: parse_num(c[8], &p[8])?,
            r2: parse_opt(c[9], &p[9])?,
            mse: parse_opt(c[10], &p[10])?,
            n: parse_num(c[11], &p[11])?,
            flag: if p[12].is_empty() { None } else { Some(p[12].parse()?) },
            savepath: p[13].clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRecord {
    pub datatype: String,
    pub outcome: InterventionOutcome,
}

impl Record for InterventionRecord {
    fn columns() -> Vec<&'static str> {
        INTERVENTION_COLUMNS.to_vec()
    }

    fn key() -> Vec<&'static str> {
        vec![
            "model-id",
            "probe-datatype",
            "method",
            "mode",
            "probe-layer",
            "probe-inlayerpos",
            "dt-scale",
            "omega-scale",
            "w-prime",
        ]
    }

    fn to_row(&self) -> Vec<String> {
        let o = &self.outcome;
        vec![
            o.model_id.clone(),
            self.datatype.clone(),
            o.method.clone(),
            o.mode.as_str().to_string(),
            o.site.layer.to_string(),
            o.site.pos.as_str().to_string(),
            fmt_f64(o.dt_scale),
            fmt_f64(o.omega_scale),
            opt(o.w_prime),
            fmt_f64(o.mse),
            fmt_f64(o.baseline_mse),
            fmt_f64(o.copy_last_mse),
            fmt_f64(o.unpatched_mse),
            opt(o.implied.dt_ratio),
            opt(o.implied.omega_ratio),
            opt(o.implied.w),
            o.classification.as_str().to_string(),
        ]
    }

    fn from_row(r: &[String]) -> Result<Self> {
        let c = INTERVENTION_COLUMNS;
        let pos: InLayerPos = r[5].parse()?;
        let classification: Classification = r[16].parse()?;
        Ok(Self {
            datatype: r[1].clone(),
            outcome: InterventionOutcome {
                model_id: r[0].clone(),
                method: r[2].clone(),
                mode: r[3].parse()?,
                site: Site::new(parse_num(c[4], &r[4])?, pos),
                dt_scale: parse_num(c[6], &r[6])?,
                omega_scale: parse_num(c[7], &r[7])?,
                w_prime: parse_opt(c[8], &r[8])?,
                mse: parse_num(c[9], &r[9])?,
                baseline_mse: parse_num(c[10], &r[10])?,
                copy_last_mse: parse_num(c[11], &r[11])?,
                unpatched_mse: parse_num(c[12], &r[12])?,
                implied: ImpliedParams {
                    dt_ratio: parse_opt(c[13], &r[13])?,
                    omega_ratio: parse_opt(c[14], &r[14])?,
                    w: parse_opt(c[15], &r[15])?,
                },
                classification,
            },
        })
    }
}

fn csv_line(fields: &[String]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(fields)?;
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// One CSV table with an in-memory key index. Writes go through a single
/// handle; readers may open the file at any time.
pub struct Table {
    path: PathBuf,
    columns: Vec<String>,
    key_idx: Vec<usize>,
    keys: HashMap<Vec<String>, usize>,
    n_rows: usize,
}

impl Table {
    /// Open `path`, creating it with `columns` as header if absent.
    pub fn open(path: &Path, columns: &[&str], key: &[&str]) -> Result<Self> {
        let columns: Vec<String> = columns.iter().map(|c| c.to_string()).collect();
        let key_idx = key
            .iter()
            .map(|k| columns.iter().position(|c| c == k).expect("key column in schema"))
            .collect();
        let mut table = Self {
            path: path.to_path_buf(),
            columns,
            key_idx,
            keys: HashMap::new(),
            n_rows: 0,
        };
        if !path.exists() {
            write_atomic(path, &csv_line(&table.columns)?)?;
            return Ok(table);
        }
        let rows = table.read_rows()?;
        for (i, row) in rows.iter().enumerate() {
            table.keys.insert(table.key_of(row), i);
        }
        table.n_rows = rows.len();
        Ok(table)
    }

    pub fn for_record<R: Record>(path: &Path) -> Result<Self> {
        Self::open(path, &R::columns(), &R::key())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.n_rows
    }

    pub fn is_empty(&self) -> bool {
        self.n_rows == 0
    }

    fn key_of(&self, row: &[String]) -> Vec<String> {
        self.key_idx.iter().map(|&i| row[i].clone()).collect()
    }

    fn check(&self, row: &[String]) -> Result<Vec<String>> {
        if row.len() != self.columns.len() {
            return Err(Error::Schema {
                path: self.path.clone(),
                detail: format!("row has {} fields, table has {} columns", row.len(), self.columns.len()),
            });
        }
        let key = self.key_of(row);
        if let Some(&existing_row) = self.keys.get(&key) {
            return Err(Error::DuplicateKey { existing_row });
        }
        Ok(key)
    }

    /// Append one row with a single `O_APPEND` write; returns its row id.
    pub fn append_row(&mut self, row: Vec<String>) -> Result<usize> {
        let key = self.check(&row)?;
        let mut f = OpenOptions::new().append(true).open(&self.path)?;
        f.write_all(&csv_line(&row)?)?;
        let id = self.n_rows;
        self.keys.insert(key, id);
        self.n_rows += 1;
        Ok(id)
    }

    /// Append many rows as one commit (temp file, then rename). Nothing is
    /// written if any row is rejected.
    pub fn append_rows(&mut self, rows: Vec<Vec<String>>) -> Result<Vec<usize>> {
        let mut staged: HashMap<Vec<String>, usize> = HashMap::new();
        let mut bytes = fs::read(&self.path)?;
        for (i, row) in rows.iter().enumerate() {
            let key = self.check(row)?;
            if let Some(&j) = staged.get(&key) {
                return Err(Error::DuplicateKey { existing_row: self.n_rows + j });
            }
            staged.insert(key, i);
            bytes.extend(csv_line(row)?);
        }
        write_atomic(&self.path, &bytes)?;
        let ids: Vec<usize> = (self.n_rows..self.n_rows + rows.len()).collect();
        for (key, i) in staged {
            self.keys.insert(key, self.n_rows + i);
        }
        self.n_rows += rows.len();
        Ok(ids)
    }

    pub fn append<R: Record>(&mut self, record: &R) -> Result<usize> {
        self.append_row(record.to_row())
    }

    pub fn append_all<R: Record>(&mut self, records: &[R]) -> Result<Vec<usize>> {
        self.append_rows(records.iter().map(Record::to_row).collect())
    }

    /// Every data row in insertion order, after checking the header.
    pub fn read_rows(&self) -> Result<Vec<Vec<String>>> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(&self.path)?;
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header != self.columns {
            return Err(Error::Schema {
                path: self.path.clone(),
                detail: format!("header {:?} does not match {:?}", header, self.columns),
            });
        }
        rdr.records()
            .map(|r| Ok(r?.iter().map(str::to_string).collect()))
            .collect()
    }

    pub fn records<R: Record>(&self) -> Result<Vec<R>> {
        self.read_rows()?.iter().map(|r| R::from_row(r)).collect()
    }

    /// Rows matching a filter expression, in insertion order.
    pub fn query(&self, expr: &str) -> Result<Vec<Vec<String>>> {
        let filter = Filter::parse(expr, &self.columns)?;
        Ok(self.read_rows()?.into_iter().filter(|r| filter.matches(r)).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    In(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
struct Clause {
    col: usize,
    op: Op,
    value: String,
}

/// Conjunction of clauses such as `model-layer=2 & probe-R2>0.5 &
/// probe-targetmethod in {lm,exp}`. Values that parse as numbers on both
/// sides compare numerically, otherwise as text.
#[derive(Debug, Clone, PartialEq)]
pub struct Filter {
    clauses: Vec<Clause>,
}

fn compare(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y),
        _ => a.cmp(b),
    }
}

impl Filter {
    pub fn parse(expr: &str, columns: &[String]) -> Result<Self> {
        let lookup = |name: &str| {
            columns
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::UnknownColumn(name.to_string()))
        };
        let mut clauses = Vec::new();
        for part in expr.split('&').map(str::trim).filter(|p| !p.is_empty()) {
            if let Some((name, set)) = part.split_once(" in ") {
                let set = set.trim();
                let inner = set
                    .strip_prefix('{')
                    .and_then(|s| s.strip_suffix('}'))
                    .ok_or_else(|| Error::Parse(format!("set must be written {{a,b}}: `{part}`")))?;
                clauses.push(Clause {
                    col: lookup(name.trim())?,
                    op: Op::In(inner.split(',').map(|v| v.trim().to_string()).collect()),
                    value: String::new(),
                });
                continue;
            }
            let ops = [("<=", Op::Le), (">=", Op::Ge), ("!=", Op::Ne), ("=", Op::Eq), ("<", Op::Lt), (">", Op::Gt)];
            let (at, tok, op) = ops
                .into_iter()
                .filter_map(|(tok, op)| part.find(tok).map(|i| (i, tok, op)))
                .min_by_key(|(i, tok, _)| (*i, std::cmp::Reverse(tok.len())))
                .ok_or_else(|| Error::Parse(format!("no operator in `{part}`")))?;
            clauses.push(Clause {
                col: lookup(part[..at].trim())?,
                op,
                value: part[at + tok.len()..].trim().to_string(),
            });
        }
        Ok(Self { clauses })
    }

    pub fn matches(&self, row: &[String]) -> bool {
        use std::cmp::Ordering::*;
        self.clauses.iter().all(|c| {
            let v = &row[c.col];
            match &c.op {
                Op::In(set) => set.iter().any(|s| compare(v, s) == Equal),
                Op::Eq => compare(v, &c.value) == Equal,
                Op::Ne => compare(v, &c.value) != Equal,
                Op::Lt => compare(v, &c.value) == Less,
                Op::Le => compare(v, &c.value) != Greater,
                Op::Gt => compare(v, &c.value) == Greater,
                Op::Ge => compare(v, &c.value) != Less,
            }
        })
    }
}

/// Per-model JSON stored next to the tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub model: ModelConfig,
    pub hyper: TrainHyper,
    pub data: GenConfig,
    pub data_seed: u64,
    pub loss_curve: Vec<f64>,
    pub train_mse_by_ctx: Vec<f64>,
    pub ood_mse_by_ctx: Option<Vec<f64>>,
}

/// Handle on a registry directory. Single writer.
pub struct Registry {
    root: PathBuf,
    pub models: Table,
    pub probes: Table,
    pub interventions: Table,
}

impl Registry {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            models: Table::for_record::<ModelRecord>(&root.join(MODELS))?,
            probes: Table::for_record::<ProbeRecord>(&root.join(PROBES))?,
            interventions: Table::for_record::<InterventionRecord>(&root.join(INTERVENTIONS))?,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Table by file stem: `models`, `probes` or `interventions`.
    pub fn table(&self, name: &str) -> Result<&Table> {
        match name {
            "models" => Ok(&self.models),
            "probes" => Ok(&self.probes),
            "interventions" => Ok(&self.interventions),
            _ => Err(Error::usage(format!("unknown table `{name}`"))),
        }
    }

    /// Registry-relative form of `path` when it lies under the root.
    pub fn relative(&self, path: &Path) -> String {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        rel.to_string_lossy().replace('\\', "/")
    }

    pub fn resolve(&self, stored: &str) -> PathBuf {
        let p = Path::new(stored);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn append_model(&mut self, record: &ModelRecord) -> Result<usize> {
        if record.status == ModelStatus::Complete && !self.resolve(&record.model_path).exists() {
            return Err(Error::Schema {
                path: self.models.path.clone(),
                detail: format!("model path `{}` does not exist", record.model_path),
            });
        }
        self.models.append(record)
    }

    pub fn append_probes(&mut self, records: &[ProbeRecord]) -> Result<Vec<usize>> {
        if let Some(bad) = records.iter().find(|r| r.cl >= r.model.cl) {
            return Err(Error::Schema {
                path: self.probes.path.clone(),
                detail: format!("probe-CL {} not below sequence length {}", bad.cl, bad.model.cl),
            });
        }
        self.probes.append_all(records)
    }

    pub fn append_interventions(&mut self, records: &[InterventionRecord]) -> Result<Vec<usize>> {
        self.interventions.append_all(records)
    }

    pub fn sidecar_path(&self, model_id: &str) -> PathBuf {
        self.root.join(SIDECARS).join(format!("{model_id}.json"))
    }

    pub fn write_sidecar(&self, model_id: &str, sidecar: &ModelSidecar) -> Result<()> {
        let mut json = serde_json::to_string_pretty(sidecar)?;
        json.push('\n');
        write_atomic(&self.sidecar_path(model_id), json.as_bytes())
    }

    pub fn read_sidecar(&self, model_id: &str) -> Result<ModelSidecar> {
        Ok(serde_json::from_slice(&fs::read(self.sidecar_path(model_id))?)?)
    }

    pub fn model_records(&self) -> Result<Vec<ModelRecord>> {
        self.models.records()
    }

    /// Rebuild criteria inputs for every complete model of `datatype`.
    pub fn evaluations(&self, datatype: &str, dataset_split: &str, probe_split: &str) -> Result<Vec<ModelEvaluation>> {
        let probes: Vec<ProbeRecord> = self.probes.records()?;
        let interventions: Vec<InterventionRecord> = self.interventions.records()?;
        let mut out = Vec::new();
        for m in self.model_records()? {
            if m.datatype != datatype || m.status != ModelStatus::Complete {
                continue;
            }
            let id = m.id();
            let mse_by_ctx = self.read_sidecar(&id).map(|s| s.train_mse_by_ctx).unwrap_or_default();
            let mut eval = ModelEvaluation {
                model_id: id.clone(),
                layers: m.layer,
                hidden: m.emb,
                mse_by_ctx,
                probes: Vec::new(),
                reverse: Vec::new(),
                interventions: Vec::new(),
            };
            for p in probes.iter().filter(|p| {
                p.model.id() == id
                    && p.datatype == datatype
                    && p.dataset_split == dataset_split
                    && p.probe_split == probe_split
            }) {
                match p.kind {
                    ProbeKind::Reverse => eval.reverse.push(ReverseResult {
                        method: p.method.clone(),
                        features: p.target.split('+').map(str::to_string).collect(),
                        site: p.site,
                        ctx: p.cl,
                        probe: ReverseProbe {
                            map: Vec::new(),
                            intercept: Vec::new(),
                            n_features: p.target.split('+').count(),
                            hidden: m.emb,
                            variance_explained: p.r2,
                            residual_variance: Vec::new(),
                            n_samples: p.n,
                            flag: p.flag.clone(),
                        },
                    }),
                    kind => eval.probes.push(ProbeResult {
                        spec: ProbeSpec {
                            target: p.target.clone(),
                            method: p.method.clone(),
                            site: p.site,
                            ctx: p.cl,
                            kind,
                            split: if p.probe_split == "insample" {
                                SplitPolicy::InSample
                            } else {
                                SplitPolicy::default()
                            },
                        },
                        fit: Fit {
                            coefficients: Vec::new(),
                            intercept: 0.0,
                            r2: p.r2,
                            mse: p.mse,
                            n_samples: p.n,
                            flag: p.flag.clone(),
                        },
                    }),
                }
            }
            eval.interventions = interventions
                .iter()
                .filter(|i| i.outcome.model_id == id && i.datatype == datatype)
                .map(|i| i.outcome.clone())
                .collect();
            out.push(eval);
        }
        Ok(out)
    }
}

/// Files written by [`report`] plus the referenced paths that were absent.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportBundle {
    pub files: Vec<PathBuf>,
    pub missing: Vec<String>,
}

const CRITERIA: [(&str, &str); 4] = [
    ("c1", "intermediate encoding"),
    ("c2", "performance-encoding correlation"),
    ("c3", "explanatory power"),
    ("c4", "intervention success"),
];

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"))
}

/// Method × criterion table as CSV rows (criteria down, methods across).
pub fn summary_rows(summary: &CriteriaSummary) -> Vec<Vec<String>> {
    let mut rows = vec![std::iter::once("criterion".to_string())
        .chain(summary.methods.iter().map(|m| m.method.clone()))
        .collect::<Vec<_>>()];
    for (i, (key, _)) in CRITERIA.iter().enumerate() {
        let mut row = vec![key.to_string()];
        for m in &summary.methods {
            row.push(opt([m.c1, m.c2, m.c3, m.c4][i]));
        }
        rows.push(row);
    }
    rows
}

/// The same table padded into aligned columns.
pub fn summary_text(summary: &CriteriaSummary) -> String {
    let mut rows = vec![std::iter::once("criterion".to_string())
        .chain(summary.methods.iter().map(|m| m.method.clone()))
        .collect::<Vec<_>>()];
    for (i, (key, name)) in CRITERIA.iter().enumerate() {
        let mut row = vec![format!("{key} {name}")];
        for m in &summary.methods {
            row.push(cell([m.c1, m.c2, m.c3, m.c4][i]));
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (v, w))| if i == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

fn write_csv(path: &Path, rows: &[Vec<String>]) -> Result<()> {
    let mut bytes = Vec::new();
    for r in rows {
        bytes.extend(csv_line(r)?);
    }
    write_atomic(path, &bytes)
}

/// Write `summary.csv`, `summary.txt` and the per-model `detail.csv` into `dir`.
pub fn write_summary(summary: &CriteriaSummary, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    fs::create_dir_all(dir)?;
    let path = dir.join("summary.csv");
    write_csv(&path, &summary_rows(summary))?;
    files.push(path);
    let path = dir.join("summary.txt");
    write_atomic(&path, summary_text(summary).as_bytes())?;
    files.push(path);

    let mut detail = vec![[
        "model-id", "method", "model-layer", "model-emb", "mean-mse", "c1", "c2-by-context", "c3", "c3-layer",
        "c3-inlayerpos", "replace-mse", "baseline-mse",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect::<Vec<_>>()];
    for d in &summary.details {
        detail.push(vec![
            d.model_id.clone(),
            d.method.clone(),
            d.layers.to_string(),
            d.hidden.to_string(),
            fmt_f64(d.mean_mse),
            opt(d.c1),
            opt(d.c2_by_context),
            opt(d.c3),
            d.c3_site.map(|s| s.layer.to_string()).unwrap_or_default(),
            d.c3_site.map(|s| s.pos.as_str().to_string()).unwrap_or_default(),
            opt(d.replace_mse),
            opt(d.baseline_mse),
        ]);
    }
    let path = dir.join("detail.csv");
    write_csv(&path, &detail)?;
    files.push(path);

    Ok(files)
}

/// Emit the report bundle under `out`: `summary.csv`, `summary.txt`,
/// `detail.csv`, `curves/ID.csv`, `sweeps/ID.csv` and `missing-inputs.txt`.
pub fn report(registry: &Registry, summary: &CriteriaSummary, out: &Path) -> Result<ReportBundle> {
    let mut bundle = ReportBundle::default();
    fs::create_dir_all(out)?;

    bundle.files.extend(write_summary(summary, out)?);

    // r² against context length, one row per (site, CL), one column per target
    let probes: Vec<ProbeRecord> = registry.probes.records()?;
    let mut curves: BTreeMap<String, BTreeMap<(Site, usize), BTreeMap<String, Option<f64>>>> = BTreeMap::new();
    let mut curve_targets: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for p in &probes {
        if p.kind != ProbeKind::Linear {
            continue;
        }
        let name = format!("{}-{}-{}-{}", p.model.id(), p.datatype, p.dataset_split, p.probe_split);
        curve_targets.entry(name.clone()).or_default().insert(p.target.clone());
        curves
            .entry(name)
            .or_default()
            .entry((p.site, p.cl))
            .or_default()
            .insert(p.target.clone(), p.r2);
    }
    for (name, cells) in &curves {
        let targets = &curve_targets[name];
        let mut rows = vec![["probe-layer", "probe-inlayerpos", "probe-CL"]
            .iter()
            .map(|s| s.to_string())
            .chain(targets.iter().cloned())
            .collect::<Vec<_>>()];
        for ((site, cl), vals) in cells {
            let mut row = vec![site.layer.to_string(), site.pos.as_str().to_string(), cl.to_string()];
            row.extend(targets.iter().map(|t| opt(vals.get(t).copied().flatten())));
            rows.push(row);
        }
        let path = out.join("curves").join(format!("{name}.csv"));
        write_csv(&path, &rows)?;
        bundle.files.push(path);
    }

    let interventions: Vec<InterventionRecord> = registry.interventions.records()?;
    let mut sweeps: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    for r in &interventions {
        let o = &r.outcome;
        sweeps.entry(o.model_id.clone()).or_default().push(vec![
            r.datatype.clone(),
            o.method.clone(),
            o.mode.as_str().to_string(),
            o.site.layer.to_string(),
            o.site.pos.as_str().to_string(),
            fmt_f64(o.dt_scale),
            fmt_f64(o.omega_scale),
            opt(o.w_prime),
            fmt_f64(o.mse),
            fmt_f64(o.baseline_mse),
            fmt_f64(o.copy_last_mse),
            opt(o.implied.dt_ratio),
            opt(o.implied.omega_ratio),
            opt(o.implied.w),
            o.classification.as_str().to_string(),
        ]);
    }
    for (id, rows) in sweeps {
        let mut all = vec![[
            "probe-datatype", "method", "mode", "probe-layer", "probe-inlayerpos", "dt-scale", "omega-scale",
            "w-prime", "mse", "baseline-mse", "copy-last-mse", "implied-dt-ratio", "implied-omega-ratio",
            "implied-w", "classification",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()];
        all.extend(rows);
        let path = out.join("sweeps").join(format!("{id}.csv"));
        write_csv(&path, &all)?;
        bundle.files.push(path);
    }

    let mut referenced: BTreeSet<String> = registry
        .model_records()?
        .into_iter()
        .filter(|m| m.status == ModelStatus::Complete)
        .map(|m| m.model_path)
        .collect();
    referenced.extend(probes.iter().map(|p| p.savepath.clone()).filter(|p| !p.is_empty()));
    bundle.missing = referenced.into_iter().filter(|p| !registry.resolve(p).exists()).collect();
    let mut text = String::new();
    for m in &bundle.missing {
        let _ = writeln!(text, "{m}");
    }
    let path = out.join("missing-inputs.txt");
    write_atomic(&path, text.as_bytes())?;
    bundle.files.push(path);
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(layer: usize, emb: usize, seed: u64) -> ModelRecord {
        ModelRecord {
            datatype: "sho-undamped".into(),
            emb,
            layer,
            epoch: 10,
            cl: 65,
            lr: 1e-3,
            total_epochs: 10,
            batch: 64,
            model_path: String::new(),
            seed,
            mse: Some(0.012345678901234567),
            status: ModelStatus::Diverged,
        }
    }

    #[test]
    fn filter_parsing() {
        let cols: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let row = |a: &str, b: &str, c: &str| vec![a.to_string(), b.to_string(), c.to_string()];
        let f = Filter::parse("a=2 & b<0.5 & c in {x, y}", &cols).unwrap();
        assert!(f.matches(&row("2.0", "0.1", "y")));
        assert!(!f.matches(&row("2", "0.6", "x")));
        assert!(!f.matches(&row("2", "0.1", "z")));
        assert!(Filter::parse("", &cols).unwrap().matches(&row("", "", "")));
        assert!(matches!(Filter::parse("d=1", &cols), Err(Error::UnknownColumn(_))));
        let ge = Filter::parse("a>=10", &cols).unwrap();
        assert!(ge.matches(&row("10", "", "")) && !ge.matches(&row("9", "", "")));
    }

    #[test]
    fn model_round_trip_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = Registry::open(dir.path()).unwrap();
        let m = model(2, 16, 1);
        assert_eq!(reg.append_model(&m).unwrap(), 0);
        assert_eq!(reg.append_model(&model(1, 4, 1)).unwrap(), 1);
        assert!(matches!(reg.append_model(&m), Err(Error::DuplicateKey { existing_row: 0 })));
        let back = Registry::open(dir.path()).unwrap().model_records().unwrap();
        assert_eq!(back[0], m);
        assert_eq!(back.len(), 2);
    }

    #[test]
    fn complete_model_needs_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = Registry::open(dir.path()).unwrap();
        let mut m = model(1, 4, 0);
        m.status = ModelStatus::Complete;
        m.model_path = "missing.json".into();
        assert!(matches!(reg.append_model(&m), Err(Error::Schema { .. })));
    }
}
