//! Registry storage, queries and reports.

use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use oscilloprobe::criteria::summarize;
use oscilloprobe::probes::{ProbeFlag, ProbeKind};
use oscilloprobe::registry::{report, ModelRecord, ModelStatus, ProbeRecord, Registry, Table};
use oscilloprobe::transformer::{InLayerPos, Site};
use oscilloprobe::Error;

fn model(layer: usize, emb: usize) -> ModelRecord {
    ModelRecord {
        datatype: "sho-undamped".into(),
        emb,
        layer,
        epoch: 100,
        cl: 65,
        lr: 1e-3,
        total_epochs: 100,
        batch: 64,
        model_path: String::new(),
        seed: 0,
        mse: Some(0.01 * layer as f64 / emb as f64),
        status: ModelStatus::Diverged,
    }
}

fn probe(m: &ModelRecord, i: usize, rng: &mut ChaCha8Rng) -> ProbeRecord {
    let pos = [InLayerPos::Attn, InLayerPos::AttnRes, InLayerPos::Mlp, InLayerPos::MlpRes];
    let flagged = rng.random_bool(0.05);
    let r2: f64 = rng.random_range(-0.2..1.0);
    const TARGETS: [(&str, &str); 9] = [
        ("lm", "lm.m01"), ("lm", "lm.m10"), ("lm", "lm.m11"),
        ("taylor", "taylor3.m01"), ("taylor", "taylor3.m10"),
        ("exp", "exp.m00"), ("exp", "exp.m01"), ("exp", "exp.m10"), ("exp", "exp.m11"),
    ];
    let (method, target) = TARGETS[i % 9];
    // mixed radix over (target, layer, position, length) keeps keys unique
    let rest = i / 9;
    let (layer, rest) = (rest % m.layer, rest / m.layer);
    ProbeRecord {
        model: m.clone(),
        datatype: m.datatype.clone(),
        dataset_split: "train".into(),
        probe_split: "heldout".into(),
        kind: ProbeKind::Linear,
        method: method.into(),
        target: target.into(),
        site: Site::new(layer, pos[rest % 4]),
        cl: rest / 4,
        r2: (!flagged).then_some(r2),
        mse: (!flagged).then_some(1.0 - r2),
        n: 200,
        flag: flagged.then_some(ProbeFlag::DegenerateTarget),
        savepath: String::new(),
    }
}

fn seeded(root: &Path, n: usize) -> (Registry, Vec<ProbeRecord>) {
    let mut reg = Registry::open(root).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let models = [model(4, 16), model(8, 4)];
    for m in &models {
        reg.append_model(m).unwrap();
    }
    let probes: Vec<ProbeRecord> = (0..n).map(|i| probe(&models[i % 2], i / 2, &mut rng)).collect();
    (reg, probes)
}

#[test]
fn ten_thousand_single_appends_survive_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let (mut reg, probes) = seeded(dir.path(), 10_000);
    for p in &probes {
        reg.append_probes(std::slice::from_ref(p)).unwrap();
    }
    let reopened = Registry::open(dir.path()).unwrap();
    let table = reopened.table("probes").unwrap();
    assert_eq!(table.len(), 10_000);
    let back: Vec<ProbeRecord> = table.records().unwrap();
    assert_eq!(back, probes);
}

#[test]
fn duplicate_keys_are_rejected_after_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let (mut reg, probes) = seeded(dir.path(), 20);
    reg.append_probes(&probes).unwrap();
    let mut reg = Registry::open(dir.path()).unwrap();
    let err = reg.append_probes(&probes[3..4]).unwrap_err();
    assert!(matches!(err, Error::DuplicateKey { existing_row: 3 }), "{err:?}");
    assert!(matches!(reg.append_model(&model(4, 16)), Err(Error::DuplicateKey { .. })));
}

#[test]
fn batch_append_is_all_or_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (mut reg, probes) = seeded(dir.path(), 30);
    reg.append_probes(&probes[..10]).unwrap();
    let before = std::fs::read(dir.path().join("probes.csv")).unwrap();
    let mut batch = probes[10..20].to_vec();
    batch.push(probes[12].clone());
    assert!(reg.append_probes(&batch).is_err());
    assert_eq!(std::fs::read(dir.path().join("probes.csv")).unwrap(), before);
    assert_eq!(reg.table("probes").unwrap().len(), 10);
}

#[test]
fn probe_lengths_must_fit_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let (mut reg, probes) = seeded(dir.path(), 1);
    let mut bad = probes[0].clone();
    bad.cl = 65;
    assert!(matches!(reg.append_probes(&[bad]), Err(Error::Schema { .. })));
}

#[test]
fn header_mismatch_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    std::fs::write(&path, "a,b\n1,2\n").unwrap();
    assert!(matches!(Table::open(&path, &["a", "c"], &["a"]), Err(Error::Schema { .. })));
}

/// Independent filter evaluation: numeric when both sides parse.
fn oracle(columns: &[String], row: &[String], clauses: &[(String, String, String)]) -> bool {
    clauses.iter().all(|(col, op, val)| {
        let v = &row[columns.iter().position(|c| c == col).unwrap()];
        let ord = match (v.parse::<f64>(), val.parse::<f64>()) {
            (Ok(a), Ok(b)) => a.partial_cmp(&b).unwrap(),
            _ => v.as_str().cmp(val.as_str()),
        };
        match op.as_str() {
            "=" => ord.is_eq(),
            "!=" => ord.is_ne(),
            "<" => ord.is_lt(),
            "<=" => ord.is_le(),
            ">" => ord.is_gt(),
            ">=" => ord.is_ge(),
            _ => unreachable!(),
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn query_matches_full_scan(
        clauses in prop::collection::vec(
            (
                prop::sample::select(vec!["probe-R2", "probe-CL", "model-layer", "probe-targetmethod", "probe-inlayerpos"]),
                prop::sample::select(vec!["=", "!=", "<", "<=", ">", ">="]),
                prop::sample::select(vec!["0.5", "2", "10", "exp", "mlp", "0", "-0.1"]),
            ),
            1..4,
        )
    ) {
        let dir = tempfile::tempdir().unwrap();
        let (mut reg, probes) = seeded(dir.path(), 600);
        reg.append_probes(&probes).unwrap();
        let table = reg.table("probes").unwrap();
        let clauses: Vec<(String, String, String)> =
            clauses.into_iter().map(|(c, o, v)| (c.to_string(), o.to_string(), v.to_string())).collect();
        let expr = clauses.iter().map(|(c, o, v)| format!("{c} {o} {v}")).collect::<Vec<_>>().join(" & ");
        let got = table.query(&expr).unwrap();
        let want: Vec<Vec<String>> = table
            .read_rows()
            .unwrap()
            .into_iter()
            .filter(|r| oracle(table.columns(), r, &clauses))
            .collect();
        prop_assert_eq!(got, want);
    }
}

#[test]
fn set_membership_and_unknown_columns() {
    let dir = tempfile::tempdir().unwrap();
    let (mut reg, probes) = seeded(dir.path(), 300);
    reg.append_probes(&probes).unwrap();
    let table = reg.table("probes").unwrap();
    let rows = table.query("probe-targetmethod in {lm, exp} & model-layer=4").unwrap();
    let want = probes.iter().filter(|p| p.method != "taylor" && p.model.layer == 4).count();
    assert_eq!(rows.len(), want);
    assert!(matches!(table.query("nope>1"), Err(Error::UnknownColumn(c)) if c == "nope"));
}

#[test]
fn reports_are_byte_identical() {
    let build = |root: &Path| {
        let (mut reg, probes) = seeded(root, 400);
        reg.append_probes(&probes).unwrap();
        let reg = Registry::open(root).unwrap();
        let evals = reg.evaluations("sho-undamped", "train", "heldout").unwrap();
        let summary = summarize(&evals, &["lm", "taylor", "exp"]);
        report(&reg, &summary, &root.join("report")).unwrap();
        let mut files: Vec<_> = walk(&root.join("report"));
        files.sort();
        files
            .into_iter()
            .map(|p| (p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()))
            .collect::<Vec<_>>()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = build(a.path());
    assert!(first.len() >= 4);
    assert_eq!(first, build(b.path()));
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}
