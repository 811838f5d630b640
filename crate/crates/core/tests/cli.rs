//! End-to-end runs of the `oscilloprobe` binary.

use std::path::Path;
use std::process::{Command, Output};

use oscilloprobe::dynamics::{closed_form_state, Dataset, DatasetKind, OscParams, Split};
use oscilloprobe::pipeline::dataset_config;
use oscilloprobe::registry::REGISTRY_ENV;

fn bin(dir: &Path) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_oscilloprobe"));
    c.current_dir(dir).env_remove(REGISTRY_ENV);
    c
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(bin(dir.path()).arg("--help").output().unwrap());
    for sub in ["gen", "train", "capture", "step", "probe", "reverse", "intervene", "criteria", "report", "query"] {
        assert!(help.contains(&format!("  {sub} ")), "{sub} missing from help");
    }
    for flag in ["--seed", "--registry", "--jobs", "--config"] {
        assert!(help.contains(flag), "{flag} missing from help");
    }
}

#[test]
fn step_exp_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["step", "--method", "exp", "--omega0", "1.7", "--gamma", "0.3", "--dt", "0.2", "--x0", "0.5", "--steps", "20"];
    let out = ok(bin(dir.path()).args(args).output().unwrap());
    let p = OscParams::new(1.7, 0.3, 0.2, 0.5, 0.0);
    let mut rows = 0;
    for (k, line) in out.lines().skip(1).enumerate() {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        let (x, v) = closed_form_state(&p, k).unwrap();
        assert!((f[1] - x).abs() < 1e-10 && (f[2] - v).abs() < 1e-10, "k={k}");
        rows += 1;
    }
    assert_eq!(rows, 21);
}

#[test]
fn gen_matches_library_and_config_mirrors_flags() {
    let dir = tempfile::tempdir().unwrap();
    ok(bin(dir.path())
        .args(["--seed", "4", "gen", "--kind", "sho-underdamped", "--n", "30", "--split", "ood-test", "--out", "a.csv"])
        .output()
        .unwrap());
    let want = Dataset::generate(&dataset_config(DatasetKind::ShoUnderdamped, 30, None, Split::OodTest).unwrap(), 4).unwrap();
    assert_eq!(Dataset::load(&dir.path().join("a.csv")).unwrap(), want);

    std::fs::write(dir.path().join("run.conf"), "# same run\nseed = 4\nkind = sho-underdamped\nn = 30\nsplit = ood-test\n").unwrap();
    ok(bin(dir.path()).args(["--config", "run.conf", "gen", "--out", "b.csv"]).output().unwrap());
    assert_eq!(std::fs::read(dir.path().join("a.csv")).unwrap(), std::fs::read(dir.path().join("b.csv")).unwrap());

    // the command line wins over the file
    ok(bin(dir.path()).args(["--config", "run.conf", "gen", "--n", "5", "--out", "c.csv"]).output().unwrap());
    assert_eq!(Dataset::load(&dir.path().join("c.csv")).unwrap().n_series(), 5);

    std::fs::write(dir.path().join("bad.conf"), "colour = red\n").unwrap();
    let out = bin(dir.path()).args(["--config", "bad.conf", "gen", "--out", "d.csv"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_workflow_through_the_registry() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let reg = d.join("reg");
    let run = |args: &[&str]| ok(bin(d).env(REGISTRY_ENV, &reg).args(args).output().unwrap());

    let trained = run(&["train", "--kind", "sho-undamped", "--L", "1", "--H", "4", "--epochs", "20", "--n", "120", "--ood-n", "20"]);
    assert!(trained.starts_with("sho-undamped-L1-H4-s0-e20"), "{trained}");
    let ckpt = "reg/models/sho-undamped-L1-H4-s0-e20.json";
    run(&["gen", "--kind", "sho-undamped", "--n", "60", "--out", "p.csv"]);
    run(&["capture", "--model", ckpt, "--data", "p.csv", "--ctx", "0,10,20", "--out", "hs"]);
    assert!(d.join("hs/embed.hs").exists() && d.join("hs/0-mlp-res.hs").exists());
    run(&["probe", "--model", ckpt, "--data", "p.csv", "--hs", "hs"]);
    run(&["reverse", "--model", ckpt, "--data", "p.csv", "--ctx", "0,10,20"]);
    run(&["intervene", "--model", ckpt, "--data", "p.csv", "--mode", "replace"]);
    run(&["intervene", "--model", ckpt, "--data", "p.csv", "--mode", "modify-dt", "--dt-scale", "0.75"]);
    let table = run(&["criteria", "--out", "crit"]);
    assert!(table.contains("c1 intermediate encoding"), "{table}");
    for f in ["summary.csv", "summary.txt", "detail.csv"] {
        assert!(d.join("crit").join(f).exists(), "{f}");
    }
    run(&["report", "--out", "rep"]);
    assert!(d.join("rep/curves").is_dir() && d.join("rep/sweeps").is_dir());

    let probes = run(&["query", "--table", "probes", "--where", "probe-CL=10 & probe-layer=0"]);
    let rows = probes.lines().count() - 1;
    // embed and the four in-layer sites all report layer 0:
    // 7 forward targets plus 3 reverse groups on each
    assert_eq!(rows, (7 + 3) * 5, "{probes}");
    let interventions = run(&["query", "--table", "interventions"]);
    assert_eq!(interventions.lines().count(), 3);

    let flagged = bin(d).env(REGISTRY_ENV, &reg).args(["--registry", "elsewhere", "query", "--table", "models"]).output().unwrap();
    assert_eq!(ok(flagged).lines().count(), 1, "--registry overrides the environment");

    let bad = bin(d).env(REGISTRY_ENV, &reg).args(["query", "--where", "nope=1"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown column"));
}
