//! Train a small oscillator model, then replace and modify the intermediate
//! at the best reverse-probe site and report how the prediction responds.
//!
//! ```text
//! cargo run --release --example interventions -- [epochs] [seed]
//! ```

use oscilloprobe::criteria::{criterion3, InterventionSetup};
use oscilloprobe::dynamics::{tokenize, Dataset, DatasetKind, Split};
use oscilloprobe::numethods::{Method, DEFAULT_TAYLOR_POWER};
use oscilloprobe::pipeline::dataset_config;
use oscilloprobe::probes::{reverse_grid, targets_for};
use oscilloprobe::transformer::{train, CaptureSpec, Model, ModelConfig, TrainHyper};

fn main() -> oscilloprobe::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(1000);
    let seed: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);

    let data = Dataset::generate(&dataset_config(DatasetKind::ShoUndamped, 2000, None, Split::Train)?, seed)?;
    let tok = tokenize(&data);
    let mut model = Model::init(ModelConfig::new(2, 16, tok.token_dim, tok.seq_len, seed))?;
    let report = train(&mut model, &tok, None, &TrainHyper { epochs, ..TrainHyper::desk(seed) })?;
    println!("trained {} updates, final mse {:.3e}", report.updates, report.train_mse_by_ctx.last().copied().unwrap_or(f64::NAN));

    let probe_set = data.truncated(500);
    let ptok = tokenize(&probe_set);
    let methods = [Method::MatrixExponential];
    let targets = targets_for(&probe_set, &methods, DEFAULT_TAYLOR_POWER);
    let ctxs: Vec<usize> = (0..ptok.ctx_positions().len()).collect();
    let spec = CaptureSpec::at_contexts(&model, &ptok, &ctxs)?;
    let capture = model.run(&ptok, Some(&spec), None)?.capture.expect("capture requested");
    let group: Vec<_> = targets.iter().collect();
    let reverse = reverse_grid(&capture, &[("exp".to_string(), group)], &model.config.sites(), &ctxs);
    let (ve, site) = criterion3(&reverse, "exp").expect("at least one unflagged cell");
    println!("best reverse-probe site {site} (variance explained {ve:.3})");

    let setup = InterventionSetup::new("example", &model, &probe_set, Some(Method::MatrixExponential), site, DEFAULT_TAYLOR_POWER)?;
    let show = |o: oscilloprobe::criteria::InterventionOutcome| {
        println!(
            "{:<12} dt x{:<5} omega x{:<5} mse {:.3e}  baseline {:.3e}  unpatched {:.3e}  -> {}",
            o.mode.as_str(),
            o.dt_scale,
            o.omega_scale,
            o.mse,
            o.baseline_mse,
            o.unpatched_mse,
            o.classification.as_str()
        );
    };
    show(setup.replace()?);
    for dt in [0.5, 0.75, 1.25, 1.5] {
        show(setup.modify(dt, 1.0)?);
    }
    for omega in [0.75, 1.25] {
        show(setup.modify(1.0, omega)?);
    }
    Ok(())
}
