//! Train the desk grid on one oscillator family, probe and intervene on
//! every model, and print the method-by-criterion table.
//!
//! ```text
//! cargo run --release --example sho_grid -- [kind] [epochs] [out_dir] [--full]
//! ```
//!
//! `--full` switches to the 25-model grid. The registry lives in
//! `out_dir/registry` and the report bundle in `out_dir/report`.

use std::path::PathBuf;

use oscilloprobe::dynamics::DatasetKind;
use oscilloprobe::pipeline::{run, PipelineConfig};
use oscilloprobe::registry::summary_text;

fn main() -> oscilloprobe::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let full = std::env::args().any(|a| a == "--full");
    let mut args = std::env::args().skip(1).filter(|a| a != "--full");
    let kind: DatasetKind = args.next().map_or(Ok(DatasetKind::ShoUndamped), |a| a.parse())?;
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(2000);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "sho-grid".into()));

    let mut cfg = PipelineConfig::desk(kind, 0);
    cfg.hyper.epochs = epochs;
    if full {
        cfg = cfg.full_grid();
    }
    let output = run(&out.join("registry"), &cfg, &out.join("report"))?;

    for (model, err) in &output.failures {
        println!("failed: {model}: {err}");
    }
    for e in &output.evaluations {
        println!("{:<32} mean mse {:.3e}", e.model_id, e.mean_mse());
    }
    println!();
    print!("{}", summary_text(&output.summary));
    println!("\nreport: {} files under {}", output.bundle.files.len(), out.join("report").display());
    Ok(())
}
