//! Generate every dataset family, print summary statistics and save one CSV
//! per family under the given directory.
//!
//! ```text
//! cargo run --release --example generate_data -- [out_dir] [seed]
//! ```

use std::path::PathBuf;

use oscilloprobe::dynamics::{Dataset, DatasetKind, Split};
use oscilloprobe::pipeline::dataset_config;
use oscilloprobe::stats;

fn main() -> oscilloprobe::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "data".into()));
    let seed: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);

    let kinds = [
        DatasetKind::Linreg,
        DatasetKind::ShoUndamped,
        DatasetKind::ShoUnderdamped,
        DatasetKind::ShoOverdamped,
        DatasetKind::ShoDampedMixed,
    ];
    for kind in kinds {
        for split in [Split::Train, Split::OodTest] {
            let data = Dataset::generate(&dataset_config(kind, 500, None, split)?, seed)?;
            let xs: Vec<f64> = match (data.regression(), data.trajectories()) {
                (Some(r), _) => r.iter().flat_map(|s| s.xs.iter().copied()).collect(),
                (_, Some(t)) => t.iter().flat_map(|s| s.states.iter().map(|u| u.0)).collect(),
                _ => unreachable!(),
            };
            let path = out.join(format!("{}-{}.csv", kind.as_str(), split.as_str()));
            data.save(&path)?;
            println!(
                "{:<18} {:<5} series={} length={} mean(x)={:+.3} var(x)={:.3} -> {}",
                kind.as_str(),
                split.as_str(),
                data.n_series(),
                data.length(),
                stats::mean(&xs),
                stats::variance(&xs),
                path.display()
            );
        }
    }
    Ok(())
}
