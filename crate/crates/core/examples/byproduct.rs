//! Hidden states that are a random linear image of the matrix-exponential
//! intermediates, probed for every method. Shows how much encoding of the
//! other methods comes for free, across noise levels, plus a noise-only null.
//!
//! ```text
//! cargo run --release --example byproduct -- [n] [seed]
//! ```

use oscilloprobe::criteria::{synthetic_byproduct, ByproductConfig};
use oscilloprobe::dynamics::{Dataset, DatasetKind, Split};
use oscilloprobe::pipeline::dataset_config;
use oscilloprobe::probes::SplitPolicy;

fn main() -> oscilloprobe::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(1000);
    let seed: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);
    let data = Dataset::generate(&dataset_config(DatasetKind::ShoUndamped, n, None, Split::Train)?, seed)?;

    let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    println!("{:<8} {:<8} {:>10} {:>10}", "sigma", "method", "c1", "c3");
    let mut configs: Vec<(String, ByproductConfig)> = [0.0, 0.1, 0.5, 1.0]
        .into_iter()
        .map(|sigma| (format!("{sigma}"), ByproductConfig { sigma, seed, ..ByproductConfig::default() }))
        .collect();
    configs.push((
        "null".into(),
        ByproductConfig { sigma: 1.0, signal: false, seed, ..ByproductConfig::default() },
    ));
    for (label, cfg) in configs {
        for row in synthetic_byproduct(&data, &cfg, SplitPolicy::Holdout { seed }, None)? {
            println!("{label:<8} {:<8} {:>10} {:>10}", row.method, fmt(row.synthetic_c1), fmt(row.synthetic_c3));
        }
    }
    Ok(())
}
