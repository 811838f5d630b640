//! Probe synthetic hidden states with a planted linear code, a planted
//! quadratic code and no code at all.
//!
//! ```text
//! cargo run --release --example probe_planted -- [n] [seed]
//! ```

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use oscilloprobe::probes::{fit_linear, fit_reverse, fit_taylor_cca, SplitPolicy};

const HIDDEN: usize = 16;

fn main() {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(2000);
    let seed: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uni = Uniform::new(-1.0, 1.0).expect("valid range");

    let z: Vec<f64> = (0..n).map(|_| uni.sample(&mut rng)).collect();
    let direction: Vec<f64> = (0..HIDDEN).map(|_| StandardNormal.sample(&mut rng)).collect();
    let noise = 0.05;
    let hs = DMatrix::from_fn(n, HIDDEN, |i, j| {
        z[i] * direction[j] + noise * Distribution::<f64>::sample(&StandardNormal, &mut rng)
    });
    let squared = DMatrix::from_fn(n, HIDDEN, |i, j| {
        z[i] * z[i] * direction[j] + noise * Distribution::<f64>::sample(&StandardNormal, &mut rng)
    });
    let noise_only = DMatrix::from_fn(n, HIDDEN, |_, _| StandardNormal.sample(&mut rng));

    let split = SplitPolicy::Holdout { seed };
    let report = |name: &str, fit: oscilloprobe::probes::Fit| {
        let r2 = fit.r2.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        println!("{name:<34} r2={r2:>10} n={}", fit.n_samples);
    };
    report("linear probe, planted z", fit_linear(&hs, &z, split));
    report("linear probe, z from a z^2 code", fit_linear(&squared, &z, split));
    report("degree-2 probe, z from a z^2 code", fit_taylor_cca(&squared, &z, 2, split));
    report("linear probe, pure noise", fit_linear(&noise_only, &z, split));

    let features = DMatrix::from_fn(n, 1, |i, _| z[i]);
    let rev = fit_reverse(&features, &hs);
    println!("reverse probe z -> hidden            variance explained={:.4}", rev.variance_explained.unwrap_or(f64::NAN));
}
