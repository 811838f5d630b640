//! Train the desk-scale in-context regression model and print its MSE curve.
//!
//! ```text
//! cargo run --release --example train_linreg -- [epochs] [seed]
//! ```

use oscilloprobe::dynamics::{tokenize, Dataset, GenConfig, LinregConfig};
use oscilloprobe::transformer::{train, Model, ModelConfig, TrainHyper};

fn main() -> oscilloprobe::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(2000);
    let seed: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);

    let train_set = Dataset::generate(&GenConfig::Linreg(LinregConfig::train(5000, 65)), seed)?;
    let ood_set = Dataset::generate(&GenConfig::Linreg(LinregConfig::ood(1000, 65)), seed + 1)?;
    let (tok, ood) = (tokenize(&train_set), tokenize(&ood_set));

    let mut model = Model::init(ModelConfig::new(2, 16, 1, tok.seq_len, seed))?;
    let hyper = TrainHyper {
        epochs,
        ..TrainHyper::desk(seed)
    };
    let report = train(&mut model, &tok, Some(&ood), &hyper)?;

    println!("trained {} updates in {:.1}s", report.updates, report.wall_clock_secs);
    println!("ctx  train_mse  ood_mse");
    let ood_curve = report.ood_mse_by_ctx.unwrap_or_default();
    for (c, m) in report.train_mse_by_ctx.iter().enumerate() {
        if c % 4 == 0 || c + 1 == report.train_mse_by_ctx.len() {
            println!("{c:>3}  {m:.3e}  {:.3e}", ood_curve.get(c).copied().unwrap_or(f64::NAN));
        }
    }
    Ok(())
}
