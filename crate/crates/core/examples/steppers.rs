//! Integrate one oscillator with every stepper and report the global error
//! at a fixed horizon and the observed convergence order.
//!
//! ```text
//! cargo run --release --example steppers -- [omega0] [gamma]
//! ```

use oscilloprobe::dynamics::{closed_form_state, OscParams};
use oscilloprobe::numethods::{system_matrix, Bootstrap, Stepper};
use oscilloprobe::stats::slope;

const HORIZON: f64 = 2.0;

fn global_error(stepper: &Stepper, omega0: f64, gamma: f64, steps: usize) -> oscilloprobe::Result<f64> {
    let dt = HORIZON / steps as f64;
    let p = OscParams::new(omega0, gamma, dt, 1.0, 0.0);
    let states = stepper.run(&system_matrix(omega0, gamma), dt, [1.0, 0.0], steps)?;
    let (x, v) = closed_form_state(&p, steps)?;
    let u = states[steps];
    Ok((u[0] - x).hypot(u[1] - v))
}

fn main() -> oscilloprobe::Result<()> {
    let mut args = std::env::args().skip(1);
    let omega0: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(2.0);
    let gamma: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0.0);

    let mut steppers = vec![Stepper::euler()];
    for order in 2..=5 {
        for bootstrap in [Bootstrap::Taylor, Bootstrap::LowerOrder] {
            steppers.push(Stepper::AdamsBashforth { order, bootstrap });
        }
    }
    steppers.extend((1..=4).map(|order| Stepper::Taylor { order }));
    steppers.push(Stepper::Exp);

    let grid = [50usize, 100, 200, 400];
    println!("omega0={omega0} gamma={gamma} horizon={HORIZON}");
    println!("{:<22} {:>12} {:>8}", "stepper", "err(n=400)", "order");
    for s in &steppers {
        let errs: Vec<f64> = grid
            .iter()
            .map(|&n| global_error(s, omega0, gamma, n))
            .collect::<oscilloprobe::Result<_>>()?;
        let label = match s {
            Stepper::AdamsBashforth { order, bootstrap } if *order > 1 => format!("ab{order} ({bootstrap:?})"),
            _ => s.to_string(),
        };
        let order = if errs.iter().all(|e| *e > 1e-13) {
            let log_dt: Vec<f64> = grid.iter().map(|&n| (HORIZON / n as f64).ln()).collect();
            let log_err: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
            format!("{:.2}", slope(&log_dt, &log_err))
        } else {
            "exact".into()
        };
        println!("{label:<22} {:>12.3e} {order:>8}", errs[grid.len() - 1]);
    }
    Ok(())
}
