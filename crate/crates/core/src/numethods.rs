//! Candidate time-steppers for `u' = A u` and the intermediates each one
//! implies: linear multistep (`AΔt`), Taylor expansion (`(AΔt)^j`) and the
//! matrix exponential (`e^{AΔt}`).

use std::collections::VecDeque;
use std::fmt;
use std::ops::{Add, Mul};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dynamics::OscParams;
use crate::error::{Error, Result};

/// Row-major 2×2 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat2(pub [[f64; 2]; 2]);

impl Mat2 {
    pub const IDENTITY: Mat2 = Mat2([[1.0, 0.0], [0.0, 1.0]]);
    pub const ZERO: Mat2 = Mat2([[0.0, 0.0], [0.0, 0.0]]);

    pub fn new(a00: f64, a01: f64, a10: f64, a11: f64) -> Self {
        Mat2([[a00, a01], [a10, a11]])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0[r][c]
    }

    pub fn scale(&self, s: f64) -> Mat2 {
        let m = self.0;
        Mat2([[m[0][0] * s, m[0][1] * s], [m[1][0] * s, m[1][1] * s]])
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1]
    }

    pub fn det(&self) -> f64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    pub fn apply(&self, u: [f64; 2]) -> [f64; 2] {
        let m = self.0;
        [m[0][0] * u[0] + m[0][1] * u[1], m[1][0] * u[0] + m[1][1] * u[1]]
    }

    pub fn pow(&self, j: u32) -> Mat2 {
        (0..j).fold(Mat2::IDENTITY, |acc, _| acc * *self)
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    /// Entries in `m00, m01, m10, m11` order.
    pub fn entries(&self) -> [f64; 4] {
        [self.0[0][0], self.0[0][1], self.0[1][0], self.0[1][1]]
    }
}

impl Mul for Mat2 {
    type Output = Mat2;

    fn mul(self, rhs: Mat2) -> Mat2 {
        let (a, b) = (self.0, rhs.0);
        Mat2([
            [
                a[0][0] * b[0][0] + a[0][1] * b[1][0],
                a[0][0] * b[0][1] + a[0][1] * b[1][1],
            ],
            [
                a[1][0] * b[0][0] + a[1][1] * b[1][0],
                a[1][0] * b[0][1] + a[1][1] * b[1][1],
            ],
        ])
    }
}

impl Add for Mat2 {
    type Output = Mat2;

    fn add(self, rhs: Mat2) -> Mat2 {
        let (a, b) = (self.0, rhs.0);
        Mat2([
            [a[0][0] + b[0][0], a[0][1] + b[0][1]],
            [a[1][0] + b[1][0], a[1][1] + b[1][1]],
        ])
    }
}

/// `[[0, 1], [−ω₀², −2γ]]`.
pub fn system_matrix(omega0: f64, gamma: f64) -> Mat2 {
    Mat2::new(0.0, 1.0, -omega0 * omega0, -2.0 * gamma)
}

/// `(cosh z, sinh(z)/z)` for `z² = u`, any sign of `u` (negative `u` gives
/// `cos`/`sin` of `sqrt(−u)`). Small `|u|` goes through the power series so
/// the ratio never divides by a vanishing frequency.
fn even_odd(u: f64) -> (f64, f64) {
    if u.abs() < 0.25 {
        let (mut c, mut s) = (1.0, 1.0);
        let (mut tc, mut ts) = (1.0, 1.0);
        for k in 1..12 {
            let k = k as f64;
            tc *= u / ((2.0 * k - 1.0) * (2.0 * k));
            ts *= u / ((2.0 * k) * (2.0 * k + 1.0));
            c += tc;
            s += ts;
        }
        (c, s)
    } else if u > 0.0 {
        let z = u.sqrt();
        (z.cosh(), z.sinh() / z)
    } else {
        let z = (-u).sqrt();
        (z.cos(), z.sin() / z)
    }
}

/// Closed-form `e^{A·dt}` for a real 2×2 matrix.
///
/// With `s = tr(A)/2` and `q² = s² − det(A)`, Cayley–Hamilton gives
/// `e^{At} = e^{st}·[cosh(qt)·I + sinh(qt)/q·(A − sI)]`. For the oscillator
/// matrix `s = −γ` and `q² = γ² − ω₀²`, so the sign of `q²` selects the
/// overdamped (cosh/sinh), underdamped (cos/sin) or critical (`q = 0`)
/// form; undamped is the underdamped form with `γ = 0`.
pub fn mat_exp(a: &Mat2, dt: f64) -> Mat2 {
    if dt == 0.0 {
        return Mat2::IDENTITY;
    }
    let s = 0.5 * a.trace();
    let m = a.0;
    // q² = ((a00 − a11)/2)² + a01·a10, avoids cancellation in s² − det
    let half_diff = 0.5 * (m[0][0] - m[1][1]);
    let q2 = half_diff * half_diff + m[0][1] * m[1][0];
    let (ch, sh_over_z) = even_odd(q2 * dt * dt);
    let sh = sh_over_z * dt; // sinh(q dt)/q
    let scale = (s * dt).exp();
    Mat2([
        [
            scale * (ch + sh * (m[0][0] - s)),
            scale * sh * m[0][1],
        ],
        [
            scale * sh * m[1][0],
            scale * (ch + sh * (m[1][1] - s)),
        ],
    ])
}

/// `Σ_{j=0..order} (A·dt)^j / j!` by repeated multiplication.
pub fn taylor_stepper(a: &Mat2, dt: f64, order: u32) -> Result<Mat2> {
    if order > 8 {
        return Err(Error::usage(format!("taylor order {order} outside 0..=8")));
    }
    Ok(taylor_sum(a, dt, order))
}

pub(crate) fn taylor_sum(a: &Mat2, dt: f64, order: u32) -> Mat2 {
    let step = a.scale(dt);
    let mut term = Mat2::IDENTITY;
    let mut sum = Mat2::IDENTITY;
    for j in 1..=order {
        term = (term * step).scale(1.0 / j as f64);
        sum = sum + term;
    }
    sum
}

/// Adams–Bashforth β coefficients, newest derivative first.
pub fn ab_coefficients(order: usize) -> Result<&'static [f64]> {
    const AB1: [f64; 1] = [1.0];
    const AB2: [f64; 2] = [1.5, -0.5];
    const AB3: [f64; 3] = [23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0];
    const AB4: [f64; 4] = [55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0];
    const AB5: [f64; 5] = [
        1901.0 / 720.0,
        -2774.0 / 720.0,
        2616.0 / 720.0,
        -1274.0 / 720.0,
        251.0 / 720.0,
    ];
    match order {
        1 => Ok(&AB1),
        2 => Ok(&AB2),
        3 => Ok(&AB3),
        4 => Ok(&AB4),
        5 => Ok(&AB5),
        _ => Err(Error::usage(format!("adams-bashforth order {order} outside 1..=5"))),
    }
}

/// How the first `s − 1` steps of an order-`s` multistep method are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bootstrap {
    /// Orders `1..s−1` in turn. Limits the global order to 2 for `s ≥ 3`.
    LowerOrder,
    /// Taylor steps of order `s`, which keep the nominal global order.
    Taylor,
}

/// Recent states for an explicit multistep update. `history[0]` is the newest.
#[derive(Debug, Clone, PartialEq)]
pub struct StepperState {
    pub order: usize,
    pub history: VecDeque<[f64; 2]>,
}

impl StepperState {
    pub fn new(order: usize) -> Result<Self> {
        ab_coefficients(order)?;
        Ok(Self {
            order,
            history: VecDeque::with_capacity(order),
        })
    }

    pub fn push(&mut self, u: [f64; 2]) {
        self.history.push_front(u);
        self.history.truncate(self.order);
    }

    pub fn current(&self) -> Option<[f64; 2]> {
        self.history.front().copied()
    }

    pub fn is_primed(&self) -> bool {
        self.history.len() == self.order
    }
}

/// One explicit Adams–Bashforth step `u_{n+1} = u_n + dt·Σ β_j A u_{n−j}`.
pub fn ab_step(state: &StepperState, a: &Mat2, dt: f64) -> Result<[f64; 2]> {
    if !state.is_primed() {
        return Err(Error::usage(format!(
            "adams-bashforth order {} needs {} states, have {}",
            state.order,
            state.order,
            state.history.len()
        )));
    }
    let beta = ab_coefficients(state.order)?;
    let mut u = state.history[0];
    for (b, past) in beta.iter().zip(&state.history) {
        let f = a.apply(*past);
        u[0] += dt * b * f[0];
        u[1] += dt * b * f[1];
    }
    Ok(u)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stepper {
    AdamsBashforth { order: usize, bootstrap: Bootstrap },
    Taylor { order: u32 },
    Exp,
}

impl Stepper {
    pub fn euler() -> Self {
        Stepper::AdamsBashforth {
            order: 1,
            bootstrap: Bootstrap::Taylor,
        }
    }

    /// Run `steps` updates from `u0`, returning `steps + 1` states.
    pub fn run(&self, a: &Mat2, dt: f64, u0: [f64; 2], steps: usize) -> Result<Vec<[f64; 2]>> {
        let mut out = Vec::with_capacity(steps + 1);
        out.push(u0);
        match *self {
            Stepper::Taylor { order } => {
                let m = taylor_stepper(a, dt, order)?;
                for k in 0..steps {
                    out.push(m.apply(out[k]));
                }
            }
            Stepper::Exp => {
                let m = mat_exp(a, dt);
                for k in 0..steps {
                    out.push(m.apply(out[k]));
                }
            }
            Stepper::AdamsBashforth { order, bootstrap } => {
                let mut state = StepperState::new(order)?;
                state.push(u0);
                let starter = taylor_sum(a, dt, order as u32);
                for _ in 0..steps {
                    let next = if state.is_primed() {
                        ab_step(&state, a, dt)?
                    } else {
                        match bootstrap {
                            Bootstrap::Taylor => starter.apply(state.history[0]),
                            Bootstrap::LowerOrder => {
                                let mut partial = StepperState::new(state.history.len())?;
                                for u in state.history.iter().rev() {
                                    partial.push(*u);
                                }
                                ab_step(&partial, a, dt)?
                            }
                        }
                    };
                    state.push(next);
                    out.push(next);
                }
            }
        }
        Ok(out)
    }
}

impl fmt::Display for Stepper {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stepper::AdamsBashforth { order: 1, .. } => f.write_str("euler"),
            Stepper::AdamsBashforth { order, .. } => write!(f, "ab{order}"),
            Stepper::Taylor { order } => write!(f, "taylor:{order}"),
            Stepper::Exp => f.write_str("exp"),
        }
    }
}

impl FromStr for Stepper {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("unknown stepper `{s}` (euler|abN|taylor:K|exp)"));
        match s {
            "euler" => Ok(Stepper::euler()),
            "exp" => Ok(Stepper::Exp),
            _ => {
                if let Some(k) = s.strip_prefix("taylor:") {
                    let order = k.parse().map_err(|_| bad())?;
                    taylor_stepper(&Mat2::ZERO, 0.0, order)?;
                    Ok(Stepper::Taylor { order })
                } else if let Some(n) = s.strip_prefix("ab") {
                    let order = n.parse().map_err(|_| bad())?;
                    ab_coefficients(order)?;
                    Ok(Stepper::AdamsBashforth {
                        order,
                        bootstrap: Bootstrap::Taylor,
                    })
                } else {
                    Err(bad())
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    LinearMultistep,
    Taylor,
    MatrixExponential,
}

impl Method {
    pub const ALL: [Method; 3] = [
        Method::LinearMultistep,
        Method::Taylor,
        Method::MatrixExponential,
    ];

    /// Short tag used in target names and the registry.
    pub fn tag(&self) -> &'static str {
        match self {
            Method::LinearMultistep => "lm",
            Method::Taylor => "taylor",
            Method::MatrixExponential => "exp",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lm" | "linear-multistep" => Ok(Method::LinearMultistep),
            "taylor" | "rk" => Ok(Method::Taylor),
            "exp" | "matrix-exponential" | "mw" => Ok(Method::MatrixExponential),
            _ => Err(Error::Parse(format!("unknown method `{s}`"))),
        }
    }
}

/// Default Taylor power used for intermediates.
pub const DEFAULT_TAYLOR_POWER: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntermediateSet {
    pub method: Method,
    /// Power `j` of `(AΔt)^j`; only meaningful for the Taylor method.
    pub power: u32,
    pub targets: Vec<(String, f64)>,
    /// Entries (`m00, m01, m10, m11`) that are structurally constant across
    /// series in this regime.
    pub constant_mask: [bool; 4],
}

impl IntermediateSet {
    pub fn names(&self) -> Vec<&str> {
        self.targets.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.targets.iter().map(|(_, v)| *v).collect()
    }
}

const ENTRY_NAMES: [&str; 4] = ["m00", "m01", "m10", "m11"];

/// Prefix for target names, e.g. `lm`, `taylor3`, `exp`.
pub fn target_prefix(method: Method, power: u32) -> String {
    match method {
        Method::Taylor => format!("taylor{power}"),
        m => m.tag().to_string(),
    }
}

/// Non-constant, non-duplicate entries of the method's intermediate matrix.
///
/// Which entries are kept depends only on the regime (`γ = 0` or not), so
/// every series of a dataset yields the same target names. In the undamped
/// case `AΔt` has zero diagonal, `(AΔt)^j` alternates between a scaled
/// identity (even `j`) and an anti-diagonal (odd `j`), and `e^{AΔt}` has
/// equal diagonal entries.
pub fn intermediates(method: Method, params: &OscParams, power: u32) -> IntermediateSet {
    let a = system_matrix(params.omega0, params.gamma);
    let a_dt = a.scale(params.dt);
    let undamped = params.gamma == 0.0;
    let (matrix, constant_mask, duplicate_of_m00) = match method {
        Method::LinearMultistep => (a_dt, [true, false, false, undamped], false),
        Method::Taylor => {
            let even = power.is_multiple_of(2);
            let mask = if undamped {
                [!even, even, even, !even]
            } else {
                [false; 4]
            };
            (a_dt.pow(power), mask, undamped && even)
        }
        Method::MatrixExponential => (mat_exp(&a, params.dt), [false; 4], undamped),
    };
    let prefix = target_prefix(method, power);
    let entries = matrix.entries();
    let targets = (0..4)
        .filter(|&i| !constant_mask[i] && !(duplicate_of_m00 && i == 3))
        .map(|i| (format!("{prefix}.{}", ENTRY_NAMES[i]), entries[i]))
        .collect();
    IntermediateSet {
        method,
        power,
        targets,
        constant_mask,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    #[test]
    fn system_matrix_substitution() {
        assert_eq!(system_matrix(1.0, 0.0), Mat2::new(0.0, 1.0, -1.0, 0.0));
        assert_eq!(system_matrix(2.0, 0.5), Mat2::new(0.0, 1.0, -4.0, -1.0));
    }

    #[test]
    fn exp_of_zero_time_is_identity() {
        assert_eq!(mat_exp(&system_matrix(3.0, 0.2), 0.0), Mat2::IDENTITY);
    }

    #[test]
    fn quarter_turn() {
        let m = mat_exp(&Mat2::new(0.0, 1.0, -1.0, 0.0), PI / 2.0);
        for (got, want) in m.entries().iter().zip([0.0, 1.0, -1.0, 0.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
        }
    }

    #[test]
    fn taylor_low_orders() {
        let a = system_matrix(2.0, 0.3);
        assert_eq!(taylor_stepper(&a, 0.1, 0).unwrap(), Mat2::IDENTITY);
        let euler = Mat2::IDENTITY + a.scale(0.1);
        let t1 = taylor_stepper(&a, 0.1, 1).unwrap();
        for (g, w) in t1.entries().iter().zip(euler.entries()) {
            assert_abs_diff_eq!(*g, w, epsilon = 1e-16);
        }
        assert!(taylor_stepper(&a, 0.1, 9).is_err());
    }

    #[test]
    fn ab1_is_euler() {
        let a = system_matrix(1.5, 0.2);
        let mut st = StepperState::new(1).unwrap();
        st.push([0.3, -0.1]);
        let next = ab_step(&st, &a, 0.05).unwrap();
        let euler = (Mat2::IDENTITY + a.scale(0.05)).apply([0.3, -0.1]);
        assert_eq!(next, euler);
    }

    #[test]
    fn ab_step_requires_history() {
        let st = StepperState::new(3).unwrap();
        assert!(matches!(ab_step(&st, &Mat2::IDENTITY, 0.1), Err(Error::Usage(_))));
    }

    #[test]
    fn stepper_names_round_trip() {
        for s in ["euler", "ab2", "ab5", "taylor:4", "exp"] {
            assert_eq!(s.parse::<Stepper>().unwrap().to_string(), s);
        }
        assert!("ab6".parse::<Stepper>().is_err());
        assert!("rk4".parse::<Stepper>().is_err());
    }

    #[test]
    fn undamped_intermediate_counts() {
        let p = OscParams::new(1.3, 0.0, 0.4, 1.0, 0.0);
        let lm = intermediates(Method::LinearMultistep, &p, 3);
        assert_eq!(lm.names(), vec!["lm.m01", "lm.m10"]);
        assert_abs_diff_eq!(lm.values()[0], 0.4);
        assert_abs_diff_eq!(lm.values()[1], -1.69 * 0.4, epsilon = 1e-15);
        assert_eq!(intermediates(Method::Taylor, &p, 3).targets.len(), 2);
        let ex = intermediates(Method::MatrixExponential, &p, 3);
        assert_eq!(ex.names(), vec!["exp.m00", "exp.m01", "exp.m10"]);
        let th: f64 = 1.3 * 0.4;
        assert_abs_diff_eq!(ex.values()[0], th.cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(ex.values()[1], th.sin() / 1.3, epsilon = 1e-15);
        assert_abs_diff_eq!(ex.values()[2], -1.3 * th.sin(), epsilon = 1e-15);
    }

    #[test]
    fn damped_intermediate_counts() {
        let p = OscParams::new(1.3, 0.4, 0.2, 1.0, 0.0);
        assert_eq!(intermediates(Method::LinearMultistep, &p, 3).targets.len(), 3);
        assert_eq!(intermediates(Method::Taylor, &p, 3).targets.len(), 4);
        assert_eq!(intermediates(Method::MatrixExponential, &p, 3).targets.len(), 4);
    }
}
