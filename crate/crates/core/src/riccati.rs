//! Backward solvers for the coupled Riccati system, the bounded-real-lemma
//! equations, linear Lyapunov equations, the Picard scheme and the
//! zero-sum saddle-point equations used as the model-based reference for
//! policy iteration.
//!
//! Sign conventions: `P1, Q1 ⪯ 0` and `P2, Q2 ⪰ 0` for the coupled system,
//! `P, Q ⪯ 0` for the bounded real lemma, `P, Q ⪰ 0` for the saddle-point
//! equations.

use crate::linalg::{hermite, is_finite, min_eig, solve, symmetrize, Mat};
use crate::model::{jump_sum, DisturbanceOnlyModel, DisturbanceSystem, GainSchedule, JumpAtom, MeanFieldJumpModel};
use std::fmt;
use thiserror::Error;

/// Positive-definiteness threshold for the Σ matrices.
pub const PD_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiccatiError {
    #[error("{name} is not positive definite (min eigenvalue {min_eig:e})")]
    SigmaNotPositive { name: SigmaName, min_eig: f64 },
    #[error("gain coupling matrix I - d b is singular")]
    CouplingSingular,
    #[error("step {dt} does not divide horizon {horizon}")]
    Step { dt: f64, horizon: f64 },
    #[error("gamma must be positive, got {0}")]
    Gamma(f64),
    #[error("bad bracket: {0}")]
    BadBracket(String),
    #[error("feasibility is not monotone in gamma: {0}")]
    NonMonotone(String),
    #[error("trajectory is infeasible")]
    Infeasible,
    #[error("Lyapunov solution lost positivity at t = {t} (min eigenvalue {min_eig:e})")]
    PositivityViolation { t: f64, min_eig: f64 },
    #[error("no convergence after {iterations} iterations (last step {last_step:e})")]
    NoConvergence { iterations: usize, last_step: f64, last: Vec<Mat>, previous: Vec<Mat> },
    #[error("model has jump atoms; this solver covers the continuous system only")]
    HasJumps,
}

/// Which Σ matrix lost positive definiteness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaName {
    Sigma0,
    Sigma2,
    Sigma0Tilde,
    Sigma2Tilde,
    /// The solution itself became non-finite.
    NonFinite,
}

impl fmt::Display for SigmaName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SigmaName::Sigma0 => "sigma0",
            SigmaName::Sigma2 => "sigma2",
            SigmaName::Sigma0Tilde => "sigma0_tilde",
            SigmaName::Sigma2Tilde => "sigma2_tilde",
            SigmaName::NonFinite => "non-finite state",
        };
        f.write_str(s)
    }
}

pub(crate) fn time_grid(horizon: f64, dt: f64) -> Result<Vec<f64>, RiccatiError> {
    if !(dt > 0.0) || !(horizon > 0.0) {
        return Err(RiccatiError::Step { dt, horizon });
    }
    let steps = (horizon / dt).round();
    if steps < 1.0 || (steps * dt - horizon).abs() > 1e-9 {
        return Err(RiccatiError::Step { dt, horizon });
    }
    let steps = steps as usize;
    Ok((0..=steps).map(|k| horizon * k as f64 / steps as f64).collect())
}

/// A point inside one backward RK4 step from `t_{k+1}` to `t_k`.
#[derive(Debug, Clone, Copy)]
pub struct Stage {
    /// Index `k` of the step's left grid point.
    pub step: usize,
    /// Position inside the step: 0 at `t_k`, 1 at `t_{k+1}`.
    pub frac: f64,
    pub t: f64,
}

trait Axpy: Clone {
    /// `self + s * other`
    fn axpy(&self, s: f64, other: &Self) -> Self;
}

impl Axpy for Mat {
    fn axpy(&self, s: f64, other: &Self) -> Self {
        self + other * s
    }
}

/// One classical RK4 step backward in time. `f` returns `dy/dt`.
fn rk4_back<Y: Axpy, E>(grid: &[f64], k: usize, y: &Y, mut f: impl FnMut(Stage, &Y) -> Result<Y, E>) -> Result<Y, E> {
    let h = grid[k + 1] - grid[k];
    let st = |frac: f64| Stage { step: k, frac, t: grid[k] + frac * h };
    let k1 = f(st(1.0), y)?;
    let k2 = f(st(0.5), &y.axpy(-0.5 * h, &k1))?;
    let k3 = f(st(0.5), &y.axpy(-0.5 * h, &k2))?;
    let k4 = f(st(0.0), &y.axpy(-h, &k3))?;
    let incr = k1.axpy(2.0, &k2).axpy(2.0, &k3).axpy(1.0, &k4);
    Ok(y.axpy(-h / 6.0, &incr))
}

// ---------------------------------------------------------------------------
// Coupled system

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiState {
    pub p1: Mat,
    pub q1: Mat,
    pub p2: Mat,
    pub q2: Mat,
}

impl RiccatiState {
    pub fn zeros(n: usize) -> Self {
        let z = Mat::zeros(n, n);
        Self { p1: z.clone(), q1: z.clone(), p2: z.clone(), q2: z }
    }

    pub fn mats(&self) -> [&Mat; 4] {
        [&self.p1, &self.q1, &self.p2, &self.q2]
    }

    fn symmetrize(&mut self) {
        symmetrize(&mut self.p1);
        symmetrize(&mut self.q1);
        symmetrize(&mut self.p2);
        symmetrize(&mut self.q2);
    }

    fn is_finite(&self) -> bool {
        self.mats().iter().all(|m| is_finite(m))
    }
}

impl Axpy for RiccatiState {
    fn axpy(&self, s: f64, o: &Self) -> Self {
        Self { p1: &self.p1 + &o.p1 * s, q1: &self.q1 + &o.q1 * s, p2: &self.p2 + &o.p2 * s, q2: &self.q2 + &o.q2 * s }
    }
}

/// Gains at one time: `v = K1 (x - Ex) + k1_sum Ex`, `u = K2 (x - Ex) + k2_sum Ex`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gains {
    pub k1: Mat,
    pub k1_sum: Mat,
    pub k2: Mat,
    pub k2_sum: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaBundle {
    pub sigma0: Mat,
    pub sigma2: Mat,
    pub sigma0_tilde: Mat,
    pub sigma2_tilde: Mat,
    /// Smallest eigenvalues in the order Σ0, Σ2, Σ̃0, Σ̃2.
    pub min_eig: [f64; 4],
}

/// Sums of the plain and mean-field coefficients, used by the mean channel.
struct Summed {
    a: Mat,
    b1: Mat,
    b2: Mat,
    c: Mat,
    d1: Mat,
    d2: Mat,
}

fn summed(m: &MeanFieldJumpModel) -> Summed {
    Summed {
        a: &m.a + &m.a_bar,
        b1: &m.b1 + &m.b1_bar,
        b2: &m.b2 + &m.b2_bar,
        c: &m.c + &m.c_bar,
        d1: &m.d1 + &m.d1_bar,
        d2: &m.d2 + &m.d2_bar,
    }
}

/// `Σ w L' P R` over the model's atoms, zero of the given shape when there are none.
fn jint(
    atoms: &[JumpAtom],
    p: &Mat,
    l: impl Fn(&JumpAtom) -> Mat,
    r: impl Fn(&JumpAtom) -> Mat,
    shape: (usize, usize),
) -> Mat {
    if atoms.is_empty() {
        Mat::zeros(shape.0, shape.1)
    } else {
        jump_sum(atoms, |a| a.weight, p, l, r)
    }
}

fn et(a: &JumpAtom) -> Mat {
    &a.e + &a.e_bar
}
fn f1t(a: &JumpAtom) -> Mat {
    &a.f1 + &a.f1_bar
}
fn f2t(a: &JumpAtom) -> Mat {
    &a.f2 + &a.f2_bar
}

fn require_pd(m: &Mat, name: SigmaName) -> Result<f64, RiccatiError> {
    let e = min_eig(m);
    if e.is_finite() && e > PD_THRESHOLD {
        Ok(e)
    } else {
        Err(RiccatiError::SigmaNotPositive { name, min_eig: e })
    }
}

fn sigmas(model: &MeanFieldJumpModel, gamma: f64, s: &RiccatiState) -> SigmaBundle {
    let at = &model.atoms;
    let nv = model.dims.nv;
    let nu = model.dims.nu;
    let t = summed(model);
    let g2 = gamma * gamma;
    let sigma0 = Mat::identity(nv, nv) * g2
        + model.d1.transpose() * &s.p1 * &model.d1
        + jint(at, &s.p1, |a| a.f1.clone(), |a| a.f1.clone(), (nv, nv));
    let sigma2 = Mat::identity(nv, nv) * g2 + t.d1.transpose() * &s.p1 * &t.d1 + jint(at, &s.p1, f1t, f1t, (nv, nv));
    let sigma0_tilde = Mat::identity(nu, nu)
        + model.d2.transpose() * &s.p2 * &model.d2
        + jint(at, &s.p2, |a| a.f2.clone(), |a| a.f2.clone(), (nu, nu));
    let sigma2_tilde = Mat::identity(nu, nu) + t.d2.transpose() * &s.p2 * &t.d2 + jint(at, &s.p2, f2t, f2t, (nu, nu));
    let min_eig = [min_eig(&sigma0), min_eig(&sigma2), min_eig(&sigma0_tilde), min_eig(&sigma2_tilde)];
    SigmaBundle { sigma0, sigma2, sigma0_tilde, sigma2_tilde, min_eig }
}

/// Solves the two coupled gain equations `K2 = a + b K1`, `K1 = c + d K2` exactly.
fn couple(a: Mat, b: Mat, c: Mat, d: Mat) -> Result<(Mat, Mat), RiccatiError> {
    let nv = c.nrows();
    let lhs = Mat::identity(nv, nv) - &d * &b;
    let k1 = solve(&lhs, &(c + &d * &a)).ok_or(RiccatiError::CouplingSingular)?;
    let k2 = a + b * &k1;
    Ok((k1, k2))
}

/// Feedback gains and Σ matrices at the state `s`.
///
/// The control gains depend on the disturbance gains and vice versa; the pair
/// of linear relations is solved simultaneously at each call.
pub fn gains_from(
    model: &MeanFieldJumpModel,
    gamma: f64,
    s: &RiccatiState,
) -> Result<(Gains, SigmaBundle), RiccatiError> {
    if !(gamma > 0.0) {
        return Err(RiccatiError::Gamma(gamma));
    }
    let sig = sigmas(model, gamma, s);
    require_pd(&sig.sigma0, SigmaName::Sigma0)?;
    require_pd(&sig.sigma2, SigmaName::Sigma2)?;
    require_pd(&sig.sigma0_tilde, SigmaName::Sigma0Tilde)?;
    require_pd(&sig.sigma2_tilde, SigmaName::Sigma2Tilde)?;
    let at = &model.atoms;
    let crate::model::Dims { n, nu, nv } = model.dims;
    let t = summed(model);
    let (p1, q1, p2, q2) = (&s.p1, &s.q1, &s.p2, &s.q2);
    let inv = |m: &Mat, rhs: Mat| -> Result<Mat, RiccatiError> {
        solve(m, &rhs).map(|x| -x).ok_or(RiccatiError::CouplingSingular)
    };

    let a = inv(
        &sig.sigma0_tilde,
        model.b2.transpose() * p2
            + model.d2.transpose() * p2 * &model.c
            + jint(at, p2, |a| a.f2.clone(), |a| a.e.clone(), (nu, n)),
    )?;
    let b = inv(
        &sig.sigma0_tilde,
        model.d2.transpose() * p2 * &model.d1 + jint(at, p2, |a| a.f2.clone(), |a| a.f1.clone(), (nu, nv)),
    )?;
    let c = inv(
        &sig.sigma0,
        model.b1.transpose() * p1
            + model.d1.transpose() * p1 * &model.c
            + jint(at, p1, |a| a.f1.clone(), |a| a.e.clone(), (nv, n)),
    )?;
    let d = inv(
        &sig.sigma0,
        model.d1.transpose() * p1 * &model.d2 + jint(at, p1, |a| a.f1.clone(), |a| a.f2.clone(), (nv, nu)),
    )?;
    let (k1, k2) = couple(a, b, c, d)?;

    let a =
        inv(&sig.sigma2_tilde, t.b2.transpose() * q2 + t.d2.transpose() * p2 * &t.c + jint(at, p2, f2t, et, (nu, n)))?;
    let b = inv(&sig.sigma2_tilde, t.d2.transpose() * p2 * &t.d1 + jint(at, p2, f2t, f1t, (nu, nv)))?;
    let c = inv(&sig.sigma2, t.b1.transpose() * q1 + t.d1.transpose() * p1 * &t.c + jint(at, p1, f1t, et, (nv, n)))?;
    let d = inv(&sig.sigma2, t.d1.transpose() * p1 * &t.d2 + jint(at, p1, f1t, f2t, (nv, nu)))?;
    let (k1_sum, k2_sum) = couple(a, b, c, d)?;
    Ok((Gains { k1, k1_sum, k2, k2_sum }, sig))
}

/// Time derivatives of the four coupled equations, written in the
/// `S - G Σ⁻¹ G'` form with the gains recomputed from `s`.
pub fn gdre_rhs(model: &MeanFieldJumpModel, gamma: f64, s: &RiccatiState) -> Result<RiccatiState, RiccatiError> {
    let (g, sig) = gains_from(model, gamma, s)?;
    let at = &model.atoms;
    let n = model.dims.n;
    let t = summed(model);
    let mtm = model.mtm();
    let sq = (n, n);
    let quad = |g: &Mat, sigma: &Mat| -> Mat {
        // G Σ⁻¹ G'
        let x = solve(sigma, &g.transpose()).expect("Σ checked positive definite");
        g * x
    };
    let lin = |x: &Mat, a: &Mat, c: &Mat, p: &Mat, e: &dyn Fn(&JumpAtom) -> Mat| -> Mat {
        x * a + a.transpose() * x + c.transpose() * p * c + jint(at, p, e, e, sq)
    };

    // P1
    let ac = &model.a + &model.b2 * &g.k2;
    let cc = &model.c + &model.d2 * &g.k2;
    let ec = |a: &JumpAtom| &a.e + &a.f2 * &g.k2;
    let g1 = &s.p1 * &model.b1
        + cc.transpose() * &s.p1 * &model.d1
        + jint(at, &s.p1, ec, |a| a.f1.clone(), (n, model.dims.nv));
    let dp1 = -lin(&s.p1, &ac, &cc, &s.p1, &ec) + &mtm + g.k2.transpose() * &g.k2 + quad(&g1, &sig.sigma0);

    // Q1
    let ac = &t.a + &t.b2 * &g.k2_sum;
    let cc = &t.c + &t.d2 * &g.k2_sum;
    let ec = |a: &JumpAtom| et(a) + f2t(a) * &g.k2_sum;
    let g1 = &s.q1 * &t.b1 + cc.transpose() * &s.p1 * &t.d1 + jint(at, &s.p1, ec, f1t, (n, model.dims.nv));
    let dq1 = -(&s.q1 * &ac + ac.transpose() * &s.q1 + cc.transpose() * &s.p1 * &cc + jint(at, &s.p1, ec, ec, sq))
        + &mtm
        + g.k2_sum.transpose() * &g.k2_sum
        + quad(&g1, &sig.sigma2);

    // P2
    let ac = &model.a + &model.b1 * &g.k1;
    let cc = &model.c + &model.d1 * &g.k1;
    let ec = |a: &JumpAtom| &a.e + &a.f1 * &g.k1;
    let g2 = &s.p2 * &model.b2
        + cc.transpose() * &s.p2 * &model.d2
        + jint(at, &s.p2, ec, |a| a.f2.clone(), (n, model.dims.nu));
    let dp2 = -lin(&s.p2, &ac, &cc, &s.p2, &ec) - &mtm + quad(&g2, &sig.sigma0_tilde);

    // Q2
    let ac = &t.a + &t.b1 * &g.k1_sum;
    let cc = &t.c + &t.d1 * &g.k1_sum;
    let ec = |a: &JumpAtom| et(a) + f1t(a) * &g.k1_sum;
    let g2 = &s.q2 * &t.b2 + cc.transpose() * &s.p2 * &t.d2 + jint(at, &s.p2, ec, f2t, (n, model.dims.nu));
    let dq2 = -(&s.q2 * &ac + ac.transpose() * &s.q2 + cc.transpose() * &s.p2 * &cc + jint(at, &s.p2, ec, ec, sq))
        - &mtm
        + quad(&g2, &sig.sigma2_tilde);

    let mut out = RiccatiState { p1: dp1, q1: dq1, p2: dp2, q2: dq2 };
    out.symmetrize();
    Ok(out)
}

/// Time derivatives with the gains held fixed: each equation becomes the
/// linear Lyapunov equation of the closed loop under `(u, v)` given by `g`.
/// Agrees with [`gdre_rhs`] when `g` is the output of [`gains_from`] at `s`.
pub fn frozen_rhs(model: &MeanFieldJumpModel, gamma: f64, s: &RiccatiState, g: &Gains) -> RiccatiState {
    let at = &model.atoms;
    let n = model.dims.n;
    let sq = (n, n);
    let t = summed(model);
    let mtm = model.mtm();
    let g2 = gamma * gamma;

    let af = &model.a + &model.b2 * &g.k2 + &model.b1 * &g.k1;
    let cf = &model.c + &model.d2 * &g.k2 + &model.d1 * &g.k1;
    let ef = |a: &JumpAtom| &a.e + &a.f2 * &g.k2 + &a.f1 * &g.k1;
    let lyap = |x: &Mat, p: &Mat, a: &Mat, c: &Mat, e: &dyn Fn(&JumpAtom) -> Mat| -> Mat {
        x * a + a.transpose() * x + c.transpose() * p * c + jint(at, p, e, e, sq)
    };
    let dp1 = -lyap(&s.p1, &s.p1, &af, &cf, &ef) + &mtm + g.k2.transpose() * &g.k2 - g.k1.transpose() * &g.k1 * g2;
    let dp2 = -lyap(&s.p2, &s.p2, &af, &cf, &ef) - &mtm - g.k2.transpose() * &g.k2;

    let am = &t.a + &t.b2 * &g.k2_sum + &t.b1 * &g.k1_sum;
    let cm = &t.c + &t.d2 * &g.k2_sum + &t.d1 * &g.k1_sum;
    let em = |a: &JumpAtom| et(a) + f2t(a) * &g.k2_sum + f1t(a) * &g.k1_sum;
    let dq1 = -lyap(&s.q1, &s.p1, &am, &cm, &em) + &mtm + g.k2_sum.transpose() * &g.k2_sum
        - g.k1_sum.transpose() * &g.k1_sum * g2;
    let dq2 = -lyap(&s.q2, &s.p2, &am, &cm, &em) - &mtm - g.k2_sum.transpose() * &g.k2_sum;
    let mut out = RiccatiState { p1: dp1, q1: dq1, p2: dp2, q2: dq2 };
    out.symmetrize();
    out
}

/// How gains are treated inside one RK4 step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GainMode {
    /// Gains computed once from the step's known end value and held fixed.
    #[default]
    Frozen,
    /// Gains recomputed at every RK4 stage.
    Stage,
}

impl std::str::FromStr for GainMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "frozen" | "paper" => Ok(GainMode::Frozen),
            "stage" => Ok(GainMode::Stage),
            other => Err(format!("unknown integrator mode {other:?} (expected frozen|stage)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub t: f64,
    pub which: SigmaName,
    pub min_eig: f64,
}

#[derive(Debug, Clone)]
pub struct RiccatiTrajectory {
    /// Grid points that were reached, ascending; the full grid when feasible.
    pub grid: Vec<f64>,
    pub states: Vec<RiccatiState>,
    pub gains: GainSchedule,
    /// Σ min-eigenvalues per grid point, order Σ0, Σ2, Σ̃0, Σ̃2.
    pub sigma_margins: Vec<[f64; 4]>,
    pub feasible: bool,
    pub failure: Option<Failure>,
    pub gamma: f64,
}

impl RiccatiTrajectory {
    pub fn initial(&self) -> &RiccatiState {
        &self.states[0]
    }
}

fn failure_of(e: RiccatiError, t: f64) -> Failure {
    match e {
        RiccatiError::SigmaNotPositive { name, min_eig } => Failure { t, which: name, min_eig },
        _ => Failure { t, which: SigmaName::NonFinite, min_eig: f64::NAN },
    }
}

/// Integrates the coupled system backward from zero terminal data.
///
/// Infeasibility (a Σ losing positive definiteness, or blow-up) is recorded in
/// the trajectory together with the part already computed.
pub fn solve_gdre(
    model: &MeanFieldJumpModel,
    gamma: f64,
    dt: f64,
    mode: GainMode,
) -> Result<RiccatiTrajectory, RiccatiError> {
    if !(gamma > 0.0) {
        return Err(RiccatiError::Gamma(gamma));
    }
    let grid = time_grid(model.horizon, dt)?;
    let n_steps = grid.len() - 1;
    let mut states = vec![RiccatiState::zeros(model.dims.n)];
    let mut gains: Vec<Gains> = Vec::new();
    let mut margins: Vec<[f64; 4]> = Vec::new();
    let mut failure = None;

    let mut y = RiccatiState::zeros(model.dims.n);
    for k in (0..n_steps).rev() {
        let (g, sig) = match gains_from(model, gamma, &y) {
            Ok(v) => v,
            Err(e) => {
                failure = Some(failure_of(e, grid[k + 1]));
                break;
            }
        };
        gains.push(g.clone());
        margins.push(sig.min_eig);
        let step = match mode {
            GainMode::Frozen => rk4_back(&grid, k, &y, |_, s| Ok::<_, RiccatiError>(frozen_rhs(model, gamma, s, &g))),
            GainMode::Stage => rk4_back(&grid, k, &y, |_, s| gdre_rhs(model, gamma, s)),
        };
        match step {
            Ok(mut next) if next.is_finite() => {
                next.symmetrize();
                y = next;
                states.push(y.clone());
            }
            Ok(_) => {
                failure = Some(Failure { t: grid[k], which: SigmaName::NonFinite, min_eig: f64::NAN });
                break;
            }
            Err(e) => {
                failure = Some(failure_of(e, grid[k + 1]));
                break;
            }
        }
    }
    if failure.is_none() {
        match gains_from(model, gamma, &y) {
            Ok((g, sig)) => {
                gains.push(g);
                margins.push(sig.min_eig);
            }
            Err(e) => failure = Some(failure_of(e, grid[0])),
        }
    }
    // Every stored state has gains except possibly the last one reached.
    states.truncate(gains.len());
    states.reverse();
    gains.reverse();
    margins.reverse();
    let start = grid.len() - states.len();
    let tail = grid[start..].to_vec();
    let schedule = GainSchedule {
        grid: tail.clone(),
        k1: gains.iter().map(|g| g.k1.clone()).collect(),
        k1_sum: gains.iter().map(|g| g.k1_sum.clone()).collect(),
        k2: gains.iter().map(|g| g.k2.clone()).collect(),
        k2_sum: gains.iter().map(|g| g.k2_sum.clone()).collect(),
    };
    Ok(RiccatiTrajectory {
        grid: tail,
        states,
        gains: schedule,
        sigma_margins: margins,
        feasible: failure.is_none(),
        failure,
        gamma,
    })
}

/// `(J1, J2)` for an initial state with the given mean and covariance.
pub fn value_at(traj: &RiccatiTrajectory, mean_x0: &Mat, cov_x0: &Mat) -> Result<(f64, f64), RiccatiError> {
    if !traj.feasible {
        return Err(RiccatiError::Infeasible);
    }
    let s = traj.initial();
    let j = |p: &Mat, q: &Mat| (p * cov_x0).trace() + (mean_x0.transpose() * q * mean_x0)[(0, 0)];
    Ok((j(&s.p1, &s.q1), j(&s.p2, &s.q2)))
}

#[derive(Debug, Clone)]
pub struct GammaProbe {
    pub gamma: f64,
    pub feasible: bool,
    pub failure: Option<Failure>,
}

#[derive(Debug, Clone)]
pub struct GammaSearch {
    pub gamma: f64,
    pub lo: f64,
    pub hi: f64,
    pub probes: Vec<GammaProbe>,
}

/// Bisection on the feasibility of [`solve_gdre`].
pub fn gamma_threshold(
    model: &MeanFieldJumpModel,
    gamma_lo: f64,
    gamma_hi: f64,
    tol: f64,
    dt: f64,
    mode: GainMode,
) -> Result<GammaSearch, RiccatiError> {
    if !(gamma_lo > 0.0 && gamma_lo < gamma_hi) {
        return Err(RiccatiError::BadBracket(format!("need 0 < lo < hi, got [{gamma_lo}, {gamma_hi}]")));
    }
    let mut probes = Vec::new();
    let mut probe = |g: f64| -> Result<bool, RiccatiError> {
        let tr = solve_gdre(model, g, dt, mode)?;
        probes.push(GammaProbe { gamma: g, feasible: tr.feasible, failure: tr.failure });
        Ok(tr.feasible)
    };
    if probe(gamma_lo)? {
        return Err(RiccatiError::BadBracket(format!("lower end {gamma_lo} is feasible")));
    }
    if !probe(gamma_hi)? {
        return Err(RiccatiError::BadBracket(format!("upper end {gamma_hi} is infeasible")));
    }
    let (mut lo, mut hi) = (gamma_lo, gamma_hi);
    while hi - lo >= tol {
        let mid = 0.5 * (lo + hi);
        if probe(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let gamma = 0.5 * (lo + hi);
    if let Some(p) = probes.iter().find(|p| (p.gamma > gamma) != p.feasible) {
        return Err(RiccatiError::NonMonotone(format!(
            "probe at {} was {} while the threshold is {gamma}",
            p.gamma,
            if p.feasible { "feasible" } else { "infeasible" }
        )));
    }
    Ok(GammaSearch { gamma, lo, hi, probes })
}

// ---------------------------------------------------------------------------
// Bounded real lemma

/// `Σ0(P)`, `G(P)` and the `P` derivative of the deviation equation.
fn brl_p(dm: &DisturbanceOnlyModel, gamma: f64, p: &Mat) -> (Mat, Mat, Mat) {
    let (n, nv) = (dm.n, dm.nv);
    let at = &dm.atoms;
    let w = |a: &crate::model::DisturbanceAtom| a.weight;
    let js = |l: &dyn Fn(&crate::model::DisturbanceAtom) -> Mat,
              r: &dyn Fn(&crate::model::DisturbanceAtom) -> Mat,
              shape: (usize, usize)| {
        if at.is_empty() {
            Mat::zeros(shape.0, shape.1)
        } else {
            jump_sum(at, w, p, l, r)
        }
    };
    let sigma0 = Mat::identity(nv, nv) * (gamma * gamma)
        + dm.d.transpose() * p * &dm.d
        + js(&|a| a.f.clone(), &|a| a.f.clone(), (nv, nv));
    let g = p * &dm.b + dm.c.transpose() * p * &dm.d + js(&|a| a.e.clone(), &|a| a.f.clone(), (n, nv));
    let lin = p * &dm.a
        + dm.a.transpose() * p
        + dm.c.transpose() * p * &dm.c
        + js(&|a| a.e.clone(), &|a| a.e.clone(), (n, n));
    (sigma0, g, lin)
}

/// `Σ2(P)`, `G̃(P, Q)` and the linear part of the mean equation.
fn brl_q(dm: &DisturbanceOnlyModel, gamma: f64, p: &Mat, q: &Mat) -> (Mat, Mat, Mat) {
    let (n, nv) = (dm.n, dm.nv);
    let at = &dm.atoms;
    let a = &dm.a + &dm.a_bar;
    let b = &dm.b + &dm.b_bar;
    let c = &dm.c + &dm.c_bar;
    let d = &dm.d + &dm.d_bar;
    let e = |x: &crate::model::DisturbanceAtom| &x.e + &x.e_bar;
    let f = |x: &crate::model::DisturbanceAtom| &x.f + &x.f_bar;
    let js = |l: &dyn Fn(&crate::model::DisturbanceAtom) -> Mat,
              r: &dyn Fn(&crate::model::DisturbanceAtom) -> Mat,
              shape: (usize, usize)| {
        if at.is_empty() {
            Mat::zeros(shape.0, shape.1)
        } else {
            jump_sum(at, |x| x.weight, p, l, r)
        }
    };
    let sigma2 = Mat::identity(nv, nv) * (gamma * gamma) + d.transpose() * p * &d + js(&f, &f, (nv, nv));
    let g = q * &b + c.transpose() * p * &d + js(&e, &f, (n, nv));
    let lin = q * &a + a.transpose() * q + c.transpose() * p * &c + js(&e, &e, (n, n));
    (sigma2, g, lin)
}

fn brl_p_rhs(dm: &DisturbanceOnlyModel, gamma: f64, p: &Mat) -> Result<Mat, RiccatiError> {
    let (sigma0, g, lin) = brl_p(dm, gamma, p);
    require_pd(&sigma0, SigmaName::Sigma0)?;
    let x = solve(&sigma0, &g.transpose())
        .ok_or(RiccatiError::SigmaNotPositive { name: SigmaName::Sigma0, min_eig: 0.0 })?;
    let mut out = -lin + dm.m.transpose() * &dm.m + &g * x;
    symmetrize(&mut out);
    Ok(out)
}

fn brl_q_rhs(dm: &DisturbanceOnlyModel, gamma: f64, p: &Mat, q: &Mat) -> Result<Mat, RiccatiError> {
    let (sigma2, g, lin) = brl_q(dm, gamma, p, q);
    require_pd(&sigma2, SigmaName::Sigma2)?;
    let x = solve(&sigma2, &g.transpose())
        .ok_or(RiccatiError::SigmaNotPositive { name: SigmaName::Sigma2, min_eig: 0.0 })?;
    let mo = &dm.m + &dm.m_bar;
    let mut out = -lin + mo.transpose() * &mo + &g * x;
    symmetrize(&mut out);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct BrlSolution {
    pub grid: Vec<f64>,
    pub p: Vec<Mat>,
    pub q: Vec<Mat>,
    /// Smallest eigenvalues of `Σ0(P)` and `Σ2(P)` per grid point.
    pub margins: Vec<[f64; 2]>,
    pub feasible: bool,
    pub failure: Option<Failure>,
}

/// Backward solution of the bounded-real-lemma pair.
///
/// `P` is integrated first on a grid refined by two, so that the `Q` sweep
/// reads `P` at its RK4 stage times by index.
pub fn solve_brl(sys: &dyn DisturbanceSystem, gamma: f64, dt: f64) -> Result<BrlSolution, RiccatiError> {
    if !(gamma > 0.0) {
        return Err(RiccatiError::Gamma(gamma));
    }
    let grid = time_grid(sys.horizon(), dt)?;
    let fine = time_grid(sys.horizon(), dt / 2.0)?;
    let n = sys.n();
    let nf = fine.len() - 1;
    let mut p_fine = vec![Mat::zeros(n, n); fine.len()];
    let mut failure = None;
    let mut reached = nf;
    for k in (0..nf).rev() {
        let step = rk4_back(&fine, k, &p_fine[k + 1], |st, p| brl_p_rhs(&sys.at(st.t), gamma, p));
        match step {
            Ok(p) if is_finite(&p) => {
                p_fine[k] = p;
                reached = k;
            }
            Ok(_) => {
                failure = Some(Failure { t: fine[k], which: SigmaName::NonFinite, min_eig: f64::NAN });
                break;
            }
            Err(e) => {
                failure = Some(failure_of(e, fine[k + 1]));
                break;
            }
        }
    }
    let nc = grid.len() - 1;
    let mut q = vec![Mat::zeros(n, n); grid.len()];
    let mut q_reached = nc;
    if failure.is_none() {
        for k in (0..nc).rev() {
            let step = rk4_back(&grid, k, &q[k + 1], |st, qq| {
                let idx = 2 * k + (2.0 * st.frac).round() as usize;
                brl_q_rhs(&sys.at(st.t), gamma, &p_fine[idx], qq)
            });
            match step {
                Ok(v) if is_finite(&v) => {
                    q[k] = v;
                    q_reached = k;
                }
                Ok(_) => {
                    failure = Some(Failure { t: grid[k], which: SigmaName::NonFinite, min_eig: f64::NAN });
                    break;
                }
                Err(e) => {
                    failure = Some(failure_of(e, grid[k + 1]));
                    break;
                }
            }
        }
    }
    let first = q_reached.max(reached.div_ceil(2));
    let mut out_p = Vec::new();
    let mut out_q = Vec::new();
    let mut margins = Vec::new();
    for k in first..grid.len() {
        let dm = sys.at(grid[k]);
        let p = p_fine[2 * k].clone();
        let (s0, _, _) = brl_p(&dm, gamma, &p);
        let (s2, _, _) = brl_q(&dm, gamma, &p, &q[k]);
        let m = [min_eig(&s0), min_eig(&s2)];
        if failure.is_none() && !(m[0] > PD_THRESHOLD && m[1] > PD_THRESHOLD) {
            let which = if m[0] > PD_THRESHOLD { SigmaName::Sigma2 } else { SigmaName::Sigma0 };
            failure = Some(Failure { t: grid[k], which, min_eig: m[0].min(m[1]) });
        }
        margins.push(m);
        out_p.push(p);
        out_q.push(q[k].clone());
    }
    Ok(BrlSolution { grid: grid[first..].to_vec(), p: out_p, q: out_q, margins, feasible: failure.is_none(), failure })
}

// ---------------------------------------------------------------------------
// Linear Lyapunov equations

/// Coefficients of `Ṗ + P Ã + Ã'P + C̃'P C̃ + Σ w Ẽ'P Ẽ + Q̃ = 0` at one time.
#[derive(Debug, Clone)]
pub struct LyapunovCoeffs {
    pub a: Mat,
    pub c: Mat,
    /// `(weight, Ẽ)` per jump atom.
    pub jumps: Vec<(f64, Mat)>,
    pub q: Mat,
}

fn lyap_rhs(co: &LyapunovCoeffs, p: &Mat) -> Mat {
    let mut lin = p * &co.a + co.a.transpose() * p + co.c.transpose() * p * &co.c + &co.q;
    for (w, e) in &co.jumps {
        lin += e.transpose() * p * e * *w;
    }
    let mut out = -lin;
    symmetrize(&mut out);
    out
}

/// Backward RK4 solution on `grid` with `P(T) = terminal`.
///
/// When every source sample and the terminal value are positive
/// semidefinite, the solution is checked to stay positive semidefinite
/// within 1e-9.
pub fn lyapunov_solve(
    grid: &[f64],
    mut coeffs: impl FnMut(Stage) -> LyapunovCoeffs,
    terminal: &Mat,
) -> Result<Vec<Mat>, RiccatiError> {
    let n_steps = grid.len() - 1;
    let mut out = vec![terminal.clone(); grid.len()];
    let mut psd_data = min_eig(terminal) >= -1e-12;
    for k in (0..n_steps).rev() {
        let next = rk4_back(grid, k, &out[k + 1], |st, p| {
            let co = coeffs(st);
            if psd_data && min_eig(&co.q) < -1e-12 {
                psd_data = false;
            }
            Ok::<_, RiccatiError>(lyap_rhs(&co, p))
        })?;
        out[k] = next;
    }
    if psd_data {
        for (k, p) in out.iter().enumerate() {
            let e = min_eig(p);
            if e < -1e-9 {
                return Err(RiccatiError::PositivityViolation { t: grid[k], min_eig: e });
            }
        }
    }
    Ok(out)
}

/// Constant-coefficient convenience wrapper around [`lyapunov_solve`].
pub fn lyapunov_solve_const(
    coeffs: &LyapunovCoeffs,
    terminal: &Mat,
    horizon: f64,
    dt: f64,
) -> Result<(Vec<f64>, Vec<Mat>), RiccatiError> {
    let grid = time_grid(horizon, dt)?;
    let sol = lyapunov_solve(&grid, |_| coeffs.clone(), terminal)?;
    Ok((grid, sol))
}

// ---------------------------------------------------------------------------
// Picard iteration

#[derive(Debug, Clone)]
pub struct PicardSolution {
    pub grid: Vec<f64>,
    pub p: Vec<Mat>,
    /// Every iterate, starting with the zero initial guess.
    pub history: Vec<Vec<Mat>>,
    pub iterations: usize,
}

/// `φ(P̂) = -Σ0(P̂)⁻¹ G(P̂)'`
fn worst_disturbance(dm: &DisturbanceOnlyModel, gamma: f64, p: &Mat) -> Result<Mat, RiccatiError> {
    let (sigma0, g, _) = brl_p(dm, gamma, p);
    require_pd(&sigma0, SigmaName::Sigma0)?;
    solve(&sigma0, &g.transpose())
        .map(|x| -x)
        .ok_or(RiccatiError::SigmaNotPositive { name: SigmaName::Sigma0, min_eig: 0.0 })
}

fn picard_coeffs(dm: &DisturbanceOnlyModel, gamma: f64, phi: &Mat) -> LyapunovCoeffs {
    LyapunovCoeffs {
        a: &dm.a + &dm.b * phi,
        c: &dm.c + &dm.d * phi,
        jumps: dm.atoms.iter().map(|at| (at.weight, &at.e + &at.f * phi)).collect(),
        q: -(dm.m.transpose() * &dm.m) + phi.transpose() * phi * (gamma * gamma),
    }
}

/// Solves the deviation equation of the bounded real lemma by successive
/// linear solves, starting from `P̂ = 0`.
///
/// Between grid points the previous iterate is evaluated by cubic Hermite
/// interpolation using its own time derivative.
pub fn picard_solve(
    sys: &dyn DisturbanceSystem,
    gamma: f64,
    dt: f64,
    tol: f64,
    max_iter: usize,
) -> Result<PicardSolution, RiccatiError> {
    if !(gamma > 0.0) {
        return Err(RiccatiError::Gamma(gamma));
    }
    let grid = time_grid(sys.horizon(), dt)?;
    let n = sys.n();
    let zero = vec![Mat::zeros(n, n); grid.len()];
    let mut history = vec![zero.clone()];
    let mut prev = zero.clone();
    let mut prev_dot = zero;
    for it in 1..=max_iter {
        let lookup = |st: Stage| -> Result<LyapunovCoeffs, RiccatiError> {
            let k = st.step;
            let h = grid[k + 1] - grid[k];
            let p_hat = if st.frac <= 0.0 {
                prev[k].clone()
            } else if st.frac >= 1.0 {
                prev[k + 1].clone()
            } else {
                hermite(&prev[k], &prev_dot[k], &prev[k + 1], &prev_dot[k + 1], h, st.frac)
            };
            let dm = sys.at(st.t);
            let phi = worst_disturbance(&dm, gamma, &p_hat)?;
            Ok(picard_coeffs(&dm, gamma, &phi))
        };
        // Surface Σ failures from inside the linear solve.
        let mut err = None;
        let next = lyapunov_solve(
            &grid,
            |st| match lookup(st) {
                Ok(c) => c,
                Err(e) => {
                    err.get_or_insert(e);
                    let z = Mat::zeros(n, n);
                    LyapunovCoeffs { a: z.clone(), c: z.clone(), jumps: Vec::new(), q: z }
                }
            },
            &Mat::zeros(n, n),
        );
        let next = match (next, err) {
            (Ok(p), None) => p,
            (_, Some(_)) | (Err(_), _) => {
                return Err(RiccatiError::NoConvergence {
                    iterations: it,
                    last_step: f64::INFINITY,
                    last: prev.clone(),
                    previous: history.last().cloned().unwrap_or_default(),
                })
            }
        };
        let dot: Vec<Mat> = (0..grid.len())
            .map(|k| {
                let dm = sys.at(grid[k]);
                let phi = worst_disturbance(&dm, gamma, &prev[k]).unwrap_or_else(|_| Mat::zeros(dm.nv, n));
                lyap_rhs(&picard_coeffs(&dm, gamma, &phi), &next[k])
            })
            .collect();
        let step = next.iter().zip(&prev).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        history.push(next.clone());
        if !step.is_finite() {
            return Err(RiccatiError::NoConvergence { iterations: it, last_step: step, last: next, previous: prev });
        }
        if step < tol {
            return Ok(PicardSolution { grid, p: next, history, iterations: it });
        }
        prev = next;
        prev_dot = dot;
    }
    let last = history[history.len() - 1].clone();
    let previous = history[history.len() - 2].clone();
    let last_step = last.iter().zip(&previous).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    Err(RiccatiError::NoConvergence { iterations: max_iter, last_step, last, previous })
}

// ---------------------------------------------------------------------------
// Zero-sum saddle-point equations (continuous system, `P, Q ⪰ 0`)

/// Saddle-point gains at one time: `u = L (x - Ex) + L̃ Ex`, `v = F (x - Ex) + F̃ Ex`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleGains {
    pub l: Mat,
    pub l_mean: Mat,
    pub f: Mat,
    pub f_mean: Mat,
}

#[derive(Debug, Clone)]
pub struct SaddleSolution {
    pub grid: Vec<f64>,
    pub p: Vec<Mat>,
    pub q: Vec<Mat>,
    pub gains: Vec<SaddleGains>,
    /// Smallest eigenvalues of `γ²I - D1'PD1` and of its mean-channel analogue.
    pub margins: Vec<[f64; 2]>,
    pub feasible: bool,
}

/// Joint `[u; v]` block data: `S = [B2'X + D2'P C; B1'X + D1'P C]` and
/// `R = [[I + D2'PD2, D2'PD1]; [D1'PD2, D1'PD1 - γ²I]]`. With `γ = ∞` the
/// disturbance block is dropped.
fn saddle_blocks(x: &Mat, p: &Mat, b1: &Mat, b2: &Mat, c: &Mat, d1: &Mat, d2: &Mat, gamma: f64) -> (Mat, Mat) {
    let (nu, nv, n) = (b2.ncols(), b1.ncols(), x.nrows());
    let top = b2.transpose() * x + d2.transpose() * p * c;
    let ruu = Mat::identity(nu, nu) + d2.transpose() * p * d2;
    if gamma.is_infinite() {
        return (top, ruu);
    }
    let mut s = Mat::zeros(nu + nv, n);
    s.view_mut((0, 0), (nu, n)).copy_from(&top);
    s.view_mut((nu, 0), (nv, n)).copy_from(&(b1.transpose() * x + d1.transpose() * p * c));
    let mut r = Mat::zeros(nu + nv, nu + nv);
    r.view_mut((0, 0), (nu, nu)).copy_from(&ruu);
    let ruv = d2.transpose() * p * d1;
    r.view_mut((0, nu), (nu, nv)).copy_from(&ruv);
    r.view_mut((nu, 0), (nv, nu)).copy_from(&ruv.transpose());
    r.view_mut((nu, nu), (nv, nv)).copy_from(&(d1.transpose() * p * d1 - Mat::identity(nv, nv) * (gamma * gamma)));
    (s, r)
}

fn split_gains(k: Mat, nu: usize, nv: usize, gamma: f64) -> (Mat, Mat) {
    if gamma.is_infinite() {
        let n = k.ncols();
        return (k, Mat::zeros(nv, n));
    }
    let n = k.ncols();
    (k.rows(0, nu).into_owned(), k.rows(nu, nv).into_owned().reshape_generic(nalgebra::Dyn(nv), nalgebra::Dyn(n)))
}

/// Backward solution of the saddle-point equations for a jump-free model,
/// with `γ = f64::INFINITY` giving the mean-field LQ regulator.
///
/// The coupling between control and disturbance through `D2'PD1` is kept:
/// the gains solve the joint block system, which is the fixed point of the
/// alternating improvement steps.
pub fn solve_saddle(model: &MeanFieldJumpModel, gamma: f64, dt: f64) -> Result<SaddleSolution, RiccatiError> {
    if model.has_jumps() {
        return Err(RiccatiError::HasJumps);
    }
    if !(gamma > 0.0) {
        return Err(RiccatiError::Gamma(gamma));
    }
    let grid = time_grid(model.horizon, dt)?;
    let fine = time_grid(model.horizon, dt / 2.0)?;
    let n = model.dims.n;
    let (nu, nv) = (model.dims.nu, model.dims.nv);
    let mtm = model.mtm();
    let t = summed(model);

    let p_rhs = |p: &Mat| -> Result<Mat, RiccatiError> {
        let (s, r) = saddle_blocks(p, p, &model.b1, &model.b2, &model.c, &model.d1, &model.d2, gamma);
        let k = solve(&r, &s).ok_or(RiccatiError::CouplingSingular)?;
        let mut out =
            -(p * &model.a + model.a.transpose() * p + model.c.transpose() * p * &model.c + &mtm - s.transpose() * k);
        symmetrize(&mut out);
        Ok(out)
    };
    let q_rhs = |p: &Mat, q: &Mat| -> Result<Mat, RiccatiError> {
        let (s, r) = saddle_blocks(q, p, &t.b1, &t.b2, &t.c, &t.d1, &t.d2, gamma);
        let k = solve(&r, &s).ok_or(RiccatiError::CouplingSingular)?;
        let mut out = -(q * &t.a + t.a.transpose() * q + t.c.transpose() * p * &t.c + &mtm - s.transpose() * k);
        symmetrize(&mut out);
        Ok(out)
    };

    let nf = fine.len() - 1;
    let mut p_fine = vec![Mat::zeros(n, n); fine.len()];
    let mut feasible = true;
    for k in (0..nf).rev() {
        match rk4_back(&fine, k, &p_fine[k + 1], |_, p| p_rhs(p)) {
            Ok(p) if is_finite(&p) => p_fine[k] = p,
            _ => {
                feasible = false;
                break;
            }
        }
    }
    let nc = grid.len() - 1;
    let mut q = vec![Mat::zeros(n, n); grid.len()];
    if feasible {
        for k in (0..nc).rev() {
            let step = rk4_back(&grid, k, &q[k + 1], |st, qq| {
                let idx = 2 * k + (2.0 * st.frac).round() as usize;
                q_rhs(&p_fine[idx], qq)
            });
            match step {
                Ok(v) if is_finite(&v) => q[k] = v,
                _ => {
                    feasible = false;
                    break;
                }
            }
        }
    }
    let p: Vec<Mat> = (0..grid.len()).map(|k| p_fine[2 * k].clone()).collect();
    let mut gains = Vec::with_capacity(grid.len());
    let mut margins = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let (s, r) = saddle_blocks(&p[k], &p[k], &model.b1, &model.b2, &model.c, &model.d1, &model.d2, gamma);
        let kk = solve(&r, &s).map(|x| -x).unwrap_or_else(|| Mat::from_element(s.nrows(), n, f64::NAN));
        let (l, f) = split_gains(kk, nu, nv, gamma);
        let (sm, rm) = saddle_blocks(&q[k], &p[k], &t.b1, &t.b2, &t.c, &t.d1, &t.d2, gamma);
        let km = solve(&rm, &sm).map(|x| -x).unwrap_or_else(|| Mat::from_element(sm.nrows(), n, f64::NAN));
        let (l_mean, f_mean) = split_gains(km, nu, nv, gamma);
        let margin = if gamma.is_infinite() {
            [f64::INFINITY, f64::INFINITY]
        } else {
            let g2 = Mat::identity(nv, nv) * (gamma * gamma);
            [
                min_eig(&(&g2 - model.d1.transpose() * &p[k] * &model.d1)),
                min_eig(&(&g2 - t.d1.transpose() * &p[k] * &t.d1)),
            ]
        };
        if !(margin[0] > PD_THRESHOLD && margin[1] > PD_THRESHOLD) {
            feasible = false;
        }
        margins.push(margin);
        gains.push(SaddleGains { l, l_mean, f, f_mean });
    }
    Ok(SaddleSolution { grid, p, q, gains, margins, feasible })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{asymmetry, max_abs};
    use crate::model::{ClosedLoop, Dims};
    use proptest::prelude::*;

    fn example() -> MeanFieldJumpModel {
        MeanFieldJumpModel::two_state_example()
    }

    #[test]
    fn zero_state_gives_zero_gains_and_bare_sigmas() {
        let m = example();
        let (g, s) = gains_from(&m, 5.0, &RiccatiState::zeros(2)).unwrap();
        for k in [&g.k1, &g.k1_sum, &g.k2, &g.k2_sum] {
            assert_eq!(k.norm(), 0.0);
        }
        assert_eq!(s.sigma0, Mat::from_element(1, 1, 25.0));
        assert_eq!(s.sigma2, Mat::from_element(1, 1, 25.0));
        assert_eq!(s.sigma0_tilde, Mat::identity(1, 1));
        assert_eq!(s.sigma2_tilde, Mat::identity(1, 1));
    }

    #[test]
    fn scalar_control_gain() {
        let mut m = MeanFieldJumpModel::zeros(Dims::new(1, 1, 1), 1.0);
        m.a[(0, 0)] = 0.7;
        m.b1[(0, 0)] = 1.0;
        m.b2[(0, 0)] = 1.0;
        m.m[(0, 0)] = 1.0;
        let mut s = RiccatiState::zeros(1);
        s.p2[(0, 0)] = 0.4;
        let (g, _) = gains_from(&m, 2.0, &s).unwrap();
        assert!((g.k2[(0, 0)] + 0.4).abs() < 1e-15);
    }

    #[test]
    fn terminal_derivatives() {
        let m = example();
        let d = gdre_rhs(&m, 5.0, &RiccatiState::zeros(2)).unwrap();
        assert_eq!(d.p1, Mat::identity(2, 2));
        assert_eq!(d.q1, Mat::identity(2, 2));
        assert_eq!(d.p2, -Mat::identity(2, 2));
        assert_eq!(d.q2, -Mat::identity(2, 2));
    }

    #[test]
    fn zero_model_has_zero_derivative_and_trajectory() {
        let m = MeanFieldJumpModel::zeros(Dims::new(2, 1, 1), 1.0);
        let d = gdre_rhs(&m, 1.0, &RiccatiState::zeros(2)).unwrap();
        assert!(d.mats().iter().all(|x| x.norm() == 0.0));
        let tr = solve_gdre(&m, 1.0, 0.1, GainMode::Frozen).unwrap();
        assert!(tr.feasible);
        assert!(tr.states.iter().all(|s| s.mats().iter().all(|x| x.norm() == 0.0)));
    }

    #[test]
    fn example_feasible_with_expected_signs() {
        let tr = solve_gdre(&example(), 5.0, 1e-3, GainMode::Frozen).unwrap();
        assert!(tr.feasible);
        assert_eq!(tr.grid.len(), 101);
        let last = tr.states.last().unwrap();
        assert!(last.mats().iter().all(|x| x.norm() == 0.0));
        for (s, t) in tr.states.iter().zip(&tr.grid) {
            for x in s.mats() {
                assert!(asymmetry(x) <= 1e-12);
            }
            if *t < 0.1 - 1e-9 {
                assert!(crate::linalg::max_eig(&s.p1) < 0.0);
                assert!(crate::linalg::max_eig(&s.q1) < 0.0);
                assert!(min_eig(&s.p2) > 0.0);
                assert!(min_eig(&s.q2) > 0.0);
            }
        }
    }

    #[test]
    fn small_gamma_is_infeasible_with_location() {
        let tr = solve_gdre(&example(), 0.01, 1e-3, GainMode::Frozen).unwrap();
        assert!(!tr.feasible);
        let f = tr.failure.unwrap();
        assert!(matches!(f.which, SigmaName::Sigma0 | SigmaName::Sigma2));
        assert!(f.t < 0.1 && f.t > 0.09);
    }

    #[test]
    fn bad_step_rejected() {
        assert!(matches!(solve_gdre(&example(), 5.0, 0.03, GainMode::Frozen), Err(RiccatiError::Step { .. })));
    }

    #[test]
    fn frozen_and_stage_modes_agree_to_first_order() {
        let a = solve_gdre(&example(), 5.0, 1e-3, GainMode::Frozen).unwrap();
        let b = solve_gdre(&example(), 5.0, 1e-3, GainMode::Stage).unwrap();
        let d = a.states.iter().zip(&b.states).map(|(x, y)| (&x.p1 - &y.p1).norm()).fold(0.0, f64::max);
        assert!(d < 1e-3, "{d}");
    }

    #[test]
    fn value_at_examples() {
        let tr = solve_gdre(&example(), 5.0, 1e-3, GainMode::Frozen).unwrap();
        let (j1, j2) = value_at(&tr, &Mat::zeros(2, 1), &Mat::zeros(2, 2)).unwrap();
        assert_eq!((j1, j2), (0.0, 0.0));
        let x0 = Mat::from_column_slice(2, 1, &[1.0, 1.0]);
        let (j1, j2) = value_at(&tr, &x0, &Mat::zeros(2, 2)).unwrap();
        let q1 = &tr.states[0].q1;
        assert!((j1 - (x0.transpose() * q1 * &x0)[(0, 0)]).abs() < 1e-15);
        assert!(j1 < 0.0 && j2 > 0.0);
    }

    #[test]
    fn gamma_bracket_errors() {
        let m = example();
        assert!(matches!(
            gamma_threshold(&m, 5.0, 0.1, 1e-3, 1e-3, GainMode::Frozen),
            Err(RiccatiError::BadBracket(_))
        ));
        let mut zero_out = m.clone();
        zero_out.m = Mat::zeros(2, 2);
        assert!(matches!(
            gamma_threshold(&zero_out, 0.1, 5.0, 1e-3, 1e-3, GainMode::Frozen),
            Err(RiccatiError::BadBracket(_))
        ));
    }

    #[test]
    fn lyapunov_examples() {
        let z = Mat::zeros(2, 2);
        let co = LyapunovCoeffs { a: z.clone(), c: z.clone(), jumps: vec![], q: z.clone() };
        let (_, p) = lyapunov_solve_const(&co, &z, 1.0, 0.01).unwrap();
        assert!(p.iter().all(|x| x.norm() == 0.0));

        let co = LyapunovCoeffs { q: Mat::identity(2, 2), ..co };
        let (g, p) = lyapunov_solve_const(&co, &z, 1.0, 0.01).unwrap();
        for (t, x) in g.iter().zip(&p) {
            assert!((x - Mat::identity(2, 2) * (1.0 - t)).norm() < 1e-13);
        }

        let one = Mat::identity(1, 1);
        let co = LyapunovCoeffs { a: one.clone(), c: Mat::zeros(1, 1), jumps: vec![], q: one };
        let (g, p) = lyapunov_solve_const(&co, &Mat::zeros(1, 1), 1.0, 0.01).unwrap();
        for (t, x) in g.iter().zip(&p) {
            let exact = ((2.0 * (1.0 - t)).exp() - 1.0) / 2.0;
            assert!((x[(0, 0)] - exact).abs() < 1e-8);
        }
    }

    #[test]
    fn lyapunov_positivity_post_check_fires_on_coarse_step() {
        // A fast rotation under a single huge RK4 step loses definiteness.
        let co = LyapunovCoeffs {
            a: Mat::from_row_slice(2, 2, &[0.0, 3.0, -3.0, 0.0]),
            c: Mat::zeros(2, 2),
            jumps: vec![],
            q: Mat::zeros(2, 2),
        };
        let terminal = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let r = lyapunov_solve_const(&co, &terminal, 1.0, 1.0);
        assert!(matches!(r, Err(RiccatiError::PositivityViolation { .. })));
        assert!(lyapunov_solve_const(&co, &terminal, 1.0, 1e-3).is_ok());
    }

    #[test]
    fn brl_zero_output_is_zero() {
        let mut dm = DisturbanceOnlyModel::scalar(0.3, 1.0, 0.0, 1.0);
        dm.c[(0, 0)] = 0.5;
        let s = solve_brl(&dm, 0.5, 0.01).unwrap();
        assert!(s.feasible);
        assert!(s.p.iter().chain(&s.q).all(|x| x.norm() == 0.0));
        let pc = picard_solve(&dm, 0.5, 0.01, 1e-12, 10).unwrap();
        assert_eq!(pc.iterations, 1);
    }

    #[test]
    fn brl_scalar_tangent() {
        let gamma = 1.3;
        let dm = DisturbanceOnlyModel::scalar(0.0, 1.0, 1.0, 1.0);
        let s = solve_brl(&dm, gamma, 1e-3).unwrap();
        assert!(s.feasible);
        for (t, p) in s.grid.iter().zip(&s.p) {
            let exact = -gamma * ((1.0 - t) / gamma).tan();
            assert!((p[(0, 0)] - exact).abs() < 1e-9);
        }
    }

    #[test]
    fn closed_loop_brl_reproduces_disturbance_equations() {
        let m = example();
        let tr = solve_gdre(&m, 5.0, 1e-3, GainMode::Stage).unwrap();
        let cl = ClosedLoop { model: &m, gains: &tr.gains };
        let b = solve_brl(&cl, 5.0, 1e-3).unwrap();
        assert!(b.feasible);
        let dp = tr.states.iter().zip(&b.p).map(|(s, p)| max_abs(&(&s.p1 - p))).fold(0.0, f64::max);
        let dq = tr.states.iter().zip(&b.q).map(|(s, q)| max_abs(&(&s.q1 - q))).fold(0.0, f64::max);
        assert!(dp < 1e-6 && dq < 1e-6, "{dp} {dq}");
    }

    #[test]
    fn saddle_lqr_limit_has_no_disturbance_gain() {
        let m = example().without_jumps();
        let s = solve_saddle(&m, f64::INFINITY, 1e-3).unwrap();
        assert!(s.feasible);
        assert!(s.gains.iter().all(|g| g.f.norm() == 0.0 && g.f_mean.norm() == 0.0));
        assert!(s.p.iter().all(|p| min_eig(p) >= -1e-12));
    }

    fn small_state() -> impl Strategy<Value = RiccatiState> {
        // Sign pattern of the solution: P1, Q1 ⪯ 0 and P2, Q2 ⪰ 0.
        let psd = || {
            (-0.5..0.5f64, -0.5..0.5f64, -0.5..0.5f64).prop_map(|(a, b, c)| {
                let l = Mat::from_row_slice(2, 2, &[a, 0.0, b, c]);
                &l * l.transpose()
            })
        };
        (psd(), psd(), psd(), psd()).prop_map(|(p1, q1, p2, q2)| RiccatiState { p1: -p1, q1: -q1, p2, q2 })
    }

    proptest! {
        #[test]
        fn riccati_form_equals_closed_loop_form_at_optimal_gains(s in small_state()) {
            let m = example();
            let (g, _) = gains_from(&m, 5.0, &s).unwrap();
            let a = gdre_rhs(&m, 5.0, &s).unwrap();
            let b = frozen_rhs(&m, 5.0, &s, &g);
            for (x, y) in a.mats().iter().zip(b.mats()) {
                prop_assert!((*x - y).norm() < 1e-10, "{}", (*x - y).norm());
            }
        }

        #[test]
        fn gains_satisfy_both_stationarity_conditions(s in small_state()) {
            // K2 = -Σ̃0⁻¹ G2'(K1) and K1 = -Σ0⁻¹ G1'(K2) simultaneously.
            let m = example();
            let (g, sig) = gains_from(&m, 5.0, &s).unwrap();
            let at = &m.atoms[0];
            let g2t = m.b2.transpose() * &s.p2 + m.d2.transpose() * &s.p2 * (&m.c + &m.d1 * &g.k1)
                + at.f2.transpose() * &s.p2 * (&at.e + &at.f1 * &g.k1) * at.weight;
            prop_assert!((&sig.sigma0_tilde * &g.k2 + g2t).norm() < 1e-11);
            let g1t = m.b1.transpose() * &s.p1 + m.d1.transpose() * &s.p1 * (&m.c + &m.d2 * &g.k2)
                + at.f1.transpose() * &s.p1 * (&at.e + &at.f2 * &g.k2) * at.weight;
            prop_assert!((&sig.sigma0 * &g.k1 + g1t).norm() < 1e-11);
        }

        #[test]
        fn rhs_is_symmetric(s in small_state()) {
            let d = gdre_rhs(&example(), 5.0, &s).unwrap();
            for x in d.mats() {
                prop_assert!(asymmetry(x) <= 1e-12);
            }
        }
    }
}
