//! Invariant checks on a model file, one PASS/FAIL line each.

use crate::commands::feasible_trajectory;
use crate::output::OutDir;
use crate::{load_model, positive, positive_count, Common};
use anyhow::Result;
use mfrobust::exec::Execution;
use mfrobust::linalg::{max_abs, max_eig, min_eig, Mat, Vector};
use mfrobust::model::{ClosedLoop, MeanFieldJumpModel};
use mfrobust::riccati::{gamma_threshold, picard_solve, solve_brl, solve_gdre, value_at, GainMode, RiccatiTrajectory};
use mfrobust::rl::{g_len, smat, svec, xbar, XiVector, CORE_BLOCKS};
use mfrobust::simulate::{
    empirical_gain, estimate_cost, simulate, CostKind, Exploration, FeedbackSchedule, InitialState, NoiseSpec,
    PolicySpec, Recording, SimOptions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Ctx {
    model: MeanFieldJumpModel,
    gamma: f64,
    dt: f64,
    particles: usize,
    lo: f64,
    seed: u64,
}

type Check = fn(&Ctx, &RiccatiTrajectory) -> Result<(bool, String)>;

fn signs(c: &Ctx, tr: &RiccatiTrajectory) -> Result<(bool, String)> {
    let cut = 0.9 * c.model.horizon;
    let sigma = tr.sigma_margins.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let (mut neg, mut pos, mut strict) = (f64::NEG_INFINITY, f64::INFINITY, f64::INFINITY);
    for (t, s) in tr.grid.iter().zip(&tr.states) {
        let hi = max_eig(&s.p1).max(max_eig(&s.q1));
        let lo = min_eig(&s.p2).min(min_eig(&s.q2));
        neg = neg.max(hi);
        pos = pos.min(lo);
        if *t <= cut {
            strict = strict.min(-hi).min(lo);
        }
    }
    Ok((
        sigma > 0.0 && neg <= 1e-9 && pos >= -1e-9 && strict > 1e-6,
        format!("min Σ eigenvalue {sigma:.3e}, max eig P1/Q1 {neg:.2e}, min eig P2/Q2 {pos:.2e}, margin before 0.9T {strict:.2e}"),
    ))
}

fn determinants(_: &Ctx, tr: &RiccatiTrajectory) -> Result<(bool, String)> {
    let worst = tr.states.iter().flat_map(|s| s.mats().map(|m| m.determinant())).fold(f64::INFINITY, f64::min);
    let end = tr.states.last().map_or(0.0, |s| s.mats().iter().map(|m| m.determinant().abs()).fold(0.0, f64::max));
    Ok((worst >= -1e-12 && end == 0.0, format!("min det {worst:.3e}, |det| at T {end:.1e}")))
}

fn refinement(c: &Ctx, _: &RiccatiTrajectory) -> Result<(bool, String)> {
    let sols = (0..4)
        .map(|k| solve_gdre(&c.model, c.gamma, c.dt / f64::from(1 << k), GainMode::Frozen))
        .collect::<Result<Vec<_>, _>>()?;
    if sols.iter().any(|s| !s.feasible) {
        return Ok((false, "a refined solve is infeasible".into()));
    }
    let d: Vec<f64> = sols
        .windows(2)
        .map(|w| {
            w[0].states
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    let o = &w[1].states[2 * k];
                    s.mats().iter().zip(o.mats()).map(|(x, y)| (*x - y).norm()).fold(0.0, f64::max)
                })
                .fold(0.0, f64::max)
        })
        .collect();
    Ok((d[0] > d[1] && d[1] > d[2], format!("distances {:.3e} {:.3e} {:.3e}", d[0], d[1], d[2])))
}

fn oracles(c: &Ctx, tr: &RiccatiTrajectory) -> Result<(bool, String)> {
    let cl = ClosedLoop { model: &c.model, gains: &tr.gains };
    let brl = solve_brl(&cl, c.gamma, c.dt)?;
    let pic = picard_solve(&cl, c.gamma, c.dt, 1e-12, 200)?;
    let gap = pic.p.iter().zip(&brl.p).map(|(a, b)| max_abs(&(a - b))).fold(0.0, f64::max);
    let mut rise = f64::NEG_INFINITY;
    for w in pic.history.windows(2) {
        for (a, b) in w[0].iter().zip(&w[1]) {
            rise = rise.max(max_eig(&(b - a)));
        }
    }
    Ok((gap < 1e-5 && rise <= 1e-9, format!("Picard vs direct {gap:.2e}, max iterate rise {rise:.2e}")))
}

fn value(c: &Ctx, tr: &RiccatiTrajectory) -> Result<(bool, String)> {
    let n = c.model.dims.n;
    let (j1, j2) = value_at(tr, &Mat::from_element(n, 1, 1.0), &Mat::zeros(n, n))?;
    let b = simulate(
        &c.model,
        &PolicySpec::Feedback { schedule: FeedbackSchedule::control(&tr.gains), exploration: None },
        &PolicySpec::Feedback { schedule: FeedbackSchedule::disturbance(&tr.gains), exploration: None },
        &NoiseSpec { seed: c.seed, particles: c.particles, dt: c.dt },
        &InitialState::Point(Vector::from_element(n, 1.0)),
        SimOptions { recording: Recording::Summary, execution: Execution::Parallel },
    )?;
    let (e1, s1) = estimate_cost(&b, CostKind::J1, c.gamma);
    let (e2, s2) = estimate_cost(&b, CostKind::J2, c.gamma);
    let (z1, z2) = ((e1 - j1) / s1, (e2 - j2) / s2);
    Ok((
        z1.abs() < 3.0 && z2.abs() < 3.0,
        format!("J1 {e1:.4} vs {j1:.4} ({z1:+.2} SE), J2 {e2:.4} vs {j2:.4} ({z2:+.2} SE)"),
    ))
}

fn attenuation(c: &Ctx, tr: &RiccatiTrajectory) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for r in 0..20u64 {
        let b = simulate(
            &c.model,
            &PolicySpec::Feedback { schedule: FeedbackSchedule::control(&tr.gains), exploration: None },
            &PolicySpec::External(Exploration::white(c.seed.wrapping_add(1000 + r), 1.0)),
            &NoiseSpec { seed: c.seed.wrapping_add(r), particles: (c.particles / 10).max(1), dt: c.dt },
            &InitialState::Point(Vector::zeros(c.model.dims.n)),
            SimOptions { recording: Recording::Summary, execution: Execution::Parallel },
        )?;
        worst = worst.max(empirical_gain(&b)?);
    }
    Ok((worst < c.gamma, format!("largest ‖z‖/‖v‖ over 20 disturbances {worst:.4}")))
}

fn threshold(c: &Ctx, _: &RiccatiTrajectory) -> Result<(bool, String)> {
    let s = match gamma_threshold(&c.model, c.lo, c.gamma, 1e-3, c.dt, GainMode::Frozen) {
        Ok(s) => s,
        Err(e) => return Ok((false, e.to_string())),
    };
    let above = solve_gdre(&c.model, 2.0 * s.gamma, c.dt, GainMode::Frozen)?.feasible;
    let below = solve_gdre(&c.model, 0.5 * s.gamma, c.dt, GainMode::Frozen)?.feasible;
    let width = s.hi - s.lo;
    Ok((
        width < 1e-3 && above && !below,
        format!("γ* = {:.5}, width {width:.1e}, 2γ* feasible={above}, γ*/2 feasible={below}", s.gamma),
    ))
}

fn encodings(c: &Ctx, _: &RiccatiTrajectory) -> Result<(bool, String)> {
    let mut r = ChaCha8Rng::seed_from_u64(c.seed);
    let (mut exact, mut worst) = (true, 0.0f64);
    for _ in 0..100 {
        let n = r.random_range(1..=4);
        let a = Mat::from_fn(n, n, |_, _| r.random_range(-5.0..5.0));
        let p = (&a + a.transpose()) * 0.5;
        let v = svec(&p)?;
        exact &= smat(&v, n) == p;
        let x: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let xv = Vector::from_vec(x.clone());
        let quad = (xv.transpose() * &p * &xv)[(0, 0)];
        let lin: f64 = v.iter().zip(xbar(&x)).map(|(a, b)| a * b).sum();
        worst = worst.max((quad - lin).abs() / (1.0 + quad.abs()));
    }
    let d = c.model.dims;
    let len_ok = XiVector::zeros(d).encode(&CORE_BLOCKS).len() == g_len(d);
    Ok((
        exact && worst <= 1e-12 && len_ok,
        format!("round trip exact={exact}, quadratic-form error {worst:.1e}, g = {} for this model", g_len(d)),
    ))
}

/// Runs every check; `Ok(false)` when at least one fails.
pub fn run(common: &Common, dt: f64, particles: usize, lo: f64) -> Result<bool> {
    positive("gamma", common.gamma)?;
    positive("dt", dt)?;
    positive("lo", lo)?;
    positive_count("particles", particles)?;
    let model = load_model(&common.model)?;
    let out = OutDir::create(&common.out)?;
    let ctx = Ctx { model, gamma: common.gamma, dt, particles, lo, seed: common.seed };
    let tr = feasible_trajectory(&ctx.model, ctx.gamma, dt)?;
    let checks: [(&str, Check); 8] = [
        ("sign structure", signs),
        ("determinant signs", determinants),
        ("step refinement", refinement),
        ("bounded-real oracles", oracles),
        ("value identity", value),
        ("attenuation", attenuation),
        ("gamma threshold", threshold),
        ("encoding identities", encodings),
    ];
    let mut lines = Vec::new();
    let mut failed = 0;
    for (name, f) in checks {
        let (ok, detail) = match f(&ctx, &tr) {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e:#}")),
        };
        failed += usize::from(!ok);
        lines.push(format!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" }));
    }
    lines.push(format!("{} of {} checks passed", checks.len() - failed, checks.len()));
    out.report("verify_report.txt", &lines)?;
    Ok(failed == 0)
}
