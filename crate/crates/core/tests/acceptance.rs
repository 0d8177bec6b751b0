//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use mfrobust::exec::Execution;
use mfrobust::linalg::{max_abs, max_eig, min_eig, Mat, Vector};
use mfrobust::model::Dims;
use mfrobust::model::{ClosedLoop, DisturbanceOnlyModel, MeanFieldJumpModel};
use mfrobust::riccati::{
    gamma_threshold, picard_solve, solve_brl, solve_gdre, solve_saddle, value_at, GainMode, RiccatiTrajectory,
};
use mfrobust::rl::{
    assemble, behavior_from, collect, g_len, interval_grid, learn, pe_oracle, population_starts, smat, svec, true_xi,
    xbar, ExactPlant, PiecewiseGains, RlSettings, SampledPlant, TargetGains, XiVector, BLOCK_ORDER, CORE_BLOCKS,
};
use mfrobust::simulate::{
    empirical_gain, estimate_cost, simulate, CostKind, Exploration, FeedbackSchedule, InitialState, NoiseSpec,
    PolicySpec, Recording, SimOptions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

const GAMMA: f64 = 5.0;
const DT: f64 = 1e-3;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn example() -> MeanFieldJumpModel {
    MeanFieldJumpModel::two_state_example()
}

fn reference() -> RiccatiTrajectory {
    solve_gdre(&example(), GAMMA, DT, GainMode::Frozen).expect("valid step")
}

fn sign_structure() -> Outcome {
    let start = Instant::now();
    let tr = reference();
    let elapsed = start.elapsed().as_secs_f64();
    let feas = tr.feasible;
    let sigma = tr.sigma_margins.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let (mut worst_neg, mut worst_pos, mut strict) = (f64::NEG_INFINITY, f64::INFINITY, f64::INFINITY);
    for (t, s) in tr.grid.iter().zip(&tr.states) {
        let hi = max_eig(&s.p1).max(max_eig(&s.q1));
        let lo = min_eig(&s.p2).min(min_eig(&s.q2));
        worst_neg = worst_neg.max(hi);
        worst_pos = worst_pos.min(lo);
        if *t <= 0.09 + 1e-12 {
            strict = strict.min(-hi).min(lo);
        }
    }
    check(
        tr.feasible && sigma > 0.0 && worst_neg <= 1e-9 && worst_pos >= -1e-9 && strict > 1e-6 && elapsed < 5.0,
        format!(
            "feasible={feas} min Σ eig {sigma:.3e}, max eig P1/Q1 {worst_neg:.2e}, min eig P2/Q2 {worst_pos:.2e}, strict margin {strict:.3e}, {elapsed:.2}s"
        ),
    )
}

fn determinant_signs() -> Outcome {
    let tr = reference();
    let mut worst = f64::INFINITY;
    for s in &tr.states {
        for m in s.mats() {
            worst = worst.min(m.determinant());
        }
    }
    let last = tr.states.last().expect("nonempty");
    let terminal = last.mats().iter().map(|m| m.determinant().abs()).fold(0.0, f64::max);
    check(worst >= -1e-12 && terminal == 0.0, format!("min det {worst:.3e}, |det| at T {terminal:.1e}"))
}

fn step_refinement() -> Outcome {
    let m = example();
    let sols: Vec<RiccatiTrajectory> =
        (0..4).map(|k| solve_gdre(&m, GAMMA, DT / f64::from(1 << k), GainMode::Frozen).expect("valid step")).collect();
    let dist = |a: &RiccatiTrajectory, b: &RiccatiTrajectory| {
        let ratio = (b.grid.len() - 1) / (a.grid.len() - 1);
        a.states
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let o = &b.states[k * ratio];
                s.mats().iter().zip(o.mats()).map(|(x, y)| (*x - y).norm()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    };
    let d: Vec<f64> = sols.windows(2).map(|w| dist(&w[0], &w[1])).collect();
    check(d[0] > d[1] && d[1] > d[2], format!("distances {:.3e} {:.3e} {:.3e}", d[0], d[1], d[2]))
}

fn oracle_agreement() -> Outcome {
    let m = example();
    let tr = solve_gdre(&m, GAMMA, DT, GainMode::Stage).map_err(|e| e.to_string())?;
    let cl = ClosedLoop { model: &m, gains: &tr.gains };
    let brl = solve_brl(&cl, GAMMA, DT).map_err(|e| e.to_string())?;
    let pic = picard_solve(&cl, GAMMA, DT, 1e-12, 200).map_err(|e| e.to_string())?;
    let gap = |a: &[Mat], b: &[Mat]| a.iter().zip(b).map(|(x, y)| max_abs(&(x - y))).fold(0.0, f64::max);
    let closed = gap(&pic.p, &brl.p);

    let gamma = 1.3;
    let dm = DisturbanceOnlyModel::scalar(0.0, 1.0, 1.0, 1.0);
    let sb = solve_brl(&dm, gamma, DT).map_err(|e| e.to_string())?;
    let sp = picard_solve(&dm, gamma, DT, 1e-12, 200).map_err(|e| e.to_string())?;
    let scalar = gap(&sp.p, &sb.p);
    let tangent = sb
        .grid
        .iter()
        .zip(&sb.p)
        .map(|(t, p)| (p[(0, 0)] + gamma * ((1.0 - t) / gamma).tan()).abs())
        .fold(0.0, f64::max);

    // successive iterates may only move down in the Loewner order
    let mut rise = f64::NEG_INFINITY;
    for hist in [&pic.history, &sp.history] {
        for w in hist.windows(2) {
            for (a, b) in w[0].iter().zip(&w[1]) {
                rise = rise.max(max_eig(&(b - a)));
            }
        }
    }
    check(
        closed < 1e-5 && scalar < 1e-5 && tangent < 1e-5 && rise <= 1e-9,
        format!("closed-loop {closed:.2e}, scalar {scalar:.2e}, tangent {tangent:.2e}, max rise {rise:.2e}"),
    )
}

fn value_identity() -> Outcome {
    let m = example();
    let tr = reference();
    let x0 = Mat::from_column_slice(2, 1, &[1.0, 1.0]);
    let (j1, j2) = value_at(&tr, &x0, &Mat::zeros(2, 2)).map_err(|e| e.to_string())?;
    let bundle = simulate(
        &m,
        &PolicySpec::Feedback { schedule: FeedbackSchedule::control(&tr.gains), exploration: None },
        &PolicySpec::Feedback { schedule: FeedbackSchedule::disturbance(&tr.gains), exploration: None },
        &NoiseSpec { seed: 11, particles: 10_000, dt: DT },
        &InitialState::Point(Vector::from_column_slice(&[1.0, 1.0])),
        SimOptions { recording: Recording::Summary, execution: Execution::Parallel },
    )
    .map_err(|e| e.to_string())?;
    let (e1, s1) = estimate_cost(&bundle, CostKind::J1, GAMMA);
    let (e2, s2) = estimate_cost(&bundle, CostKind::J2, GAMMA);
    let (z1, z2) = ((e1 - j1) / s1, (e2 - j2) / s2);
    check(
        z1.abs() < 3.0 && z2.abs() < 3.0,
        format!("J1 {e1:.4} vs {j1:.4} ({z1:+.2} SE), J2 {e2:.4} vs {j2:.4} ({z2:+.2} SE)"),
    )
}

fn attenuation() -> Outcome {
    let m = example();
    let tr = reference();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let bundle = simulate(
            &m,
            &PolicySpec::Feedback { schedule: FeedbackSchedule::control(&tr.gains), exploration: None },
            &PolicySpec::External(Exploration::white(1000 + seed, 1.0)),
            &NoiseSpec { seed, particles: 1000, dt: DT },
            &InitialState::Point(Vector::zeros(2)),
            SimOptions { recording: Recording::Summary, execution: Execution::Parallel },
        )
        .map_err(|e| e.to_string())?;
        worst = worst.max(empirical_gain(&bundle).map_err(|e| e.to_string())?);
    }
    check(worst < GAMMA, format!("largest ‖z‖/‖v‖ over 20 disturbances {worst:.4}"))
}

fn gamma_search() -> Outcome {
    let m = example();
    let s = gamma_threshold(&m, 0.1, GAMMA, 1e-3, DT, GainMode::Frozen).map_err(|e| e.to_string())?;
    let above = solve_gdre(&m, 2.0 * s.gamma, DT, GainMode::Frozen).map_err(|e| e.to_string())?;
    let below = solve_gdre(&m, 0.5 * s.gamma, DT, GainMode::Frozen).map_err(|e| e.to_string())?;
    let width = s.hi - s.lo;
    check(
        width < 1e-3 && above.feasible && !below.feasible,
        format!(
            "γ* = {:.5}, width {width:.1e}, 2γ* feasible={}, γ*/2 feasible={}",
            s.gamma, above.feasible, below.feasible
        ),
    )
}

/// Largest distance between learned gains and the model-based saddle gains at the interval midpoints.
fn gain_gap(model: &MeanFieldJumpModel, gains: &[TargetGains], intervals: usize) -> Result<f64, String> {
    let h = model.horizon / intervals as f64;
    let sad = solve_saddle(model, GAMMA, h / 2.0).map_err(|e| e.to_string())?;
    let mut gap: f64 = 0.0;
    for (i, g) in gains.iter().enumerate() {
        let r = &sad.gains[2 * i + 1];
        for (a, b) in [(&g.l, &r.l), (&g.l_mean, &r.l_mean), (&g.f, &r.f), (&g.f_mean, &r.f_mean)] {
            gap = gap.max(max_abs(&(a - b)));
        }
    }
    Ok(gap)
}

fn rl_recovery() -> Outcome {
    let start = Instant::now();
    let model = MeanFieldJumpModel::diffusion_example();
    let init = TargetGains::zeros(model.dims);

    let mut oracle = RlSettings::new(model.m.clone(), GAMMA);
    oracle.intervals = 1500;
    oracle.substeps = 2;
    let plant = ExactPlant::new(&model).map_err(|e| e.to_string())?;
    let (_, rep) = learn(&plant, &oracle, &init).map_err(|e| e.to_string())?;
    let exact_gap = gain_gap(&model, &rep.policy.gains, oracle.intervals)?;

    let mut sampled = RlSettings::new(model.m.clone(), GAMMA);
    sampled.intervals = 10;
    sampled.substeps = 20;
    sampled.eps = 1e-8;
    sampled.eps1 = 1e-8;
    sampled.max_inner = 200;
    sampled.max_outer = 200;
    sampled.seed = 1;
    let plant = SampledPlant::new(&model, 10_000, sampled.seed).map_err(|e| e.to_string())?;
    let g = g_len(model.dims);
    let (_, rep) = learn(&plant, &sampled, &init).map_err(|e| e.to_string())?;
    let sampled_gap = gain_gap(&model, &rep.policy.gains, sampled.intervals)?;
    let elapsed = start.elapsed().as_secs_f64();
    check(
        exact_gap < 1e-6 && sampled_gap < 5e-2 && elapsed < 600.0 && sampled.populations >= g,
        format!(
            "oracle gap {exact_gap:.2e}, sampled gap {sampled_gap:.2e} (L̄ = 10⁴, s = {} ≥ g = {g}), {elapsed:.1}s",
            sampled.populations
        ),
    )
}

fn encodings() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut round_trip = true;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = r.random_range(1..=4);
        let a = Mat::from_fn(n, n, |_, _| r.random_range(-5.0..5.0));
        let p = (&a + a.transpose()) * 0.5;
        let v = svec(&p).map_err(|e| e.to_string())?;
        round_trip &= smat(&v, n) == p;
        let x: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let xv = Vector::from_vec(x.clone());
        let quad = (xv.transpose() * &p * &xv)[(0, 0)];
        let lin: f64 = v.iter().zip(xbar(&x)).map(|(a, b)| a * b).sum();
        worst = worst.max((quad - lin).abs() / (1.0 + quad.abs()));
    }
    let mut lengths = true;
    for n in 1..=4 {
        for nu in 1..=4 {
            for nv in 1..=4 {
                let dims = Dims::new(n, nu, nv);
                lengths &= XiVector::zeros(dims).encode(&CORE_BLOCKS).len() == g_len(dims);
            }
        }
    }
    check(
        round_trip && worst <= 1e-12 && lengths,
        format!("round trip exact={round_trip}, max quadratic-form error {worst:.1e}, lengths match={lengths}"),
    )
}

/// Largest per-interval `‖Φ Ξ_true - Θ‖∞ / ‖Θ‖∞` on exact data.
fn residual(intervals: usize) -> Result<f64, String> {
    let mut model = MeanFieldJumpModel::diffusion_example();
    model.horizon = 0.1;
    let settings = RlSettings::new(model.m.clone(), GAMMA);
    let target = TargetGains {
        l: Mat::from_row_slice(1, 2, &[-0.4, 0.1]),
        l_mean: Mat::from_row_slice(1, 2, &[0.2, -0.3]),
        f: Mat::from_row_slice(1, 2, &[0.1, 0.05]),
        f_mean: Mat::from_row_slice(1, 2, &[-0.05, 0.1]),
    };
    let grid = interval_grid(model.horizon, intervals);
    let starts =
        population_starts(model.dims.n, settings.populations, settings.seed, settings.mean_scale, settings.cov_scale);
    let behavior = behavior_from(&settings, TargetGains::zeros(model.dims));
    let plant = ExactPlant::new(&model).map_err(|e| e.to_string())?;
    let data = collect(&plant, &behavior, &starts, &grid, 2, Execution::Parallel).map_err(|e| e.to_string())?;
    let h = model.horizon / intervals as f64;
    let schedule = PiecewiseGains::constant(target.clone(), model.horizon);
    let pe = pe_oracle(&model, &schedule, GAMMA, h / 2.0).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for i in 0..intervals {
        let batch = assemble(&data, &target, &model.m, GAMMA, i);
        let xi = true_xi(&model, &pe, grid[i], grid[i + 1], &target);
        let r = &batch.phi * Vector::from_vec(xi.encode(&BLOCK_ORDER)) - &batch.theta;
        worst = worst.max(r.amax() / batch.theta.amax());
    }
    Ok(worst)
}

fn regression_residual() -> Outcome {
    let coarse = residual(1000)?;
    let fine = residual(2000)?;
    check(
        coarse < 1e-8 && fine < 1e-8 && coarse >= 2.0 * fine,
        format!("relative residual {coarse:.2e} at h = 1e-4, {fine:.2e} at h = 5e-5 (ratio {:.2})", coarse / fine),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 sign structure of the coupled solution", sign_structure),
        ("2 determinant signs", determinant_signs),
        ("3 step refinement", step_refinement),
        ("4 bounded-real oracles", oracle_agreement),
        ("5 value identity", value_identity),
        ("6 attenuation", attenuation),
        ("7 gamma threshold", gamma_search),
        ("8 learning recovers saddle gains", rl_recovery),
        ("9 encoding identities", encodings),
        ("10 regression residual", regression_residual),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(d) => println!("PASS criterion {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {name}: {d}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
