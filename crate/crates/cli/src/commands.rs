use crate::output::{flat, names, num, OutDir, Table};
use crate::{load_model, positive, positive_count, Common, DataMode, Disturbance};
use anyhow::{bail, Context, Result};
use mfrobust::exec::Execution;
use mfrobust::linalg::{max_abs, Mat, Vector};
use mfrobust::model::MeanFieldJumpModel;
use mfrobust::riccati::{gamma_threshold, solve_gdre, solve_saddle, value_at, GainMode, RiccatiTrajectory};
use mfrobust::rl::{learn, ExactPlant, Plant, RlSettings, SampledPlant, TargetGains};
use mfrobust::simulate::{
    empirical_gain, estimate_cost, simulate as run_sim, CostKind, Exploration, FeedbackSchedule, InitialState,
    NoiseSpec, PolicySpec, Recording, SimOptions,
};

fn failure_line(tr: &RiccatiTrajectory) -> String {
    match &tr.failure {
        Some(f) => format!("first failure: t = {}, {} min eigenvalue {:e}", num(f.t), f.which, f.min_eig),
        None => "first failure: none".to_string(),
    }
}

pub fn riccati(common: &Common, dt: f64, mode: GainMode) -> Result<()> {
    positive("gamma", common.gamma)?;
    positive("dt", dt)?;
    let model = load_model(&common.model)?;
    let out = OutDir::create(&common.out)?;
    let tr = solve_gdre(&model, common.gamma, dt, mode)?;
    write_trajectory(&out, &tr)?;
    let mut lines = vec![
        format!("gamma: {}", num(common.gamma)),
        format!("dt: {}", num(dt)),
        format!("grid points: {}", tr.grid.len()),
        format!("feasible: {}", tr.feasible),
        failure_line(&tr),
    ];
    if tr.feasible {
        let s = tr.initial();
        lines.push(format!(
            "det at t = 0: P1 {} Q1 {} P2 {} Q2 {}",
            num(s.p1.determinant()),
            num(s.q1.determinant()),
            num(s.p2.determinant()),
            num(s.q2.determinant())
        ));
    }
    out.report("riccati_report.txt", &lines)
}

fn write_trajectory(out: &OutDir, tr: &RiccatiTrajectory) -> Result<()> {
    let n = tr.initial().p1.nrows();
    let mut header = vec!["t".to_string()];
    for name in ["P1", "Q1", "P2", "Q2"] {
        header.extend(names(name, n, n));
    }
    header.extend(["det_P1", "det_Q1", "det_P2", "det_Q2"].map(String::from));
    let mut states = Table::new(header);
    for (t, s) in tr.grid.iter().zip(&tr.states) {
        let mats = s.mats();
        let row =
            std::iter::once(*t).chain(mats.iter().flat_map(|m| flat(m))).chain(mats.iter().map(|m| m.determinant()));
        states.push_nums(row.collect::<Vec<_>>());
    }
    out.table("states.csv", &states)?;

    let g = &tr.gains;
    let mut header = vec!["t".to_string()];
    for (name, m) in [("K1", &g.k1), ("K1_sum", &g.k1_sum), ("K2", &g.k2), ("K2_sum", &g.k2_sum)] {
        header.extend(names(name, m[0].nrows(), m[0].ncols()));
    }
    let mut gains = Table::new(header);
    for k in 0..g.grid.len() {
        let row = std::iter::once(g.grid[k])
            .chain(flat(&g.k1[k]))
            .chain(flat(&g.k1_sum[k]))
            .chain(flat(&g.k2[k]))
            .chain(flat(&g.k2_sum[k]));
        gains.push_nums(row.collect::<Vec<_>>());
    }
    out.table("gains.csv", &gains)?;

    let mut margins = Table::new(["t", "sigma0", "sigma2", "sigma0_tilde", "sigma2_tilde"]);
    for (t, m) in tr.grid.iter().zip(&tr.sigma_margins) {
        margins.push_nums([*t, m[0], m[1], m[2], m[3]]);
    }
    out.table("margins.csv", &margins)
}

pub fn gamma_search(common: &Common, dt: f64, mode: GainMode, lo: f64, hi: f64, tol: f64) -> Result<()> {
    positive("dt", dt)?;
    positive("lo", lo)?;
    positive("hi", hi)?;
    positive("tol", tol)?;
    let model = load_model(&common.model)?;
    let out = OutDir::create(&common.out)?;
    let s = gamma_threshold(&model, lo, hi, tol, dt, mode)?;
    let mut probes = Table::new(["gamma", "feasible", "failure_t", "failure"]);
    for p in &s.probes {
        let (t, which) = match &p.failure {
            Some(f) => (num(f.t), f.which.to_string()),
            None => (String::new(), String::new()),
        };
        probes.push(vec![num(p.gamma), p.feasible.to_string(), t, which]);
    }
    out.table("probes.csv", &probes)?;
    let lines = vec![
        format!("gamma*: {}", num(s.gamma)),
        format!("bracket: [{}, {}]", num(s.lo), num(s.hi)),
        format!("width: {}", num(s.hi - s.lo)),
        format!("probes: {}", s.probes.len()),
    ];
    out.report("gamma_report.txt", &lines)
}

pub struct SimulateOpts {
    pub dt: f64,
    pub mode: GainMode,
    pub particles: usize,
    pub x0: Option<String>,
    pub disturbance: Disturbance,
    pub runs: usize,
    pub amplitude: f64,
    pub paths: usize,
}

fn parse_x0(text: Option<&str>, n: usize) -> Result<Vector> {
    let Some(text) = text else { return Ok(Vector::from_element(n, 1.0)) };
    let vals: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad --x0 entry {s:?}")))
        .collect::<Result<_>>()?;
    if vals.len() != n {
        bail!("--x0 has {} entries, model state has {n}", vals.len());
    }
    Ok(Vector::from_vec(vals))
}

pub fn simulate(common: &Common, o: &SimulateOpts) -> Result<()> {
    positive("gamma", common.gamma)?;
    positive("dt", o.dt)?;
    positive_count("particles", o.particles)?;
    positive_count("runs", o.runs)?;
    let model = load_model(&common.model)?;
    let n = model.dims.n;
    let x0 = parse_x0(o.x0.as_deref(), n)?;
    let tr = solve_gdre(&model, common.gamma, o.dt, o.mode)?;
    if !tr.feasible {
        bail!(
            "Riccati solution is infeasible at gamma = {} ({}); no synthesized control",
            common.gamma,
            failure_line(&tr)
        );
    }
    let out = OutDir::create(&common.out)?;
    let (j1_ref, j2_ref) = value_at(&tr, &Mat::from_column_slice(n, 1, x0.as_slice()), &Mat::zeros(n, n))?;
    let control = PolicySpec::Feedback { schedule: FeedbackSchedule::control(&tr.gains), exploration: None };
    let runs = if o.disturbance == Disturbance::Random { o.runs } else { 1 };

    let mut summary = Table::new(["run", "seed", "gain", "J1", "J1_se", "J2", "J2_se", "J1_riccati", "J2_riccati"]);
    let mut lines = vec![format!("gamma: {}", num(common.gamma)), format!("particles: {}", o.particles)];
    for r in 0..runs {
        let seed = common.seed.wrapping_add(r as u64);
        let disturbance = match o.disturbance {
            Disturbance::Worst => {
                PolicySpec::Feedback { schedule: FeedbackSchedule::disturbance(&tr.gains), exploration: None }
            }
            Disturbance::Zero => PolicySpec::Zero,
            Disturbance::Random => PolicySpec::External(Exploration::white(seed ^ 0xd1b5_4a32_d192_ed03, o.amplitude)),
        };
        let recording = if r == 0 && o.paths > 0 { Recording::Full } else { Recording::Summary };
        let bundle = run_sim(
            &model,
            &control,
            &disturbance,
            &NoiseSpec { seed, particles: o.particles, dt: o.dt },
            &InitialState::Point(x0.clone()),
            SimOptions { recording, execution: Execution::Parallel },
        )?;
        let gain = empirical_gain(&bundle).unwrap_or(f64::NAN);
        let (j1, s1) = estimate_cost(&bundle, CostKind::J1, common.gamma);
        let (j2, s2) = estimate_cost(&bundle, CostKind::J2, common.gamma);
        summary.push(
            [r.to_string(), seed.to_string()]
                .into_iter()
                .chain([gain, j1, s1, j2, s2, j1_ref, j2_ref].map(num))
                .collect(),
        );
        lines.push(format!(
            "run {r}: gain {gain:.6} J1 {j1:.6} ± {s1:.2e} (Riccati {j1_ref:.6}) J2 {j2:.6} ± {s2:.2e} (Riccati {j2_ref:.6})"
        ));
        if r == 0 {
            write_means(&out, &bundle)?;
            if o.paths > 0 {
                write_paths(&out, &bundle, o.paths)?;
            }
        }
    }
    out.table("summary.csv", &summary)?;
    out.report("simulate_report.txt", &lines)
}

fn write_means(out: &OutDir, b: &mfrobust::simulate::PathBundle) -> Result<()> {
    let d = b.dims;
    let header = std::iter::once("t".to_string())
        .chain((1..=d.n).map(|i| format!("mean_x{i}")))
        .chain((1..=d.nu).map(|i| format!("mean_u{i}")))
        .chain((1..=d.nv).map(|i| format!("mean_v{i}")));
    let mut t = Table::new(header);
    for (k, time) in b.grid.iter().enumerate() {
        let row = std::iter::once(*time)
            .chain(b.mean_x_at(k).iter().copied())
            .chain(b.mean_u_at(k).iter().copied())
            .chain(b.mean_v_at(k).iter().copied());
        t.push_nums(row.collect::<Vec<_>>());
    }
    out.table("means.csv", &t)
}

/// One row per grid point, columns `p{particle}_x{i}` and so on.
fn write_paths(out: &OutDir, b: &mfrobust::simulate::PathBundle, count: usize) -> Result<()> {
    let count = count.min(b.particles);
    let d = b.dims;
    let mut header = vec!["t".to_string()];
    for p in 0..count {
        for (name, len) in [("x", d.n), ("u", d.nu), ("v", d.nv), ("z", b.nz)] {
            header.extend((1..=len).map(|i| format!("p{p}_{name}{i}")));
        }
    }
    let mut t = Table::new(header);
    for (k, time) in b.grid.iter().enumerate() {
        let mut row = vec![*time];
        for p in 0..count {
            for part in [b.x(k, p), b.u(k, p), b.v(k, p), b.z(k, p)] {
                row.extend_from_slice(part.context("paths were not recorded")?);
            }
        }
        t.push_nums(row);
    }
    out.table("paths.csv", &t)
}

pub struct RlOpts {
    pub mode: DataMode,
    pub intervals: Option<usize>,
    pub substeps: Option<usize>,
    pub populations: usize,
    pub particles: usize,
    pub eps: Option<f64>,
    pub max_iter: usize,
    pub strip_jumps: bool,
}

pub fn rl(common: &Common, o: &RlOpts) -> Result<()> {
    positive("gamma", common.gamma)?;
    let mut model = load_model(&common.model)?;
    if model.has_jumps() {
        if !o.strip_jumps {
            bail!(
                "model has {} jump atom(s); policy iteration is restricted to systems without jumps (pass --strip-jumps to drop them)",
                model.atoms.len()
            );
        }
        model = model.without_jumps();
    }
    let oracle = o.mode == DataMode::Oracle;
    let mut settings = RlSettings::new(model.m.clone(), common.gamma);
    settings.intervals = o.intervals.unwrap_or(if oracle { 1500 } else { 10 });
    settings.substeps = o.substeps.unwrap_or(if oracle { 2 } else { 20 });
    settings.populations = o.populations;
    settings.seed = common.seed;
    let eps = o.eps.unwrap_or(if oracle { 1e-10 } else { 1e-8 });
    settings.eps = eps;
    settings.eps1 = eps;
    settings.max_inner = o.max_iter;
    settings.max_outer = o.max_iter;
    positive_count("intervals", settings.intervals)?;
    positive_count("substeps", settings.substeps)?;
    positive_count("populations", settings.populations)?;
    positive_count("particles", o.particles)?;
    positive_count("max-iter", o.max_iter)?;
    positive("eps", eps)?;
    let out = OutDir::create(&common.out)?;

    let exact;
    let sampled;
    let plant: &dyn Plant = if oracle {
        exact = ExactPlant::new(&model)?;
        &exact
    } else {
        sampled = SampledPlant::new(&model, o.particles, common.seed)?;
        &sampled
    };
    let (data, rep) = learn(plant, &settings, &TargetGains::zeros(model.dims))?;

    let h = model.horizon / settings.intervals as f64;
    let reference = solve_saddle(&model, common.gamma, h / 2.0).ok().filter(|s| s.feasible);
    let d = model.dims;
    let mut header = vec!["interval".to_string(), "t_start".into(), "t_end".into()];
    for prefix in ["", "ref_"] {
        for (name, r) in [("L", d.nu), ("L_mean", d.nu), ("F", d.nv), ("F_mean", d.nv)] {
            header.extend(names(&format!("{prefix}{name}"), r, d.n));
        }
    }
    header.push("gap".into());
    let mut gains = Table::new(header);
    let mut worst_gap: f64 = 0.0;
    for (i, g) in rep.policy.gains.iter().enumerate() {
        let learned = [&g.l, &g.l_mean, &g.f, &g.f_mean];
        let mut row = vec![i as f64, data.grid[i], data.grid[i + 1]];
        row.extend(learned.iter().flat_map(|m| flat(m)));
        match &reference {
            Some(s) => {
                let r = &s.gains[2 * i + 1];
                let refs = [&r.l, &r.l_mean, &r.f, &r.f_mean];
                row.extend(refs.iter().flat_map(|m| flat(m)));
                let gap = learned.iter().zip(refs).map(|(a, b)| max_abs(&(*a - b))).fold(0.0, f64::max);
                worst_gap = worst_gap.max(gap);
                row.push(gap);
            }
            None => {
                let width = 2 * (d.nu + d.nv) * d.n;
                row.extend(std::iter::repeat_n(f64::NAN, width + 1));
            }
        }
        gains.push_nums(row);
    }
    out.table("learned_gains.csv", &gains)?;

    let header = std::iter::once("t".to_string()).chain(names("P", d.n, d.n)).chain(names("Q", d.n, d.n));
    let mut value = Table::new(header);
    for (k, t) in rep.policy.grid.iter().enumerate() {
        let row = std::iter::once(*t).chain(flat(&rep.policy.p[k])).chain(flat(&rep.policy.q[k]));
        value.push_nums(row.collect::<Vec<_>>());
    }
    out.table("learned_value.csv", &value)?;

    let mut iters = Table::new(["outer", "inner", "p_change", "q_change", "gain_change"]);
    for r in &rep.inner {
        iters.push(vec![
            r.outer.to_string(),
            r.inner.to_string(),
            num(r.p_change),
            num(r.q_change),
            num(r.gain_change),
        ]);
    }
    out.table("iterations.csv", &iters)?;

    let mut outer = Table::new(["outer", "disturbance_gain_change"]);
    for (k, c) in rep.outer_changes.iter().enumerate() {
        outer.push(vec![k.to_string(), num(*c)]);
    }
    out.table("outer.csv", &outer)?;

    let mut diag = Table::new(["interval", "rank", "unknowns", "condition", "min_singular"]);
    for (i, g) in rep.diagnostics.iter().enumerate() {
        diag.push(vec![
            i.to_string(),
            g.rank.to_string(),
            g.unknowns.to_string(),
            num(g.condition),
            num(g.min_singular),
        ]);
    }
    out.table("diagnostics.csv", &diag)?;
    write_dataset(&out, &data)?;

    let cond = rep.diagnostics.iter().map(|g| g.condition).fold(0.0, f64::max);
    let mut lines = vec![
        format!("mode: {}", if oracle { "oracle" } else { "sampled" }),
        format!(
            "intervals: {} substeps: {} populations: {}",
            settings.intervals, settings.substeps, settings.populations
        ),
        format!("converged: {} after {} outer iterations", rep.converged, rep.outer_changes.len()),
        format!("largest regression condition number: {}", num(cond)),
    ];
    lines.push(match reference {
        Some(_) => format!("max gap to model-based gains: {}", num(worst_gap)),
        None => "max gap to model-based gains: unavailable (model-based solution infeasible)".into(),
    });
    out.report("rl_report.txt", &lines)
}

/// Collected moments, one row per population and interval.
fn write_dataset(out: &OutDir, data: &mfrobust::rl::DataSet) -> Result<()> {
    let d = data.dims;
    let Some(first) = data.moments.first().and_then(|m| m.first()) else {
        return out.table("dataset.csv", &Table::new(["population", "interval"]));
    };
    let fields = |m: &mfrobust::rl::IntervalMoments| -> Vec<Mat> {
        vec![
            Mat::from_column_slice(d.n, 1, m.m_start.as_slice()),
            Mat::from_column_slice(d.n, 1, m.m_end.as_slice()),
            m.mm.clone(),
            m.um.clone(),
            m.vm.clone(),
            m.uu.clone(),
            m.vv.clone(),
            m.uv.clone(),
            m.y_start.clone(),
            m.y_end.clone(),
            m.yy.clone(),
            m.uy.clone(),
            m.vy.clone(),
            m.uu_dev.clone(),
            m.vv_dev.clone(),
            m.uv_dev.clone(),
        ]
    };
    const LABELS: [&str; 16] = [
        "m_start",
        "m_end",
        "int_mm",
        "int_um",
        "int_vm",
        "int_uu",
        "int_vv",
        "int_uv",
        "yy_start",
        "yy_end",
        "int_yy",
        "int_uy",
        "int_vy",
        "int_uu_dev",
        "int_vv_dev",
        "int_uv_dev",
    ];
    let mut header = vec!["population".to_string(), "interval".into(), "t_start".into(), "t_end".into()];
    for (label, m) in LABELS.iter().zip(fields(first)) {
        header.extend(names(label, m.nrows(), m.ncols()));
    }
    let mut t = Table::new(header);
    for (q, pop) in data.moments.iter().enumerate() {
        for (i, m) in pop.iter().enumerate() {
            let mut row = vec![q.to_string(), i.to_string(), num(data.grid[i]), num(data.grid[i + 1])];
            row.extend(fields(m).iter().flat_map(|x| flat(x).map(num).collect::<Vec<_>>()));
            t.push(row);
        }
    }
    out.table("dataset.csv", &t)
}

/// Loads the model and solves at the given settings; shared by `verify`.
pub fn feasible_trajectory(model: &MeanFieldJumpModel, gamma: f64, dt: f64) -> Result<RiccatiTrajectory> {
    let tr = solve_gdre(model, gamma, dt, GainMode::Frozen)?;
    if !tr.feasible {
        bail!("Riccati solution is infeasible at gamma = {gamma} ({})", failure_line(&tr));
    }
    Ok(tr)
}
