//! Interacting-particle Monte Carlo for the mean-field jump-diffusion.
//!
//! Expectations inside the dynamics are replaced by ensemble averages over the
//! particles. Each particle carries its own scalar Brownian motion and one
//! Poisson counter per jump atom; the compensator `weight·Δt` is subtracted
//! inside every step.

use crate::exec::{self, Execution};
use crate::linalg::{Mat, Vector};
use crate::model::{interp, Dims, GainSchedule, MeanFieldJumpModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use thiserror::Error;

/// 32-bit words of keystream reserved per particle per step.
const STEP_WORDS: u32 = 10;
/// Offset inside a step block where the state noise starts; policy noise uses the first half.
const STATE_NOISE_OFFSET: u128 = 1 << (STEP_WORDS - 1);
const CHUNK: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("particle {particle} diverged at t = {t}")]
    DivergedPath { t: f64, particle: usize },
    #[error("invalid time grid: {0}")]
    BadGrid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("mean-field terms need at least two particles")]
    TooFewParticles,
    #[error("disturbance is identically zero")]
    ZeroDisturbance,
}

/// Random inputs of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub seed: u64,
    pub particles: usize,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    Point(Vector),
    Gaussian { mean: Vector, cov: Mat },
}

impl InitialState {
    fn dim(&self) -> usize {
        match self {
            InitialState::Point(x) => x.len(),
            InitialState::Gaussian { mean, .. } => mean.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interp {
    #[default]
    Linear,
    /// Value at the last grid point not after `t`.
    Hold,
}

/// `w = K (x - x̄) + K_sum x̄` with `K`, `K_sum` given on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackSchedule {
    pub grid: Vec<f64>,
    pub gain: Vec<Mat>,
    pub gain_sum: Vec<Mat>,
    pub interp: Interp,
}

impl FeedbackSchedule {
    pub fn control(g: &GainSchedule) -> Self {
        Self { grid: g.grid.clone(), gain: g.k2.clone(), gain_sum: g.k2_sum.clone(), interp: Interp::Linear }
    }

    pub fn disturbance(g: &GainSchedule) -> Self {
        Self { grid: g.grid.clone(), gain: g.k1.clone(), gain_sum: g.k1_sum.clone(), interp: Interp::Linear }
    }

    pub fn constant(gain: Mat, gain_sum: Mat, horizon: f64) -> Self {
        Self {
            grid: vec![0.0, horizon],
            gain: vec![gain.clone(), gain],
            gain_sum: vec![gain_sum.clone(), gain_sum],
            interp: Interp::Hold,
        }
    }

    pub fn at(&self, t: f64) -> (Mat, Mat) {
        match self.interp {
            Interp::Linear => (interp(&self.grid, &self.gain, t), interp(&self.grid, &self.gain_sum, t)),
            Interp::Hold => {
                let k = self.grid.partition_point(|&g| g <= t + 1e-12).saturating_sub(1);
                let k = k.min(self.grid.len() - 1);
                (self.gain[k].clone(), self.gain_sum[k].clone())
            }
        }
    }

    fn check(&self, rows: usize, n: usize, horizon: f64, dt: f64) -> Result<(), SimError> {
        let g = &self.grid;
        if g.len() < 2 || g.len() != self.gain.len() || g.len() != self.gain_sum.len() {
            return Err(SimError::BadGrid("gain schedule needs matching grid and gains".into()));
        }
        if g[0].abs() > 1e-9 || (g[g.len() - 1] - horizon).abs() > 1e-9 {
            return Err(SimError::BadGrid(format!(
                "gain grid [{}, {}] does not cover [0, {horizon}]",
                g[0],
                g[g.len() - 1]
            )));
        }
        let min_gap = g.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        if dt > min_gap * (1.0 + 1e-9) {
            return Err(SimError::BadGrid(format!("simulation step {dt} exceeds gain grid spacing {min_gap}")));
        }
        for k in self.gain.iter().chain(&self.gain_sum) {
            if k.shape() != (rows, n) {
                return Err(SimError::Shape(format!("gain is {}x{}, expected {rows}x{n}", k.nrows(), k.ncols())));
            }
        }
        Ok(())
    }
}

/// Exploration signal added to a policy.
///
/// A common part (sum of sinusoids with random frequencies, identical for all
/// particles), a per-particle part (a few sinusoids with independent standard
/// normal coefficients per particle) and white noise held constant over a step.
#[derive(Debug, Clone, PartialEq)]
pub struct Exploration {
    pub seed: u64,
    pub amplitude: f64,
    pub sinusoids: usize,
    pub freq_range: (f64, f64),
    pub particle_amplitude: f64,
    pub particle_sinusoids: usize,
    /// Seed of the per-particle coefficients; defaults to `seed`. Two signals
    /// with the same coefficient seed share their particle coefficients.
    pub coeff_seed: Option<u64>,
    pub white: f64,
}

impl Default for Exploration {
    fn default() -> Self {
        Self {
            seed: 0,
            amplitude: 0.0,
            sinusoids: 10,
            freq_range: (1.0, 50.0),
            particle_amplitude: 0.0,
            particle_sinusoids: 3,
            coeff_seed: None,
            white: 0.0,
        }
    }
}

impl Exploration {
    pub fn white(seed: u64, amplitude: f64) -> Self {
        Self { seed, white: amplitude, ..Self::default() }
    }

    pub fn sinusoids(seed: u64, amplitude: f64, particle_amplitude: f64) -> Self {
        Self { seed, amplitude, particle_amplitude, ..Self::default() }
    }

    pub(crate) fn realize(&self, dim: usize, particles: usize) -> RealizedExploration {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (lo, hi) = self.freq_range;
        let mut draw = |count: usize| -> Vec<(f64, f64)> {
            (0..count * dim)
                .map(|_| (rng.random_range(lo..=hi), rng.random_range(0.0..std::f64::consts::TAU)))
                .collect()
        };
        let common = if self.amplitude != 0.0 { draw(self.sinusoids) } else { Vec::new() };
        let own = if self.particle_amplitude != 0.0 { draw(self.particle_sinusoids) } else { Vec::new() };
        let coeffs = if own.is_empty() {
            Vec::new()
        } else {
            let per = dim * self.particle_sinusoids;
            let mut out = Vec::with_capacity(per * particles);
            for p in 0..particles {
                let mut r = ChaCha8Rng::seed_from_u64(self.coeff_seed.unwrap_or(self.seed) ^ 0x5bd1_e995_u64);
                r.set_stream(p as u64);
                out.extend((0..per).map(|_| r.sample::<f64, _>(StandardNormal)));
            }
            out
        };
        RealizedExploration {
            dim,
            amplitude: self.amplitude / (self.sinusoids.max(1) as f64).sqrt(),
            common,
            sinusoids: self.sinusoids,
            particle_amplitude: self.particle_amplitude,
            own,
            own_count: self.particle_sinusoids,
            coeffs,
            white: self.white,
        }
    }
}

pub(crate) struct RealizedExploration {
    dim: usize,
    amplitude: f64,
    common: Vec<(f64, f64)>,
    sinusoids: usize,
    particle_amplitude: f64,
    own: Vec<(f64, f64)>,
    own_count: usize,
    coeffs: Vec<f64>,
    white: f64,
}

impl RealizedExploration {
    /// Matrix `G(t)` with the per-particle part equal to `G(t) ζ`, `ζ` the particle's coefficients.
    pub(crate) fn particle_basis(&self, t: f64) -> Mat {
        let mut g = Mat::zeros(self.dim, self.own.len());
        for c in 0..self.dim {
            for j in 0..self.own_count {
                let col = c * self.own_count + j;
                if col < self.own.len() {
                    let (w, ph) = self.own[col];
                    g[(c, col)] = self.particle_amplitude * (w * t + ph).sin();
                }
            }
        }
        g
    }

    pub(crate) fn has_white(&self) -> bool {
        self.white != 0.0
    }

    pub(crate) fn common_at(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        if !self.common.is_empty() {
            for (c, o) in out.iter_mut().enumerate() {
                let s: f64 = self.common[c * self.sinusoids..(c + 1) * self.sinusoids]
                    .iter()
                    .map(|(w, ph)| (w * t + ph).sin())
                    .sum();
                *o = self.amplitude * s;
            }
        }
        out
    }

    /// Adds the particle-specific part (sinusoids and white noise) to `out`.
    fn add_particle(&self, p: usize, t: f64, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        if !self.own.is_empty() {
            let per = self.dim * self.own_count;
            let coeffs = &self.coeffs[p * per..(p + 1) * per];
            for (c, o) in out.iter_mut().enumerate() {
                let mut s = 0.0;
                for j in 0..self.own_count {
                    let (w, ph) = self.own[c * self.own_count + j];
                    s += coeffs[c * self.own_count + j] * (w * t + ph).sin();
                }
                *o += self.particle_amplitude * s;
            }
        }
        if self.white != 0.0 {
            for o in out.iter_mut() {
                *o += self.white * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    Zero,
    Feedback {
        schedule: FeedbackSchedule,
        exploration: Option<Exploration>,
    },
    /// Open-loop signal only.
    External(Exploration),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Recording {
    /// Keep every particle's state, inputs and outputs at every grid point.
    #[default]
    Full,
    /// Keep ensemble means and per-particle cost integrals only.
    Summary,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SimOptions {
    pub recording: Recording,
    pub execution: Execution,
}

/// Per-particle values on the grid, laid out `[grid point][particle][component]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticlePaths {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub grid: Vec<f64>,
    pub dims: Dims,
    /// Output dimension `rows(M) + nu`.
    pub nz: usize,
    pub particles: usize,
    /// Ensemble means, laid out `[grid point][component]`.
    pub mean_x: Vec<f64>,
    pub mean_u: Vec<f64>,
    pub mean_v: Vec<f64>,
    /// Jump counts summed over particles, laid out `[step][atom]`.
    pub jump_counts: Vec<u64>,
    pub atoms: usize,
    pub paths: Option<ParticlePaths>,
    /// Trapezoidal `∫|z|²dt` per particle.
    pub z_energy: Vec<f64>,
    /// Trapezoidal `∫|v|²dt` per particle.
    pub v_energy: Vec<f64>,
}

impl PathBundle {
    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn mean_x_at(&self, k: usize) -> &[f64] {
        let n = self.dims.n;
        &self.mean_x[k * n..(k + 1) * n]
    }

    pub fn mean_u_at(&self, k: usize) -> &[f64] {
        let nu = self.dims.nu;
        &self.mean_u[k * nu..(k + 1) * nu]
    }

    pub fn mean_v_at(&self, k: usize) -> &[f64] {
        let nv = self.dims.nv;
        &self.mean_v[k * nv..(k + 1) * nv]
    }

    fn slice<'a>(&self, data: &'a [f64], width: usize, k: usize, p: usize) -> &'a [f64] {
        let o = (k * self.particles + p) * width;
        &data[o..o + width]
    }

    pub fn x(&self, k: usize, p: usize) -> Option<&[f64]> {
        self.paths.as_ref().map(|d| self.slice(&d.x, self.dims.n, k, p))
    }

    pub fn u(&self, k: usize, p: usize) -> Option<&[f64]> {
        self.paths.as_ref().map(|d| self.slice(&d.u, self.dims.nu, k, p))
    }

    pub fn v(&self, k: usize, p: usize) -> Option<&[f64]> {
        self.paths.as_ref().map(|d| self.slice(&d.v, self.dims.nv, k, p))
    }

    pub fn z(&self, k: usize, p: usize) -> Option<&[f64]> {
        self.paths.as_ref().map(|d| self.slice(&d.z, self.nz, k, p))
    }

    /// Builds a bundle from full paths, recomputing means and energies.
    pub fn from_paths(
        grid: Vec<f64>,
        dims: Dims,
        nz: usize,
        particles: usize,
        paths: ParticlePaths,
    ) -> Result<Self, SimError> {
        let pts = grid.len();
        if pts < 2 || particles == 0 {
            return Err(SimError::BadGrid("need at least two grid points and one particle".into()));
        }
        let expect = |len: usize, w: usize, what: &str| {
            if len == pts * particles * w {
                Ok(())
            } else {
                Err(SimError::Shape(format!("{what} has {len} values, expected {}", pts * particles * w)))
            }
        };
        expect(paths.x.len(), dims.n, "x")?;
        expect(paths.u.len(), dims.nu, "u")?;
        expect(paths.v.len(), dims.nv, "v")?;
        expect(paths.z.len(), nz, "z")?;
        let means = |data: &[f64], w: usize| {
            let mut out = vec![0.0; pts * w];
            for k in 0..pts {
                for p in 0..particles {
                    for c in 0..w {
                        out[k * w + c] += data[(k * particles + p) * w + c];
                    }
                }
            }
            out.iter_mut().for_each(|v| *v /= particles as f64);
            out
        };
        let energy = |data: &[f64], w: usize| {
            let mut out = vec![0.0; particles];
            for k in 0..pts {
                let wt = trapezoid_weight(&grid, k);
                for (p, e) in out.iter_mut().enumerate() {
                    let s = &data[(k * particles + p) * w..(k * particles + p + 1) * w];
                    *e += wt * s.iter().map(|v| v * v).sum::<f64>();
                }
            }
            out
        };
        Ok(Self {
            mean_x: means(&paths.x, dims.n),
            mean_u: means(&paths.u, dims.nu),
            mean_v: means(&paths.v, dims.nv),
            z_energy: energy(&paths.z, nz),
            v_energy: energy(&paths.v, dims.nv),
            jump_counts: Vec::new(),
            atoms: 0,
            grid,
            dims,
            nz,
            particles,
            paths: Some(paths),
        })
    }
}

fn trapezoid_weight(grid: &[f64], k: usize) -> f64 {
    let last = grid.len() - 1;
    let left = if k > 0 { grid[k] - grid[k - 1] } else { 0.0 };
    let right = if k < last { grid[k + 1] - grid[k] } else { 0.0 };
    0.5 * (left + right)
}

/// `out += m x` with `m` column-major.
fn mv_add(out: &mut [f64], m: &Mat, x: &[f64]) {
    let rows = m.nrows();
    let data = m.as_slice();
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let col = &data[j * rows..(j + 1) * rows];
        for (o, &c) in out.iter_mut().zip(col) {
            *o += c * xj;
        }
    }
}

fn mv(m: &Mat, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.nrows()];
    mv_add(&mut out, m, x);
    out
}

fn particle_rng(base: &ChaCha8Rng, p: usize, word: u128) -> ChaCha8Rng {
    let mut r = base.clone();
    r.set_stream(p as u64);
    r.set_word_pos(word);
    r
}

/// Symmetric square root via eigen-decomposition; negative eigenvalues are clipped.
fn psd_sqrt(cov: &Mat) -> Mat {
    let eig = cov.clone().symmetric_eigen();
    let d = Mat::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

struct PolicyRuntime {
    schedule: Option<FeedbackSchedule>,
    exploration: Option<RealizedExploration>,
    dim: usize,
}

impl PolicyRuntime {
    fn new(spec: &PolicySpec, dim: usize, n: usize, particles: usize, horizon: f64, dt: f64) -> Result<Self, SimError> {
        let (schedule, exploration) = match spec {
            PolicySpec::Zero => (None, None),
            PolicySpec::Feedback { schedule, exploration } => {
                schedule.check(dim, n, horizon, dt)?;
                (Some(schedule.clone()), exploration.as_ref())
            }
            PolicySpec::External(e) => (None, Some(e)),
        };
        Ok(Self { schedule, exploration: exploration.map(|e| e.realize(dim, particles)), dim })
    }

    /// Per-step data: `K` and the particle-independent offset `(K_sum - K) x̄ + e(t)`.
    fn step_data(&self, t: f64, xbar: &[f64]) -> (Option<Mat>, Vec<f64>) {
        let mut offset = self.exploration.as_ref().map_or_else(|| vec![0.0; self.dim], |e| e.common_at(t));
        let gain = self.schedule.as_ref().map(|s| {
            let (k, ks) = s.at(t);
            let shift = mv(&(&ks - &k), xbar);
            offset.iter_mut().zip(shift).for_each(|(o, s)| *o += s);
            k
        });
        (gain, offset)
    }
}

/// Simulates the particle system on `[0, T]` with step `noise.dt`.
///
/// Inputs are evaluated on the pre-step state; the same values enter drift,
/// diffusion and jump terms. Runs are reproducible from `noise.seed`, and the
/// result does not depend on `opts.execution`.
pub fn simulate(
    model: &MeanFieldJumpModel,
    u_policy: &PolicySpec,
    v_policy: &PolicySpec,
    noise: &NoiseSpec,
    x0: &InitialState,
    opts: SimOptions,
) -> Result<PathBundle, SimError> {
    let Dims { n, nu, nv } = model.dims;
    let np = noise.particles;
    let exec = opts.execution;
    if np == 0 {
        return Err(SimError::BadGrid("no particles".into()));
    }
    let steps = (model.horizon / noise.dt).round();
    if !(noise.dt > 0.0) || steps < 1.0 || (steps * noise.dt - model.horizon).abs() > 1e-9 {
        return Err(SimError::BadGrid(format!("step {} does not divide horizon {}", noise.dt, model.horizon)));
    }
    let steps = steps as usize;
    let grid: Vec<f64> = (0..=steps).map(|k| model.horizon * k as f64 / steps as f64).collect();
    if x0.dim() != n {
        return Err(SimError::Shape(format!("initial state has dimension {}, expected {n}", x0.dim())));
    }
    let mean_field = [&model.a_bar, &model.b1_bar, &model.b2_bar, &model.c_bar, &model.d1_bar, &model.d2_bar]
        .into_iter()
        .chain(model.atoms.iter().flat_map(|a| [&a.e_bar, &a.f1_bar, &a.f2_bar]))
        .any(|m| m.iter().any(|v| *v != 0.0));
    if mean_field && np < 2 {
        return Err(SimError::TooFewParticles);
    }
    let upol = PolicyRuntime::new(u_policy, nu, n, np, model.horizon, noise.dt)?;
    let vpol = PolicyRuntime::new(v_policy, nv, n, np, model.horizon, noise.dt)?;
    let natoms = model.atoms.len();
    let nm = model.m.nrows();
    let nz = nm + nu;
    let dt = noise.dt;
    let sqdt = dt.sqrt();
    let base = ChaCha8Rng::seed_from_u64(noise.seed);
    let poisson: Vec<Option<Poisson<f64>>> =
        model.atoms.iter().map(|a| if a.weight > 0.0 { Poisson::new(a.weight * dt).ok() } else { None }).collect();

    // initial states
    let mut x = vec![0.0; np * n];
    match x0 {
        InitialState::Point(p) => x.chunks_mut(n).for_each(|c| c.copy_from_slice(p.as_slice())),
        InitialState::Gaussian { mean, cov } => {
            let root = psd_sqrt(cov);
            let start = ChaCha8Rng::seed_from_u64(noise.seed ^ 0x9e37_79b9_7f4a_7c15);
            exec::for_each_chunk_mut(exec, &mut x, n * CHUNK, |c, chunk| {
                for (j, xp) in chunk.chunks_mut(n).enumerate() {
                    let mut r = particle_rng(&start, c * CHUNK + j, 0);
                    let xi: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
                    xp.copy_from_slice(mean.as_slice());
                    mv_add(xp, &root, &xi);
                }
            });
        }
    }

    let full = opts.recording == Recording::Full;
    let pts = steps + 1;
    let mut paths = full.then(|| ParticlePaths {
        x: Vec::with_capacity(pts * np * n),
        u: Vec::with_capacity(pts * np * nu),
        v: Vec::with_capacity(pts * np * nv),
        z: Vec::with_capacity(pts * np * nz),
    });
    let mut mean_x = Vec::with_capacity(pts * n);
    let mut mean_u = Vec::with_capacity(pts * nu);
    let mut mean_v = Vec::with_capacity(pts * nv);
    let mut jump_counts = vec![0u64; steps * natoms];
    let mut energies = vec![0.0; np * 2];
    let mut u = vec![0.0; np * nu];
    let mut v = vec![0.0; np * nv];
    let mut counts = vec![0u32; np * natoms.max(1)];
    let inv = 1.0 / np as f64;

    for k in 0..=steps {
        let t = grid[k];
        let xbar: Vec<f64> = exec::sum_vectors(exec, np, n, CHUNK, |p, acc| {
            acc.iter_mut().zip(&x[p * n..(p + 1) * n]).for_each(|(a, v)| *a += v)
        })
        .into_iter()
        .map(|s| s * inv)
        .collect();
        if xbar.iter().any(|v| !v.is_finite()) {
            let particle = (0..np).find(|&p| x[p * n..(p + 1) * n].iter().any(|v| !v.is_finite())).unwrap_or(0);
            return Err(SimError::DivergedPath { t, particle });
        }

        let (ku, off_u) = upol.step_data(t, &xbar);
        let (kv, off_v) = vpol.step_data(t, &xbar);
        let word = (k as u128) << STEP_WORDS;
        let xs = &x;
        exec::for_each_chunk_pair_mut(exec, &mut u, nu * CHUNK, &mut v, nv * CHUNK, |c, uc, vc| {
            let first = c * CHUNK;
            let count = if nu > 0 { uc.len() / nu } else { vc.len() / nv.max(1) };
            for j in 0..count {
                let p = first + j;
                let xp = &xs[p * n..(p + 1) * n];
                let mut r = particle_rng(&base, p, word);
                let up = &mut uc[j * nu..(j + 1) * nu];
                up.copy_from_slice(&off_u);
                if let Some(g) = &ku {
                    mv_add(up, g, xp);
                }
                if let Some(e) = &upol.exploration {
                    e.add_particle(p, t, &mut r, up);
                }
                let vp = &mut vc[j * nv..(j + 1) * nv];
                vp.copy_from_slice(&off_v);
                if let Some(g) = &kv {
                    mv_add(vp, g, xp);
                }
                if let Some(e) = &vpol.exploration {
                    e.add_particle(p, t, &mut r, vp);
                }
            }
        });
        let ubar: Vec<f64> = exec::sum_vectors(exec, np, nu, CHUNK, |p, acc| {
            acc.iter_mut().zip(&u[p * nu..(p + 1) * nu]).for_each(|(a, v)| *a += v)
        })
        .into_iter()
        .map(|s| s * inv)
        .collect();
        let vbar: Vec<f64> = exec::sum_vectors(exec, np, nv, CHUNK, |p, acc| {
            acc.iter_mut().zip(&v[p * nv..(p + 1) * nv]).for_each(|(a, v)| *a += v)
        })
        .into_iter()
        .map(|s| s * inv)
        .collect();

        // outputs and running energies
        let wt = trapezoid_weight(&grid, k);
        let z_of = |p: usize| -> Vec<f64> {
            let mut z = mv(&model.m, &x[p * n..(p + 1) * n]);
            z.extend_from_slice(&u[p * nu..(p + 1) * nu]);
            z
        };
        if let Some(d) = paths.as_mut() {
            d.x.extend_from_slice(&x);
            d.u.extend_from_slice(&u);
            d.v.extend_from_slice(&v);
            for p in 0..np {
                d.z.extend(z_of(p));
            }
        }
        {
            let (us, vs, xs) = (&u, &v, &x);
            exec::for_each_chunk_mut(exec, &mut energies, 2 * CHUNK, |c, chunk| {
                for (j, e) in chunk.chunks_mut(2).enumerate() {
                    let p = c * CHUNK + j;
                    let mx = mv(&model.m, &xs[p * n..(p + 1) * n]);
                    let z2: f64 = mx.iter().map(|a| a * a).sum::<f64>()
                        + us[p * nu..(p + 1) * nu].iter().map(|a| a * a).sum::<f64>();
                    let v2: f64 = vs[p * nv..(p + 1) * nv].iter().map(|a| a * a).sum();
                    e[0] += wt * z2;
                    e[1] += wt * v2;
                }
            });
        }
        mean_x.extend_from_slice(&xbar);
        mean_u.extend_from_slice(&ubar);
        mean_v.extend_from_slice(&vbar);
        if k == steps {
            break;
        }

        // common mean-field parts of drift, diffusion and jump coefficients
        let mut drift_mean = mv(&model.a_bar, &xbar);
        mv_add(&mut drift_mean, &model.b2_bar, &ubar);
        mv_add(&mut drift_mean, &model.b1_bar, &vbar);
        let mut diff_mean = mv(&model.c_bar, &xbar);
        mv_add(&mut diff_mean, &model.d2_bar, &ubar);
        mv_add(&mut diff_mean, &model.d1_bar, &vbar);
        let jump_mean: Vec<Vec<f64>> = model
            .atoms
            .iter()
            .map(|a| {
                let mut j = mv(&a.e_bar, &xbar);
                mv_add(&mut j, &a.f2_bar, &ubar);
                mv_add(&mut j, &a.f1_bar, &vbar);
                j
            })
            .collect();
        let (us, vs) = (&u, &v);
        let width = natoms.max(1);
        exec::for_each_chunk_pair_mut(exec, &mut x, n * CHUNK, &mut counts, width * CHUNK, |c, xc, cc| {
            for (j, xp) in xc.chunks_mut(n).enumerate() {
                let p = c * CHUNK + j;
                let up = &us[p * nu..(p + 1) * nu];
                let vp = &vs[p * nv..(p + 1) * nv];
                let mut r = particle_rng(&base, p, word + STATE_NOISE_OFFSET);
                let dw: f64 = sqdt * r.sample::<f64, _>(StandardNormal);
                let mut dx = drift_mean.clone();
                mv_add(&mut dx, &model.a, xp);
                mv_add(&mut dx, &model.b2, up);
                mv_add(&mut dx, &model.b1, vp);
                dx.iter_mut().for_each(|d| *d *= dt);
                let mut diff = diff_mean.clone();
                mv_add(&mut diff, &model.c, xp);
                mv_add(&mut diff, &model.d2, up);
                mv_add(&mut diff, &model.d1, vp);
                dx.iter_mut().zip(&diff).for_each(|(d, s)| *d += s * dw);
                for (a, atom) in model.atoms.iter().enumerate() {
                    let cnt = poisson[a].as_ref().map_or(0.0, |d| d.sample(&mut r));
                    cc[j * width + a] = cnt as u32;
                    let mult = cnt - atom.weight * dt;
                    if mult != 0.0 {
                        let mut jv = jump_mean[a].clone();
                        mv_add(&mut jv, &atom.e, xp);
                        mv_add(&mut jv, &atom.f2, up);
                        mv_add(&mut jv, &atom.f1, vp);
                        dx.iter_mut().zip(&jv).for_each(|(d, s)| *d += s * mult);
                    }
                }
                xp.iter_mut().zip(&dx).for_each(|(a, d)| *a += d);
            }
        });
        for p in 0..np {
            for a in 0..natoms {
                jump_counts[k * natoms + a] += counts[p * width + a] as u64;
            }
        }
    }

    Ok(PathBundle {
        grid,
        dims: model.dims,
        nz,
        particles: np,
        mean_x,
        mean_u,
        mean_v,
        jump_counts,
        atoms: natoms,
        paths,
        z_energy: energies.iter().step_by(2).copied().collect(),
        v_energy: energies.iter().skip(1).step_by(2).copied().collect(),
    })
}

/// `‖z‖ / ‖v‖` with both norms the root of the ensemble-averaged time integral.
pub fn empirical_gain(bundle: &PathBundle) -> Result<f64, SimError> {
    let np = bundle.particles as f64;
    let zz: f64 = bundle.z_energy.iter().sum::<f64>() / np;
    let vv: f64 = bundle.v_energy.iter().sum::<f64>() / np;
    if vv <= 0.0 {
        return Err(SimError::ZeroDisturbance);
    }
    Ok((zz / vv).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    /// `E∫(γ²|v|² - |z|²)dt`
    J1,
    /// `E∫|z|²dt`
    J2,
    /// `E∫(|z|² - γ²|v|²)dt`
    JInf,
}

/// Ensemble estimate of a cost functional and its standard error.
pub fn estimate_cost(bundle: &PathBundle, kind: CostKind, gamma: f64) -> (f64, f64) {
    let g2 = gamma * gamma;
    let vals: Vec<f64> = bundle
        .z_energy
        .iter()
        .zip(&bundle.v_energy)
        .map(|(z, v)| match kind {
            CostKind::J1 => g2 * v - z,
            CostKind::J2 => *z,
            CostKind::JInf => z - g2 * v,
        })
        .collect();
    mean_and_se(&vals)
}

pub(crate) fn mean_and_se(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Ensemble covariance of the state at grid point `k`; `None` without full paths.
pub fn ensemble_cov(bundle: &PathBundle, k: usize) -> Option<Mat> {
    let n = bundle.dims.n;
    let mean = bundle.mean_x_at(k);
    let mut cov = Mat::zeros(n, n);
    for p in 0..bundle.particles {
        let x = bundle.x(k, p)?;
        for i in 0..n {
            for j in 0..n {
                cov[(i, j)] += (x[i] - mean[i]) * (x[j] - mean[j]);
            }
        }
    }
    Some(cov / bundle.particles as f64)
}
