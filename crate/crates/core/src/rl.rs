//! Model-free H∞ synthesis for the jump-free mean-field system by off-policy
//! policy iteration.
//!
//! Data are collected once under a behavior policy with exploration. Each
//! candidate policy is then evaluated by least squares on an identity that
//! links the value matrices `P`, `Q` at the ends of an interval to integrals of
//! state and input moments over the interval. The identified products
//! (`B'P + D'P C`-type blocks) drive the policy-improvement step without the
//! model coefficients.
//!
//! Every initial state runs one particle population over the whole horizon.
//! Within interval `i` the regression unknowns are `Q(t_i)`, `P(t_i)` and the
//! ten product blocks; `Q(t_{i+1})`, `P(t_{i+1})` are taken from the already
//! solved interval `i+1` (zero at the horizon), so intervals are solved
//! backward in time.

use crate::exec::{self, Execution};
use crate::linalg::{inner, min_eig, solve, symmetrize, Mat, Vector};
use crate::model::{Dims, MeanFieldJumpModel};
use crate::riccati::{lyapunov_solve, time_grid, LyapunovCoeffs, RiccatiError};
use crate::simulate::{
    self, Exploration, FeedbackSchedule, InitialState, NoiseSpec, PolicySpec, Recording, SimError, SimOptions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RlError {
    #[error("matrix is not symmetric (asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("interval {interval}: regression rank {rank} below {needed} unknowns")]
    RankDeficient { interval: usize, rank: usize, needed: usize },
    #[error("policy improvement failed: {0}")]
    SingularImprovement(&'static str),
    #[error("no convergence after {outer} outer and {inner} inner iterations")]
    NoConvergence { outer: usize, inner: usize },
    #[error("model has jump atoms; the learning plant is jump-free")]
    HasJumps,
    #[error("invalid setting: {0}")]
    Setting(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
}

// ---------------------------------------------------------------------------
// Encodings

/// Upper triangle of a symmetric matrix with doubled off-diagonals, row by row.
pub fn svec(p: &Mat) -> Result<Vec<f64>, RlError> {
    let asym = crate::linalg::asymmetry(p);
    if asym > 1e-12 * (1.0 + crate::linalg::max_abs(p)) {
        return Err(RlError::Asymmetric(asym));
    }
    let n = p.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        out.push(p[(i, i)]);
        for j in i + 1..n {
            out.push(p[(i, j)] + p[(j, i)]);
        }
    }
    Ok(out)
}

/// Inverse of [`svec`].
pub fn smat(v: &[f64], n: usize) -> Mat {
    let mut p = Mat::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        p[(i, i)] = v[k];
        k += 1;
        for j in i + 1..n {
            p[(i, j)] = 0.5 * v[k];
            p[(j, i)] = 0.5 * v[k];
            k += 1;
        }
    }
    p
}

/// Quadratic monomials `[x1², x1x2, …, x1xn, x2², …, xn²]`.
pub fn xbar(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            out.push(x[i] * x[j]);
        }
    }
    out
}

/// Upper triangle of `s` row by row, so that `⟨svec D, xbar_mat S⟩ = tr(D S)`
/// for symmetric `D`, `S`, and `xbar_mat(x x') = xbar(x)`.
pub fn xbar_mat(s: &Mat) -> Vec<f64> {
    let n = s.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            out.push(s[(i, j)]);
        }
    }
    out
}

fn sym_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Number of unknowns in the per-interval regression as originally laid out
/// (without the `P(t_i)` column).
pub fn g_len(dims: Dims) -> usize {
    let Dims { n, nu, nv } = dims;
    3 * n * (n + 1) / 2 + 2 * nu * n + 2 * nv * n + nu * (nu + 1) + nv * (nv + 1) + 2 * nu * nv
}

// ---------------------------------------------------------------------------
// Regression unknowns

/// Blocks of the regression vector, in column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    QNext,
    Q,
    /// `(B2+B̄2)'Q + (D2+D̄2)'P(C̃ + D̃1 F̃)`
    MeanB2,
    /// `(B1+B̄1)'Q + (D1+D̄1)'P(C̃ + D̃2 L̃)`
    MeanB1,
    /// `B2'P + D2'P(C + D1 F)`
    B2,
    /// `B1'P + D1'P(C + D2 L)`
    B1,
    /// `D̃2'P D̃2`
    MeanD2,
    /// `D̃1'P D̃1`
    MeanD1,
    D2,
    D1,
    /// `D2'P D1`
    H,
    /// `D̃2'P D̃1`
    MeanH,
    PNext,
    P,
}

/// Blocks of the per-interval regression vector whose length is [`g_len`].
pub const CORE_BLOCKS: [Block; 13] = [
    Block::QNext,
    Block::Q,
    Block::MeanB2,
    Block::MeanB1,
    Block::B2,
    Block::B1,
    Block::MeanD2,
    Block::MeanD1,
    Block::D2,
    Block::D1,
    Block::H,
    Block::MeanH,
    Block::PNext,
];

/// Column order used by [`assemble`]: the core blocks followed by `P(t_i)`,
/// whose feature is nonzero because each population carries its own
/// deviation covariance at `t_i`.
pub const BLOCK_ORDER: [Block; 14] = [
    Block::QNext,
    Block::Q,
    Block::MeanB2,
    Block::MeanB1,
    Block::B2,
    Block::B1,
    Block::MeanD2,
    Block::MeanD1,
    Block::D2,
    Block::D1,
    Block::H,
    Block::MeanH,
    Block::PNext,
    Block::P,
];

impl Block {
    /// Matrix shape of the block.
    pub fn shape(self, dims: Dims) -> (usize, usize) {
        let Dims { n, nu, nv } = dims;
        match self {
            Block::QNext | Block::Q | Block::PNext | Block::P => (n, n),
            Block::MeanB2 | Block::B2 => (nu, n),
            Block::MeanB1 | Block::B1 => (nv, n),
            Block::MeanD2 | Block::D2 => (nu, nu),
            Block::MeanD1 | Block::D1 => (nv, nv),
            Block::H | Block::MeanH => (nu, nv),
        }
    }

    /// Symmetric blocks are stored with [`svec`], the others column-major.
    pub fn symmetric(self) -> bool {
        !matches!(self, Block::MeanB2 | Block::MeanB1 | Block::B2 | Block::B1 | Block::H | Block::MeanH)
    }

    pub fn len(self, dims: Dims) -> usize {
        let (r, c) = self.shape(dims);
        if self.symmetric() {
            sym_len(r)
        } else {
            r * c
        }
    }

    fn encode(self, m: &Mat) -> Vec<f64> {
        if self.symmetric() {
            let mut s = m.clone();
            symmetrize(&mut s);
            svec(&s).expect("symmetrized")
        } else {
            m.as_slice().to_vec()
        }
    }

    fn decode(self, v: &[f64], dims: Dims) -> Mat {
        let (r, c) = self.shape(dims);
        if self.symmetric() {
            smat(v, r)
        } else {
            Mat::from_column_slice(r, c, v)
        }
    }
}

/// All regression blocks of one interval.
#[derive(Debug, Clone, PartialEq)]
pub struct XiVector {
    pub q_next: Mat,
    pub q: Mat,
    pub mean_b2: Mat,
    pub mean_b1: Mat,
    pub b2: Mat,
    pub b1: Mat,
    pub mean_d2: Mat,
    pub mean_d1: Mat,
    pub d2: Mat,
    pub d1: Mat,
    pub h: Mat,
    pub mean_h: Mat,
    pub p_next: Mat,
    pub p: Mat,
}

impl XiVector {
    pub fn zeros(dims: Dims) -> Self {
        let z = |b: Block| {
            let (r, c) = b.shape(dims);
            Mat::zeros(r, c)
        };
        Self {
            q_next: z(Block::QNext),
            q: z(Block::Q),
            mean_b2: z(Block::MeanB2),
            mean_b1: z(Block::MeanB1),
            b2: z(Block::B2),
            b1: z(Block::B1),
            mean_d2: z(Block::MeanD2),
            mean_d1: z(Block::MeanD1),
            d2: z(Block::D2),
            d1: z(Block::D1),
            h: z(Block::H),
            mean_h: z(Block::MeanH),
            p_next: z(Block::PNext),
            p: z(Block::P),
        }
    }

    pub fn get(&self, b: Block) -> &Mat {
        match b {
            Block::QNext => &self.q_next,
            Block::Q => &self.q,
            Block::MeanB2 => &self.mean_b2,
            Block::MeanB1 => &self.mean_b1,
            Block::B2 => &self.b2,
            Block::B1 => &self.b1,
            Block::MeanD2 => &self.mean_d2,
            Block::MeanD1 => &self.mean_d1,
            Block::D2 => &self.d2,
            Block::D1 => &self.d1,
            Block::H => &self.h,
            Block::MeanH => &self.mean_h,
            Block::PNext => &self.p_next,
            Block::P => &self.p,
        }
    }

    pub fn get_mut(&mut self, b: Block) -> &mut Mat {
        match b {
            Block::QNext => &mut self.q_next,
            Block::Q => &mut self.q,
            Block::MeanB2 => &mut self.mean_b2,
            Block::MeanB1 => &mut self.mean_b1,
            Block::B2 => &mut self.b2,
            Block::B1 => &mut self.b1,
            Block::MeanD2 => &mut self.mean_d2,
            Block::MeanD1 => &mut self.mean_d1,
            Block::D2 => &mut self.d2,
            Block::D1 => &mut self.d1,
            Block::H => &mut self.h,
            Block::MeanH => &mut self.mean_h,
            Block::PNext => &mut self.p_next,
            Block::P => &mut self.p,
        }
    }

    /// Length of the encoded vector over the given blocks.
    pub fn len_of(blocks: &[Block], dims: Dims) -> usize {
        blocks.iter().map(|b| b.len(dims)).sum()
    }

    pub fn encode(&self, blocks: &[Block]) -> Vec<f64> {
        blocks.iter().flat_map(|b| b.encode(self.get(*b))).collect()
    }

    /// Decodes `v` into the listed blocks; other blocks are left as they are.
    pub fn decode_into(&mut self, blocks: &[Block], v: &[f64], dims: Dims) {
        let mut o = 0;
        for b in blocks {
            let l = b.len(dims);
            *self.get_mut(*b) = b.decode(&v[o..o + l], dims);
            o += l;
        }
    }
}

/// Target policy on one interval: `u = L y + L̃ m`, `v = F y + F̃ m`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetGains {
    pub l: Mat,
    pub l_mean: Mat,
    pub f: Mat,
    pub f_mean: Mat,
}

impl TargetGains {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            l: Mat::zeros(dims.nu, dims.n),
            l_mean: Mat::zeros(dims.nu, dims.n),
            f: Mat::zeros(dims.nv, dims.n),
            f_mean: Mat::zeros(dims.nv, dims.n),
        }
    }
}

/// Products that make up the regression blocks, computed from the model.
pub fn model_blocks(model: &MeanFieldJumpModel, p: &Mat, q: &Mat, g: &TargetGains) -> XiVector {
    let bt2 = &model.b2 + &model.b2_bar;
    let bt1 = &model.b1 + &model.b1_bar;
    let ct = &model.c + &model.c_bar;
    let dt2 = &model.d2 + &model.d2_bar;
    let dt1 = &model.d1 + &model.d1_bar;
    let (d1, d2) = (&model.d1, &model.d2);
    XiVector {
        q_next: q.clone(),
        q: q.clone(),
        mean_b2: bt2.transpose() * q + dt2.transpose() * p * (&ct + &dt1 * &g.f_mean),
        mean_b1: bt1.transpose() * q + dt1.transpose() * p * (&ct + &dt2 * &g.l_mean),
        b2: model.b2.transpose() * p + d2.transpose() * p * (&model.c + d1 * &g.f),
        b1: model.b1.transpose() * p + d1.transpose() * p * (&model.c + d2 * &g.l),
        mean_d2: dt2.transpose() * p * &dt2,
        mean_d1: dt1.transpose() * p * &dt1,
        d2: d2.transpose() * p * d2,
        d1: d1.transpose() * p * d1,
        h: d2.transpose() * p * d1,
        mean_h: dt2.transpose() * p * &dt1,
        p_next: p.clone(),
        p: p.clone(),
    }
}

/// Gains that make the identified blocks stationary.
///
/// `L = -(I + 𝒟2)⁻¹ℬ2`, `F = (γ²I - 𝒟1)⁻¹ℬ1` and likewise in the mean channel.
pub fn improve(xi: &XiVector, gamma: f64) -> Result<TargetGains, RlError> {
    let nu = xi.d2.nrows();
    let nv = xi.d1.nrows();
    let g2 = Mat::identity(nv, nv) * (gamma * gamma);
    let ctrl = |d: &Mat, b: &Mat, which| {
        solve(&(Mat::identity(nu, nu) + d), b).map(|x| -x).ok_or(RlError::SingularImprovement(which))
    };
    let dist = |d: &Mat, b: &Mat, which| {
        let m = &g2 - d;
        if !(min_eig(&m) > 0.0) {
            return Err(RlError::SingularImprovement(which));
        }
        solve(&m, b).ok_or(RlError::SingularImprovement(which))
    };
    Ok(TargetGains {
        l: ctrl(&xi.d2, &xi.b2, "I + D2'PD2")?,
        l_mean: ctrl(&xi.mean_d2, &xi.mean_b2, "I + D̃2'PD̃2")?,
        f: dist(&xi.d1, &xi.b1, "γ²I - D1'PD1")?,
        f_mean: dist(&xi.mean_d1, &xi.mean_b1, "γ²I - D̃1'PD̃1")?,
    })
}

// ---------------------------------------------------------------------------
// Model-based policy evaluation

/// Piecewise-constant gains on an interval grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseGains {
    pub grid: Vec<f64>,
    pub gains: Vec<TargetGains>,
}

impl PiecewiseGains {
    pub fn constant(g: TargetGains, horizon: f64) -> Self {
        Self { grid: vec![0.0, horizon], gains: vec![g] }
    }

    /// Interval containing `t` (intervals are closed on the left).
    pub fn interval(&self, t: f64) -> usize {
        let k = self.grid.partition_point(|&g| g <= t).saturating_sub(1);
        k.min(self.gains.len() - 1)
    }
}

#[derive(Debug, Clone)]
pub struct PeSolution {
    pub grid: Vec<f64>,
    pub p: Vec<Mat>,
    pub q: Vec<Mat>,
}

impl PeSolution {
    /// Index of grid time `t`.
    pub fn index(&self, t: f64) -> usize {
        let h = self.grid[1] - self.grid[0];
        (t / h).round() as usize
    }
}

/// Solves the two linear policy-evaluation equations backward from zero:
/// first `P` on a grid refined by two, then `Q`, which reads `P` by index.
pub fn pe_oracle(
    model: &MeanFieldJumpModel,
    gains: &PiecewiseGains,
    gamma: f64,
    dt: f64,
) -> Result<PeSolution, RlError> {
    if model.has_jumps() {
        return Err(RlError::HasJumps);
    }
    let grid = time_grid(model.horizon, dt)?;
    let fine = time_grid(model.horizon, dt / 2.0)?;
    for t in &gains.grid {
        let k = t / dt;
        if (k - k.round()).abs() > 1e-6 {
            return Err(RlError::Setting(format!("step {dt} does not align with gain grid point {t}")));
        }
    }
    let n = model.dims.n;
    let mtm = model.mtm();
    let g2 = gamma * gamma;
    let at = |grid: &[f64], step: usize| &gains.gains[gains.interval(0.5 * (grid[step] + grid[step + 1]))];
    let p = lyapunov_solve(
        &fine,
        |st| {
            let g = at(&fine, st.step);
            LyapunovCoeffs {
                a: &model.a + &model.b2 * &g.l + &model.b1 * &g.f,
                c: &model.c + &model.d2 * &g.l + &model.d1 * &g.f,
                jumps: Vec::new(),
                q: &mtm + g.l.transpose() * &g.l - g.f.transpose() * &g.f * g2,
            }
        },
        &Mat::zeros(n, n),
    )?;
    let at_ = &model.a + &model.a_bar;
    let bt2 = &model.b2 + &model.b2_bar;
    let bt1 = &model.b1 + &model.b1_bar;
    let ct = &model.c + &model.c_bar;
    let dt2 = &model.d2 + &model.d2_bar;
    let dt1 = &model.d1 + &model.d1_bar;
    let q = lyapunov_solve(
        &grid,
        |st| {
            let g = at(&grid, st.step);
            let cc = &ct + &dt2 * &g.l_mean + &dt1 * &g.f_mean;
            let idx = 2 * st.step + (2.0 * st.frac).round() as usize;
            LyapunovCoeffs {
                a: &at_ + &bt2 * &g.l_mean + &bt1 * &g.f_mean,
                c: Mat::zeros(n, n),
                jumps: Vec::new(),
                q: cc.transpose() * &p[idx] * &cc + &mtm + g.l_mean.transpose() * &g.l_mean
                    - g.f_mean.transpose() * &g.f_mean * g2,
            }
        },
        &Mat::zeros(n, n),
    )?;
    let p = (0..grid.len()).map(|k| p[2 * k].clone()).collect();
    Ok(PeSolution { grid, p, q })
}

/// Regression vector implied by a policy-evaluation solution on interval
/// `[t_i, t_{i+1}]`: end values at the grid points, products at the midpoint.
pub fn true_xi(model: &MeanFieldJumpModel, pe: &PeSolution, t0: f64, t1: f64, g: &TargetGains) -> XiVector {
    let (i0, i1) = (pe.index(t0), pe.index(t1));
    let mid = pe.index(0.5 * (t0 + t1));
    let mut xi = model_blocks(model, &pe.p[mid], &pe.q[mid], g);
    xi.q = pe.q[i0].clone();
    xi.q_next = pe.q[i1].clone();
    xi.p = pe.p[i0].clone();
    xi.p_next = pe.p[i1].clone();
    xi
}

// ---------------------------------------------------------------------------
// Data

/// Moments of one population over one interval. Integrals run over the
/// interval; `y = x - E x`, `m = E x`, `û = u - E u`, `ū = E u`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalMoments {
    pub m_start: Vector,
    pub m_end: Vector,
    /// `∫ m m'`
    pub mm: Mat,
    /// `∫ ū m'`
    pub um: Mat,
    /// `∫ v̄ m'`
    pub vm: Mat,
    /// `∫ ū ū'`
    pub uu: Mat,
    /// `∫ v̄ v̄'`
    pub vv: Mat,
    /// `∫ ū v̄'`
    pub uv: Mat,
    /// `E[y y']` at both ends
    pub y_start: Mat,
    pub y_end: Mat,
    /// `∫ E[y y']`
    pub yy: Mat,
    /// `∫ E[û y']`
    pub uy: Mat,
    /// `∫ E[v̂ y']`
    pub vy: Mat,
    /// `∫ E[û û']`
    pub uu_dev: Mat,
    /// `∫ E[v̂ v̂']`
    pub vv_dev: Mat,
    /// `∫ E[û v̂']`
    pub uv_dev: Mat,
}

impl IntervalMoments {
    fn zeros(dims: Dims) -> Self {
        let Dims { n, nu, nv } = dims;
        let z = |r, c| Mat::zeros(r, c);
        Self {
            m_start: Vector::zeros(n),
            m_end: Vector::zeros(n),
            mm: z(n, n),
            um: z(nu, n),
            vm: z(nv, n),
            uu: z(nu, nu),
            vv: z(nv, nv),
            uv: z(nu, nv),
            y_start: z(n, n),
            y_end: z(n, n),
            yy: z(n, n),
            uy: z(nu, n),
            vy: z(nv, n),
            uu_dev: z(nu, nu),
            vv_dev: z(nv, nv),
            uv_dev: z(nu, nv),
        }
    }

    fn integrals_mut(&mut self) -> [&mut Mat; 12] {
        [
            &mut self.mm,
            &mut self.um,
            &mut self.vm,
            &mut self.uu,
            &mut self.vv,
            &mut self.uv,
            &mut self.yy,
            &mut self.uy,
            &mut self.vy,
            &mut self.uu_dev,
            &mut self.vv_dev,
            &mut self.uv_dev,
        ]
    }

    fn is_finite(&self) -> bool {
        let mats = [
            &self.mm,
            &self.um,
            &self.vm,
            &self.uu,
            &self.vv,
            &self.uv,
            &self.y_start,
            &self.y_end,
            &self.yy,
            &self.uy,
            &self.vy,
            &self.uu_dev,
            &self.vv_dev,
            &self.uv_dev,
        ];
        mats.iter().all(|m| crate::linalg::is_finite(m))
            && self.m_start.iter().chain(self.m_end.iter()).all(|v| v.is_finite())
    }
}

/// Collected data: `moments[q][i]` for initial state `q` and interval `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub dims: Dims,
    pub grid: Vec<f64>,
    pub substeps: usize,
    /// Particles per population; `None` for exact moments.
    pub paths: Option<usize>,
    pub moments: Vec<Vec<IntervalMoments>>,
}

impl DataSet {
    pub fn intervals(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn populations(&self) -> usize {
        self.moments.len()
    }
}

/// Behavior policy `u = L0 y + L̃0 m + e_u`, `v = F0 y + F̃0 m + e_v` with exploration `e`.
///
/// With `gain_spread > 0` each population adds its own random perturbation of
/// that size to all four gains.
#[derive(Debug, Clone, PartialEq)]
pub struct Behavior {
    pub gains: TargetGains,
    pub explore_u: Exploration,
    pub explore_v: Exploration,
    pub gain_spread: f64,
    pub seed: u64,
}

impl Behavior {
    /// Exploration seeds made distinct per initial state.
    fn for_population(&self, q: usize) -> Behavior {
        let mut b = self.clone();
        b.explore_u.seed = self.explore_u.seed.wrapping_add(2 * q as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        b.explore_v.seed = self.explore_v.seed.wrapping_add(2 * q as u64 + 2).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let shift = |c: Option<u64>| c.map(|c| c.wrapping_add(q as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9));
        b.explore_u.coeff_seed = shift(self.explore_u.coeff_seed);
        b.explore_v.coeff_seed = shift(self.explore_v.coeff_seed);
        if self.gain_spread != 0.0 {
            let mut r = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6a09_e667_f3bc_c908);
            r.set_stream(q as u64);
            let mut perturb = |m: &mut Mat| {
                for v in m.iter_mut() {
                    *v += self.gain_spread * r.sample::<f64, _>(StandardNormal);
                }
            };
            perturb(&mut b.gains.l);
            perturb(&mut b.gains.l_mean);
            perturb(&mut b.gains.f);
            perturb(&mut b.gains.f_mean);
        }
        b
    }
}

/// Initial mean and covariance of population `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct Start {
    pub mean: Vector,
    pub cov: Mat,
}

/// Random, non-degenerate initial distributions.
pub fn population_starts(n: usize, count: usize, seed: u64, mean_scale: f64, cov_scale: f64) -> Vec<Start> {
    (0..count)
        .map(|q| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(q as u64 + 1);
            let mean = Vector::from_fn(n, |_, _| mean_scale * r.random_range(-1.0..=1.0));
            let g = Mat::from_fn(n, n, |_, _| r.sample::<f64, _>(StandardNormal));
            let cov = (&g * g.transpose() / n as f64 + Mat::identity(n, n) * 0.1) * cov_scale;
            Start { mean, cov }
        })
        .collect()
}

/// A system that can be run from a given initial distribution under a behavior
/// policy and report interval moments.
pub trait Plant: Sync {
    fn dims(&self) -> Dims;
    fn horizon(&self) -> f64;
    fn paths(&self) -> Option<usize>;
    fn run(
        &self,
        q: usize,
        start: &Start,
        behavior: &Behavior,
        grid: &[f64],
        substeps: usize,
    ) -> Result<Vec<IntervalMoments>, RlError>;
}

/// Integrates the first and second moments of the population exactly
/// (RK4 on the moment equations), so the data carry no sampling error.
pub struct ExactPlant<'a> {
    pub model: &'a MeanFieldJumpModel,
}

impl<'a> ExactPlant<'a> {
    pub fn new(model: &'a MeanFieldJumpModel) -> Result<Self, RlError> {
        if model.has_jumps() {
            return Err(RlError::HasJumps);
        }
        Ok(Self { model })
    }
}

/// Moment state: mean, augmented second moment and running integrals.
#[derive(Clone)]
struct MomentState {
    m: Mat,
    w: Mat,
    ints: [Mat; 12],
}

impl MomentState {
    fn axpy(&self, s: f64, d: &MomentState) -> MomentState {
        MomentState {
            m: &self.m + &d.m * s,
            w: &self.w + &d.w * s,
            ints: std::array::from_fn(|k| &self.ints[k] + &d.ints[k] * s),
        }
    }
}

impl Plant for ExactPlant<'_> {
    fn dims(&self) -> Dims {
        self.model.dims
    }

    fn horizon(&self) -> f64 {
        self.model.horizon
    }

    fn paths(&self) -> Option<usize> {
        None
    }

    fn run(
        &self,
        _q: usize,
        start: &Start,
        behavior: &Behavior,
        grid: &[f64],
        substeps: usize,
    ) -> Result<Vec<IntervalMoments>, RlError> {
        let md = self.model;
        let Dims { n, nu, nv } = md.dims;
        let eu = behavior.explore_u.realize(nu, 0);
        let ev = behavior.explore_v.realize(nv, 0);
        if eu.has_white() || ev.has_white() {
            return Err(RlError::Setting("white exploration noise has no exact moment model".into()));
        }
        let ku = eu.particle_basis(0.0).ncols();
        let kv = ev.particle_basis(0.0).ncols();
        let na = n + ku + kv;
        let g = &behavior.gains;
        let at = &md.a + &md.a_bar;
        let bt2 = &md.b2 + &md.b2_bar;
        let bt1 = &md.b1 + &md.b1_bar;
        let ct = &md.c + &md.c_bar;
        let dt2 = &md.d2 + &md.d2_bar;
        let dt1 = &md.d1 + &md.d1_bar;
        let acl = &md.a + &md.b2 * &g.l + &md.b1 * &g.f;
        let ccl = &md.c + &md.d2 * &g.l + &md.d1 * &g.f;

        // Selectors: y = Sy w, û = Su(t) w, v̂ = Sv(t) w.
        let mut sy = Mat::zeros(n, na);
        sy.view_mut((0, 0), (n, n)).copy_from(&Mat::identity(n, n));
        let parts = |t: f64| {
            let gu = eu.particle_basis(t);
            let gv = ev.particle_basis(t);
            let mut su = Mat::zeros(nu, na);
            su.view_mut((0, 0), (nu, n)).copy_from(&g.l);
            su.view_mut((0, n), (nu, ku)).copy_from(&gu);
            let mut sv = Mat::zeros(nv, na);
            sv.view_mut((0, 0), (nv, n)).copy_from(&g.f);
            sv.view_mut((0, n + ku), (nv, kv)).copy_from(&gv);
            let mut a = Mat::zeros(na, na);
            a.view_mut((0, 0), (n, n)).copy_from(&acl);
            a.view_mut((0, n), (n, ku)).copy_from(&(&md.b2 * &gu));
            a.view_mut((0, n + ku), (n, kv)).copy_from(&(&md.b1 * &gv));
            let mut c = Mat::zeros(na, na);
            c.view_mut((0, 0), (n, n)).copy_from(&ccl);
            c.view_mut((0, n), (n, ku)).copy_from(&(&md.d2 * &gu));
            c.view_mut((0, n + ku), (n, kv)).copy_from(&(&md.d1 * &gv));
            (su, sv, a, c)
        };
        let means = |t: f64, m: &Mat| {
            let ub = &g.l_mean * m + Mat::from_column_slice(nu, 1, &eu.common_at(t));
            let vb = &g.f_mean * m + Mat::from_column_slice(nv, 1, &ev.common_at(t));
            (ub, vb)
        };
        let rhs = |t: f64, s: &MomentState| -> MomentState {
            let (su, sv, a, c) = parts(t);
            let (ub, vb) = means(t, &s.m);
            let dm = &at * &s.m + &bt2 * &ub + &bt1 * &vb;
            let src = &ct * &s.m + &dt2 * &ub + &dt1 * &vb;
            let mut st = Mat::zeros(na, 1);
            st.view_mut((0, 0), (n, 1)).copy_from(&src);
            let mut dw = &a * &s.w + &s.w * a.transpose() + &c * &s.w * c.transpose() + &st * st.transpose();
            symmetrize(&mut dw);
            let wsy = &s.w * sy.transpose();
            let wsu = &s.w * su.transpose();
            let wsv = &s.w * sv.transpose();
            let ints = [
                &s.m * s.m.transpose(),
                &ub * s.m.transpose(),
                &vb * s.m.transpose(),
                &ub * ub.transpose(),
                &vb * vb.transpose(),
                &ub * vb.transpose(),
                &sy * &wsy,
                &su * &wsy,
                &sv * &wsy,
                &su * &wsu,
                &sv * &wsv,
                &su * &wsv,
            ];
            MomentState { m: dm, w: dw, ints }
        };

        let mut w0 = Mat::identity(na, na);
        w0.view_mut((0, 0), (n, n)).copy_from(&start.cov);
        let shared =
            behavior.explore_u.coeff_seed.is_some() && behavior.explore_u.coeff_seed == behavior.explore_v.coeff_seed;
        if shared {
            for a in 0..ku.min(kv) {
                w0[(n + a, n + ku + a)] = 1.0;
                w0[(n + ku + a, n + a)] = 1.0;
            }
        }
        let template = IntervalMoments::zeros(md.dims);
        let zero_ints = || template.clone().integrals_mut().map(|m| m.clone());
        let mut state =
            MomentState { m: Mat::from_column_slice(n, 1, start.mean.as_slice()), w: w0, ints: zero_ints() };
        let mut out = Vec::with_capacity(grid.len() - 1);
        for i in 0..grid.len() - 1 {
            let mut mom = template.clone();
            mom.m_start = Vector::from_column_slice(state.m.as_slice());
            mom.y_start = &sy * &state.w * sy.transpose();
            state.ints = zero_ints();
            let h = (grid[i + 1] - grid[i]) / substeps as f64;
            for k in 0..substeps {
                let t = grid[i] + k as f64 * h;
                let k1 = rhs(t, &state);
                let k2 = rhs(t + 0.5 * h, &state.axpy(0.5 * h, &k1));
                let k3 = rhs(t + 0.5 * h, &state.axpy(0.5 * h, &k2));
                let k4 = rhs(t + h, &state.axpy(h, &k3));
                let incr = k1.axpy(2.0, &k2).axpy(2.0, &k3).axpy(1.0, &k4);
                state = state.axpy(h / 6.0, &incr);
                symmetrize(&mut state.w);
            }
            mom.m_end = Vector::from_column_slice(state.m.as_slice());
            mom.y_end = &sy * &state.w * sy.transpose();
            for (dst, src) in mom.integrals_mut().into_iter().zip(state.ints.iter()) {
                *dst = src.clone();
            }
            for s in [&mut mom.mm, &mut mom.uu, &mut mom.vv, &mut mom.yy, &mut mom.uu_dev, &mut mom.vv_dev] {
                symmetrize(s);
            }
            if !mom.is_finite() {
                return Err(RlError::Sim(SimError::DivergedPath { t: grid[i + 1], particle: 0 }));
            }
            out.push(mom);
        }
        Ok(out)
    }
}

/// Runs the particle simulator and replaces expectations by sample averages
/// over the population; integrals use the trapezoidal rule on the sub-grid.
pub struct SampledPlant<'a> {
    pub model: &'a MeanFieldJumpModel,
    pub particles: usize,
    pub seed: u64,
    pub execution: Execution,
}

impl<'a> SampledPlant<'a> {
    pub fn new(model: &'a MeanFieldJumpModel, particles: usize, seed: u64) -> Result<Self, RlError> {
        if model.has_jumps() {
            return Err(RlError::HasJumps);
        }
        Ok(Self { model, particles, seed, execution: Execution::Parallel })
    }
}

impl Plant for SampledPlant<'_> {
    fn dims(&self) -> Dims {
        self.model.dims
    }

    fn horizon(&self) -> f64 {
        self.model.horizon
    }

    fn paths(&self) -> Option<usize> {
        Some(self.particles)
    }

    fn run(
        &self,
        q: usize,
        start: &Start,
        behavior: &Behavior,
        grid: &[f64],
        substeps: usize,
    ) -> Result<Vec<IntervalMoments>, RlError> {
        let Dims { n, nu, nv } = self.model.dims;
        let intervals = grid.len() - 1;
        let dt = (grid[intervals] - grid[0]) / (intervals * substeps) as f64;
        for w in grid.windows(2) {
            if ((w[1] - w[0]) / dt - substeps as f64).abs() > 1e-6 {
                return Err(RlError::Setting("the sampled plant needs a uniform interval grid".into()));
            }
        }
        let g = &behavior.gains;
        let policy = |k: &Mat, ks: &Mat, e: &Exploration| PolicySpec::Feedback {
            schedule: FeedbackSchedule::constant(k.clone(), ks.clone(), self.model.horizon),
            exploration: Some(e.clone()),
        };
        let seed = self.seed.wrapping_add((q as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
        let bundle = simulate::simulate(
            self.model,
            &policy(&g.l, &g.l_mean, &behavior.explore_u),
            &policy(&g.f, &g.f_mean, &behavior.explore_v),
            &NoiseSpec { seed, particles: self.particles, dt },
            &InitialState::Gaussian { mean: start.mean.clone(), cov: start.cov.clone() },
            SimOptions { recording: Recording::Full, execution: self.execution },
        )?;
        let np = self.particles;
        let inv = 1.0 / np as f64;
        // Point moments at every sub-grid point: the 12 integrands plus the mean.
        let point = |k: usize| -> (Vector, [Mat; 12]) {
            let xb = Mat::from_column_slice(n, 1, bundle.mean_x_at(k));
            let ub = Mat::from_column_slice(nu, 1, bundle.mean_u_at(k));
            let vb = Mat::from_column_slice(nv, 1, bundle.mean_v_at(k));
            // Second moment of the stacked deviation (y, û, v̂).
            let d = n + nu + nv;
            let mut w = vec![0.0; d];
            let mut acc = vec![0.0; d * d];
            for p in 0..np {
                let parts = [
                    (bundle.x(k, p).expect("full recording"), xb.as_slice()),
                    (bundle.u(k, p).expect("full recording"), ub.as_slice()),
                    (bundle.v(k, p).expect("full recording"), vb.as_slice()),
                ];
                let mut o = 0;
                for (val, mean) in parts {
                    for (a, b) in val.iter().zip(mean) {
                        w[o] = a - b;
                        o += 1;
                    }
                }
                for r in 0..d {
                    let wr = w[r];
                    for (c, wc) in w.iter().enumerate().skip(r) {
                        acc[r * d + c] += wr * wc;
                    }
                }
            }
            let sm = Mat::from_fn(d, d, |r, c| acc[r.min(c) * d + r.max(c)] * inv);
            let blk = |r0: usize, nr: usize, c0: usize, nc: usize| sm.view((r0, c0), (nr, nc)).into_owned();
            let (yy, uy, vy) = (blk(0, n, 0, n), blk(n, nu, 0, n), blk(n + nu, nv, 0, n));
            let (uu, vv, uv) = (blk(n, nu, n, nu), blk(n + nu, nv, n + nu, nv), blk(n, nu, n + nu, nv));
            let ints = [
                &xb * xb.transpose(),
                &ub * xb.transpose(),
                &vb * xb.transpose(),
                &ub * ub.transpose(),
                &vb * vb.transpose(),
                &ub * vb.transpose(),
                yy,
                uy,
                vy,
                uu,
                vv,
                uv,
            ];
            (Vector::from_column_slice(xb.as_slice()), ints)
        };
        let points = exec::map(self.execution, bundle.grid.len(), point);
        let mut out = Vec::with_capacity(intervals);
        for i in 0..intervals {
            let k0 = i * substeps;
            let mut mom = IntervalMoments::zeros(self.model.dims);
            mom.m_start = points[k0].0.clone();
            mom.m_end = points[k0 + substeps].0.clone();
            mom.y_start = points[k0].1[6].clone();
            mom.y_end = points[k0 + substeps].1[6].clone();
            for k in k0..=k0 + substeps {
                let w = if k == k0 || k == k0 + substeps { 0.5 * dt } else { dt };
                for (dst, src) in mom.integrals_mut().into_iter().zip(points[k].1.iter()) {
                    *dst += src * w;
                }
            }
            if !mom.is_finite() {
                return Err(RlError::Sim(SimError::DivergedPath { t: grid[i + 1], particle: 0 }));
            }
            out.push(mom);
        }
        Ok(out)
    }
}

/// Runs every population under the behavior policy.
pub fn collect(
    plant: &dyn Plant,
    behavior: &Behavior,
    starts: &[Start],
    grid: &[f64],
    substeps: usize,
    exec: Execution,
) -> Result<DataSet, RlError> {
    if substeps == 0 || grid.len() < 2 {
        return Err(RlError::Setting("need at least one interval and one sub-step".into()));
    }
    let runs = exec::map(exec, starts.len(), |q| plant.run(q, &starts[q], &behavior.for_population(q), grid, substeps));
    let moments = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(DataSet { dims: plant.dims(), grid: grid.to_vec(), substeps, paths: plant.paths(), moments })
}

// ---------------------------------------------------------------------------
// Regression

/// One interval's least-squares problem `Φ ξ = Θ`, rows indexed by initial state.
#[derive(Debug, Clone)]
pub struct RegressionBatch {
    pub phi: Mat,
    pub theta: Vector,
    pub interval: usize,
    /// Blocks of the unknown vector, in column order.
    pub blocks: Vec<Block>,
    /// Blocks fixed to known values and moved to the right-hand side.
    pub pinned: Vec<(Block, Mat)>,
    pub dims: Dims,
    /// Numerical rank of the column-normalized `Φ`.
    pub rank: usize,
    /// Smallest and largest singular values of the column-normalized `Φ`.
    pub min_singular: f64,
    pub max_singular: f64,
}

impl RegressionBatch {
    pub fn condition(&self) -> f64 {
        self.max_singular / self.min_singular
    }

    /// Batch over raw data; `blocks` must cover the columns of `phi`.
    pub fn from_parts(phi: Mat, theta: Vector, interval: usize, blocks: Vec<Block>, dims: Dims) -> Self {
        assert_eq!(XiVector::len_of(&blocks, dims), phi.ncols(), "blocks do not match the columns");
        Self::new(phi, theta, interval, blocks, Vec::new(), dims)
    }

    fn new(
        phi: Mat,
        theta: Vector,
        interval: usize,
        blocks: Vec<Block>,
        pinned: Vec<(Block, Mat)>,
        dims: Dims,
    ) -> Self {
        let (scaled, _) = normalize_columns(&phi);
        let sv = if scaled.nrows() == 0 || scaled.ncols() == 0 {
            Vector::zeros(0)
        } else {
            scaled.clone().svd(false, false).singular_values
        };
        let max = sv.iter().copied().fold(0.0, f64::max);
        let tol = RANK_RTOL * max;
        let rank = sv.iter().filter(|&&s| s > tol && s > 0.0).count();
        let min = if sv.len() < phi.ncols() { 0.0 } else { sv.iter().copied().fold(f64::INFINITY, f64::min) };
        Self { phi, theta, interval, blocks, pinned, dims, rank, min_singular: min, max_singular: max }
    }
}

/// Relative singular-value threshold for the numerical rank.
pub const RANK_RTOL: f64 = 1e-12;

fn normalize_columns(phi: &Mat) -> (Mat, Vec<f64>) {
    let mut out = phi.clone();
    let mut scale = Vec::with_capacity(phi.ncols());
    for j in 0..phi.ncols() {
        let nrm = phi.column(j).norm();
        let s = if nrm > 0.0 { 1.0 / nrm } else { 1.0 };
        out.column_mut(j).scale_mut(s);
        scale.push(s);
    }
    (out, scale)
}

/// Row features of one population on one interval and the matching right-hand side.
fn row(mo: &IntervalMoments, g: &TargetGains, mtm: &Mat, gamma: f64) -> (Vec<(Block, Vec<f64>)>, f64) {
    let (l, lm, f, fm) = (&g.l, &g.l_mean, &g.f, &g.f_mean);
    let mm0 = &mo.m_start * mo.m_start.transpose();
    let mm1 = &mo.m_end * mo.m_end.transpose();
    let two = |m: Mat| -> Vec<f64> { (m * 2.0).as_slice().to_vec() };
    let sym = |mut m: Mat| -> Vec<f64> {
        symmetrize(&mut m);
        xbar_mat(&m)
    };
    // ∫δū m' with δū = ū - L̃ m, and so on.
    let dum = &mo.um - lm * &mo.mm;
    let dvm = &mo.vm - fm * &mo.mm;
    let duy = &mo.uy - l * &mo.yy;
    let dvy = &mo.vy - f * &mo.yy;
    let mean_uu = &mo.uu - lm * &mo.mm * lm.transpose();
    let mean_vv = &mo.vv - fm * &mo.mm * fm.transpose();
    let dev_uu = &mo.uu_dev - l * &mo.yy * l.transpose();
    let dev_vv = &mo.vv_dev - f * &mo.yy * f.transpose();
    let h = &mo.uv_dev - &mo.uy * f.transpose() - l * mo.vy.transpose() + l * &mo.yy * f.transpose();
    let mean_h = &mo.uv - &mo.um * fm.transpose() - lm * mo.vm.transpose() + lm * &mo.mm * fm.transpose();
    let feats = vec![
        (Block::QNext, xbar_mat(&mm1).iter().map(|v| -v).collect()),
        (Block::Q, xbar_mat(&mm0)),
        (Block::MeanB2, two(dum)),
        (Block::MeanB1, two(dvm)),
        (Block::B2, two(duy)),
        (Block::B1, two(dvy)),
        (Block::MeanD2, sym(mean_uu)),
        (Block::MeanD1, sym(mean_vv)),
        (Block::D2, sym(dev_uu)),
        (Block::D1, sym(dev_vv)),
        (Block::H, two(h)),
        (Block::MeanH, two(mean_h)),
        (Block::PNext, xbar_mat(&mo.y_end).iter().map(|v| -v).collect()),
        (Block::P, xbar_mat(&mo.y_start)),
    ];
    let g2 = gamma * gamma;
    let r = mtm + l.transpose() * l - f.transpose() * f * g2;
    let rm = mtm + lm.transpose() * lm - fm.transpose() * fm * g2;
    let theta = inner(&r, &mo.yy) + inner(&rm, &mo.mm);
    (feats, theta)
}

/// Builds `Φ`, `Θ` for interval `i` with every block unknown.
pub fn assemble(data: &DataSet, target: &TargetGains, output: &Mat, gamma: f64, i: usize) -> RegressionBatch {
    let mtm = output.transpose() * output;
    let dims = data.dims;
    let s = data.populations();
    let g = XiVector::len_of(&BLOCK_ORDER, dims);
    let mut phi = Mat::zeros(s, g);
    let mut theta = Vector::zeros(s);
    for q in 0..s {
        let (feats, th) = row(&data.moments[q][i], target, &mtm, gamma);
        let flat: Vec<f64> = feats.into_iter().flat_map(|(_, v)| v).collect();
        phi.row_mut(q).copy_from_slice(&flat);
        theta[q] = th;
    }
    RegressionBatch::new(phi, theta, i, BLOCK_ORDER.to_vec(), Vec::new(), dims)
}

/// Moves the columns of `fixed` blocks to the right-hand side with the given values.
pub fn pin(batch: &RegressionBatch, fixed: &[(Block, Mat)]) -> RegressionBatch {
    let dims = batch.dims;
    let mut theta = batch.theta.clone();
    let mut keep_cols = Vec::new();
    let mut blocks = Vec::new();
    let mut o = 0;
    for b in &batch.blocks {
        let l = b.len(dims);
        if let Some((_, val)) = fixed.iter().find(|(fb, _)| fb == b) {
            let v = b.encode(val);
            for (k, vk) in v.iter().enumerate() {
                theta -= batch.phi.column(o + k) * *vk;
            }
        } else {
            keep_cols.extend(o..o + l);
            blocks.push(*b);
        }
        o += l;
    }
    let phi = batch.phi.select_columns(keep_cols.iter());
    let mut pinned = batch.pinned.clone();
    pinned.extend(fixed.iter().cloned());
    RegressionBatch::new(phi, theta, batch.interval, blocks, pinned, dims)
}

/// Minimum-norm least squares through the SVD of the column-normalized matrix.
pub fn lstsq(phi: &Mat, theta: &Vector) -> Vector {
    let (scaled, scale) = normalize_columns(phi);
    let svd = scaled.svd(true, true);
    let max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let x = svd.solve(theta, RANK_RTOL * max).expect("U and V were computed");
    Vector::from_iterator(x.len(), x.iter().zip(&scale).map(|(v, s)| v * s))
}

/// Solves the batch; pinned blocks are copied into the result.
pub fn solve_interval(batch: &RegressionBatch) -> Result<XiVector, RlError> {
    let needed = batch.phi.ncols();
    if batch.rank < needed {
        return Err(RlError::RankDeficient { interval: batch.interval, rank: batch.rank, needed });
    }
    let x = lstsq(&batch.phi, &batch.theta);
    let mut xi = XiVector::zeros(batch.dims);
    for (b, v) in &batch.pinned {
        *xi.get_mut(*b) = v.clone();
    }
    xi.decode_into(&batch.blocks, x.as_slice(), batch.dims);
    Ok(xi)
}

// ---------------------------------------------------------------------------
// Policy iteration

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyIterate {
    /// Interval grid.
    pub grid: Vec<f64>,
    /// Gains per interval.
    pub gains: Vec<TargetGains>,
    /// Identified `P`, `Q` at the grid points.
    pub p: Vec<Mat>,
    pub q: Vec<Mat>,
    pub outer: usize,
    pub inner: usize,
}

#[derive(Debug, Clone)]
pub struct RlSettings {
    pub gamma: f64,
    /// Outer stopping tolerance on the disturbance gains.
    pub eps: f64,
    /// Inner stopping tolerance on `P`, `Q`.
    pub eps1: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub intervals: usize,
    pub substeps: usize,
    pub populations: usize,
    pub seed: u64,
    pub mean_scale: f64,
    pub cov_scale: f64,
    pub explore_amplitude: f64,
    pub explore_particle_amplitude: f64,
    /// Frequency range of the exploration sinusoids.
    pub explore_freq: (f64, f64),
    /// Size of the per-population random perturbation of the behavior gains.
    pub gain_spread: f64,
    /// Output matrix of the cost.
    pub output: Mat,
    pub execution: Execution,
}

impl RlSettings {
    pub fn new(output: Mat, gamma: f64) -> Self {
        Self {
            gamma,
            eps: 1e-10,
            eps1: 1e-10,
            max_outer: 50,
            max_inner: 50,
            intervals: 10,
            substeps: 10,
            populations: 30,
            seed: 0,
            mean_scale: 1.0,
            cov_scale: 1.0,
            explore_amplitude: 1.0,
            explore_particle_amplitude: 1.0,
            explore_freq: (1.0, 5.0),
            gain_spread: 0.3,
            output,
            execution: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerRecord {
    pub outer: usize,
    pub inner: usize,
    pub p_change: f64,
    pub q_change: f64,
    pub gain_change: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalDiagnostics {
    pub rank: usize,
    pub unknowns: usize,
    pub condition: f64,
    pub min_singular: f64,
}

#[derive(Debug, Clone)]
pub struct RlReport {
    pub policy: PolicyIterate,
    pub inner: Vec<InnerRecord>,
    /// Change of the disturbance gains per outer iteration.
    pub outer_changes: Vec<f64>,
    pub diagnostics: Vec<IntervalDiagnostics>,
    pub converged: bool,
}

fn max_dist(a: &[Mat], b: &[Mat]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

/// Evaluates `gains` on the data by the backward chained sweep.
pub fn evaluate(
    data: &DataSet,
    gains: &[TargetGains],
    output: &Mat,
    gamma: f64,
) -> Result<(Vec<XiVector>, Vec<IntervalDiagnostics>), RlError> {
    let n = data.dims.n;
    let intervals = data.intervals();
    let mut xis = vec![XiVector::zeros(data.dims); intervals];
    let mut diags = vec![IntervalDiagnostics { rank: 0, unknowns: 0, condition: 0.0, min_singular: 0.0 }; intervals];
    let (mut q_next, mut p_next) = (Mat::zeros(n, n), Mat::zeros(n, n));
    for i in (0..intervals).rev() {
        let full = assemble(data, &gains[i], output, gamma, i);
        let batch = pin(&full, &[(Block::QNext, q_next.clone()), (Block::PNext, p_next.clone())]);
        diags[i] = IntervalDiagnostics {
            rank: batch.rank,
            unknowns: batch.phi.ncols(),
            condition: batch.condition(),
            min_singular: batch.min_singular,
        };
        let xi = solve_interval(&batch)?;
        q_next = xi.q.clone();
        p_next = xi.p.clone();
        xis[i] = xi;
    }
    Ok((xis, diags))
}

/// Off-policy policy iteration on collected data.
///
/// The inner loop evaluates the current policy and improves the control gains
/// with the disturbance gains fixed; the outer loop then improves the
/// disturbance gains from the last evaluation.
pub fn run_algorithm1(data: &DataSet, settings: &RlSettings, init: &[TargetGains]) -> Result<RlReport, RlError> {
    let intervals = data.intervals();
    if init.len() != intervals {
        return Err(RlError::Setting(format!("{} initial gains for {intervals} intervals", init.len())));
    }
    let n = data.dims.n;
    let mut gains = init.to_vec();
    let mut p = vec![Mat::zeros(n, n); intervals + 1];
    let mut q = p.clone();
    let mut inner_log = Vec::new();
    let mut outer_changes = Vec::new();
    let mut diagnostics = Vec::new();
    let mut last_inner = 0;
    for k in 0..settings.max_outer {
        let mut inner_done = false;
        let mut xis = Vec::new();
        for j in 0..settings.max_inner {
            let (x, d) = evaluate(data, &gains, &settings.output, settings.gamma)?;
            diagnostics = d;
            let new_p: Vec<Mat> = x.iter().map(|xi| xi.p.clone()).chain([Mat::zeros(n, n)]).collect();
            let new_q: Vec<Mat> = x.iter().map(|xi| xi.q.clone()).chain([Mat::zeros(n, n)]).collect();
            let (dp, dq) = (max_dist(&new_p, &p), max_dist(&new_q, &q));
            p = new_p;
            q = new_q;
            let mut gain_change: f64 = 0.0;
            for (g, xi) in gains.iter_mut().zip(&x) {
                let im = improve(xi, settings.gamma)?;
                gain_change = gain_change.max((&im.l - &g.l).norm()).max((&im.l_mean - &g.l_mean).norm());
                g.l = im.l;
                g.l_mean = im.l_mean;
            }
            inner_log.push(InnerRecord { outer: k, inner: j, p_change: dp, q_change: dq, gain_change });
            xis = x;
            last_inner = j;
            if dp.max(dq) <= settings.eps1 {
                inner_done = true;
                break;
            }
        }
        if !inner_done {
            return Err(RlError::NoConvergence { outer: k + 1, inner: settings.max_inner });
        }
        let mut change: f64 = 0.0;
        for (g, xi) in gains.iter_mut().zip(&xis) {
            let im = improve(xi, settings.gamma)?;
            change = change.max((&im.f - &g.f).norm()).max((&im.f_mean - &g.f_mean).norm());
            g.f = im.f;
            g.f_mean = im.f_mean;
        }
        outer_changes.push(change);
        if change <= settings.eps {
            return Ok(RlReport {
                policy: PolicyIterate { grid: data.grid.clone(), gains, p, q, outer: k, inner: last_inner },
                inner: inner_log,
                outer_changes,
                diagnostics,
                converged: true,
            });
        }
    }
    Err(RlError::NoConvergence { outer: settings.max_outer, inner: last_inner + 1 })
}

/// Uniform interval grid on `[0, T]`.
pub fn interval_grid(horizon: f64, intervals: usize) -> Vec<f64> {
    (0..=intervals).map(|i| horizon * i as f64 / intervals as f64).collect()
}

/// Behavior with the given gains and sinusoidal exploration from the settings.
///
/// Both inputs share their per-particle coefficients so that the deviation
/// parts of `u` and `v` are correlated, which the cross block `D2'P D1` needs.
pub fn behavior_from(settings: &RlSettings, gains: TargetGains) -> Behavior {
    let make = |seed: u64| Exploration {
        coeff_seed: Some(settings.seed ^ 0x3c3c),
        freq_range: settings.explore_freq,
        ..Exploration::sinusoids(seed, settings.explore_amplitude, settings.explore_particle_amplitude)
    };
    Behavior {
        gains,
        explore_u: make(settings.seed ^ 0xa5a5),
        explore_v: make(settings.seed ^ 0x5a5a),
        gain_spread: settings.gain_spread,
        seed: settings.seed,
    }
}

/// Collects data under `init` gains plus exploration and runs policy iteration.
pub fn learn(plant: &dyn Plant, settings: &RlSettings, init: &TargetGains) -> Result<(DataSet, RlReport), RlError> {
    let dims = plant.dims();
    let grid = interval_grid(plant.horizon(), settings.intervals);
    let starts =
        population_starts(dims.n, settings.populations, settings.seed, settings.mean_scale, settings.cov_scale);
    let behavior = behavior_from(settings, init.clone());
    let exec = if plant.paths().is_some() { Execution::Sequential } else { settings.execution };
    let data = collect(plant, &behavior, &starts, &grid, settings.substeps, exec)?;
    let report = run_algorithm1(&data, settings, &vec![init.clone(); settings.intervals])?;
    Ok((data, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, Strategy};

    fn scalar_model(horizon: f64) -> MeanFieldJumpModel {
        MeanFieldJumpModel::zeros(Dims::new(1, 1, 1), horizon)
    }

    fn m1(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    #[test]
    fn svec_examples() {
        assert_eq!(svec(&Mat::identity(2, 2)).unwrap(), vec![1.0, 0.0, 1.0]);
        assert_eq!(svec(&Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 3.0])).unwrap(), vec![1.0, 4.0, 3.0]);
        assert_eq!(svec(&m1(5.0)).unwrap(), vec![5.0]);
        assert_eq!(smat(&[5.0], 1), m1(5.0));
        assert!(matches!(svec(&Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.1, 3.0])), Err(RlError::Asymmetric(_))));
    }

    #[test]
    fn xbar_examples() {
        assert_eq!(xbar(&[1.0, 2.0]), vec![1.0, 2.0, 4.0]);
        assert_eq!(xbar(&[0.0, 0.0, 0.0]), vec![0.0; 6]);
        let x = Vector::from_vec(vec![1.0, -2.0, 0.5]);
        assert_eq!(xbar_mat(&(&x * x.transpose())), xbar(x.as_slice()));
    }

    #[test]
    fn regression_length_for_two_by_one_by_one() {
        let dims = Dims::new(2, 1, 1);
        assert_eq!(g_len(dims), 23);
        assert_eq!(XiVector::len_of(&CORE_BLOCKS, dims), 23);
        assert_eq!(XiVector::len_of(&BLOCK_ORDER, dims), 26);
    }

    #[test]
    fn regression_length_matches_formula() {
        for n in 1..=4 {
            for nu in 1..=4 {
                for nv in 1..=4 {
                    let dims = Dims::new(n, nu, nv);
                    assert_eq!(XiVector::len_of(&CORE_BLOCKS, dims), g_len(dims), "{n} {nu} {nv}");
                    assert_eq!(XiVector::zeros(dims).encode(&CORE_BLOCKS).len(), g_len(dims));
                }
            }
        }
    }

    fn sym_strategy(n: usize) -> impl Strategy<Value = Mat> {
        proptest::collection::vec(-10.0..10.0f64, n * n).prop_map(move |v| {
            let a = Mat::from_vec(n, n, v);
            (&a + a.transpose()) * 0.5
        })
    }

    proptest! {
        #[test]
        fn svec_round_trip(p in (1usize..5).prop_flat_map(sym_strategy)) {
            let n = p.nrows();
            prop_assert_eq!(smat(&svec(&p).unwrap(), n), p);
        }

        #[test]
        fn svec_pairs_with_xbar(
            (p, x) in (1usize..5).prop_flat_map(|n| (sym_strategy(n), proptest::collection::vec(-10.0..10.0f64, n)))
        ) {
            let xv = Vector::from_vec(x.clone());
            let quad = (xv.transpose() * &p * &xv)[(0, 0)];
            let lin: f64 = svec(&p).unwrap().iter().zip(xbar(&x)).map(|(a, b)| a * b).sum();
            prop_assert!((quad - lin).abs() <= 1e-12 * (1.0 + quad.abs()));
        }

        #[test]
        fn xi_encoding_round_trip(seed in any::<u64>()) {
            let dims = Dims::new(2, 1, 3);
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut xi = XiVector::zeros(dims);
            for b in BLOCK_ORDER {
                let (rr, cc) = b.shape(dims);
                let mut m = Mat::from_fn(rr, cc, |_, _| r.random_range(-1.0..1.0));
                if b.symmetric() {
                    symmetrize(&mut m);
                }
                *xi.get_mut(b) = m;
            }
            let mut back = XiVector::zeros(dims);
            back.decode_into(&BLOCK_ORDER, &xi.encode(&BLOCK_ORDER), dims);
            for b in BLOCK_ORDER {
                prop_assert!((back.get(b) - xi.get(b)).amax() < 1e-15);
            }
        }
    }

    #[test]
    fn pe_zero_gains_zero_output() {
        let m = MeanFieldJumpModel::zeros(Dims::new(2, 1, 1), 1.0);
        let pe = pe_oracle(&m, &PiecewiseGains::constant(TargetGains::zeros(m.dims), 1.0), 5.0, 0.01).unwrap();
        assert!(pe.p.iter().chain(&pe.q).all(|p| max_abs(p) == 0.0));
    }

    #[test]
    fn pe_pure_source() {
        let mut m = MeanFieldJumpModel::zeros(Dims::new(2, 1, 1), 1.0);
        m.m = Mat::identity(2, 2);
        let pe = pe_oracle(&m, &PiecewiseGains::constant(TargetGains::zeros(m.dims), 1.0), 5.0, 0.01).unwrap();
        for (k, t) in pe.grid.iter().enumerate() {
            let want = Mat::identity(2, 2) * (1.0 - t);
            assert!((&pe.p[k] - &want).amax() < 1e-12, "{t} {}", (&pe.p[k] - &want).amax());
            assert!((&pe.q[k] - &want).amax() < 1e-12);
        }
    }

    #[test]
    fn pe_scalar_closed_loop() {
        let mut m = scalar_model(1.0);
        m.a = m1(1.0);
        m.b2 = m1(1.0);
        m.m = m1(1.0);
        let g = TargetGains { l: m1(-1.0), ..TargetGains::zeros(m.dims) };
        let pe = pe_oracle(&m, &PiecewiseGains::constant(g, 1.0), 5.0, 0.01).unwrap();
        for (k, t) in pe.grid.iter().enumerate() {
            assert!((pe.p[k][(0, 0)] - 2.0 * (1.0 - t)).abs() < 1e-12, "{t} {}", pe.p[k][(0, 0)]);
        }
        assert_eq!(pe.p.last().unwrap()[(0, 0)], 0.0);
        assert_eq!(pe.q.last().unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn pe_refuses_jumps() {
        let m = MeanFieldJumpModel::two_state_example();
        let g = PiecewiseGains::constant(TargetGains::zeros(m.dims), m.horizon);
        assert_eq!(pe_oracle(&m, &g, 5.0, 1e-3).unwrap_err(), RlError::HasJumps);
    }

    #[test]
    fn improve_examples() {
        let dims = Dims::new(2, 1, 1);
        let zero = improve(&XiVector::zeros(dims), 5.0).unwrap();
        assert_eq!(zero, TargetGains::zeros(dims));

        let mut m = scalar_model(1.0);
        m.b2 = m1(1.0);
        let xi = model_blocks(&m, &m1(1.0), &m1(0.0), &TargetGains::zeros(m.dims));
        assert_eq!(improve(&xi, 5.0).unwrap().l, m1(-1.0));
    }

    #[test]
    fn improve_disturbance_formula() {
        let mut m = scalar_model(1.0);
        m.b1 = m1(2.0);
        m.d1 = m1(1.0);
        let p = m1(3.0);
        let xi = model_blocks(&m, &p, &p, &TargetGains::zeros(m.dims));
        // F = (γ² - d p d)⁻¹ b p = 6 / (25 - 3)
        let g = improve(&xi, 5.0).unwrap();
        assert!((g.f[(0, 0)] - 6.0 / 22.0).abs() < 1e-15);
        assert!(matches!(improve(&xi, 1.0), Err(RlError::SingularImprovement(_))));
    }

    #[test]
    fn zero_data_is_rank_deficient() {
        let dims = Dims::new(2, 1, 1);
        let data = DataSet {
            dims,
            grid: vec![0.0, 1.0],
            substeps: 1,
            paths: None,
            moments: vec![vec![IntervalMoments::zeros(dims)]; 30],
        };
        let b = assemble(&data, &TargetGains::zeros(dims), &Mat::identity(2, 2), 5.0, 0);
        assert_eq!(b.rank, 0);
        assert_eq!(b.phi.ncols(), 26);
        assert!(matches!(solve_interval(&b), Err(RlError::RankDeficient { rank: 0, needed: 26, .. })));
    }

    fn orthogonal(n: usize, seed: u64) -> Mat {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = Mat::from_fn(n, n, |_, _| r.sample::<f64, _>(StandardNormal));
        a.qr().q()
    }

    #[test]
    fn orthogonal_batch_recovers_unit_vector() {
        let dims = Dims::new(2, 1, 1);
        let g = XiVector::len_of(&BLOCK_ORDER, dims);
        let phi = orthogonal(g, 3);
        let theta = phi.column(0).into_owned();
        let batch = RegressionBatch::from_parts(phi, theta, 0, BLOCK_ORDER.to_vec(), dims);
        let xi = solve_interval(&batch).unwrap();
        let v = xi.encode(&BLOCK_ORDER);
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!(v[1..].iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn duplicated_rows_do_not_change_solution() {
        let dims = Dims::new(2, 1, 1);
        let g = XiVector::len_of(&BLOCK_ORDER, dims);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let phi = Mat::from_fn(g + 4, g, |_, _| r.sample::<f64, _>(StandardNormal));
        let theta = Vector::from_fn(g + 4, |_, _| r.sample::<f64, _>(StandardNormal));
        let once = lstsq(&phi, &theta);
        let phi2 = Mat::from_fn(2 * (g + 4), g, |i, j| phi[(i % (g + 4), j)]);
        let theta2 = Vector::from_fn(2 * (g + 4), |i, _| theta[i % (g + 4)]);
        assert!((lstsq(&phi2, &theta2) - once).amax() < 1e-10);
    }

    #[test]
    fn minimum_norm_for_rank_deficient_columns() {
        let phi = Mat::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        let theta = Vector::from_vec(vec![2.0, 4.0]);
        let x = lstsq(&phi, &theta);
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pinning_moves_columns_to_the_right_side() {
        let dims = Dims::new(1, 1, 1);
        let g = XiVector::len_of(&BLOCK_ORDER, dims);
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let phi = Mat::from_fn(20, g, |_, _| r.sample::<f64, _>(StandardNormal));
        let truth = Vector::from_fn(g, |_, _| r.sample::<f64, _>(StandardNormal));
        let theta = &phi * &truth;
        let batch = RegressionBatch::from_parts(phi, theta, 0, BLOCK_ORDER.to_vec(), dims);
        let pinned = pin(&batch, &[(Block::QNext, m1(truth[0])), (Block::PNext, m1(truth[g - 2]))]);
        assert_eq!(pinned.phi.ncols(), g - 2);
        let xi = solve_interval(&pinned).unwrap();
        assert!((Vector::from_vec(xi.encode(&BLOCK_ORDER)) - truth).amax() < 1e-10);
    }

    fn quiet_behavior(dims: Dims) -> Behavior {
        Behavior {
            gains: TargetGains::zeros(dims),
            explore_u: Exploration::default(),
            explore_v: Exploration::default(),
            gain_spread: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn single_path_of_deterministic_plant() {
        let mut m = MeanFieldJumpModel::zeros(Dims::new(2, 1, 1), 1.0);
        m.a = Mat::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -0.3]);
        let plant = SampledPlant::new(&m, 1, 5).unwrap();
        let start = Start { mean: Vector::from_vec(vec![1.0, 2.0]), cov: Mat::zeros(2, 2) };
        let grid = interval_grid(1.0, 4);
        let mo = plant.run(0, &start, &quiet_behavior(m.dims), &grid, 25).unwrap();
        for (i, w) in mo.iter().enumerate() {
            let exact = |t: f64| (m.a.clone() * t).exp() * &start.mean;
            assert!((&w.m_start - exact(grid[i])).amax() < 0.02);
            assert_eq!(max_abs(&w.y_start), 0.0);
            assert_eq!(max_abs(&w.yy), 0.0);
        }
        // the conditional average is the single path itself
        assert_eq!(mo[1].m_start, mo[0].m_end);
    }

    #[test]
    fn integral_of_constant_mean_is_exact() {
        let m = MeanFieldJumpModel::zeros(Dims::new(2, 1, 1), 1.0);
        let plant = SampledPlant::new(&m, 2, 5).unwrap();
        let c = Vector::from_vec(vec![0.3, -1.5]);
        let start = Start { mean: c.clone(), cov: Mat::zeros(2, 2) };
        let grid = interval_grid(1.0, 2);
        let mo = plant.run(0, &start, &quiet_behavior(m.dims), &grid, 10).unwrap();
        let want = &c * c.transpose() * 0.5;
        assert!((&mo[0].mm - &want).amax() < 1e-15);
    }

    #[test]
    fn brownian_deviation_energy() {
        // x = 1 + W: diffusion C̄ E[x] = 1, so ∫_0^h E[(x - Ex)²] = h²/2
        let mut m = MeanFieldJumpModel::zeros(Dims::new(1, 1, 1), 0.5);
        m.c_bar = m1(1.0);
        let plant = SampledPlant::new(&m, 10_000, 17).unwrap();
        let start = Start { mean: Vector::from_vec(vec![1.0]), cov: m1(0.0) };
        let mo = plant.run(0, &start, &quiet_behavior(m.dims), &[0.0, 0.5], 200).unwrap();
        let h: f64 = 0.5;
        // Var ∫_0^h W² = h⁴/3
        let se = h * h / 3f64.sqrt() / 100.0;
        assert!((mo[0].yy[(0, 0)] - h * h / 2.0).abs() < 3.0 * se, "{} vs {}", mo[0].yy[(0, 0)], h * h / 2.0);
    }

    #[test]
    fn exact_plant_rejects_white_exploration() {
        let m = MeanFieldJumpModel::diffusion_example();
        let plant = ExactPlant::new(&m).unwrap();
        let mut b = quiet_behavior(m.dims);
        b.explore_u = Exploration::white(1, 0.5);
        let start = Start { mean: Vector::zeros(2), cov: Mat::identity(2, 2) };
        assert!(matches!(plant.run(0, &start, &b, &[0.0, 1.0], 4), Err(RlError::Setting(_))));
    }

    #[test]
    fn exact_moments_of_free_system() {
        // A = -I, no noise: m(t) = e^{-t} m0, Y(t) = e^{-2t} Y0
        let mut m = MeanFieldJumpModel::zeros(Dims::new(2, 1, 1), 1.0);
        m.a = -Mat::identity(2, 2);
        let plant = ExactPlant::new(&m).unwrap();
        let start = Start { mean: Vector::from_vec(vec![1.0, -1.0]), cov: Mat::identity(2, 2) * 2.0 };
        let mo = plant.run(0, &start, &quiet_behavior(m.dims), &[0.0, 1.0], 400).unwrap();
        let e = (-1f64).exp();
        assert!((mo[0].m_end[0] - e).abs() < 1e-9);
        assert!((mo[0].y_end[(0, 0)] - 2.0 * e * e).abs() < 1e-9, "{:?}", mo[0].y_end);
        // ∫ Y = 2 (1 - e^{-2}) / 2
        assert!((mo[0].yy[(1, 1)] - (1.0 - e * e)).abs() < 1e-9);
    }

    #[test]
    fn infinite_tolerances_stop_after_one_pass() {
        let m = MeanFieldJumpModel::diffusion_example();
        let plant = ExactPlant::new(&m).unwrap();
        let mut s = RlSettings::new(m.m.clone(), 5.0);
        s.intervals = 4;
        s.eps = f64::INFINITY;
        s.eps1 = f64::INFINITY;
        let (_, rep) = learn(&plant, &s, &TargetGains::zeros(m.dims)).unwrap();
        assert_eq!(rep.inner.len(), 1);
        assert_eq!(rep.outer_changes.len(), 1);
        assert!(rep.converged);
        assert_eq!(rep.policy.p.len(), 5);
        assert_eq!(max_abs(rep.policy.p.last().unwrap()), 0.0);
        assert_eq!(max_abs(rep.policy.q.last().unwrap()), 0.0);
    }

    #[test]
    fn exact_blocks_give_model_based_improvement() {
        let m = MeanFieldJumpModel::diffusion_example();
        let g = TargetGains {
            l: Mat::from_row_slice(1, 2, &[-0.2, 0.1]),
            l_mean: Mat::from_row_slice(1, 2, &[0.3, -0.1]),
            f: Mat::from_row_slice(1, 2, &[0.05, 0.02]),
            f_mean: Mat::from_row_slice(1, 2, &[0.0, 0.1]),
        };
        let p = Mat::from_row_slice(2, 2, &[0.8, 0.1, 0.1, 0.5]);
        let q = Mat::from_row_slice(2, 2, &[1.1, -0.2, -0.2, 0.7]);
        let xi = model_blocks(&m, &p, &q, &g);
        // the stored products, round-tripped through the regression encoding
        let mut back = XiVector::zeros(m.dims);
        back.decode_into(&BLOCK_ORDER, &xi.encode(&BLOCK_ORDER), m.dims);
        let a = improve(&xi, 5.0).unwrap();
        let b = improve(&back, 5.0).unwrap();
        for (x, y) in [(&a.l, &b.l), (&a.l_mean, &b.l_mean), (&a.f, &b.f), (&a.f_mean, &b.f_mean)] {
            assert!((x - y).amax() < 1e-10);
        }
    }
}
