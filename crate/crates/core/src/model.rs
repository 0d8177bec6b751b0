//! System data for the controlled mean-field jump diffusion
//!
//! ```text
//! dx = (A x + Ā Ex + B2 u + B̄2 Eu + B1 v + B̄1 Ev) dt
//!    + (C x + C̄ Ex + D2 u + D̄2 Eu + D1 v + D̄1 Ev) dW
//!    + Σ_atoms (E x + Ē Ex + F2 u + F̄2 Eu + F1 v + F̄1 Ev) (N_i(dt) - w_i dt)
//! z  = (M x, u)
//! ```
//!
//! `u` is the control, `v` the disturbance, and the jump measure is a finite
//! list of atoms with nonnegative weights. Coefficients are constant in time.

use crate::linalg::{from_rows, to_rows, Mat};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub nu: usize,
    pub nv: usize,
}

impl Dims {
    pub fn new(n: usize, nu: usize, nv: usize) -> Self {
        Self { n, nu, nv }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JumpAtom {
    pub weight: f64,
    pub e: Mat,
    pub e_bar: Mat,
    pub f1: Mat,
    pub f1_bar: Mat,
    pub f2: Mat,
    pub f2_bar: Mat,
}

impl JumpAtom {
    pub fn zeros(dims: Dims, weight: f64) -> Self {
        let Dims { n, nu, nv } = dims;
        Self {
            weight,
            e: Mat::zeros(n, n),
            e_bar: Mat::zeros(n, n),
            f1: Mat::zeros(n, nv),
            f1_bar: Mat::zeros(n, nv),
            f2: Mat::zeros(n, nu),
            f2_bar: Mat::zeros(n, nu),
        }
    }

    pub fn field(&self, f: AtomField) -> &Mat {
        match f {
            AtomField::E => &self.e,
            AtomField::EBar => &self.e_bar,
            AtomField::F1 => &self.f1,
            AtomField::F1Bar => &self.f1_bar,
            AtomField::F2 => &self.f2,
            AtomField::F2Bar => &self.f2_bar,
        }
    }
}

/// Selects one coefficient of a [`JumpAtom`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AtomField {
    E,
    EBar,
    F1,
    F1Bar,
    F2,
    F2Bar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldJumpModel {
    pub dims: Dims,
    pub a: Mat,
    pub a_bar: Mat,
    pub b1: Mat,
    pub b1_bar: Mat,
    pub b2: Mat,
    pub b2_bar: Mat,
    pub c: Mat,
    pub c_bar: Mat,
    pub d1: Mat,
    pub d1_bar: Mat,
    pub d2: Mat,
    pub d2_bar: Mat,
    /// Output weight, `m × n` for any `m ≥ 1`.
    pub m: Mat,
    pub atoms: Vec<JumpAtom>,
    pub horizon: f64,
}

impl MeanFieldJumpModel {
    /// All coefficients zero (including `M`), no atoms.
    pub fn zeros(dims: Dims, horizon: f64) -> Self {
        let Dims { n, nu, nv } = dims;
        Self {
            dims,
            a: Mat::zeros(n, n),
            a_bar: Mat::zeros(n, n),
            b1: Mat::zeros(n, nv),
            b1_bar: Mat::zeros(n, nv),
            b2: Mat::zeros(n, nu),
            b2_bar: Mat::zeros(n, nu),
            c: Mat::zeros(n, n),
            c_bar: Mat::zeros(n, n),
            d1: Mat::zeros(n, nv),
            d1_bar: Mat::zeros(n, nv),
            d2: Mat::zeros(n, nu),
            d2_bar: Mat::zeros(n, nu),
            m: Mat::zeros(n, n),
            atoms: Vec::new(),
            horizon,
        }
    }

    /// The two-state example with one unit jump atom used throughout the tests.
    pub fn two_state_example() -> Self {
        let m2 = |r: [[f64; 2]; 2]| Mat::from_row_slice(2, 2, &[r[0][0], r[0][1], r[1][0], r[1][1]]);
        let col = |a: f64, b: f64| Mat::from_column_slice(2, 1, &[a, b]);
        let dims = Dims::new(2, 1, 1);
        Self {
            dims,
            a: m2([[1.0, 2.0], [-2.0, 1.0]]),
            a_bar: m2([[1.0, -2.0], [2.0, 1.0]]),
            b1: col(1.0, 1.0),
            b1_bar: col(0.5, -1.0),
            b2: col(1.0, 1.0),
            b2_bar: col(2.0, -1.0),
            c: m2([[1.0, 2.0], [2.0, 1.0]]),
            c_bar: m2([[1.0, 2.0], [2.0, 1.0]]),
            d1: col(2.0, 1.0),
            d1_bar: col(1.0, 1.0),
            d2: col(2.0, -2.0),
            d2_bar: col(-2.0, 2.0),
            m: Mat::identity(2, 2),
            atoms: vec![JumpAtom {
                weight: 1.0,
                e: m2([[-1.0, 1.0], [3.0, 1.0]]),
                e_bar: m2([[-1.0, 0.0], [3.0, 1.0]]),
                f1: col(2.0, 1.0),
                f1_bar: col(2.0, 2.0),
                f2: col(2.0, 1.0),
                f2_bar: col(2.0, 2.0),
            }],
            horizon: 0.1,
        }
    }

    /// Mildly stable jump-free 2-D system on `[0, 1]` with small diffusion,
    /// used as the learning benchmark.
    pub fn diffusion_example() -> Self {
        let m2 = |r: [[f64; 2]; 2]| Mat::from_row_slice(2, 2, &[r[0][0], r[0][1], r[1][0], r[1][1]]);
        let col = |a: f64, b: f64| Mat::from_column_slice(2, 1, &[a, b]);
        Self {
            dims: Dims::new(2, 1, 1),
            a: m2([[-0.5, 0.4], [-0.3, -0.2]]),
            a_bar: m2([[0.2, 0.0], [0.1, 0.1]]),
            b1: col(0.2, 1.0),
            b1_bar: col(0.1, 0.2),
            b2: col(1.0, 0.5),
            b2_bar: col(0.3, -0.2),
            c: m2([[0.05, 0.02], [0.0, 0.05]]),
            c_bar: m2([[0.02, 0.0], [0.0, 0.02]]),
            d1: col(0.02, 0.08),
            d1_bar: col(0.0, 0.02),
            d2: col(0.08, 0.05),
            d2_bar: col(0.02, 0.0),
            m: Mat::identity(2, 2),
            atoms: Vec::new(),
            horizon: 1.0,
        }
    }

    pub fn has_jumps(&self) -> bool {
        !self.atoms.is_empty()
    }

    /// Same model with the jump channel removed.
    pub fn without_jumps(&self) -> Self {
        Self { atoms: Vec::new(), ..self.clone() }
    }

    pub fn mtm(&self) -> Mat {
        self.m.transpose() * &self.m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Dimension { name: &'static str },
    Shape { field: String, expected: (usize, usize), found: (usize, usize) },
    NegativeWeight { atom: usize, weight: f64 },
    NonFinite { field: String },
    Horizon(f64),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Dimension { name } => write!(f, "dimension {name} must be positive"),
            Violation::Shape { field, expected, found } => {
                write!(f, "{field} has shape {}x{}, expected {}x{}", found.0, found.1, expected.0, expected.1)
            }
            Violation::NegativeWeight { atom, weight } => {
                write!(f, "atom {atom} has negative weight {weight}")
            }
            Violation::NonFinite { field } => write!(f, "{field} has non-finite entries"),
            Violation::Horizon(t) => write!(f, "horizon must be positive and finite, got {t}"),
        }
    }
}

fn check(out: &mut Vec<Violation>, field: String, m: &Mat, rows: usize, cols: usize) {
    if m.shape() != (rows, cols) {
        out.push(Violation::Shape { field: field.clone(), expected: (rows, cols), found: m.shape() });
    }
    if m.iter().any(|v| !v.is_finite()) {
        out.push(Violation::NonFinite { field });
    }
}

/// Every shape, sign and finiteness violation; empty iff the model is usable.
pub fn validate(model: &MeanFieldJumpModel) -> Vec<Violation> {
    let mut out = Vec::new();
    let Dims { n, nu, nv } = model.dims;
    for (name, v) in [("n", n), ("nu", nu), ("nv", nv)] {
        if v == 0 {
            out.push(Violation::Dimension { name });
        }
    }
    if !(model.horizon.is_finite() && model.horizon > 0.0) {
        out.push(Violation::Horizon(model.horizon));
    }
    let nn = [("A", &model.a), ("A_bar", &model.a_bar), ("C", &model.c), ("C_bar", &model.c_bar)];
    for (name, m) in nn {
        check(&mut out, name.into(), m, n, n);
    }
    for (name, m) in [("B1", &model.b1), ("B1_bar", &model.b1_bar), ("D1", &model.d1), ("D1_bar", &model.d1_bar)] {
        check(&mut out, name.into(), m, n, nv);
    }
    for (name, m) in [("B2", &model.b2), ("B2_bar", &model.b2_bar), ("D2", &model.d2), ("D2_bar", &model.d2_bar)] {
        check(&mut out, name.into(), m, n, nu);
    }
    check(&mut out, "M".into(), &model.m, model.m.nrows().max(1), n);
    for (i, atom) in model.atoms.iter().enumerate() {
        if !(atom.weight >= 0.0) || !atom.weight.is_finite() {
            out.push(Violation::NegativeWeight { atom: i, weight: atom.weight });
        }
        check(&mut out, format!("atoms[{i}].E"), &atom.e, n, n);
        check(&mut out, format!("atoms[{i}].E_bar"), &atom.e_bar, n, n);
        check(&mut out, format!("atoms[{i}].F1"), &atom.f1, n, nv);
        check(&mut out, format!("atoms[{i}].F1_bar"), &atom.f1_bar, n, nv);
        check(&mut out, format!("atoms[{i}].F2"), &atom.f2, n, nu);
        check(&mut out, format!("atoms[{i}].F2_bar"), &atom.f2_bar, n, nu);
    }
    out
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid model: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("model file: {0}")]
    Parse(String),
}

/// `Σ_i w_i L_i' P R_i` over the atoms, with `L_i`, `R_i` produced by the closures.
pub fn jump_sum<A>(
    atoms: &[A],
    weight: impl Fn(&A) -> f64,
    p: &Mat,
    left: impl Fn(&A) -> Mat,
    right: impl Fn(&A) -> Mat,
) -> Mat {
    let mut acc: Option<Mat> = None;
    for a in atoms {
        let l = left(a);
        let r = right(a);
        let term = l.transpose() * p * r * weight(a);
        acc = Some(match acc {
            Some(s) => s + term,
            None => term,
        });
    }
    acc.unwrap_or_else(|| Mat::zeros(0, 0))
}

/// `Σ_i w_i L_i' P R_i` for the selected atom coefficients.
///
/// `dims` fixes the shape of the empty sum.
pub fn jump_integral(
    atoms: &[JumpAtom],
    dims: Dims,
    p: &Mat,
    left: AtomField,
    right: AtomField,
) -> Result<Mat, ModelError> {
    if p.shape() != (dims.n, dims.n) {
        return Err(ModelError::Shape(format!("P is {}x{}, expected {}x{}", p.nrows(), p.ncols(), dims.n, dims.n)));
    }
    let width = |f: AtomField| match f {
        AtomField::E | AtomField::EBar => dims.n,
        AtomField::F1 | AtomField::F1Bar => dims.nv,
        AtomField::F2 | AtomField::F2Bar => dims.nu,
    };
    for (i, a) in atoms.iter().enumerate() {
        for f in [left, right] {
            if a.field(f).shape() != (dims.n, width(f)) {
                let (r, c) = a.field(f).shape();
                return Err(ModelError::Shape(format!("atom {i} field {f:?} is {r}x{c}")));
            }
        }
    }
    if atoms.is_empty() {
        return Ok(Mat::zeros(width(left), width(right)));
    }
    Ok(jump_sum(atoms, |a| a.weight, p, |a| a.field(left).clone(), |a| a.field(right).clone()))
}

/// Jump coefficients of the disturbance-only system.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceAtom {
    pub weight: f64,
    pub e: Mat,
    pub e_bar: Mat,
    pub f: Mat,
    pub f_bar: Mat,
}

/// System driven only by the disturbance, with output `z = M x + M̄ Ex`.
///
/// `m_bar` is zero for open-loop outputs; closing a loop with a mean-field
/// control adds the control's mean gain there.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceOnlyModel {
    pub n: usize,
    pub nv: usize,
    pub a: Mat,
    pub a_bar: Mat,
    pub b: Mat,
    pub b_bar: Mat,
    pub c: Mat,
    pub c_bar: Mat,
    pub d: Mat,
    pub d_bar: Mat,
    pub atoms: Vec<DisturbanceAtom>,
    pub m: Mat,
    pub m_bar: Mat,
    pub horizon: f64,
}

impl DisturbanceOnlyModel {
    pub fn zeros(n: usize, nv: usize, outputs: usize, horizon: f64) -> Self {
        Self {
            n,
            nv,
            a: Mat::zeros(n, n),
            a_bar: Mat::zeros(n, n),
            b: Mat::zeros(n, nv),
            b_bar: Mat::zeros(n, nv),
            c: Mat::zeros(n, n),
            c_bar: Mat::zeros(n, n),
            d: Mat::zeros(n, nv),
            d_bar: Mat::zeros(n, nv),
            atoms: Vec::new(),
            m: Mat::zeros(outputs, n),
            m_bar: Mat::zeros(outputs, n),
            horizon,
        }
    }

    /// Scalar system `dx = (a x + b v) dt`, `z = m x`.
    pub fn scalar(a: f64, b: f64, m: f64, horizon: f64) -> Self {
        let mut d = Self::zeros(1, 1, 1, horizon);
        d.a[(0, 0)] = a;
        d.b[(0, 0)] = b;
        d.m[(0, 0)] = m;
        d
    }
}

/// Substitutes `u = K2 (x - Ex) + (K2 + K̃2) Ex` into the model.
pub fn close_loop(model: &MeanFieldJumpModel, k2: &Mat, k2_sum: &Mat) -> Result<DisturbanceOnlyModel, ModelError> {
    let Dims { n, nu, .. } = model.dims;
    for (name, k) in [("K2", k2), ("K2+K̃2", k2_sum)] {
        if k.shape() != (nu, n) {
            return Err(ModelError::Shape(format!("{name} is {}x{}, expected {nu}x{n}", k.nrows(), k.ncols())));
        }
    }
    let k2_tilde = k2_sum - k2;
    let mo = model.m.nrows();
    let mut m = Mat::zeros(mo + nu, n);
    m.view_mut((0, 0), (mo, n)).copy_from(&model.m);
    m.view_mut((mo, 0), (nu, n)).copy_from(k2);
    let mut m_bar = Mat::zeros(mo + nu, n);
    m_bar.view_mut((mo, 0), (nu, n)).copy_from(&k2_tilde);
    let atoms = model
        .atoms
        .iter()
        .map(|at| DisturbanceAtom {
            weight: at.weight,
            e: &at.e + &at.f2 * k2,
            e_bar: &at.e_bar + &at.f2 * &k2_tilde + &at.f2_bar * k2_sum,
            f: at.f1.clone(),
            f_bar: at.f1_bar.clone(),
        })
        .collect();
    Ok(DisturbanceOnlyModel {
        n,
        nv: model.dims.nv,
        a: &model.a + &model.b2 * k2,
        a_bar: &model.a_bar + &model.b2 * &k2_tilde + &model.b2_bar * k2_sum,
        b: model.b1.clone(),
        b_bar: model.b1_bar.clone(),
        c: &model.c + &model.d2 * k2,
        c_bar: &model.c_bar + &model.d2 * &k2_tilde + &model.d2_bar * k2_sum,
        d: model.d1.clone(),
        d_bar: model.d1_bar.clone(),
        atoms,
        m,
        m_bar,
        horizon: model.horizon,
    })
}

/// Feedback gains on a time grid. `k1`/`k1_sum` act on the disturbance
/// (`v = K1 (x - Ex) + (K1 + K̃1) Ex`), `k2`/`k2_sum` on the control.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    pub grid: Vec<f64>,
    pub k1: Vec<Mat>,
    pub k1_sum: Vec<Mat>,
    pub k2: Vec<Mat>,
    pub k2_sum: Vec<Mat>,
}

impl GainSchedule {
    /// Linear interpolation of `(K2, K2+K̃2)` at `t`, clamped to the grid.
    pub fn control_at(&self, t: f64) -> (Mat, Mat) {
        (interp(&self.grid, &self.k2, t), interp(&self.grid, &self.k2_sum, t))
    }

    pub fn disturbance_at(&self, t: f64) -> (Mat, Mat) {
        (interp(&self.grid, &self.k1, t), interp(&self.grid, &self.k1_sum, t))
    }
}

/// Piecewise-linear interpolation of matrix samples on an increasing grid.
pub fn interp(grid: &[f64], vals: &[Mat], t: f64) -> Mat {
    let last = grid.len() - 1;
    if t <= grid[0] {
        return vals[0].clone();
    }
    if t >= grid[last] {
        return vals[last].clone();
    }
    let k = grid.partition_point(|&g| g <= t).saturating_sub(1).min(last - 1);
    let h = grid[k + 1] - grid[k];
    let s = (t - grid[k]) / h;
    if s <= 1e-12 {
        return vals[k].clone();
    }
    if s >= 1.0 - 1e-12 {
        return vals[k + 1].clone();
    }
    &vals[k] * (1.0 - s) + &vals[k + 1] * s
}

/// Disturbance-only coefficients that may depend on time.
pub trait DisturbanceSystem: Sync {
    fn n(&self) -> usize;
    fn nv(&self) -> usize;
    fn horizon(&self) -> f64;
    fn at(&self, t: f64) -> DisturbanceOnlyModel;
}

impl DisturbanceSystem for DisturbanceOnlyModel {
    fn n(&self) -> usize {
        self.n
    }
    fn nv(&self) -> usize {
        self.nv
    }
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn at(&self, _t: f64) -> DisturbanceOnlyModel {
        self.clone()
    }
}

/// The model closed by a time-varying control gain schedule.
pub struct ClosedLoop<'a> {
    pub model: &'a MeanFieldJumpModel,
    pub gains: &'a GainSchedule,
}

impl DisturbanceSystem for ClosedLoop<'_> {
    fn n(&self) -> usize {
        self.model.dims.n
    }
    fn nv(&self) -> usize {
        self.model.dims.nv
    }
    fn horizon(&self) -> f64 {
        self.model.horizon
    }
    fn at(&self, t: f64) -> DisturbanceOnlyModel {
        let (k2, k2s) = self.gains.control_at(t);
        close_loop(self.model, &k2, &k2s).expect("gain schedule shapes checked at construction")
    }
}

// ---------------------------------------------------------------------------
// Model files

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DimsFile {
    n: usize,
    nu: usize,
    nv: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct AtomFile {
    weight: f64,
    #[serde(flatten)]
    matrices: BTreeMap<String, Rows>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    horizon: f64,
    dims: DimsFile,
    #[serde(default)]
    matrices: BTreeMap<String, Rows>,
    #[serde(default)]
    atoms: Vec<AtomFile>,
}

const MODEL_KEYS: [&str; 13] =
    ["A", "A_bar", "B1", "B1_bar", "B2", "B2_bar", "C", "C_bar", "D1", "D1_bar", "D2", "D2_bar", "M"];
const ATOM_KEYS: [&str; 6] = ["E", "E_bar", "F1", "F1_bar", "F2", "F2_bar"];

fn take(map: &mut BTreeMap<String, Rows>, key: &str, default: Mat) -> Result<Mat, ModelError> {
    match map.remove(key) {
        None => Ok(default),
        Some(rows) if rows.is_empty() => Ok(default),
        Some(rows) => from_rows(&rows).ok_or_else(|| ModelError::Parse(format!("{key}: rows have unequal length"))),
    }
}

impl MeanFieldJumpModel {
    /// Parses the TOML model format documented in the repository README.
    ///
    /// Missing matrices default to zero; `M` defaults to the `n × n` identity.
    /// The result is validated before it is returned.
    pub fn from_toml_str(text: &str) -> Result<Self, ModelError> {
        let file: ModelFile = toml::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
        let dims = Dims::new(file.dims.n, file.dims.nu, file.dims.nv);
        let mut mats = file.matrices;
        if let Some(k) = mats.keys().find(|k| !MODEL_KEYS.contains(&k.as_str())) {
            return Err(ModelError::Parse(format!("unknown matrix key {k}")));
        }
        let zero = Self::zeros(dims, file.horizon);
        let Dims { n, .. } = dims;
        let mut model = Self {
            dims,
            a: take(&mut mats, "A", zero.a.clone())?,
            a_bar: take(&mut mats, "A_bar", zero.a_bar.clone())?,
            b1: take(&mut mats, "B1", zero.b1.clone())?,
            b1_bar: take(&mut mats, "B1_bar", zero.b1_bar.clone())?,
            b2: take(&mut mats, "B2", zero.b2.clone())?,
            b2_bar: take(&mut mats, "B2_bar", zero.b2_bar.clone())?,
            c: take(&mut mats, "C", zero.c.clone())?,
            c_bar: take(&mut mats, "C_bar", zero.c_bar.clone())?,
            d1: take(&mut mats, "D1", zero.d1.clone())?,
            d1_bar: take(&mut mats, "D1_bar", zero.d1_bar.clone())?,
            d2: take(&mut mats, "D2", zero.d2.clone())?,
            d2_bar: take(&mut mats, "D2_bar", zero.d2_bar.clone())?,
            m: take(&mut mats, "M", Mat::identity(n, n))?,
            atoms: Vec::new(),
            horizon: file.horizon,
        };
        for (i, af) in file.atoms.into_iter().enumerate() {
            let mut am = af.matrices;
            if let Some(k) = am.keys().find(|k| !ATOM_KEYS.contains(&k.as_str())) {
                return Err(ModelError::Parse(format!("atoms[{i}]: unknown matrix key {k}")));
            }
            let z = JumpAtom::zeros(dims, af.weight);
            model.atoms.push(JumpAtom {
                weight: af.weight,
                e: take(&mut am, "E", z.e.clone())?,
                e_bar: take(&mut am, "E_bar", z.e_bar.clone())?,
                f1: take(&mut am, "F1", z.f1.clone())?,
                f1_bar: take(&mut am, "F1_bar", z.f1_bar.clone())?,
                f2: take(&mut am, "F2", z.f2.clone())?,
                f2_bar: take(&mut am, "F2_bar", z.f2_bar.clone())?,
            });
        }
        let violations = validate(&model);
        if violations.is_empty() {
            Ok(model)
        } else {
            Err(ModelError::Invalid(violations))
        }
    }

    pub fn to_toml_string(&self) -> String {
        let mut matrices = BTreeMap::new();
        let fields: [(&str, &Mat); 13] = [
            ("A", &self.a),
            ("A_bar", &self.a_bar),
            ("B1", &self.b1),
            ("B1_bar", &self.b1_bar),
            ("B2", &self.b2),
            ("B2_bar", &self.b2_bar),
            ("C", &self.c),
            ("C_bar", &self.c_bar),
            ("D1", &self.d1),
            ("D1_bar", &self.d1_bar),
            ("D2", &self.d2),
            ("D2_bar", &self.d2_bar),
            ("M", &self.m),
        ];
        for (k, m) in fields {
            matrices.insert(k.to_string(), to_rows(m));
        }
        let atoms = self
            .atoms
            .iter()
            .map(|a| {
                let mut m = BTreeMap::new();
                for f in
                    [AtomField::E, AtomField::EBar, AtomField::F1, AtomField::F1Bar, AtomField::F2, AtomField::F2Bar]
                {
                    let key = ATOM_KEYS[f as usize];
                    m.insert(key.to_string(), to_rows(a.field(f)));
                }
                AtomFile { weight: a.weight, matrices: m }
            })
            .collect();
        let file = ModelFile {
            horizon: self.horizon,
            dims: DimsFile { n: self.dims.n, nu: self.dims.nu, nv: self.dims.nv },
            matrices,
            atoms,
        };
        toml::to_string(&file).expect("model serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn example_is_valid() {
        assert!(validate(&MeanFieldJumpModel::two_state_example()).is_empty());
    }

    #[test]
    fn wide_b1_is_one_violation() {
        let mut m = MeanFieldJumpModel::two_state_example();
        m.b1 = Mat::zeros(2, 2);
        let v = validate(&m);
        assert_eq!(v.len(), 1);
        assert!(matches!(&v[0], Violation::Shape { field, .. } if field == "B1"));
    }

    #[test]
    fn negative_weight_is_one_violation() {
        let mut m = MeanFieldJumpModel::two_state_example();
        m.atoms[0].weight = -0.5;
        let v = validate(&m);
        assert_eq!(v, vec![Violation::NegativeWeight { atom: 0, weight: -0.5 }]);
    }

    #[test]
    fn identity_atom_integral_is_p() {
        let dims = Dims::new(2, 1, 1);
        let mut atom = JumpAtom::zeros(dims, 1.0);
        atom.e = Mat::identity(2, 2);
        let p = Mat::from_row_slice(2, 2, &[1.0, 0.3, 0.3, -2.0]);
        let j = jump_integral(std::slice::from_ref(&atom), dims, &p, AtomField::E, AtomField::E).unwrap();
        assert_eq!(j, p);
        let mut half = atom.clone();
        half.weight = 0.5;
        let j2 = jump_integral(&[half.clone(), half], dims, &p, AtomField::E, AtomField::E).unwrap();
        assert!((j2 - &p).norm() < 1e-15);
    }

    #[test]
    fn example_atom_ete() {
        let m = MeanFieldJumpModel::two_state_example();
        let j = jump_integral(&m.atoms, m.dims, &Mat::identity(2, 2), AtomField::E, AtomField::E).unwrap();
        // E'E by hand: [[-1,3],[1,1]] * [[-1,1],[3,1]]
        assert_eq!(j, Mat::from_row_slice(2, 2, &[10.0, 2.0, 2.0, 2.0]));
    }

    #[test]
    fn empty_atoms_give_zero() {
        let j = jump_integral(&[], Dims::new(3, 1, 2), &Mat::identity(3, 3), AtomField::E, AtomField::F1).unwrap();
        assert_eq!(j, Mat::zeros(3, 2));
    }

    #[test]
    fn zero_gain_closure_embeds_open_loop() {
        let m = MeanFieldJumpModel::two_state_example();
        let d = close_loop(&m, &Mat::zeros(1, 2), &Mat::zeros(1, 2)).unwrap();
        assert_eq!(d.a, m.a);
        assert_eq!(d.a_bar, m.a_bar);
        assert_eq!(d.c_bar, m.c_bar);
        assert_eq!(d.atoms[0].e_bar, m.atoms[0].e_bar);
        assert_eq!(d.m.rows(0, 2), m.m.rows(0, 2));
        assert_eq!(d.m.row(2).norm(), 0.0);
        assert_eq!(d.m_bar.norm(), 0.0);
    }

    #[test]
    fn unit_gain_closure() {
        let m = MeanFieldJumpModel::two_state_example();
        let k2 = Mat::from_row_slice(1, 2, &[1.0, 0.0]);
        let d = close_loop(&m, &k2, &k2).unwrap();
        assert_eq!(d.a, Mat::from_row_slice(2, 2, &[2.0, 2.0, -1.0, 1.0]));
        // K̃2 = 0: mean-channel drift picks up B̄2 K2 only.
        assert_eq!(d.a_bar, &m.a_bar + &m.b2_bar * &k2);
    }

    #[test]
    fn zero_model_closes_to_zero() {
        let m = MeanFieldJumpModel::zeros(Dims::new(2, 1, 1), 1.0);
        let d = close_loop(&m, &Mat::from_element(1, 2, 3.0), &Mat::from_element(1, 2, -1.0)).unwrap();
        for x in [&d.a, &d.a_bar, &d.c, &d.c_bar, &d.b, &d.d] {
            assert_eq!(x.norm(), 0.0);
        }
    }

    #[test]
    fn bad_gain_shape_rejected() {
        let m = MeanFieldJumpModel::two_state_example();
        assert!(close_loop(&m, &Mat::zeros(2, 2), &Mat::zeros(1, 2)).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let m = MeanFieldJumpModel::two_state_example();
        let text = m.to_toml_string();
        let back = MeanFieldJumpModel::from_toml_str(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn toml_rejects_unknown_key() {
        let text = "horizon = 1.0\n[dims]\nn = 1\nnu = 1\nnv = 1\n[matrices]\nQ = [[1.0]]\n";
        assert!(matches!(MeanFieldJumpModel::from_toml_str(text), Err(ModelError::Parse(_))));
    }

    #[test]
    fn interp_hits_nodes_and_midpoints() {
        let g = vec![0.0, 1.0, 2.0];
        let v = vec![Mat::from_element(1, 1, 0.0), Mat::from_element(1, 1, 2.0), Mat::from_element(1, 1, 6.0)];
        assert_eq!(interp(&g, &v, 1.0)[(0, 0)], 2.0);
        assert_eq!(interp(&g, &v, 1.5)[(0, 0)], 4.0);
        assert_eq!(interp(&g, &v, 3.0)[(0, 0)], 6.0);
    }

    fn sym2() -> impl Strategy<Value = Mat> {
        (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64).prop_map(|(a, b, c)| Mat::from_row_slice(2, 2, &[a, b, b, c]))
    }

    fn psd2() -> impl Strategy<Value = Mat> {
        (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64).prop_map(|(a, b, c, d)| {
            let r = Mat::from_row_slice(2, 2, &[a, b, c, d]);
            r.transpose() * r
        })
    }

    proptest! {
        #[test]
        fn jump_integral_is_linear(p in sym2(), s in sym2(), al in -3.0..3.0f64, be in -3.0..3.0f64) {
            let atoms = MeanFieldJumpModel::two_state_example().atoms;
            let f = |x: &Mat| jump_integral(&atoms, Dims::new(2, 1, 1), x, AtomField::E, AtomField::F1).unwrap();
            let lhs = f(&(&p * al + &s * be));
            let rhs = f(&p) * al + f(&s) * be;
            prop_assert!((lhs - rhs).norm() < 1e-10);
        }

        #[test]
        fn jump_integral_same_side_is_symmetric_psd(p in psd2(), w in 0.0..4.0f64) {
            let mut atoms = MeanFieldJumpModel::two_state_example().atoms;
            atoms[0].weight = w;
            let j = jump_integral(&atoms, Dims::new(2, 1, 1), &p, AtomField::EBar, AtomField::EBar).unwrap();
            prop_assert!(crate::linalg::asymmetry(&j) < 1e-10);
            prop_assert!(crate::linalg::min_eig(&j) > -1e-9);
        }

        #[test]
        fn validate_is_idempotent(w in -1.0..1.0f64) {
            let mut m = MeanFieldJumpModel::two_state_example();
            m.atoms[0].weight = w;
            let before = m.clone();
            let a = validate(&m);
            let b = validate(&m);
            prop_assert_eq!(a, b);
            prop_assert_eq!(m, before);
        }
    }
}
