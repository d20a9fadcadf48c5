//! Direct multiple-shooting transcription of the optimal control problems.
//!
//! Three classes share one decision layout `[x_0..x_N | u_0..u_{N-1} |
//! s_0..s_N | times]`:
//! - hard time-optimal: cost `T`, scaled RK4 with interval length `T/N`;
//! - soft time-optimal: cost `‖s_N‖²_P + Σ (T_k/N + ‖s_k‖²_{S/N})` with one
//!   time variable per interval and slacked frequency-band rows;
//! - quasi time-optimal: quadratic tracking plus `F·T`, unscaled RK4 at `T_s`,
//!   with `T` bounded below by the terminal-set entry time of the trajectory.
//!
//! `x_0` is pinned through equal variable bounds, as are pure box rows of `Z`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::freqband::{eval_band, BandValue, FrequencyBand};
use crate::model::{ControlVector, ModelError, ParamPoint, PlantModel, StateVector, DEFAULT_SUBSTEPS};
use crate::nlp::{HessianMode, Linearization, NlpProblem, SqpOptions};
use crate::spectral::{predict_channel, PredictOptions, MIN_SAMPLES};

/// Lower bound on every time variable; keeps the scaled dynamics away from `T = 0`.
pub const T_MIN: f64 = 1e-3;

/// Radius (∞-norm) within which a point terminal set counts as reached.
pub const POINT_SET_RADIUS: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcpError {
    #[error("horizon N = {got} too short, need at least {min}")]
    HorizonTooShort { min: usize, got: usize },
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("initial state violates constraint row {row} by {excess:.3e}")]
    InfeasibleInitialState { row: usize, excess: f64 },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Mixed state-input polytope `Z = {C_x x + D_u u ≤ E}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolytopicConstraint {
    pub cx: DMatrix<f64>,
    pub du: DMatrix<f64>,
    pub e: DVector<f64>,
}

impl PolytopicConstraint {
    pub fn new(cx: DMatrix<f64>, du: DMatrix<f64>, e: DVector<f64>) -> Result<Self, OcpError> {
        if cx.nrows() != e.len() {
            return Err(OcpError::DimensionMismatch { what: "C_x rows", expected: e.len(), got: cx.nrows() });
        }
        if du.nrows() != e.len() {
            return Err(OcpError::DimensionMismatch { what: "D_u rows", expected: e.len(), got: du.nrows() });
        }
        Ok(Self { cx, du, e })
    }

    pub fn empty(n: usize, m: usize) -> Self {
        Self { cx: DMatrix::zeros(0, n), du: DMatrix::zeros(0, m), e: DVector::zeros(0) }
    }

    /// Box constraints; infinite entries produce no row.
    pub fn from_boxes(x_lo: &[f64], x_hi: &[f64], u_lo: &[f64], u_hi: &[f64]) -> Self {
        let (n, m) = (x_lo.len(), u_lo.len());
        let mut rows: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
        for i in 0..n {
            if x_hi[i].is_finite() {
                let mut c = vec![0.0; n];
                c[i] = 1.0;
                rows.push((c, vec![0.0; m], x_hi[i]));
            }
            if x_lo[i].is_finite() {
                let mut c = vec![0.0; n];
                c[i] = -1.0;
                rows.push((c, vec![0.0; m], -x_lo[i]));
            }
        }
        for j in 0..m {
            if u_hi[j].is_finite() {
                let mut d = vec![0.0; m];
                d[j] = 1.0;
                rows.push((vec![0.0; n], d, u_hi[j]));
            }
            if u_lo[j].is_finite() {
                let mut d = vec![0.0; m];
                d[j] = -1.0;
                rows.push((vec![0.0; n], d, -u_lo[j]));
            }
        }
        let r = rows.len();
        Self {
            cx: DMatrix::from_fn(r, n, |i, j| rows[i].0[j]),
            du: DMatrix::from_fn(r, m, |i, j| rows[i].1[j]),
            e: DVector::from_fn(r, |i, _| rows[i].2),
        }
    }

    pub fn rows(&self) -> usize {
        self.e.len()
    }

    /// `C_x x + D_u u − E`; positive entries are violations.
    pub fn residual(&self, x: &StateVector, u: &ControlVector) -> DVector<f64> {
        &self.cx * x + &self.du * u - &self.e
    }

    /// Largest violation of the pure state rows at `x`, if above `tol`.
    pub fn state_violation(&self, x: &StateVector, tol: f64) -> Option<(usize, f64)> {
        (0..self.rows())
            .filter(|&r| self.du.row(r).iter().all(|&v| v == 0.0))
            .map(|r| (r, self.cx.row(r).transpose().dot(x) - self.e[r]))
            .filter(|&(_, excess)| excess > tol)
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Componentwise input bounds implied by pure single-input rows.
    pub fn input_box(&self) -> (DVector<f64>, DVector<f64>) {
        let m = self.du.ncols();
        let mut lo = DVector::from_element(m, f64::NEG_INFINITY);
        let mut hi = DVector::from_element(m, f64::INFINITY);
        for r in 0..self.rows() {
            if let Some(Bound { var: Var::Input(j), upper, value }) = self.single_bound(r) {
                if upper {
                    hi[j] = hi[j].min(value);
                } else {
                    lo[j] = lo[j].max(value);
                }
            }
        }
        (lo, hi)
    }

    fn single_bound(&self, r: usize) -> Option<Bound> {
        let mut hit = None;
        for (j, &v) in self.cx.row(r).iter().enumerate() {
            if v != 0.0 {
                if hit.is_some() {
                    return None;
                }
                hit = Some((Var::State(j), v));
            }
        }
        for (j, &v) in self.du.row(r).iter().enumerate() {
            if v != 0.0 {
                if hit.is_some() {
                    return None;
                }
                hit = Some((Var::Input(j), v));
            }
        }
        hit.map(|(var, a)| Bound { var, upper: a > 0.0, value: self.e[r] / a })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Var {
    State(usize),
    Input(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Bound {
    var: Var,
    upper: bool,
    value: f64,
}

/// Terminal region `X_f`.
#[derive(Debug, Clone, PartialEq)]
pub enum TerminalSet {
    /// `{x : G_x x ≤ F}`.
    Polytope { g: DMatrix<f64>, f: DVector<f64> },
    /// `{x : (x − c)ᵀ P (x − c) ≤ α}`.
    Ellipsoid { p: DMatrix<f64>, alpha: f64, center: StateVector },
    /// `{x_f}`; imposed as an equality on the last node.
    Point(StateVector),
}

impl TerminalSet {
    pub fn center(&self) -> Option<&StateVector> {
        match self {
            TerminalSet::Ellipsoid { center, .. } => Some(center),
            TerminalSet::Point(x) => Some(x),
            TerminalSet::Polytope { .. } => None,
        }
    }

    /// Non-positive exactly inside the set.
    pub fn membership_residual(&self, x: &StateVector) -> f64 {
        match self {
            TerminalSet::Polytope { g, f } => (0..f.len())
                .map(|r| {
                    let row = g.row(r);
                    (row.transpose().dot(x) - f[r]) / row.norm().max(f64::MIN_POSITIVE)
                })
                .fold(f64::NEG_INFINITY, f64::max),
            TerminalSet::Ellipsoid { p, alpha, center } => {
                let d = x - center;
                d.dot(&(p * &d)) / alpha - 1.0
            }
            TerminalSet::Point(c) => (x - c).amax() / POINT_SET_RADIUS - 1.0,
        }
    }

    pub fn contains(&self, x: &StateVector) -> bool {
        self.membership_residual(x) <= 0.0
    }

    /// Outer polytope of an ellipsoid along the eigen-directions of `P`:
    /// `|vᵢᵀ(x − c)| ≤ √(α/λᵢ)`. Other kinds are returned as polytopes directly.
    pub fn outer_polytope(&self) -> (DMatrix<f64>, DVector<f64>) {
        match self {
            TerminalSet::Polytope { g, f } => (g.clone(), f.clone()),
            TerminalSet::Ellipsoid { p, alpha, center } => {
                let n = center.len();
                let eig = nalgebra::SymmetricEigen::new((p + p.transpose()) * 0.5);
                let mut g = DMatrix::zeros(2 * n, n);
                let mut f = DVector::zeros(2 * n);
                for i in 0..n {
                    let v = eig.eigenvectors.column(i);
                    let half = (alpha / eig.eigenvalues[i].max(f64::MIN_POSITIVE)).sqrt();
                    let vc = v.dot(center);
                    g.row_mut(2 * i).copy_from(&v.transpose());
                    f[2 * i] = vc + half;
                    g.row_mut(2 * i + 1).copy_from(&(-v.transpose()));
                    f[2 * i + 1] = -vc + half;
                }
                (g, f)
            }
            TerminalSet::Point(c) => {
                let n = c.len();
                let mut g = DMatrix::zeros(2 * n, n);
                let mut f = DVector::zeros(2 * n);
                for i in 0..n {
                    g[(2 * i, i)] = 1.0;
                    f[2 * i] = c[i];
                    g[(2 * i + 1, i)] = -1.0;
                    f[2 * i + 1] = -c[i];
                }
                (g, f)
            }
        }
    }
}

/// Cost weights. `s` and `p_slack` are `s×s`, `q` is `n×n`, `r` is `m×m`.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpWeights {
    pub s: DMatrix<f64>,
    pub p_slack: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub f_time: f64,
    pub x_s: StateVector,
    pub x_f: StateVector,
    pub u_s: ControlVector,
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    nalgebra::SymmetricEigen::new((m + m.transpose()) * 0.5).eigenvalues.min()
}

impl OcpWeights {
    /// Zero quadratic weights sized for `(n, m, s)`, targets at the origin.
    pub fn zeros(n: usize, m: usize, s: usize) -> Self {
        Self {
            s: DMatrix::zeros(s, s),
            p_slack: DMatrix::zeros(s, s),
            q: DMatrix::zeros(n, n),
            r: DMatrix::zeros(m, m),
            f_time: 0.0,
            x_s: DVector::zeros(n),
            x_f: DVector::zeros(n),
            u_s: DVector::zeros(m),
        }
    }

    pub fn validate(&self, n: usize, m: usize, s: usize, need_r_pd: bool) -> Result<(), OcpError> {
        let shape = |what: &'static str, mat: &DMatrix<f64>, k: usize| {
            if mat.shape() != (k, k) {
                Err(OcpError::DimensionMismatch { what, expected: k, got: mat.nrows() })
            } else {
                Ok(())
            }
        };
        shape("slack weight S", &self.s, s)?;
        shape("terminal slack weight P", &self.p_slack, s)?;
        shape("state weight Q", &self.q, n)?;
        shape("input weight R", &self.r, m)?;
        for (what, v, k) in [("x_s", &self.x_s, n), ("x_f", &self.x_f, n), ("u_s", &self.u_s, m)] {
            if v.len() != k {
                return Err(OcpError::DimensionMismatch { what, expected: k, got: v.len() });
            }
        }
        for (name, mat) in [("S", &self.s), ("P", &self.p_slack), ("Q", &self.q)] {
            let tol = 1e-9 * mat.amax().max(1.0);
            if min_eigenvalue(mat) < -tol {
                return Err(OcpError::InvalidWeights(format!("{name} is not positive semidefinite")));
            }
        }
        if need_r_pd && m > 0 && min_eigenvalue(&self.r) <= 0.0 {
            return Err(OcpError::InvalidWeights("R is not positive definite".into()));
        }
        if !(self.f_time >= 0.0) {
            return Err(OcpError::InvalidWeights("F must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemClass {
    Hard,
    Soft,
    Quasi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeMode {
    PerInterval,
    Scalar,
}

/// `(N+1)n + Nm + (N+1)s + (N or 1)`.
pub fn decision_dim(horizon: usize, n: usize, m: usize, s: usize, mode: TimeMode) -> usize {
    let times = match mode {
        TimeMode::PerInterval => horizon,
        TimeMode::Scalar => 1,
    };
    (horizon + 1) * n + horizon * m + (horizon + 1) * s + times
}

/// Index ranges of the decision vector blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionLayout {
    pub horizon: usize,
    pub n: usize,
    pub m: usize,
    pub s: usize,
    pub time_mode: TimeMode,
    pub states: Range<usize>,
    pub inputs: Range<usize>,
    pub slacks: Range<usize>,
    pub times: Range<usize>,
}

impl DecisionLayout {
    pub fn new(horizon: usize, n: usize, m: usize, s: usize, time_mode: TimeMode) -> Self {
        let xs = (horizon + 1) * n;
        let us = xs + horizon * m;
        let ss = us + (horizon + 1) * s;
        let end = decision_dim(horizon, n, m, s, time_mode);
        Self { horizon, n, m, s, time_mode, states: 0..xs, inputs: xs..us, slacks: us..ss, times: ss..end }
    }

    pub fn dim(&self) -> usize {
        self.times.end
    }

    pub fn x(&self, k: usize) -> Range<usize> {
        let a = self.states.start + k * self.n;
        a..a + self.n
    }

    pub fn u(&self, k: usize) -> Range<usize> {
        let a = self.inputs.start + k * self.m;
        a..a + self.m
    }

    pub fn s(&self, k: usize) -> Range<usize> {
        let a = self.slacks.start + k * self.s;
        a..a + self.s
    }

    /// Index of the time variable governing interval `k`.
    pub fn t(&self, k: usize) -> usize {
        match self.time_mode {
            TimeMode::PerInterval => self.times.start + k,
            TimeMode::Scalar => self.times.start,
        }
    }

    pub fn state(&self, z: &DVector<f64>, k: usize) -> StateVector {
        z.rows(self.x(k).start, self.n).into_owned()
    }

    pub fn input(&self, z: &DVector<f64>, k: usize) -> ControlVector {
        z.rows(self.u(k).start, self.m).into_owned()
    }

    pub fn slack(&self, z: &DVector<f64>, k: usize) -> DVector<f64> {
        z.rows(self.s(k).start, self.s).into_owned()
    }
}

/// Numerical settings shared by all transcriptions.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpOptions {
    pub substeps: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub predict: PredictOptions,
    /// Forward-difference step for the frequency Jacobian.
    pub freq_fd_step: f64,
}

impl Default for OcpOptions {
    fn default() -> Self {
        Self { substeps: DEFAULT_SUBSTEPS, t_min: T_MIN, t_max: 100.0, predict: PredictOptions::default(), freq_fd_step: 1e-4 }
    }
}

/// Everything a transcription needs.
#[derive(Debug, Clone)]
pub struct OcpSetup {
    pub model: PlantModel,
    pub x0: StateVector,
    pub constraints: PolytopicConstraint,
    pub terminal: TerminalSet,
    pub horizon: usize,
    /// Sampling time; fixes `T_0 = N·T_s` in closed loop and the quasi step.
    pub ts: f64,
    pub weights: OcpWeights,
    /// Band `j` constrains the frequency of modal channel `j`.
    pub bands: Vec<FrequencyBand>,
    /// `ϱ_k` per node; shorter schedules repeat their last entry.
    pub rho_schedule: Vec<ParamPoint>,
    pub closed_loop: bool,
    pub options: OcpOptions,
}

impl OcpSetup {
    /// Setup with zero weights, no bands, constant nominal `ϱ` and default options.
    pub fn new(model: PlantModel, x0: StateVector, terminal: TerminalSet, horizon: usize, ts: f64) -> Self {
        let (n, m) = (model.state_dim(), model.input_dim());
        let rho = vec![model.nominal_param()];
        Self {
            constraints: PolytopicConstraint::empty(n, m),
            weights: OcpWeights::zeros(n, m, 0),
            model,
            x0,
            terminal,
            horizon,
            ts,
            bands: Vec::new(),
            rho_schedule: rho,
            closed_loop: false,
            options: OcpOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum IneqKind {
    /// General row `r` of `Z` at node `k`.
    Polytope {
        k: usize,
        row: usize,
    },
    TerminalPolytope {
        row: usize,
    },
    TerminalEllipsoid,
    /// Band `band` at node `k`; `upper` selects the `B₊` side.
    Band {
        k: usize,
        band: usize,
        upper: bool,
    },
    /// `T_entry(x) − T ≤ 0`.
    Entry,
}

/// A transcribed OCP, ready for [`crate::nlp::solve_sqp`].
#[derive(Debug, Clone)]
pub struct Ocp {
    pub class: ProblemClass,
    pub setup: OcpSetup,
    pub layout: DecisionLayout,
    lo: DVector<f64>,
    hi: DVector<f64>,
    ineq: Vec<IneqKind>,
    band_values: Vec<Vec<BandValue>>,
    channels: Vec<usize>,
    n_eq: usize,
}

fn check_common(setup: &OcpSetup, min_horizon: usize) -> Result<(), OcpError> {
    let (n, m) = (setup.model.state_dim(), setup.model.input_dim());
    if setup.horizon < min_horizon {
        return Err(OcpError::HorizonTooShort { min: min_horizon, got: setup.horizon });
    }
    if setup.x0.len() != n {
        return Err(OcpError::DimensionMismatch { what: "x0", expected: n, got: setup.x0.len() });
    }
    if !setup.x0.iter().all(|v| v.is_finite()) {
        return Err(OcpError::InvalidArgument("x0 is not finite".into()));
    }
    let z = &setup.constraints;
    if z.cx.ncols() != n || z.du.ncols() != m {
        return Err(OcpError::DimensionMismatch { what: "constraint columns", expected: n + m, got: z.cx.ncols() + z.du.ncols() });
    }
    match &setup.terminal {
        TerminalSet::Polytope { g, f } => {
            if g.ncols() != n || g.nrows() != f.len() {
                return Err(OcpError::DimensionMismatch { what: "terminal polytope", expected: n, got: g.ncols() });
            }
        }
        TerminalSet::Ellipsoid { p, alpha, center } => {
            if p.shape() != (n, n) || center.len() != n {
                return Err(OcpError::DimensionMismatch { what: "terminal ellipsoid", expected: n, got: center.len() });
            }
            if !(*alpha > 0.0) {
                return Err(OcpError::InvalidArgument("terminal ellipsoid needs alpha > 0".into()));
            }
        }
        TerminalSet::Point(x) => {
            if x.len() != n {
                return Err(OcpError::DimensionMismatch { what: "terminal point", expected: n, got: x.len() });
            }
        }
    }
    if setup.rho_schedule.is_empty() {
        return Err(OcpError::InvalidArgument("parameter schedule is empty".into()));
    }
    if setup.bands.len() > setup.model.modal_indices().len() {
        return Err(OcpError::DimensionMismatch {
            what: "bands vs modal channels",
            expected: setup.model.modal_indices().len(),
            got: setup.bands.len(),
        });
    }
    if let Some((row, excess)) = z.state_violation(&setup.x0, 1e-6) {
        return Err(OcpError::InfeasibleInitialState { row, excess });
    }
    Ok(())
}

impl Ocp {
    fn build(class: ProblemClass, setup: &OcpSetup) -> Result<Self, OcpError> {
        let (n, m) = (setup.model.state_dim(), setup.model.input_dim());
        let big_n = setup.horizon;
        let s = setup.bands.len();
        let (time_mode, slack_dim) = match class {
            ProblemClass::Hard => (TimeMode::Scalar, 0),
            ProblemClass::Soft => (TimeMode::PerInterval, s),
            ProblemClass::Quasi => (TimeMode::Scalar, s),
        };
        let layout = DecisionLayout::new(big_n, n, m, slack_dim, time_mode);
        let d = layout.dim();
        let mut lo = DVector::from_element(d, f64::NEG_INFINITY);
        let mut hi = DVector::from_element(d, f64::INFINITY);

        for i in layout.x(0) {
            lo[i] = setup.x0[i - layout.x(0).start];
            hi[i] = lo[i];
        }
        let z = &setup.constraints;
        let mut general = Vec::new();
        for r in 0..z.rows() {
            match z.single_bound(r) {
                Some(Bound { var: Var::State(i), upper, value }) => {
                    for k in 1..=big_n {
                        let idx = layout.x(k).start + i;
                        if upper {
                            hi[idx] = hi[idx].min(value);
                        } else {
                            lo[idx] = lo[idx].max(value);
                        }
                    }
                }
                Some(Bound { var: Var::Input(j), upper, value }) => {
                    for k in 0..big_n {
                        let idx = layout.u(k).start + j;
                        if upper {
                            hi[idx] = hi[idx].min(value);
                        } else {
                            lo[idx] = lo[idx].max(value);
                        }
                    }
                }
                None => general.push(r),
            }
        }
        for i in layout.slacks.clone() {
            lo[i] = 0.0;
        }
        for i in layout.times.clone() {
            lo[i] = setup.options.t_min;
            hi[i] = setup.options.t_max;
        }
        if class == ProblemClass::Quasi {
            lo[layout.times.start] = 0.0;
        }
        if class == ProblemClass::Soft && setup.closed_loop {
            let pin = big_n as f64 * setup.ts;
            lo[layout.t(0)] = pin;
            hi[layout.t(0)] = pin;
        }

        let mut ineq = Vec::new();
        for k in 0..big_n {
            for &r in &general {
                ineq.push(IneqKind::Polytope { k, row: r });
            }
        }
        for &r in &general {
            if z.du.row(r).iter().all(|&v| v == 0.0) {
                ineq.push(IneqKind::Polytope { k: big_n, row: r });
            }
        }
        match (&setup.terminal, class) {
            (_, ProblemClass::Quasi) => ineq.push(IneqKind::Entry),
            (TerminalSet::Point(xf), _) => {
                for i in layout.x(big_n) {
                    let v = xf[i - layout.x(big_n).start];
                    lo[i] = lo[i].max(v);
                    hi[i] = hi[i].min(v);
                }
            }
            (TerminalSet::Ellipsoid { .. }, _) => ineq.push(IneqKind::TerminalEllipsoid),
            (TerminalSet::Polytope { f, .. }, _) => {
                for row in 0..f.len() {
                    ineq.push(IneqKind::TerminalPolytope { row });
                }
            }
        }
        if (0..d).any(|i| lo[i] > hi[i]) {
            return Err(OcpError::InvalidArgument("variable bounds are inconsistent (terminal point outside Z?)".into()));
        }

        let rho_at = |k: usize| setup.rho_schedule[k.min(setup.rho_schedule.len() - 1)];
        let band_values: Vec<Vec<BandValue>> =
            (0..=big_n).map(|k| setup.bands.iter().map(|b| eval_band(b, &rho_at(k))).collect()).collect();
        if class != ProblemClass::Hard {
            for k in 0..=big_n {
                for (j, band) in setup.bands.iter().enumerate() {
                    ineq.push(IneqKind::Band { k, band: j, upper: false });
                    if !band.is_one_sided() {
                        ineq.push(IneqKind::Band { k, band: j, upper: true });
                    }
                }
            }
        }
        let channels = setup.model.modal_indices()[..setup.bands.len()].to_vec();
        let n_eq = big_n * n
            + match (class, time_mode) {
                (ProblemClass::Soft, _) => big_n.saturating_sub(2) + usize::from(!setup.closed_loop),
                _ => 0,
            };
        Ok(Self { class, setup: setup.clone(), layout, lo, hi, ineq, band_values, channels, n_eq })
    }

    fn rho(&self, k: usize) -> ParamPoint {
        let sched = &self.setup.rho_schedule;
        sched[k.min(sched.len() - 1)]
    }

    /// Solver settings suited to the class: exact projected Hessian for the
    /// time-only cost, damped BFGS for the banded soft problem, Gauss-Newton
    /// for quasi.
    pub fn sqp_options(&self) -> SqpOptions {
        let hessian = match self.class {
            ProblemClass::Hard => HessianMode::ExactProjected,
            ProblemClass::Soft if self.channels.is_empty() => HessianMode::ExactProjected,
            ProblemClass::Soft => HessianMode::DampedBfgs,
            ProblemClass::Quasi => HessianMode::GaussNewton,
        };
        SqpOptions { hessian, max_major_iters: 200, ..SqpOptions::default() }
    }

    /// Duration of shooting interval `k` in seconds.
    pub fn interval_duration(&self, z: &DVector<f64>, k: usize) -> f64 {
        match self.class {
            ProblemClass::Quasi => self.setup.ts,
            _ => z[self.layout.t(k)] / self.layout.horizon as f64,
        }
    }

    /// Hard: `T`; soft: `Σ T_k/N`; quasi: terminal-set entry time `T`.
    pub fn transition_time(&self, z: &DVector<f64>) -> f64 {
        match self.class {
            ProblemClass::Quasi | ProblemClass::Hard => z[self.layout.times.start],
            ProblemClass::Soft => (0..self.layout.horizon).map(|k| self.interval_duration(z, k)).sum(),
        }
    }

    fn shoot(&self, k: usize, x: &StateVector, u: &ControlVector, time: f64) -> StateVector {
        let o = &self.setup.options;
        match self.class {
            ProblemClass::Quasi => self.setup.model.rk4_step(x, u, &self.rho(k), self.setup.ts, o.substeps),
            _ => self.setup.model.rk4_step_scaled(x, u, &self.rho(k), time, 1.0 / self.layout.horizon as f64, o.substeps),
        }
    }

    fn time_var(&self, k: usize) -> Option<usize> {
        (self.class != ProblemClass::Quasi).then(|| self.layout.t(k))
    }

    /// Node times `t_0 = 0, …, t_N`.
    pub fn node_times(&self, z: &DVector<f64>) -> Vec<f64> {
        let mut t = vec![0.0];
        for k in 0..self.layout.horizon {
            t.push(t[k] + self.interval_duration(z, k));
        }
        t
    }

    /// Channel samples on a uniform grid spanning the horizon, with its step.
    fn uniform_channel(&self, z: &DVector<f64>, channel: usize, times: &[f64]) -> (Vec<f64>, f64) {
        let big_n = self.layout.horizon;
        let values: Vec<f64> = (0..=big_n).map(|k| z[self.layout.x(k).start + channel]).collect();
        if self.class == ProblemClass::Quasi {
            return (values, self.setup.ts);
        }
        let total = times[big_n];
        let dt = total / big_n as f64;
        let mut seg = 0;
        let samples = (0..=big_n)
            .map(|i| {
                let t = (i as f64 * dt).min(total);
                while seg + 1 < big_n && times[seg + 1] < t {
                    seg += 1;
                }
                let (t0, t1) = (times[seg], times[seg + 1]);
                let w = if t1 > t0 { ((t - t0) / (t1 - t0)).clamp(0.0, 1.0) } else { 0.0 };
                values[seg] * (1.0 - w) + values[seg + 1] * w
            })
            .collect();
        (samples, dt)
    }

    /// Predicted frequency in Hz per band, optionally seeded by `hints`.
    fn predict(&self, z: &DVector<f64>, hints: Option<&[f64]>) -> Vec<f64> {
        let times = self.node_times(z);
        self.channels
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                let (samples, dt) = self.uniform_channel(z, c, &times);
                predict_channel(&samples, dt, &self.setup.options.predict, hints.map(|h| h[j])).map(|p| p.frequency).unwrap_or(0.0)
            })
            .collect()
    }

    /// Predicted dominant frequency (Hz) of each banded modal channel.
    pub fn predicted_frequencies(&self, z: &DVector<f64>) -> Vec<f64> {
        self.predict(z, None)
    }

    /// Band boundaries per node and band.
    pub fn band_values(&self) -> &[Vec<BandValue>] {
        &self.band_values
    }

    /// Largest band violation `max(B₋ − E, E − B₊, 0)` over nodes, per band.
    pub fn band_violation(&self, freqs: &[f64]) -> Vec<f64> {
        (0..self.channels.len())
            .map(|j| self.band_values.iter().map(|row| (row[j].lower - freqs[j]).max(freqs[j] - row[j].upper).max(0.0)).fold(0.0, f64::max))
            .collect()
    }

    /// Terminal-set entry time of the node trajectory, continuous in the states.
    fn entry_time(&self, z: &DVector<f64>) -> f64 {
        let ts = self.setup.ts;
        let big_n = self.layout.horizon;
        let res: Vec<f64> = (0..=big_n).map(|k| self.setup.terminal.membership_residual(&self.layout.state(z, k))).collect();
        match res.iter().position(|&r| r <= 0.0) {
            Some(0) => 0.0,
            Some(k) => ts * ((k - 1) as f64 + res[k - 1] / (res[k - 1] - res[k])),
            // log compression keeps the gradient bounded far from the set
            None => ts * (big_n as f64 + res[big_n].ln_1p()),
        }
    }

    fn ineq_value(&self, kind: IneqKind, z: &DVector<f64>, freqs: &[f64]) -> f64 {
        let lay = &self.layout;
        let zc = &self.setup.constraints;
        match kind {
            IneqKind::Polytope { k, row } => {
                let x = lay.state(z, k);
                let mut v = zc.cx.row(row).transpose().dot(&x) - zc.e[row];
                if k < lay.horizon {
                    v += zc.du.row(row).transpose().dot(&lay.input(z, k));
                }
                v
            }
            IneqKind::TerminalPolytope { row } => {
                let TerminalSet::Polytope { g, f } = &self.setup.terminal else { unreachable!() };
                g.row(row).transpose().dot(&lay.state(z, lay.horizon)) - f[row]
            }
            IneqKind::TerminalEllipsoid => self.setup.terminal.membership_residual(&lay.state(z, lay.horizon)),
            IneqKind::Band { k, band, upper } => {
                let b = &self.band_values[k][band];
                let s = z[lay.s(k).start + band];
                if upper {
                    freqs[band] - b.upper - s
                } else {
                    b.lower - freqs[band] - s
                }
            }
            IneqKind::Entry => self.entry_time(z) - z[lay.times.start],
        }
    }

    fn ineq_all(&self, z: &DVector<f64>, freqs: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.ineq.len(), self.ineq.iter().map(|&k| self.ineq_value(k, z, freqs)))
    }

    fn eq_all(&self, z: &DVector<f64>) -> DVector<f64> {
        let lay = &self.layout;
        let (n, big_n) = (lay.n, lay.horizon);
        let mut out = DVector::zeros(self.n_eq);
        for k in 0..big_n {
            let time = self.time_var(k).map_or(0.0, |i| z[i]);
            let next = self.shoot(k, &lay.state(z, k), &lay.input(z, k), time);
            let defect = lay.state(z, k + 1) - next;
            out.rows_mut(k * n, n).copy_from(&defect);
        }
        if self.class == ProblemClass::Soft {
            let mut row = big_n * n;
            let first = if self.setup.closed_loop { 1 } else { 0 };
            for k in first..big_n - 1 {
                out[row] = z[lay.t(k)] - z[lay.t(k + 1)];
                row += 1;
            }
        }
        out
    }

    fn eq_jac(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let lay = &self.layout;
        let (n, m, big_n) = (lay.n, lay.m, lay.horizon);
        let mut jac = DMatrix::zeros(self.n_eq, lay.dim());
        for k in 0..big_n {
            let x = lay.state(z, k);
            let u = lay.input(z, k);
            let tv = self.time_var(k);
            let time = tv.map_or(0.0, |i| z[i]);
            let rows = k * n;
            for i in 0..n {
                jac[(rows + i, lay.x(k + 1).start + i)] = 1.0;
            }
            for i in 0..n {
                let h = 1e-6 * (1.0 + x[i].abs());
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += h;
                xm[i] -= h;
                let col = (self.shoot(k, &xp, &u, time) - self.shoot(k, &xm, &u, time)) / (2.0 * h);
                for r in 0..n {
                    jac[(rows + r, lay.x(k).start + i)] = -col[r];
                }
            }
            for j in 0..m {
                let h = 1e-6 * (1.0 + u[j].abs());
                let (mut up, mut um) = (u.clone(), u.clone());
                up[j] += h;
                um[j] -= h;
                let col = (self.shoot(k, &x, &up, time) - self.shoot(k, &x, &um, time)) / (2.0 * h);
                for r in 0..n {
                    jac[(rows + r, lay.u(k).start + j)] = -col[r];
                }
            }
            if let Some(ti) = tv {
                let h = 1e-6 * (1.0 + time.abs());
                let col = (self.shoot(k, &x, &u, time + h) - self.shoot(k, &x, &u, time - h)) / (2.0 * h);
                for r in 0..n {
                    jac[(rows + r, ti)] -= col[r];
                }
            }
        }
        if self.class == ProblemClass::Soft {
            let mut row = big_n * n;
            let first = if self.setup.closed_loop { 1 } else { 0 };
            for k in first..big_n - 1 {
                jac[(row, lay.t(k))] = 1.0;
                jac[(row, lay.t(k + 1))] = -1.0;
                row += 1;
            }
        }
        jac
    }

    /// `∂E_j/∂z` by forward differences, seeded at the base frequencies.
    fn freq_jacobian(&self, z: &DVector<f64>, base: &[f64]) -> DMatrix<f64> {
        let lay = &self.layout;
        let nb = self.channels.len();
        let mut jac = DMatrix::zeros(nb, lay.dim());
        if nb == 0 {
            return jac;
        }
        let step = self.setup.options.freq_fd_step;
        let mut work = z.clone();
        let mut perturb = |idx: usize, bands: &[usize], jac: &mut DMatrix<f64>| {
            if self.lo[idx] == self.hi[idx] {
                return;
            }
            let h = step * z[idx].abs().max(1.0);
            let h = if z[idx] + h > self.hi[idx] { -h } else { h };
            work[idx] = z[idx] + h;
            let times = self.node_times(&work);
            for &j in bands {
                let (samples, dt) = self.uniform_channel(&work, self.channels[j], &times);
                let f = predict_channel(&samples, dt, &self.setup.options.predict, Some(base[j])).map(|p| p.frequency).unwrap_or(base[j]);
                jac[(j, idx)] = (f - base[j]) / h;
            }
            work[idx] = z[idx];
        };
        for (j, &c) in self.channels.iter().enumerate() {
            for k in 0..=lay.horizon {
                perturb(lay.x(k).start + c, &[j], &mut jac);
            }
        }
        if self.class != ProblemClass::Quasi {
            let all: Vec<usize> = (0..nb).collect();
            for idx in lay.times.clone() {
                perturb(idx, &all, &mut jac);
            }
        }
        jac
    }

    fn ineq_jac(&self, z: &DVector<f64>, freqs: &[f64]) -> DMatrix<f64> {
        let lay = &self.layout;
        let zc = &self.setup.constraints;
        let mut jac = DMatrix::zeros(self.ineq.len(), lay.dim());
        let fjac = if self.ineq.iter().any(|k| matches!(k, IneqKind::Band { .. })) { Some(self.freq_jacobian(z, freqs)) } else { None };
        for (row, &kind) in self.ineq.iter().enumerate() {
            match kind {
                IneqKind::Polytope { k, row: r } => {
                    for i in 0..lay.n {
                        jac[(row, lay.x(k).start + i)] = zc.cx[(r, i)];
                    }
                    if k < lay.horizon {
                        for j in 0..lay.m {
                            jac[(row, lay.u(k).start + j)] = zc.du[(r, j)];
                        }
                    }
                }
                IneqKind::TerminalPolytope { row: r } => {
                    let TerminalSet::Polytope { g, .. } = &self.setup.terminal else { unreachable!() };
                    for i in 0..lay.n {
                        jac[(row, lay.x(lay.horizon).start + i)] = g[(r, i)];
                    }
                }
                IneqKind::TerminalEllipsoid => {
                    let TerminalSet::Ellipsoid { p, alpha, center } = &self.setup.terminal else { unreachable!() };
                    let d = lay.state(z, lay.horizon) - center;
                    let grad = (p + p.transpose()) * d / *alpha;
                    for i in 0..lay.n {
                        jac[(row, lay.x(lay.horizon).start + i)] = grad[i];
                    }
                }
                IneqKind::Band { k, band, upper } => {
                    let fj = fjac.as_ref().expect("band rows imply a frequency Jacobian");
                    let sign = if upper { 1.0 } else { -1.0 };
                    for c in 0..lay.dim() {
                        jac[(row, c)] = sign * fj[(band, c)];
                    }
                    jac[(row, lay.s(k).start + band)] = -1.0;
                }
                IneqKind::Entry => {
                    let mut work = z.clone();
                    for k in 1..=lay.horizon {
                        for i in lay.x(k) {
                            let h = 1e-7 * (1.0 + z[i].abs());
                            work[i] = z[i] + h;
                            let plus = self.entry_time(&work);
                            work[i] = z[i] - h;
                            let minus = self.entry_time(&work);
                            work[i] = z[i];
                            jac[(row, i)] = (plus - minus) / (2.0 * h);
                        }
                    }
                    jac[(row, lay.times.start)] = -1.0;
                }
            }
        }
        jac
    }

    /// Forward simulation from `x0` with `inputs` (last one repeated) as a
    /// decision vector; time variables set to `time`, slacks to the smallest
    /// feasible values and the quasi `T` to the entry time.
    pub fn initial_guess(&self, inputs: &[ControlVector], time: f64) -> DVector<f64> {
        let lay = &self.layout;
        let mut z = DVector::zeros(lay.dim());
        for i in lay.times.clone() {
            z[i] = time.clamp(self.lo[i], self.hi[i]);
        }
        if self.class == ProblemClass::Soft && self.setup.closed_loop {
            z[lay.t(0)] = self.lo[lay.t(0)];
        }
        z.rows_mut(lay.x(0).start, lay.n).copy_from(&self.setup.x0);
        let zero = DVector::zeros(lay.m);
        for k in 0..lay.horizon {
            let u = inputs.get(k).or(inputs.last()).unwrap_or(&zero).clone();
            let u = DVector::from_fn(lay.m, |j, _| u[j].clamp(self.lo[lay.u(k).start + j], self.hi[lay.u(k).start + j]));
            z.rows_mut(lay.u(k).start, lay.m).copy_from(&u);
            let t = self.time_var(k).map_or(0.0, |i| z[i]);
            let next = self.shoot(k, &lay.state(&z, k), &u, t);
            z.rows_mut(lay.x(k + 1).start, lay.n).copy_from(&next);
        }
        self.fill_slacks(&mut z);
        z
    }

    /// Set slacks (and the quasi `T`) to their smallest feasible values.
    pub fn fill_slacks(&self, z: &mut DVector<f64>) {
        let lay = &self.layout;
        if self.class != ProblemClass::Hard && !self.channels.is_empty() {
            let freqs = self.predict(z, None);
            for k in 0..=lay.horizon {
                for j in 0..self.channels.len() {
                    let b = &self.band_values[k][j];
                    z[lay.s(k).start + j] = (b.lower - freqs[j]).max(freqs[j] - b.upper).max(0.0);
                }
            }
        }
        if self.class == ProblemClass::Quasi {
            z[lay.times.start] = self.entry_time(z).max(0.0);
        }
    }

    /// Constant Hessian of the quadratic cost terms.
    fn hessian(&self) -> DMatrix<f64> {
        let lay = &self.layout;
        let w = &self.setup.weights;
        let big_n = lay.horizon as f64;
        let mut h = DMatrix::zeros(lay.dim(), lay.dim());
        let mut put = |r: Range<usize>, block: &DMatrix<f64>, scale: f64| {
            let sym = (block + block.transpose()) * scale;
            h.view_mut((r.start, r.start), (r.len(), r.len())).copy_from(&sym);
        };
        match self.class {
            ProblemClass::Hard => {}
            ProblemClass::Soft => {
                for k in 0..lay.horizon {
                    put(lay.s(k), &w.s, 1.0 / big_n);
                }
                put(lay.s(lay.horizon), &w.p_slack, 1.0);
            }
            ProblemClass::Quasi => {
                for k in 0..lay.horizon {
                    put(lay.x(k), &w.q, 1.0);
                    put(lay.u(k), &w.r, 1.0);
                    put(lay.s(k), &w.s, 1.0);
                }
                put(lay.x(lay.horizon), &w.q, 1.0);
                put(lay.s(lay.horizon), &w.p_slack, 1.0);
            }
        }
        h
    }
}

fn quad(w: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(w * v))
}

impl NlpProblem for Ocp {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        (self.lo.clone(), self.hi.clone())
    }

    fn cost(&self, z: &DVector<f64>) -> f64 {
        let lay = &self.layout;
        let w = &self.setup.weights;
        let big_n = lay.horizon;
        match self.class {
            ProblemClass::Hard => z[lay.times.start],
            ProblemClass::Soft => {
                let mut c = quad(&w.p_slack, &lay.slack(z, big_n));
                for k in 0..big_n {
                    c += z[lay.t(k)] / big_n as f64 + quad(&w.s, &lay.slack(z, k)) / big_n as f64;
                }
                c
            }
            ProblemClass::Quasi => {
                let mut c =
                    w.f_time * z[lay.times.start] + quad(&w.q, &(lay.state(z, big_n) - &w.x_f)) + quad(&w.p_slack, &lay.slack(z, big_n));
                for k in 0..big_n {
                    c += quad(&w.q, &(lay.state(z, k) - &w.x_s)) + quad(&w.r, &(lay.input(z, k) - &w.u_s)) + quad(&w.s, &lay.slack(z, k));
                }
                c
            }
        }
    }

    fn cost_gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let lay = &self.layout;
        let w = &self.setup.weights;
        let big_n = lay.horizon;
        let mut g = &self.hessian() * z;
        match self.class {
            ProblemClass::Hard => g[lay.times.start] = 1.0,
            ProblemClass::Soft => {
                for k in 0..big_n {
                    g[lay.t(k)] += 1.0 / big_n as f64;
                }
            }
            ProblemClass::Quasi => {
                // the Hessian product already covers 2Q x; shift by the references
                let sym_q = &w.q + w.q.transpose();
                let sym_r = &w.r + w.r.transpose();
                for k in 0..big_n {
                    let gx = -(&sym_q * &w.x_s);
                    for (i, idx) in lay.x(k).enumerate() {
                        g[idx] += gx[i];
                    }
                    let gu = -(&sym_r * &w.u_s);
                    for (j, idx) in lay.u(k).enumerate() {
                        g[idx] += gu[j];
                    }
                }
                let gx = -(&sym_q * &w.x_f);
                for (i, idx) in lay.x(big_n).enumerate() {
                    g[idx] += gx[i];
                }
                g[lay.times.start] += w.f_time;
            }
        }
        g
    }

    fn cost_hessian(&self, _z: &DVector<f64>) -> Option<DMatrix<f64>> {
        (self.class != ProblemClass::Hard).then(|| self.hessian())
    }

    fn eq_constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        self.eq_all(z)
    }

    /// Cost Hessian plus second differences of `−λ_kᵀΦ` per shooting interval
    /// and the ellipsoid curvature; band and entry-time rows contribute none.
    fn lagrangian_hessian(&self, z: &DVector<f64>, eq_mult: &DVector<f64>, ineq_mult: &DVector<f64>) -> Option<DMatrix<f64>> {
        let lay = &self.layout;
        let mut h = self.hessian();
        for k in 0..lay.horizon {
            let lam = eq_mult.rows(k * lay.n, lay.n);
            if lam.amax() == 0.0 {
                continue;
            }
            let mut idx: Vec<usize> = lay.x(k).chain(lay.u(k)).collect();
            idx.extend(self.time_var(k));
            let p = idx.len();
            let (nx, nu) = (lay.n, lay.m);
            let eval = |v: &DVector<f64>| {
                let x = v.rows(0, nx).into_owned();
                let u = v.rows(nx, nu).into_owned();
                let t = if p > nx + nu { v[nx + nu] } else { 0.0 };
                -lam.dot(&self.shoot(k, &x, &u, t))
            };
            let v0 = DVector::from_fn(p, |i, _| z[idx[i]]);
            let steps: Vec<f64> = v0.iter().map(|v| 1e-4 * (1.0 + v.abs())).collect();
            for i in 0..p {
                for j in i..p {
                    let at = |si: f64, sj: f64| {
                        let mut v = v0.clone();
                        v[i] += si * steps[i];
                        v[j] += sj * steps[j];
                        eval(&v)
                    };
                    let hij = (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * steps[i] * steps[j]);
                    h[(idx[i], idx[j])] += hij;
                    if i != j {
                        h[(idx[j], idx[i])] += hij;
                    }
                }
            }
        }
        for (row, kind) in self.ineq.iter().enumerate() {
            if let (IneqKind::TerminalEllipsoid, TerminalSet::Ellipsoid { p, alpha, .. }) = (kind, &self.setup.terminal) {
                let r = lay.x(lay.horizon);
                let block = (p + p.transpose()) * (ineq_mult[row] / alpha);
                let mut view = h.view_mut((r.start, r.start), (lay.n, lay.n));
                view += block;
            }
        }
        Some(h)
    }

    fn ineq_constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        let freqs = if self.channels.is_empty() || self.class == ProblemClass::Hard { Vec::new() } else { self.predict(z, None) };
        self.ineq_all(z, &freqs)
    }

    fn eq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        self.eq_jac(z)
    }

    fn ineq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let freqs = self.predict(z, None);
        self.ineq_jac(z, &freqs)
    }

    fn linearize(&self, z: &DVector<f64>) -> Linearization {
        let freqs = if self.channels.is_empty() || self.class == ProblemClass::Hard { Vec::new() } else { self.predict(z, None) };
        Linearization {
            cost: self.cost(z),
            gradient: self.cost_gradient(z),
            eq: self.eq_all(z),
            eq_jacobian: self.eq_jac(z),
            ineq: self.ineq_all(z, &freqs),
            ineq_jacobian: self.ineq_jac(z, &freqs),
        }
    }
}

/// Hard time-optimal problem: `min T` with scaled dynamics and `x_N ∈ X_f`.
pub fn transcribe_hard_time_optimal(setup: &OcpSetup) -> Result<Ocp, OcpError> {
    check_common(setup, 2)?;
    Ocp::build(ProblemClass::Hard, setup)
}

/// Soft-constrained time-optimal problem with per-interval times.
pub fn transcribe_soft(setup: &OcpSetup) -> Result<Ocp, OcpError> {
    check_common(setup, MIN_SAMPLES)?;
    let (n, m) = (setup.model.state_dim(), setup.model.input_dim());
    setup.weights.validate(n, m, setup.bands.len(), false)?;
    if setup.closed_loop && !(setup.ts > 0.0) {
        return Err(OcpError::InvalidArgument("closed loop needs T_s > 0".into()));
    }
    Ocp::build(ProblemClass::Soft, setup)
}

/// Quasi time-optimal problem: quadratic tracking, `F·T` and discrete dynamics at `T_s`.
pub fn transcribe_quasi(setup: &OcpSetup) -> Result<Ocp, OcpError> {
    check_common(setup, MIN_SAMPLES)?;
    let (n, m) = (setup.model.state_dim(), setup.model.input_dim());
    setup.weights.validate(n, m, setup.bands.len(), true)?;
    if !(setup.ts > 0.0) {
        return Err(OcpError::InvalidArgument("quasi problem needs T_s > 0".into()));
    }
    Ocp::build(ProblemClass::Quasi, setup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlp::{finite_diff_gradient, solve_sqp, SqpStatus};

    fn di_setup(horizon: usize, u_max: f64) -> OcpSetup {
        let model = PlantModel::double_integrator();
        let mut s = OcpSetup::new(model, DVector::from_vec(vec![-1.0, 0.0]), TerminalSet::Point(DVector::zeros(2)), horizon, 0.05);
        s.constraints = PolytopicConstraint::from_boxes(&[f64::NEG_INFINITY; 2], &[f64::INFINITY; 2], &[-u_max], &[u_max]);
        s
    }

    fn two_dof_setup(class: ProblemClass) -> OcpSetup {
        let model = PlantModel::two_dof(1000.0, 1000.0, 1000.0, 1.0, 1.0);
        let mut s = OcpSetup::new(model, DVector::from_vec(vec![1.0, -1.0, 0.0, 0.0]), TerminalSet::Point(DVector::zeros(4)), 17, 0.02);
        s.constraints = PolytopicConstraint::from_boxes(
            &[-1.0, -1.0, f64::NEG_INFINITY, f64::NEG_INFINITY],
            &[1.0, 1.0, f64::INFINITY, f64::INFINITY],
            &[-200.0; 2],
            &[200.0; 2],
        );
        s.bands = vec![FrequencyBand::FixedLower { hz: 5.033 }, FrequencyBand::FixedLower { hz: 8.717 }];
        let mut w = OcpWeights::zeros(4, 2, 2);
        w.s = DMatrix::identity(2, 2) * 2e7;
        w.p_slack = DMatrix::identity(2, 2) * 2e7;
        if class == ProblemClass::Quasi {
            w.q = DMatrix::from_diagonal(&DVector::from_vec(vec![2000.0, 2000.0, 10.0, 10.0]));
            w.r = DMatrix::identity(2, 2) * 1e-3;
            w.f_time = 10.0;
        }
        s.weights = w;
        s
    }

    #[test]
    fn decision_dim_examples() {
        assert_eq!(decision_dim(2, 2, 1, 1, TimeMode::PerInterval), 13);
        assert_eq!(decision_dim(5, 3, 2, 0, TimeMode::Scalar), 6 * 3 + 5 * 2 + 1);
        assert_eq!(decision_dim(17, 4, 2, 2, TimeMode::PerInterval), 159);
        let lay = DecisionLayout::new(17, 4, 2, 2, TimeMode::PerInterval);
        assert_eq!(lay.dim(), 159);
        assert_eq!(lay.states.end, lay.inputs.start);
        assert_eq!(lay.inputs.end, lay.slacks.start);
        assert_eq!(lay.slacks.end, lay.times.start);
    }

    #[test]
    fn hard_double_integrator_is_bang_bang() {
        let ocp = transcribe_hard_time_optimal(&di_setup(40, 1.0)).unwrap();
        let z0 = ocp.initial_guess(&[DVector::from_element(1, 0.0)], 1.0);
        let sol = solve_sqp(&ocp, &z0, &ocp.sqp_options());
        assert_eq!(sol.status, SqpStatus::Converged, "{:?}", sol.kkt_residual);
        let t = ocp.transition_time(&sol.z);
        assert!((t - 2.0).abs() < 0.04, "T = {t}");
        let saturated = (0..40).filter(|&k| ocp.layout.input(&sol.z, k)[0].abs() >= 0.95).count();
        assert!(saturated as f64 >= 0.9 * 40.0, "{saturated}");
    }

    #[test]
    fn halving_input_bound_scales_time() {
        let solve = |u_max: f64| {
            let ocp = transcribe_hard_time_optimal(&di_setup(20, u_max)).unwrap();
            let z0 = ocp.initial_guess(&[DVector::zeros(1)], 1.5);
            ocp.transition_time(&solve_sqp(&ocp, &z0, &ocp.sqp_options()).z)
        };
        let (a, b) = (solve(1.0), solve(0.5));
        assert!((b / a - 2f64.sqrt()).abs() < 0.02 * 2f64.sqrt(), "{a} {b}");
    }

    #[test]
    fn already_at_target_gives_minimal_time() {
        let mut s = di_setup(10, 1.0);
        s.x0 = DVector::zeros(2);
        let ocp = transcribe_hard_time_optimal(&s).unwrap();
        let sol = solve_sqp(&ocp, &ocp.initial_guess(&[DVector::zeros(1)], 1.0), &ocp.sqp_options());
        assert!((ocp.transition_time(&sol.z) - T_MIN).abs() < 1e-6);
        assert!((0..10).all(|k| ocp.layout.input(&sol.z, k)[0].abs() < 1e-3));
    }

    #[test]
    fn infeasible_initial_state_is_flagged() {
        let mut s = two_dof_setup(ProblemClass::Soft);
        s.x0[0] = 1.5;
        assert!(matches!(transcribe_soft(&s), Err(OcpError::InfeasibleInitialState { .. })));
        let mut s = two_dof_setup(ProblemClass::Soft);
        s.horizon = 5;
        assert_eq!(transcribe_soft(&s).unwrap_err(), OcpError::HorizonTooShort { min: 8, got: 5 });
        let mut s = two_dof_setup(ProblemClass::Soft);
        s.weights.s = DMatrix::identity(3, 3);
        assert!(matches!(transcribe_soft(&s), Err(OcpError::DimensionMismatch { .. })));
    }

    #[test]
    fn matching_residual_vanishes_on_forward_simulation() {
        for class in [ProblemClass::Soft, ProblemClass::Quasi] {
            let s = two_dof_setup(class);
            let ocp = if class == ProblemClass::Soft { transcribe_soft(&s) } else { transcribe_quasi(&s) }.unwrap();
            let inputs: Vec<_> = (0..17).map(|k| DVector::from_element(2, 50.0 * (k as f64).sin())).collect();
            let z = ocp.initial_guess(&inputs, 0.4);
            let eq = ocp.eq_constraints(&z);
            assert!(eq.amax() < 1e-12, "{class:?}: {}", eq.amax());
            let mut bad = z.clone();
            bad[ocp.layout.x(5).start] += 0.1;
            assert!(ocp.eq_constraints(&bad).amax() > 0.05);
        }
    }

    #[test]
    fn required_slack_matches_band_arithmetic() {
        // two_dof free vibration in its 5.0 Hz window: slack ≥ 5.033 − E
        let s = two_dof_setup(ProblemClass::Quasi);
        let ocp = transcribe_quasi(&s).unwrap();
        let mut z = DVector::zeros(ocp.layout.dim());
        for k in 0..=17 {
            let t = k as f64 * 0.02;
            let v = (2.0 * std::f64::consts::PI * 5.0 * t).sin();
            z[ocp.layout.x(k).start] = v;
            z[ocp.layout.x(k).start + 1] = v;
        }
        ocp.fill_slacks(&mut z);
        let freqs = ocp.predicted_frequencies(&z);
        assert!((freqs[0] - 5.0).abs() < 1e-6);
        let slack = ocp.layout.slack(&z, 3)[0];
        assert!(slack >= 0.033 - 1e-6, "{slack}");
        let viol = ocp.ineq_constraints(&z);
        assert!(viol.iter().all(|&v| v <= 1e-12));
    }

    #[test]
    fn unreachable_band_leaves_slacks_zero() {
        let mut s = two_dof_setup(ProblemClass::Soft);
        // band [−1000, 1000] Hz contains every representable frequency
        let dom = (ParamPoint::new(0.0, 0.0), ParamPoint::new(1.0, 1.0));
        s.bands = vec![FrequencyBand::Surface { poly: crate::freqband::PolySurface::constant(0.0, dom), xi: 1000.0 }];
        s.weights.s = DMatrix::identity(1, 1);
        s.weights.p_slack = DMatrix::identity(1, 1);
        s.horizon = 10;
        let ocp = transcribe_soft(&s).unwrap();
        let z0 = ocp.initial_guess(&[DVector::zeros(2)], 0.5);
        let sol = solve_sqp(&ocp, &z0, &ocp.sqp_options());
        assert!((0..=10).all(|k| ocp.layout.slack(&sol.z, k)[0].abs() < 1e-9));
    }

    #[test]
    fn soft_without_bands_matches_hard() {
        let hard = transcribe_hard_time_optimal(&di_setup(40, 1.0)).unwrap();
        let hsol = solve_sqp(&hard, &hard.initial_guess(&[DVector::zeros(1)], 1.0), &hard.sqp_options());
        let soft = transcribe_soft(&di_setup(40, 1.0)).unwrap();
        let ssol = solve_sqp(&soft, &soft.initial_guess(&[DVector::zeros(1)], 1.0), &soft.sqp_options());
        let (th, ts) = (hard.transition_time(&hsol.z), soft.transition_time(&ssol.z));
        assert!((th - ts).abs() < 0.01 * th, "{th} vs {ts}");
    }

    #[test]
    fn cost_gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for class in [ProblemClass::Soft, ProblemClass::Quasi] {
            let mut s = two_dof_setup(class);
            s.weights.x_s = DVector::from_vec(vec![0.1, -0.2, 0.0, 0.3]);
            s.weights.u_s = DVector::from_element(2, 2.0);
            s.weights.x_f = DVector::from_vec(vec![0.05, 0.0, 0.1, 0.0]);
            let ocp = if class == ProblemClass::Soft { transcribe_soft(&s) } else { transcribe_quasi(&s) }.unwrap();
            for _ in 0..10 {
                let inputs: Vec<_> = (0..17).map(|_| DVector::from_element(2, rng.gen_range(-200.0..200.0))).collect();
                let mut z = ocp.initial_guess(&inputs, rng.gen_range(0.1..1.0));
                for i in ocp.layout.slacks.clone() {
                    z[i] += rng.gen_range(0.0..0.5);
                }
                let g = ocp.cost_gradient(&z);
                let fd = finite_diff_gradient(&|v: &DVector<f64>| ocp.cost(v), &z, 1e-6).unwrap();
                let rel = (&g - &fd).amax() / g.amax().max(1.0);
                assert!(rel < 1e-5, "{class:?}: {rel}");
            }
        }
    }

    #[test]
    fn terminal_set_membership() {
        let e = TerminalSet::Ellipsoid { p: DMatrix::identity(2, 2), alpha: 4.0, center: DVector::zeros(2) };
        assert!(e.contains(&DVector::from_vec(vec![1.0, 1.0])));
        assert!(!e.contains(&DVector::from_vec(vec![2.0, 1.0])));
        let (g, f) = e.outer_polytope();
        let poly = TerminalSet::Polytope { g, f };
        assert!(poly.contains(&DVector::from_vec(vec![1.9, 1.9])));
        assert!(!poly.contains(&DVector::from_vec(vec![2.1, 0.0])));
        assert!(TerminalSet::Point(DVector::zeros(2)).contains(&DVector::from_element(2, 1e-4)));
    }

    #[test]
    fn quasi_at_target_is_trivial() {
        let mut s = two_dof_setup(ProblemClass::Quasi);
        s.x0 = DVector::zeros(4);
        s.bands.clear();
        s.weights.s = DMatrix::zeros(0, 0);
        s.weights.p_slack = DMatrix::zeros(0, 0);
        let ocp = transcribe_quasi(&s).unwrap();
        let z0 = ocp.initial_guess(&[DVector::zeros(2)], 0.0);
        let sol = solve_sqp(&ocp, &z0, &ocp.sqp_options());
        assert!(sol.cost.abs() < 1e-9, "{}", sol.cost);
        assert!((0..17).all(|k| ocp.layout.input(&sol.z, k)[0].abs() < 1e-6));
    }

    #[test]
    fn quasi_terminal_error_shrinks_with_q() {
        let mut errors = Vec::new();
        for scale in [1.0, 10.0, 100.0] {
            let mut s = di_setup(10, 1.0);
            s.ts = 0.1;
            s.terminal = TerminalSet::Ellipsoid { p: DMatrix::identity(2, 2), alpha: 1e-4, center: DVector::zeros(2) };
            let mut w = OcpWeights::zeros(2, 1, 0);
            w.q = DMatrix::from_diagonal(&DVector::from_vec(vec![scale, 0.1]));
            w.r = DMatrix::identity(1, 1);
            w.f_time = 1.0;
            s.weights = w;
            let ocp = transcribe_quasi(&s).unwrap();
            let sol = solve_sqp(&ocp, &ocp.initial_guess(&[DVector::zeros(1)], 0.0), &ocp.sqp_options());
            assert_eq!(sol.status, SqpStatus::Converged);
            errors.push(ocp.layout.state(&sol.z, 10)[0].abs());
        }
        assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
    }

    #[test]
    fn soft_two_dof_reaches_target() {
        let ocp = transcribe_soft(&two_dof_setup(ProblemClass::Soft)).unwrap();
        let sol = solve_sqp(&ocp, &ocp.initial_guess(&[DVector::zeros(2)], 1.0), &ocp.sqp_options());
        assert_eq!(sol.status, SqpStatus::Converged);
        assert!(ocp.layout.state(&sol.z, 17).norm() < 1e-2);
        assert!(sol.z.rows_range(ocp.layout.slacks.clone()).iter().all(|&v| v >= -1e-9));
        let t = ocp.transition_time(&sol.z);
        assert!((0..17).all(|k| (ocp.interval_duration(&sol.z, k) - t / 17.0).abs() < 1e-6));
    }
}
