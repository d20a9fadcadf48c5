//! Continuous-time plant models, fixed-step Runge-Kutta integration,
//! time-scaled dynamics and discrete-time linearization.
//!
//! A [`PlantModel`] is an immutable description of `ẋ = f(x, u, ϱ)`. Three
//! models are built in:
//!
//! * [`PlantModel::two_dof`]: two masses coupled by three springs,
//! * [`PlantModel::crane_modal`]: a stacker-crane surrogate with a rigid
//!   carriage and lift plus two assumed-mode beam oscillators,
//! * [`PlantModel::double_integrator`]: `ẍ = u`, used as an analytic oracle.
//!
//! Arbitrary models can be wrapped with [`PlantModel::custom`].

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use thiserror::Error;

pub type StateVector = DVector<f64>;
pub type ControlVector = DVector<f64>;

/// Default number of RK4 sub-steps per shooting interval.
pub const DEFAULT_SUBSTEPS: usize = 4;

/// Gravitational acceleration used by the crane surrogate.
pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("integration produced a non-finite state at step {step}")]
    Diverged { step: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
}

/// Parametric variation `ϱ = (m_l, y_l)`: lift mass and lift position.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ParamPoint {
    /// Lift mass in kg.
    pub mass: f64,
    /// Lift position in m.
    pub position: f64,
}

impl ParamPoint {
    pub fn new(mass: f64, position: f64) -> Self {
        Self { mass, position }
    }

    /// Clamp into the box `[lo, hi]`, reporting whether clamping was needed.
    pub fn clamp_to(&self, lo: &ParamPoint, hi: &ParamPoint) -> (ParamPoint, bool) {
        let clamped = ParamPoint { mass: self.mass.clamp(lo.mass, hi.mass), position: self.position.clamp(lo.position, hi.position) };
        (clamped, clamped != *self)
    }
}

type DynamicsFn = dyn Fn(&StateVector, &ControlVector, &ParamPoint) -> StateVector + Send + Sync;

/// Continuous-time plant `ẋ = f(x, u, ϱ)`.
#[derive(Clone)]
pub struct PlantModel {
    name: String,
    n: usize,
    m: usize,
    params: BTreeMap<String, f64>,
    dynamics: Arc<DynamicsFn>,
    modal_indices: Vec<usize>,
    equilibrium_at_origin: bool,
    param_domain: (ParamPoint, ParamPoint),
    nominal_param: ParamPoint,
    /// Index of the state that carries the lift position, if any.
    lift_state: Option<usize>,
}

impl fmt::Debug for PlantModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PlantModel")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("params", &self.params)
            .field("modal_indices", &self.modal_indices)
            .finish()
    }
}

impl PlantModel {
    /// Wrap an arbitrary right-hand side.
    pub fn custom<F>(name: impl Into<String>, n: usize, m: usize, dynamics: F) -> Self
    where
        F: Fn(&StateVector, &ControlVector, &ParamPoint) -> StateVector + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            n,
            m,
            params: BTreeMap::new(),
            dynamics: Arc::new(dynamics),
            modal_indices: Vec::new(),
            equilibrium_at_origin: false,
            param_domain: (ParamPoint::default(), ParamPoint::default()),
            nominal_param: ParamPoint::default(),
            lift_state: None,
        }
    }

    pub fn with_modal_indices(mut self, indices: Vec<usize>) -> Self {
        assert!(indices.iter().all(|&i| i < self.n), "modal index out of range");
        self.modal_indices = indices;
        self
    }

    pub fn with_equilibrium_at_origin(mut self, yes: bool) -> Self {
        self.equilibrium_at_origin = yes;
        self
    }

    pub fn with_params(mut self, params: BTreeMap<String, f64>) -> Self {
        self.params = params;
        self
    }

    /// Build a built-in model by name, overriding default parameters.
    pub fn by_name(name: &str, overrides: &BTreeMap<String, f64>) -> Result<Self, ModelError> {
        let get = |key: &str, default: f64| overrides.get(key).copied().unwrap_or(default);
        let known: &[&str] = match name {
            "two_dof" => &["k1", "k2", "k3", "m1", "m2"],
            "crane_modal" => &["m_c", "m_t", "m_l", "L", "A", "rho", "EI"],
            "double_integrator" => &[],
            other => return Err(ModelError::UnknownModel(other.to_string())),
        };
        if let Some(bad) = overrides.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(ModelError::InvalidArgument(format!("model `{name}` has no parameter `{bad}`")));
        }
        Ok(match name {
            "two_dof" => Self::two_dof(get("k1", 1000.0), get("k2", 1000.0), get("k3", 1000.0), get("m1", 1.0), get("m2", 1.0)),
            "crane_modal" => {
                let d = CraneParams::default();
                Self::crane_modal(CraneParams {
                    m_c: get("m_c", d.m_c),
                    m_t: get("m_t", d.m_t),
                    m_l: get("m_l", d.m_l),
                    length: get("L", d.length),
                    area: get("A", d.area),
                    density: get("rho", d.density),
                    ei: get("EI", d.ei),
                })
            }
            _ => Self::double_integrator(),
        })
    }

    /// `M q̈ + K q = F` with `M = diag(m1, m2)` and a three-spring stiffness
    /// matrix; state `(x1, x2, ẋ1, ẋ2)`, input `(F1, F2)`.
    pub fn two_dof(k1: f64, k2: f64, k3: f64, m1: f64, m2: f64) -> Self {
        let params: BTreeMap<String, f64> =
            [("k1", k1), ("k2", k2), ("k3", k3), ("m1", m1), ("m2", m2)].into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        Self::custom("two_dof", 4, 2, move |x, u, _| {
            let f1 = u[0] - (k1 + k2) * x[0] + k2 * x[1];
            let f2 = u[1] + k2 * x[0] - (k2 + k3) * x[1];
            DVector::from_vec(vec![x[2], x[3], f1 / m1, f2 / m2])
        })
        .with_params(params)
        .with_modal_indices(vec![0, 1])
        .with_equilibrium_at_origin(true)
    }

    /// `ẍ = u`; state `(position, velocity)`.
    pub fn double_integrator() -> Self {
        Self::custom("double_integrator", 2, 1, |x, u, _| DVector::from_vec(vec![x[1], u[0]]))
            .with_modal_indices(vec![0])
            .with_equilibrium_at_origin(true)
    }

    /// Stacker-crane surrogate with `q = (x_c, y_l, a_1, a_2)`; state
    /// `(q, q̇)`, input `(F1, F2)` acting on carriage and lift.
    pub fn crane_modal(p: CraneParams) -> Self {
        let beam = BeamModes::new(&p);
        let params: BTreeMap<String, f64> =
            [("m_c", p.m_c), ("m_t", p.m_t), ("m_l", p.m_l), ("L", p.length), ("A", p.area), ("rho", p.density), ("EI", p.ei)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect();
        let nominal = ParamPoint::new(p.m_l, 0.0);
        let domain = (ParamPoint::new(0.5 * p.m_l, 0.0), ParamPoint::new(2.0 * p.m_l, p.length));
        let mut model =
            Self::custom("crane_modal", 8, 2, move |x, u, rho| beam.rhs(x, u, rho.mass)).with_params(params).with_modal_indices(vec![2, 3]);
        model.param_domain = domain;
        model.nominal_param = nominal;
        model.lift_state = Some(1);
        model
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    pub fn param(&self, key: &str) -> Option<f64> {
        self.params.get(key).copied()
    }

    pub fn modal_indices(&self) -> &[usize] {
        &self.modal_indices
    }

    pub fn has_equilibrium_at_origin(&self) -> bool {
        self.equilibrium_at_origin
    }

    pub fn param_domain(&self) -> (ParamPoint, ParamPoint) {
        self.param_domain
    }

    pub fn nominal_param(&self) -> ParamPoint {
        self.nominal_param
    }

    /// Parameter point seen by the model at state `x`: the lift position is
    /// read from the state when the model has one.
    pub fn param_at(&self, x: &StateVector) -> ParamPoint {
        match self.lift_state {
            Some(i) => ParamPoint::new(self.nominal_param.mass, x[i]),
            None => self.nominal_param,
        }
    }

    fn check_dims(&self, x: &StateVector, u: &ControlVector) -> Result<(), ModelError> {
        if x.len() != self.n {
            return Err(ModelError::DimensionMismatch { what: "state", expected: self.n, got: x.len() });
        }
        if u.len() != self.m {
            return Err(ModelError::DimensionMismatch { what: "input", expected: self.m, got: u.len() });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite("state"));
        }
        if !u.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite("input"));
        }
        Ok(())
    }

    /// Unchecked right-hand side; callers guarantee dimensions.
    #[inline]
    pub fn rhs(&self, x: &StateVector, u: &ControlVector, rho: &ParamPoint) -> StateVector {
        (self.dynamics)(x, u, rho)
    }

    /// Evaluate `f(x, u, ϱ)`.
    pub fn eval_dynamics(&self, x: &StateVector, u: &ControlVector, rho: &ParamPoint) -> Result<StateVector, ModelError> {
        self.check_dims(x, u)?;
        let dx = self.rhs(x, u, rho);
        if dx.len() != self.n {
            return Err(ModelError::DimensionMismatch { what: "dynamics output", expected: self.n, got: dx.len() });
        }
        if !dx.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite("dynamics output"));
        }
        Ok(dx)
    }

    /// Derivative with respect to pseudo-time `τ` under `t = τ T`: `f(x, u, ϱ) T`.
    pub fn eval_scaled_dynamics(
        &self,
        x: &StateVector,
        u: &ControlVector,
        rho: &ParamPoint,
        duration: f64,
    ) -> Result<StateVector, ModelError> {
        if !(duration >= 0.0) {
            return Err(ModelError::InvalidArgument(format!("time scale must be >= 0, got {duration}")));
        }
        Ok(self.eval_dynamics(x, u, rho)? * duration)
    }

    /// One RK4 shooting interval of length `dt` split into `substeps`.
    pub fn rk4_step(&self, x: &StateVector, u: &ControlVector, rho: &ParamPoint, dt: f64, substeps: usize) -> StateVector {
        let h = dt / substeps as f64;
        let mut x = x.clone();
        for _ in 0..substeps {
            let k1 = self.rhs(&x, u, rho);
            let k2 = self.rhs(&(&x + &k1 * (0.5 * h)), u, rho);
            let k3 = self.rhs(&(&x + &k2 * (0.5 * h)), u, rho);
            let k4 = self.rhs(&(&x + &k3 * h), u, rho);
            x += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        }
        x
    }

    /// RK4 on the scaled dynamics `dx/dτ = T f(x, u, ϱ)` over a pseudo-time
    /// interval `dtau`.
    pub fn rk4_step_scaled(
        &self,
        x: &StateVector,
        u: &ControlVector,
        rho: &ParamPoint,
        time_scale: f64,
        dtau: f64,
        substeps: usize,
    ) -> StateVector {
        let h = dtau / substeps as f64;
        let fs = |x: &StateVector| self.rhs(x, u, rho) * time_scale;
        let mut x = x.clone();
        for _ in 0..substeps {
            let k1 = fs(&x);
            let k2 = fs(&(&x + &k1 * (0.5 * h)));
            let k3 = fs(&(&x + &k2 * (0.5 * h)));
            let k4 = fs(&(&x + &k3 * h));
            x += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        }
        x
    }

    /// Integrate a piecewise-constant input sequence with classical RK4.
    pub fn integrate_rk4(
        &self,
        x0: &StateVector,
        u_seq: &[ControlVector],
        rho_seq: &[ParamPoint],
        dt: f64,
        substeps: usize,
    ) -> Result<Trajectory, ModelError> {
        if !(dt > 0.0) {
            return Err(ModelError::InvalidArgument(format!("dt must be > 0, got {dt}")));
        }
        if substeps == 0 {
            return Err(ModelError::InvalidArgument("substeps must be positive".into()));
        }
        if u_seq.is_empty() {
            return Err(ModelError::InvalidArgument("input sequence is empty".into()));
        }
        if rho_seq.len() != u_seq.len() {
            return Err(ModelError::DimensionMismatch { what: "parameter schedule", expected: u_seq.len(), got: rho_seq.len() });
        }
        let mut states = Vec::with_capacity(u_seq.len() + 1);
        let mut times = Vec::with_capacity(u_seq.len() + 1);
        self.check_dims(x0, &u_seq[0])?;
        states.push(x0.clone());
        times.push(0.0);
        for (k, (u, rho)) in u_seq.iter().zip(rho_seq).enumerate() {
            self.check_dims(states.last().unwrap(), u)?;
            let next = self.rk4_step(states.last().unwrap(), u, rho, dt, substeps);
            if !next.iter().all(|v| v.is_finite()) {
                return Err(ModelError::Diverged { step: k });
            }
            states.push(next);
            times.push((k + 1) as f64 * dt);
        }
        Ok(Trajectory { times, states, inputs: u_seq.to_vec() })
    }

    /// Central finite-difference Jacobians `(A, B)` of the one-step RK4 map.
    pub fn linearize_discrete(
        &self,
        x_ref: &StateVector,
        u_ref: &ControlVector,
        rho: &ParamPoint,
        dt: f64,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
        if !(dt > 0.0) {
            return Err(ModelError::InvalidArgument(format!("dt must be > 0, got {dt}")));
        }
        self.check_dims(x_ref, u_ref)?;
        let (n, m) = (self.n, self.m);
        let step = |x: &StateVector, u: &ControlVector| self.rk4_step(x, u, rho, dt, DEFAULT_SUBSTEPS);
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            let eps = 1e-6 * (1.0 + x_ref[i].abs());
            let mut xp = x_ref.clone();
            let mut xm = x_ref.clone();
            xp[i] += eps;
            xm[i] -= eps;
            let col = (step(&xp, u_ref) - step(&xm, u_ref)) / (2.0 * eps);
            a.set_column(i, &col);
        }
        let mut b = DMatrix::zeros(n, m);
        for j in 0..m {
            let eps = 1e-6 * (1.0 + u_ref[j].abs());
            let mut up = u_ref.clone();
            let mut um = u_ref.clone();
            up[j] += eps;
            um[j] -= eps;
            let col = (step(x_ref, &up) - step(x_ref, &um)) / (2.0 * eps);
            b.set_column(j, &col);
        }
        if !a.iter().chain(b.iter()).all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite("Jacobian"));
        }
        Ok((a, b))
    }

    /// Undamped natural frequencies in Hz of the continuous linearization at
    /// `(x_eq, u_eq)`: positive imaginary parts of the eigenvalues over 2π,
    /// ascending.
    pub fn natural_frequencies(&self, x_eq: &StateVector, u_eq: &ControlVector, rho: &ParamPoint) -> Result<Vec<f64>, ModelError> {
        self.check_dims(x_eq, u_eq)?;
        let n = self.n;
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            let eps = 1e-6 * (1.0 + x_eq[i].abs());
            let (mut xp, mut xm) = (x_eq.clone(), x_eq.clone());
            xp[i] += eps;
            xm[i] -= eps;
            let col = (self.eval_dynamics(&xp, u_eq, rho)? - self.eval_dynamics(&xm, u_eq, rho)?) / (2.0 * eps);
            a.set_column(i, &col);
        }
        let mut freqs: Vec<f64> =
            a.complex_eigenvalues().iter().filter(|ev| ev.im > 1e-9).map(|ev| ev.im / (2.0 * std::f64::consts::PI)).collect();
        freqs.sort_by(f64::total_cmp);
        Ok(freqs)
    }
}

/// Piecewise-constant-input trajectory sampled at shooting nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
    pub inputs: Vec<ControlVector>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Samples of state component `index`.
    pub fn channel(&self, index: usize) -> Vec<f64> {
        self.states.iter().map(|x| x[index]).collect()
    }

    /// Uniform sample spacing, or `None` when the grid is not uniform to 1e-9
    /// relative.
    pub fn uniform_dt(&self) -> Option<f64> {
        if self.times.len() < 2 {
            return None;
        }
        let dt = (self.times[self.times.len() - 1] - self.times[0]) / (self.times.len() - 1) as f64;
        let uniform = self.times.windows(2).all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-9 * dt.abs().max(1e-300));
        (uniform && dt > 0.0).then_some(dt)
    }
}

/// Physical parameters of the crane surrogate (SI units).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CraneParams {
    pub m_c: f64,
    pub m_t: f64,
    pub m_l: f64,
    pub length: f64,
    pub area: f64,
    pub density: f64,
    pub ei: f64,
}

impl Default for CraneParams {
    fn default() -> Self {
        Self { m_c: 2.888, m_t: 0.5, m_l: 1.0, length: 2.0, area: 3.2e-4, density: 2700.0, ei: 119.4 }
    }
}

/// Roots `βL` of `1 + cos βL cosh βL = 0` for the first two clamped-free modes.
const CLAMPED_FREE_BETA_L: [f64; 2] = [1.875_104_068_711_961, 4.694_091_132_974_175];

/// Clamped-free assumed modes normalised to unit tip deflection, with the
/// modal integrals the Lagrangian needs.
#[derive(Debug, Clone)]
pub struct BeamModes {
    p: CraneParams,
    beta: [f64; 2],
    sigma: [f64; 2],
    tip_raw: [f64; 2],
    int_psi: [f64; 2],
    int_psi_psi: [[f64; 2]; 2],
    stiffness: [[f64; 2]; 2],
}

impl BeamModes {
    pub fn new(p: &CraneParams) -> Self {
        let l = p.length;
        let beta = CLAMPED_FREE_BETA_L.map(|bl| bl / l);
        let sigma = CLAMPED_FREE_BETA_L.map(|bl| (bl.cosh() + bl.cos()) / (bl.sinh() + bl.sin()));
        let mut modes =
            Self { p: *p, beta, sigma, tip_raw: [1.0; 2], int_psi: [0.0; 2], int_psi_psi: [[0.0; 2]; 2], stiffness: [[0.0; 2]; 2] };
        modes.tip_raw = [0, 1].map(|i| modes.raw(i, l).0);

        // composite Simpson, 2000 panels
        let panels = 2000;
        let h = l / panels as f64;
        for k in 0..=panels {
            let y = k as f64 * h;
            let w = if k == 0 || k == panels {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            } * h
                / 3.0;
            let psi = [modes.psi(0, y), modes.psi(1, y)];
            let dd = [modes.psi_dd(0, y), modes.psi_dd(1, y)];
            for i in 0..2 {
                modes.int_psi[i] += w * psi[i];
                for j in 0..2 {
                    modes.int_psi_psi[i][j] += w * psi[i] * psi[j];
                    modes.stiffness[i][j] += w * p.ei * dd[i] * dd[j];
                }
            }
        }
        modes
    }

    /// Raw (unnormalised) shape, slope and curvature.
    fn raw(&self, i: usize, y: f64) -> (f64, f64, f64) {
        let (b, s) = (self.beta[i], self.sigma[i]);
        let by = b * y;
        let (ch, sh, c, sn) = (by.cosh(), by.sinh(), by.cos(), by.sin());
        let v = ch - c - s * (sh - sn);
        let d = b * (sh + sn - s * (ch - c));
        let dd = b * b * (ch + c - s * (sh + sn));
        (v, d, dd)
    }

    pub fn psi(&self, i: usize, y: f64) -> f64 {
        self.raw(i, y).0 / self.tip_raw[i]
    }

    pub fn psi_d(&self, i: usize, y: f64) -> f64 {
        self.raw(i, y).1 / self.tip_raw[i]
    }

    pub fn psi_dd(&self, i: usize, y: f64) -> f64 {
        self.raw(i, y).2 / self.tip_raw[i]
    }

    /// Modal stiffness block `EI ∫ ψ_i'' ψ_j'' dy`.
    pub fn stiffness(&self) -> [[f64; 2]; 2] {
        self.stiffness
    }

    /// Mass matrix `M(q)` for lift mass `m_l` at height `y_l`.
    pub fn mass_matrix(&self, m_l: f64, y_l: f64) -> Matrix4<f64> {
        let p = &self.p;
        let rho_a = p.density * p.area;
        let w = [self.psi(0, y_l), self.psi(1, y_l)];
        let mut mm = Matrix4::zeros();
        mm[(0, 0)] = p.m_c + rho_a * p.length + p.m_t + m_l;
        mm[(1, 1)] = m_l;
        for i in 0..2 {
            let xa = rho_a * self.int_psi[i] + p.m_t + m_l * w[i];
            mm[(0, 2 + i)] = xa;
            mm[(2 + i, 0)] = xa;
            for j in 0..2 {
                mm[(2 + i, 2 + j)] = rho_a * self.int_psi_psi[i][j] + p.m_t + m_l * w[i] * w[j];
            }
        }
        mm
    }

    fn rhs(&self, x: &StateVector, u: &ControlVector, m_l: f64) -> StateVector {
        let y_l = x[1];
        let (a, adot) = ([x[2], x[3]], [x[6], x[7]]);
        let (xdot, ydot) = (x[4], x[5]);
        let w = [self.psi(0, y_l), self.psi(1, y_l)];
        let wd = [self.psi_d(0, y_l), self.psi_d(1, y_l)];
        let v = xdot + w[0] * adot[0] + w[1] * adot[1];
        let s = wd[0] * adot[0] + wd[1] * adot[1];
        let k = &self.stiffness;
        let rhs = Vector4::new(
            u[0] - m_l * ydot * s,
            u[1] + m_l * v * s - m_l * GRAVITY,
            -m_l * ydot * (wd[0] * v + w[0] * s) - (k[0][0] * a[0] + k[0][1] * a[1]),
            -m_l * ydot * (wd[1] * v + w[1] * s) - (k[1][0] * a[0] + k[1][1] * a[1]),
        );
        let mm = self.mass_matrix(m_l, y_l);
        let qdd = mm.cholesky().map(|c| c.solve(&rhs)).unwrap_or_else(|| Vector4::repeat(f64::NAN));
        DVector::from_vec(vec![x[4], x[5], x[6], x[7], qdd[0], qdd[1], qdd[2], qdd[3]])
    }
}

/// Tip deflection `ω(L, t) = Σ ψ_i(L) a_i(t)`; shapes are normalised so
/// `ψ_i(L) = 1`.
pub fn crane_tip_deflection(x: &StateVector) -> f64 {
    x[2] + x[3]
}
