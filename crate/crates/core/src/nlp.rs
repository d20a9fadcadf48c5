//! Dense SQP for small nonlinear programs.
//!
//! Each major iteration linearizes the constraints, solves a convex QP with
//! either a Gauss-Newton or a structured damped-BFGS Hessian and backtracks on
//! the ℓ1 merit `f + π(‖c_eq‖₁ + ‖max(c_in, 0)‖₁)`. Inequalities use the
//! `c_in(z) ≤ 0` convention.

pub mod qp;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use qp::{solve_qp, QpError, QpProblem, QpSolution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NlpError {
    #[error("non-finite function value at coordinate {0}")]
    NonFinite(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Function values and first derivatives at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub cost: f64,
    pub gradient: DVector<f64>,
    pub eq: DVector<f64>,
    pub eq_jacobian: DMatrix<f64>,
    pub ineq: DVector<f64>,
    pub ineq_jacobian: DMatrix<f64>,
}

impl Linearization {
    fn is_finite(&self) -> bool {
        self.cost.is_finite()
            && self.gradient.iter().all(|v| v.is_finite())
            && self.eq.iter().all(|v| v.is_finite())
            && self.ineq.iter().all(|v| v.is_finite())
            && self.eq_jacobian.iter().all(|v| v.is_finite())
            && self.ineq_jacobian.iter().all(|v| v.is_finite())
    }
}

/// A smooth NLP `min f(z)` s.t. `c_eq(z) = 0`, `c_in(z) ≤ 0`, `lo ≤ z ≤ hi`.
///
/// Implementations must be side-effect free; output lengths never change
/// between calls. Derivatives default to central finite differences.
pub trait NlpProblem: Send + Sync {
    fn dim(&self) -> usize;
    fn bounds(&self) -> (DVector<f64>, DVector<f64>);
    fn cost(&self, z: &DVector<f64>) -> f64;
    fn eq_constraints(&self, z: &DVector<f64>) -> DVector<f64>;
    fn ineq_constraints(&self, z: &DVector<f64>) -> DVector<f64>;

    fn cost_gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        finite_diff_gradient_unchecked(&|v| self.cost(v), z, 1e-6)
    }

    fn eq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        finite_diff_jacobian(&|v| self.eq_constraints(v), z, 1e-6)
    }

    fn ineq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        finite_diff_jacobian(&|v| self.ineq_constraints(v), z, 1e-6)
    }

    /// Hessian of the cost when known (exact or Gauss-Newton).
    fn cost_hessian(&self, _z: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    /// Hessian of `f + λᵀc_eq + μᵀc_in` when the problem can supply it;
    /// may be indefinite.
    fn lagrangian_hessian(&self, _z: &DVector<f64>, _eq_mult: &DVector<f64>, _ineq_mult: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    /// `(f, c_eq, c_in)` in one call.
    fn evaluate(&self, z: &DVector<f64>) -> (f64, DVector<f64>, DVector<f64>) {
        (self.cost(z), self.eq_constraints(z), self.ineq_constraints(z))
    }

    fn linearize(&self, z: &DVector<f64>) -> Linearization {
        let (cost, eq, ineq) = self.evaluate(z);
        Linearization {
            cost,
            gradient: self.cost_gradient(z),
            eq,
            eq_jacobian: self.eq_jacobian(z),
            ineq,
            ineq_jacobian: self.ineq_jacobian(z),
        }
    }
}

type ScalarFn = dyn Fn(&DVector<f64>) -> f64 + Send + Sync;
type VectorFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;

/// Closure-backed problem for small hand-written NLPs.
pub struct FnNlp {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
    pub cost: Box<ScalarFn>,
    pub eq: Box<VectorFn>,
    pub ineq: Box<VectorFn>,
    pub hessian: Option<DMatrix<f64>>,
}

impl FnNlp {
    /// Unbounded, unconstrained problem in `dim` variables.
    pub fn new(dim: usize, cost: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            lo: DVector::from_element(dim, f64::NEG_INFINITY),
            hi: DVector::from_element(dim, f64::INFINITY),
            cost: Box::new(cost),
            eq: Box::new(|_| DVector::zeros(0)),
            ineq: Box::new(|_| DVector::zeros(0)),
            hessian: None,
        }
    }

    pub fn with_eq(mut self, f: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static) -> Self {
        self.eq = Box::new(f);
        self
    }

    pub fn with_ineq(mut self, f: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static) -> Self {
        self.ineq = Box::new(f);
        self
    }

    pub fn with_bounds(mut self, lo: DVector<f64>, hi: DVector<f64>) -> Self {
        self.lo = lo;
        self.hi = hi;
        self
    }

    pub fn with_hessian(mut self, h: DMatrix<f64>) -> Self {
        self.hessian = Some(h);
        self
    }
}

impl NlpProblem for FnNlp {
    fn dim(&self) -> usize {
        self.lo.len()
    }
    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        (self.lo.clone(), self.hi.clone())
    }
    fn cost(&self, z: &DVector<f64>) -> f64 {
        (self.cost)(z)
    }
    fn eq_constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        (self.eq)(z)
    }
    fn ineq_constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        (self.ineq)(z)
    }
    fn cost_hessian(&self, _z: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.hessian.clone()
    }
}

fn fd_step(eps: f64, v: f64) -> f64 {
    eps * (1.0 + v.abs())
}

fn finite_diff_gradient_unchecked(f: &dyn Fn(&DVector<f64>) -> f64, z: &DVector<f64>, eps: f64) -> DVector<f64> {
    let mut work = z.clone();
    DVector::from_fn(z.len(), |i, _| {
        let h = fd_step(eps, z[i]);
        work[i] = z[i] + h;
        let plus = f(&work);
        work[i] = z[i] - h;
        let minus = f(&work);
        work[i] = z[i];
        (plus - minus) / (2.0 * h)
    })
}

/// Central-difference gradient with per-coordinate step `eps·(1 + |z_i|)`.
pub fn finite_diff_gradient(f: &dyn Fn(&DVector<f64>) -> f64, z: &DVector<f64>, eps: f64) -> Result<DVector<f64>, NlpError> {
    if !(eps > 0.0) {
        return Err(NlpError::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    let g = finite_diff_gradient_unchecked(f, z, eps);
    match g.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(NlpError::NonFinite(i)),
        None => Ok(g),
    }
}

/// Central-difference Jacobian, one column per coordinate.
pub fn finite_diff_jacobian(f: &dyn Fn(&DVector<f64>) -> DVector<f64>, z: &DVector<f64>, eps: f64) -> DMatrix<f64> {
    let rows = f(z).len();
    let mut jac = DMatrix::zeros(rows, z.len());
    let mut work = z.clone();
    for i in 0..z.len() {
        let h = fd_step(eps, z[i]);
        work[i] = z[i] + h;
        let plus = f(&work);
        work[i] = z[i] - h;
        let minus = f(&work);
        work[i] = z[i];
        jac.set_column(i, &((plus - minus) / (2.0 * h)));
    }
    jac
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianMode {
    /// Cost Hessian plus a small diagonal shift.
    GaussNewton,
    /// Cost Hessian plus a damped BFGS model of the remaining curvature.
    DampedBfgs,
    /// Problem-supplied Lagrangian Hessian with eigenvalues lifted to
    /// `max(|λ|, δ)`; falls back to `DampedBfgs` when none is supplied.
    ExactProjected,
}

/// Symmetric part of `h` with every eigenvalue replaced by `max(|λ|, δ)`,
/// `δ = rel · max(1, max|λ|)`.
pub fn project_positive_definite(h: &DMatrix<f64>, rel: f64) -> DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new((h + h.transpose()) * 0.5);
    let top = eig.eigenvalues.amax().max(1.0);
    let lifted = eig.eigenvalues.map(|l| l.abs().max(rel * top));
    &eig.eigenvectors * DMatrix::from_diagonal(&lifted) * eig.eigenvectors.transpose()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqpOptions {
    pub max_major_iters: usize,
    pub kkt_tol: f64,
    pub qp_max_iters: usize,
    pub hessian: HessianMode,
    /// Backtracking factor in `(0, 1)`.
    pub ls_backtrack: f64,
    pub merit_penalty_init: f64,
    pub armijo: f64,
    pub min_step: f64,
    pub second_order_correction: bool,
    /// Diagonal shift for Gauss-Newton, relative to `max(1, ‖H‖∞)`.
    pub gn_regularization: f64,
    /// Feasibility tolerance for the final constraint violation.
    pub feas_tol: f64,
    /// Box trust region `|d_i| ≤ step_bound · max(1, |z_i|)` on each QP step.
    pub step_bound: f64,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            max_major_iters: 100,
            kkt_tol: 1e-6,
            qp_max_iters: 5000,
            hessian: HessianMode::DampedBfgs,
            ls_backtrack: 0.5,
            merit_penalty_init: 1.0,
            armijo: 1e-4,
            min_step: 1e-10,
            second_order_correction: true,
            gn_regularization: 1e-8,
            feas_tol: 1e-6,
            step_bound: 100.0,
        }
    }
}

impl SqpOptions {
    pub fn validate(&self) -> Result<(), NlpError> {
        let bad = |m: &str| Err(NlpError::InvalidArgument(m.to_string()));
        if !(self.kkt_tol > 0.0 && self.feas_tol > 0.0) {
            return bad("tolerances must be > 0");
        }
        if !(self.ls_backtrack > 0.0 && self.ls_backtrack < 1.0) {
            return bad("ls_backtrack must lie in (0, 1)");
        }
        if !(self.merit_penalty_init > 0.0) {
            return bad("merit_penalty_init must be > 0");
        }
        if !(self.step_bound > 0.0) {
            return bad("step_bound must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqpStatus {
    Converged,
    MaxIters,
    QpFailure,
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlpSolution {
    pub z: DVector<f64>,
    pub cost: f64,
    pub eq_multipliers: DVector<f64>,
    pub ineq_multipliers: DVector<f64>,
    pub bound_multipliers: DVector<f64>,
    pub status: SqpStatus,
    pub kkt_residual: f64,
    pub major_iters: usize,
    pub constraint_violation_inf: f64,
    /// Merit before and after every accepted step, at that step's penalty.
    pub merit_history: Vec<(f64, f64)>,
}

fn violation_l1(eq: &DVector<f64>, ineq: &DVector<f64>) -> f64 {
    eq.iter().map(|v| v.abs()).sum::<f64>() + ineq.iter().map(|v| v.max(0.0)).sum::<f64>()
}

fn violation_inf(eq: &DVector<f64>, ineq: &DVector<f64>) -> f64 {
    eq.iter().map(|v| v.abs()).chain(ineq.iter().map(|v| v.max(0.0))).fold(0.0, f64::max)
}

fn project(z: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(z.len(), |i, _| z[i].clamp(lo[i], hi[i]))
}

struct Multipliers {
    eq: DVector<f64>,
    ineq: DVector<f64>,
    bound: DVector<f64>,
}

impl Multipliers {
    fn zeros(n_eq: usize, n_in: usize, d: usize) -> Self {
        Self { eq: DVector::zeros(n_eq), ineq: DVector::zeros(n_in), bound: DVector::zeros(d) }
    }

    fn amax(&self) -> f64 {
        self.eq.amax().max(self.ineq.amax())
    }
}

fn lagrangian_gradient(lin: &Linearization, m: &Multipliers) -> DVector<f64> {
    &lin.gradient + lin.eq_jacobian.tr_mul(&m.eq) + lin.ineq_jacobian.tr_mul(&m.ineq)
}

/// Scaled KKT residual: stationarity, complementarity and feasibility.
fn kkt_residual(lin: &Linearization, m: &Multipliers) -> f64 {
    let scale = lin.gradient.amax().max(m.amax()).max(1.0);
    let stat = (lagrangian_gradient(lin, m) + &m.bound).amax() / scale;
    let compl = lin.ineq.iter().zip(m.ineq.iter()).map(|(c, mu)| (c * mu).abs()).fold(0.0, f64::max) / scale;
    stat.max(compl).max(violation_inf(&lin.eq, &lin.ineq))
}

struct QpStep {
    d: DVector<f64>,
    mult: Multipliers,
    elastic: bool,
}

/// Solve the SQP subproblem, falling back to an ℓ1-elastic QP when the
/// linearized constraints are inconsistent.
fn subproblem(
    b: &DMatrix<f64>,
    lin: &Linearization,
    dlo: &DVector<f64>,
    dhi: &DVector<f64>,
    penalty: f64,
    max_iters: usize,
) -> Result<QpStep, QpError> {
    let b_eq = -&lin.eq;
    let b_in = -&lin.ineq;
    let qp =
        QpProblem { h: b, g: &lin.gradient, a_eq: &lin.eq_jacobian, b_eq: &b_eq, a_in: &lin.ineq_jacobian, b_in: &b_in, lo: dlo, hi: dhi };
    match solve_qp(&qp, max_iters) {
        Ok(QpSolution { z, eq_multipliers, ineq_multipliers, bound_multipliers, .. }) => {
            Ok(QpStep { d: z, mult: Multipliers { eq: eq_multipliers, ineq: ineq_multipliers, bound: bound_multipliers }, elastic: false })
        }
        Err(QpError::Infeasible | QpError::InconsistentEqualities | QpError::MaxIterations(_)) => {
            elastic_subproblem(b, lin, dlo, dhi, penalty, max_iters)
        }
        Err(e) => Err(e),
    }
}

fn elastic_subproblem(
    b: &DMatrix<f64>,
    lin: &Linearization,
    dlo: &DVector<f64>,
    dhi: &DVector<f64>,
    penalty: f64,
    max_iters: usize,
) -> Result<QpStep, QpError> {
    let d = lin.gradient.len();
    let (ne, ni) = (lin.eq.len(), lin.ineq.len());
    // variables: step, eq slacks v⁺ and v⁻, ineq slacks w
    let dim = d + 2 * ne + ni;
    // curvature `penalty` on the elastic variables keeps the unconstrained
    // minimizer of the dual start at O(1) instead of −penalty/ε
    let mut h = DMatrix::zeros(dim, dim);
    h.view_mut((0, 0), (d, d)).copy_from(b);
    for i in d..dim {
        h[(i, i)] = penalty;
    }
    let mut g = DVector::from_element(dim, penalty);
    g.rows_mut(0, d).copy_from(&lin.gradient);
    let mut a_eq = DMatrix::zeros(ne, dim);
    a_eq.view_mut((0, 0), (ne, d)).copy_from(&lin.eq_jacobian);
    for i in 0..ne {
        a_eq[(i, d + i)] = -1.0;
        a_eq[(i, d + ne + i)] = 1.0;
    }
    let mut a_in = DMatrix::zeros(ni, dim);
    a_in.view_mut((0, 0), (ni, d)).copy_from(&lin.ineq_jacobian);
    for i in 0..ni {
        a_in[(i, d + 2 * ne + i)] = -1.0;
    }
    let mut lo = DVector::zeros(dim);
    lo.rows_mut(0, d).copy_from(dlo);
    let mut hi = DVector::from_element(dim, f64::INFINITY);
    hi.rows_mut(0, d).copy_from(dhi);
    let (b_eq, b_in) = (-&lin.eq, -&lin.ineq);
    let qp = QpProblem { h: &h, g: &g, a_eq: &a_eq, b_eq: &b_eq, a_in: &a_in, b_in: &b_in, lo: &lo, hi: &hi };
    let sol = solve_qp(&qp, max_iters)?;
    Ok(QpStep {
        d: sol.z.rows(0, d).into_owned(),
        mult: Multipliers { eq: sol.eq_multipliers, ineq: sol.ineq_multipliers, bound: sol.bound_multipliers.rows(0, d).into_owned() },
        elastic: true,
    })
}

/// Powell-damped BFGS update of `b` with step `s` and curvature pair `y`.
fn damped_bfgs_update(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>, first: bool) {
    let sy = s.dot(y);
    let ss = s.dot(s);
    if ss == 0.0 {
        return;
    }
    if first && sy > 0.0 {
        // Shanno–Phua initial scaling
        let scale = (y.dot(y) / sy).clamp(1e-6, 1e6);
        *b = DMatrix::identity(b.nrows(), b.ncols()) * scale;
    }
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if !(sbs > 0.0) {
        return;
    }
    let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
    let r = y * theta + &bs * (1.0 - theta);
    let sr = s.dot(&r);
    if !(sr > 0.0) {
        return;
    }
    *b -= &bs * bs.transpose() / sbs;
    *b += &r * r.transpose() / sr;
}

const MAX_PENALTY: f64 = 1e12;
const MIN_RADIUS: f64 = 1e-10;

/// Solve `nlp` from `z_init` (projected onto the bounds).
pub fn solve_sqp<P: NlpProblem + ?Sized>(nlp: &P, z_init: &DVector<f64>, opts: &SqpOptions) -> NlpSolution {
    let d = nlp.dim();
    let (lo, hi) = nlp.bounds();
    let mut z = project(z_init, &lo, &hi);
    let mut lin = nlp.linearize(&z);
    let (ne, ni) = (lin.eq.len(), lin.ineq.len());
    let mut mult = Multipliers::zeros(ne, ni, d);
    let mut b_curv = DMatrix::<f64>::identity(d, d);
    let mut first_update = true;
    let mut penalty = opts.merit_penalty_init;
    let mut history = Vec::new();
    let mut reset_done = false;
    let mut elastic_streak = 0usize;
    // box trust-region factor; shrinks with short line-search steps
    let mut radius_scale = opts.step_bound;

    let finish = |z: DVector<f64>, lin: &Linearization, mult: Multipliers, status, iters, history| NlpSolution {
        kkt_residual: kkt_residual(lin, &mult),
        constraint_violation_inf: violation_inf(&lin.eq, &lin.ineq),
        cost: lin.cost,
        z,
        eq_multipliers: mult.eq,
        ineq_multipliers: mult.ineq,
        bound_multipliers: mult.bound,
        status,
        major_iters: iters,
        merit_history: history,
    };

    if !lin.is_finite() {
        return finish(z, &lin, mult, SqpStatus::Diverged, 0, history);
    }

    let mut iter = 0;
    while iter < opts.max_major_iters {
        let h_cost = nlp.cost_hessian(&z);
        // before any multiplier estimate exists the Lagrangian Hessian is just
        // the cost Hessian, often zero; the BFGS start is safer there
        let exact =
            if opts.hessian == HessianMode::ExactProjected && iter > 0 { nlp.lagrangian_hessian(&z, &mult.eq, &mult.ineq) } else { None };
        let b = match opts.hessian {
            HessianMode::GaussNewton => {
                let mut b = h_cost.clone().unwrap_or_else(|| DMatrix::zeros(d, d));
                let shift = opts.gn_regularization * b.amax().max(1.0);
                for i in 0..d {
                    b[(i, i)] += shift;
                }
                b
            }
            HessianMode::ExactProjected if exact.is_some() => {
                project_positive_definite(exact.as_ref().expect("checked"), opts.gn_regularization)
            }
            HessianMode::DampedBfgs | HessianMode::ExactProjected => match &h_cost {
                Some(h) => h + &b_curv,
                None => b_curv.clone(),
            },
        };
        let radius = z.map(|v| radius_scale * v.abs().max(1.0));
        let dlo = (&lo - &z).sup(&-&radius);
        let dhi = (&hi - &z).inf(&radius);
        let elastic_weight = penalty.max(1e3).max(10.0 * lin.gradient.amax());
        let step = match subproblem(&b, &lin, &dlo, &dhi, elastic_weight, opts.qp_max_iters) {
            Ok(s) => s,
            Err(_) => return finish(z, &lin, mult, SqpStatus::QpFailure, iter, history),
        };

        let kkt = kkt_residual(&lin, &step.mult);
        let viol = violation_inf(&lin.eq, &lin.ineq);
        let tiny_step = step.d.amax() <= 1e-12 * (1.0 + z.amax());
        log::trace!(
            "sqp {iter}: cost {:.6e} kkt {kkt:.2e} viol {viol:.2e} elastic {} radius {radius_scale:.2e} penalty {penalty:.2e}",
            lin.cost,
            step.elastic
        );
        if !step.elastic && (kkt < opts.kkt_tol || (tiny_step && viol <= opts.feas_tol)) {
            return finish(z, &lin, step.mult, SqpStatus::Converged, iter, history);
        }

        if step.elastic {
            // elastic multipliers sit at the weight itself, so they cannot
            // drive the penalty; escalate slowly while infeasibility persists
            elastic_streak += 1;
            penalty = elastic_weight;
            if elastic_streak % 5 == 0 {
                penalty = (penalty * 10.0).min(MAX_PENALTY);
            }
        } else {
            elastic_streak = 0;
            // Powell's rule: grow at once, decay geometrically towards 2‖λ‖∞
            let target = (2.0 * step.mult.amax()).max(opts.merit_penalty_init);
            penalty = if penalty < target { target } else { 0.5 * (penalty + target) };
        }
        let merit = |c: f64, eq: &DVector<f64>, ineq: &DVector<f64>| c + penalty * violation_l1(eq, ineq);
        let phi0 = merit(lin.cost, &lin.eq, &lin.ineq);
        let slope = (lin.gradient.dot(&step.d) - penalty * violation_l1(&lin.eq, &lin.ineq)).min(0.0);

        let try_point = |cand: &DVector<f64>| {
            let (c, eq, ineq) = nlp.evaluate(cand);
            let phi = merit(c, &eq, &ineq);
            phi.is_finite().then_some(phi)
        };
        let mut alpha = 1.0;
        let mut accepted: Option<(DVector<f64>, f64)> = None;
        let mut soc_tried = !opts.second_order_correction;
        while alpha >= opts.min_step {
            let cand = project(&(&z + &step.d * alpha), &lo, &hi);
            if let Some(phi) = try_point(&cand) {
                if phi <= phi0 + opts.armijo * alpha * slope {
                    accepted = Some((cand, phi));
                    break;
                }
            }
            if !soc_tried {
                soc_tried = true;
                // second-order correction: re-linearize the constraint values at z + d
                let (_, eq_t, in_t) = nlp.evaluate(&project(&(&z + &step.d), &lo, &hi));
                let shifted =
                    Linearization { eq: &eq_t - &lin.eq_jacobian * &step.d, ineq: &in_t - &lin.ineq_jacobian * &step.d, ..lin.clone() };
                if shifted.is_finite() {
                    if let Ok(soc) = subproblem(&b, &shifted, &dlo, &dhi, penalty, opts.qp_max_iters) {
                        let cand = project(&(&z + &soc.d), &lo, &hi);
                        if let Some(phi) = try_point(&cand) {
                            if phi <= phi0 + opts.armijo * slope {
                                accepted = Some((cand, phi));
                                break;
                            }
                        }
                    }
                }
            }
            alpha *= opts.ls_backtrack;
        }

        let Some((z_new, phi_new)) = accepted else {
            if opts.hessian != HessianMode::GaussNewton && !reset_done {
                // stale curvature model: restart it once
                b_curv = DMatrix::identity(d, d);
                first_update = true;
                reset_done = true;
            }
            radius_scale *= 0.1;
            if radius_scale < MIN_RADIUS {
                return finish(z, &lin, step.mult, SqpStatus::Diverged, iter, history);
            }
            iter += 1;
            continue;
        };
        let rel_step = (0..d).map(|i| ((z_new[i] - z[i]) / z[i].abs().max(1.0)).abs()).fold(0.0, f64::max);
        if alpha < 1.0 {
            radius_scale = (2.0 * rel_step).max(MIN_RADIUS);
        } else if rel_step >= 0.5 * radius_scale {
            radius_scale = (2.0 * radius_scale).min(opts.step_bound);
        }
        history.push((phi0, phi_new));

        let lin_new = nlp.linearize(&z_new);
        if !lin_new.is_finite() {
            return finish(z, &lin, step.mult, SqpStatus::Diverged, iter, history);
        }
        if opts.hessian != HessianMode::GaussNewton && exact.is_none() {
            let s = &z_new - &z;
            let mut y = lagrangian_gradient(&lin_new, &step.mult) - lagrangian_gradient(&lin, &step.mult);
            if let Some(h) = &h_cost {
                y -= h * &s;
            }
            damped_bfgs_update(&mut b_curv, &s, &y, first_update);
            first_update = false;
        }
        z = z_new;
        lin = lin_new;
        mult = step.mult;
        iter += 1;
    }
    finish(z, &lin, mult, SqpStatus::MaxIters, iter, history)
}
