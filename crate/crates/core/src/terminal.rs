//! Terminal ingredients: discrete Riccati solution, LQR gain, an ellipsoidal
//! invariant set sized by sampled certification, and the dual-mode law.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::{ControlVector, ModelError, ParamPoint, PlantModel, StateVector, DEFAULT_SUBSTEPS};
use crate::ocp::{PolytopicConstraint, TerminalSet};

pub const DARE_MAX_ITERS: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TerminalError {
    #[error("Riccati iteration did not converge (last residual {residual:.3e})")]
    DareNotConverged { residual: f64 },
    #[error("closed loop A − BK is not stable (spectral radius {radius:.6})")]
    NotStabilizing { radius: f64 },
    #[error("no terminal level α > 0 could be certified")]
    NotCertifiable,
    #[error("x_f is not an equilibrium: residual {residual:.3e} after Newton")]
    NoEquilibrium { residual: f64 },
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiResult {
    pub p: DMatrix<f64>,
    /// `K = (R + BᵀPB)⁻¹BᵀPA`; the stabilizing law is `u = −K x`.
    pub k: DMatrix<f64>,
    pub closed_loop_spectral_radius: f64,
    pub iterations: usize,
}

fn riccati_map(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let bt_p = b.transpose() * p;
    let gain = (r + &bt_p * b).cholesky()?.solve(&(&bt_p * a));
    let next = a.transpose() * p * a - a.transpose() * p * b * &gain + q;
    Some(((&next + next.transpose()) * 0.5, gain))
}

/// Spectral radius of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Fixed-point iteration of the DARE from `P = Q` until `‖ΔP‖∞ < tol`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
) -> Result<RiccatiResult, TerminalError> {
    let (n, m) = (a.nrows(), b.ncols());
    if a.ncols() != n || b.nrows() != n {
        return Err(TerminalError::DimensionMismatch { what: "A/B", expected: n, got: b.nrows() });
    }
    if q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(TerminalError::DimensionMismatch { what: "Q/R", expected: n, got: q.nrows() });
    }
    if !(tol > 0.0) {
        return Err(TerminalError::InvalidArgument(format!("tol must be > 0, got {tol}")));
    }
    let not_pd = || TerminalError::InvalidArgument("R + BᵀPB is not positive definite".into());
    let mut p = (q + q.transpose()) * 0.5;
    let mut residual = f64::INFINITY;
    for it in 1..=DARE_MAX_ITERS {
        let (next, _) = riccati_map(a, b, q, r, &p).ok_or_else(not_pd)?;
        residual = (&next - &p).amax();
        p = next;
        if !residual.is_finite() {
            break;
        }
        if residual < tol {
            let (_, k) = riccati_map(a, b, q, r, &p).ok_or_else(not_pd)?;
            let radius = spectral_radius(&(a - b * &k));
            if radius >= 1.0 {
                return Err(TerminalError::NotStabilizing { radius });
            }
            return Ok(RiccatiResult { p, k, closed_loop_spectral_radius: radius, iterations: it });
        }
    }
    Err(TerminalError::DareNotConverged { residual })
}

/// `‖P − (AᵀPA − AᵀPB(R+BᵀPB)⁻¹BᵀPA + Q)‖∞`.
pub fn dare_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    riccati_map(a, b, q, r, p).map_or(f64::INFINITY, |(next, _)| (next - p).amax())
}

/// Input `u_f` with `f(x_f, u_f, ϱ) = 0`, by Levenberg-damped Gauss-Newton.
pub fn equilibrium_input(
    model: &PlantModel,
    x_f: &StateVector,
    rho: &ParamPoint,
    u_init: &ControlVector,
) -> Result<ControlVector, TerminalError> {
    let m = model.input_dim();
    if u_init.len() != m {
        return Err(TerminalError::DimensionMismatch { what: "u_init", expected: m, got: u_init.len() });
    }
    let mut u = u_init.clone();
    let mut res = model.eval_dynamics(x_f, &u, rho)?;
    let mut damping = 1e-6;
    for _ in 0..100 {
        if res.amax() < 1e-12 {
            break;
        }
        let mut jac = DMatrix::zeros(res.len(), m);
        for j in 0..m {
            let h = 1e-6 * (1.0 + u[j].abs());
            let (mut up, mut um) = (u.clone(), u.clone());
            up[j] += h;
            um[j] -= h;
            let col = (model.eval_dynamics(x_f, &up, rho)? - model.eval_dynamics(x_f, &um, rho)?) / (2.0 * h);
            jac.set_column(j, &col);
        }
        let mut normal = jac.transpose() * &jac;
        for i in 0..m {
            normal[(i, i)] += damping * (1.0 + normal[(i, i)]);
        }
        let Some(step) = normal.lu().solve(&(-jac.transpose() * &res)) else { break };
        let cand = &u + &step;
        let cand_res = model.eval_dynamics(x_f, &cand, rho)?;
        if cand_res.norm() < res.norm() {
            u = cand;
            res = cand_res;
            damping = (damping * 0.1).max(1e-12);
        } else {
            damping *= 10.0;
            if damping > 1e8 {
                break;
            }
        }
    }
    let residual = res.amax();
    if residual > 1e-6 {
        return Err(TerminalError::NoEquilibrium { residual });
    }
    Ok(u)
}

/// Bisection settings for the ellipsoid level `α`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSearch {
    pub alpha_max: f64,
    pub bisections: usize,
    /// Boundary directions tested per level.
    pub samples: usize,
    /// Levels below this count as "no certified set".
    pub alpha_min: f64,
}

impl Default for AlphaSearch {
    fn default() -> Self {
        Self { alpha_max: 1e3, bisections: 40, samples: 512, alpha_min: 1e-12 }
    }
}

/// Radical inverse in base `b`.
fn radical_inverse(mut i: usize, b: usize) -> f64 {
    let (mut f, mut r) = (1.0, 0.0);
    while i > 0 {
        f /= b as f64;
        r += f * (i % b) as f64;
        i /= b;
    }
    r
}

const PRIMES: [usize; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Deterministic unit directions: `±e_i` followed by normalized Halton points.
pub fn sphere_directions(n: usize, count: usize) -> Vec<DVector<f64>> {
    let mut dirs = Vec::with_capacity(count + 2 * n);
    for i in 0..n {
        for s in [1.0, -1.0] {
            let mut e = DVector::zeros(n);
            e[i] = s;
            dirs.push(e);
        }
    }
    let mut i = 1;
    while dirs.len() < count + 2 * n {
        let v = DVector::from_fn(n, |d, _| 2.0 * radical_inverse(i, PRIMES[d % PRIMES.len()]) - 1.0);
        i += 1;
        let norm = v.norm();
        if norm > 1e-9 {
            dirs.push(v / norm);
        }
    }
    dirs
}

/// Inputs to the terminal-set construction.
#[derive(Debug, Clone)]
pub struct TerminalDesign<'a> {
    pub model: &'a PlantModel,
    pub ric: &'a RiccatiResult,
    pub x_f: &'a StateVector,
    pub u_f: &'a ControlVector,
    pub rho: ParamPoint,
    pub ts: f64,
    pub constraints: &'a PolytopicConstraint,
}

impl TerminalDesign<'_> {
    /// True when every sampled point of `{V ≤ α}` (three shells) keeps the
    /// LQR input inside `Z` and maps into `{V ≤ α}` in one step.
    fn certifies(&self, alpha: f64, dirs: &[DVector<f64>], l_inv_t: &DMatrix<f64>) -> bool {
        let p = &self.ric.p;
        for shell in [1.0, 0.5, 0.25] {
            let radius = (alpha * shell).sqrt();
            for v in dirs {
                let dx = l_inv_t * v * radius;
                let x = self.x_f + &dx;
                let u = self.u_f - &self.ric.k * &dx;
                if self.constraints.residual(&x, &u).iter().any(|&r| r > 0.0) {
                    return false;
                }
                let next = self.model.rk4_step(&x, &u, &self.rho, self.ts, DEFAULT_SUBSTEPS);
                let d = next - self.x_f;
                let level = d.dot(&(p * &d));
                if !(level <= alpha * shell * (1.0 + 1e-9)) && !(level <= alpha) {
                    return false;
                }
            }
        }
        true
    }
}

/// Largest certified ellipsoid `{(x − x_f)ᵀP(x − x_f) ≤ α}` around `x_f`.
pub fn ellipsoid_terminal_set(design: &TerminalDesign, search: &AlphaSearch) -> Result<TerminalSet, TerminalError> {
    let n = design.x_f.len();
    if design.ric.p.shape() != (n, n) {
        return Err(TerminalError::DimensionMismatch { what: "P_ric", expected: n, got: design.ric.p.nrows() });
    }
    if !(search.alpha_max > 0.0) {
        return Err(TerminalError::InvalidArgument("alpha_max must be > 0".into()));
    }
    let chol = design.ric.p.clone().cholesky().ok_or_else(|| TerminalError::InvalidArgument("P_ric is not positive definite".into()))?;
    // x − x_f = L⁻ᵀ v √α puts x on the α-level set for unit v
    let l_inv_t = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| TerminalError::InvalidArgument("singular P_ric".into()))?
        .transpose();
    let dirs = sphere_directions(n, search.samples);
    let alpha = if design.certifies(search.alpha_max, &dirs, &l_inv_t) {
        search.alpha_max
    } else {
        let (mut lo, mut hi) = (0.0, search.alpha_max);
        for _ in 0..search.bisections {
            // geometric bisection covers many decades of α
            let mid = if lo > 0.0 { (lo * hi).sqrt() } else { hi * 1e-3 };
            if design.certifies(mid, &dirs, &l_inv_t) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    if !(alpha > search.alpha_min) {
        return Err(TerminalError::NotCertifiable);
    }
    Ok(TerminalSet::Ellipsoid { p: design.ric.p.clone(), alpha, center: design.x_f.clone() })
}

/// Ellipsoid when certifiable, otherwise the point `{x_f}`.
pub fn terminal_set_or_point(design: &TerminalDesign, search: &AlphaSearch) -> (TerminalSet, bool) {
    match ellipsoid_terminal_set(design, search) {
        Ok(set) => (set, false),
        Err(e) => {
            log::warn!("terminal set: {e}; falling back to x_N = x_f");
            (TerminalSet::Point(design.x_f.clone()), true)
        }
    }
}

/// Dual-mode law `u = K(x − x*_k) + u*_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualModeController {
    /// Feedback gain as applied; built from a Riccati result this is `−K`.
    pub gain: DMatrix<f64>,
    pub x_f: StateVector,
    pub u_f: ControlVector,
    /// Open-loop references `(x*_k, u*_k)`; the last pair repeats.
    pub mode2_refs: Option<(Vec<StateVector>, Vec<ControlVector>)>,
    /// Inside this set the references collapse to `(x_f, u_f)`.
    pub terminal: Option<TerminalSet>,
}

impl DualModeController {
    pub fn from_riccati(ric: &RiccatiResult, x_f: StateVector, u_f: ControlVector) -> Self {
        Self { gain: -&ric.k, x_f, u_f, mode2_refs: None, terminal: None }
    }

    pub fn with_terminal(mut self, set: TerminalSet) -> Self {
        self.terminal = Some(set);
        self
    }

    pub fn with_references(mut self, states: Vec<StateVector>, inputs: Vec<ControlVector>) -> Self {
        self.mode2_refs = Some((states, inputs));
        self
    }
}

/// Evaluate the dual-mode law at step `k`.
pub fn dual_mode_control(ctl: &DualModeController, x: &StateVector, k: usize) -> ControlVector {
    let inside = ctl.terminal.as_ref().is_some_and(|s| s.contains(x));
    let refs = ctl.mode2_refs.as_ref().filter(|(xs, us)| !inside && !xs.is_empty() && !us.is_empty());
    let (x_ref, u_ref) = match refs {
        Some((xs, us)) => (&xs[k.min(xs.len() - 1)], &us[k.min(us.len() - 1)]),
        None => (&ctl.x_f, &ctl.u_f),
    };
    &ctl.gain * (x - x_ref) + u_ref
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_dare_golden_ratio() {
        let ric = solve_dare(&m1(1.0), &m1(1.0), &m1(1.0), &m1(1.0), 1e-14).unwrap();
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((ric.p[(0, 0)] - phi).abs() < 1e-8);
        assert!((ric.k[(0, 0)] - phi / (1.0 + phi)).abs() < 1e-8);
        assert!(ric.closed_loop_spectral_radius < 1.0);
    }

    #[test]
    fn zero_state_weight_on_stable_plant() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.3]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let ric = solve_dare(&a, &b, &DMatrix::zeros(2, 2), &m1(1.0), 1e-12).unwrap();
        assert_eq!(ric.p.amax(), 0.0);
        assert_eq!(ric.k.amax(), 0.0);
    }

    #[test]
    fn unstabilizable_pair_is_rejected() {
        // unstable mode not reached by the input
        let a = DMatrix::from_row_slice(2, 2, &[1.5, 0.0, 0.0, 0.5]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        assert!(solve_dare(&a, &b, &DMatrix::identity(2, 2), &m1(1.0), 1e-10).is_err());
    }

    #[test]
    fn dual_mode_examples() {
        let ctl = DualModeController {
            gain: m1(0.618),
            x_f: DVector::zeros(1),
            u_f: DVector::zeros(1),
            mode2_refs: Some((vec![DVector::from_element(1, 2.0)], vec![DVector::zeros(1)])),
            terminal: None,
        };
        assert_eq!(dual_mode_control(&ctl, &DVector::from_element(1, 2.0), 0)[0], 0.0);
        assert!((dual_mode_control(&ctl, &DVector::from_element(1, 3.0), 5)[0] - 0.618).abs() < 1e-12);
        let inside = ctl.clone().with_terminal(TerminalSet::Point(DVector::from_element(1, 3.0)));
        assert!((dual_mode_control(&inside, &DVector::from_element(1, 3.0), 0)[0] - 1.854).abs() < 1e-12);
    }

    #[test]
    fn crane_hold_compensates_gravity() {
        let model = PlantModel::crane_modal(Default::default());
        let x_f = DVector::from_vec(vec![0.5, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let rho = model.param_at(&x_f);
        let u_f = equilibrium_input(&model, &x_f, &rho, &DVector::zeros(2)).unwrap();
        assert!(model.eval_dynamics(&x_f, &u_f, &rho).unwrap().amax() < 1e-9);
        assert!(u_f[1] > 0.0, "lift force must hold against gravity: {u_f}");
        let (a, b) = model.linearize_discrete(&x_f, &u_f, &rho, 0.03).unwrap();
        let q = DMatrix::identity(8, 8);
        let ric = solve_dare(&a, &b, &q, &DMatrix::identity(2, 2), 1e-10).unwrap();
        let ctl = DualModeController::from_riccati(&ric, x_f.clone(), u_f.clone());
        assert_eq!(dual_mode_control(&ctl, &x_f, 0), u_f);
    }

    #[test]
    fn unconstrained_linear_model_hits_search_limit() {
        let model = PlantModel::double_integrator();
        let (x_f, u_f) = (DVector::zeros(2), DVector::zeros(1));
        let rho = model.nominal_param();
        let (a, b) = model.linearize_discrete(&x_f, &u_f, &rho, 0.1).unwrap();
        let ric = solve_dare(&a, &b, &DMatrix::identity(2, 2), &m1(1.0), 1e-12).unwrap();
        let z = PolytopicConstraint::empty(2, 1);
        let design = TerminalDesign { model: &model, ric: &ric, x_f: &x_f, u_f: &u_f, rho, ts: 0.1, constraints: &z };
        let search = AlphaSearch { alpha_max: 50.0, ..Default::default() };
        let TerminalSet::Ellipsoid { alpha, .. } = ellipsoid_terminal_set(&design, &search).unwrap() else { panic!() };
        assert_eq!(alpha, 50.0);
    }

    #[test]
    fn target_on_constraint_boundary_falls_back() {
        let model = PlantModel::double_integrator();
        let (x_f, u_f) = (DVector::from_vec(vec![1.0, 0.0]), DVector::zeros(1));
        let rho = model.nominal_param();
        let (a, b) = model.linearize_discrete(&x_f, &u_f, &rho, 0.1).unwrap();
        let ric = solve_dare(&a, &b, &DMatrix::identity(2, 2), &m1(1.0), 1e-12).unwrap();
        let z = PolytopicConstraint::from_boxes(&[-1.0, -5.0], &[1.0, 5.0], &[-1.0], &[1.0]);
        let design = TerminalDesign { model: &model, ric: &ric, x_f: &x_f, u_f: &u_f, rho, ts: 0.1, constraints: &z };
        assert_eq!(ellipsoid_terminal_set(&design, &AlphaSearch::default()), Err(TerminalError::NotCertifiable));
        let (set, fell_back) = terminal_set_or_point(&design, &AlphaSearch::default());
        assert!(fell_back);
        assert_eq!(set, TerminalSet::Point(x_f));
    }

    fn two_dof_terminal() -> (PlantModel, RiccatiResult, TerminalSet, PolytopicConstraint) {
        let model = PlantModel::two_dof(1000.0, 1000.0, 1000.0, 1.0, 1.0);
        let (x_f, u_f) = (DVector::zeros(4), DVector::zeros(2));
        let rho = model.nominal_param();
        let (a, b) = model.linearize_discrete(&x_f, &u_f, &rho, 0.02).unwrap();
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![2000.0, 2000.0, 10.0, 10.0]));
        let ric = solve_dare(&a, &b, &q, &DMatrix::identity(2, 2), 1e-9).unwrap();
        let inf = f64::INFINITY;
        let z = PolytopicConstraint::from_boxes(&[-1.0, -1.0, -inf, -inf], &[1.0, 1.0, inf, inf], &[-200.0; 2], &[200.0; 2]);
        let design = TerminalDesign { model: &model, ric: &ric, x_f: &x_f, u_f: &u_f, rho, ts: 0.02, constraints: &z };
        let set = ellipsoid_terminal_set(&design, &AlphaSearch::default()).unwrap();
        (model, ric, set, z)
    }

    #[test]
    fn two_dof_set_is_certified_and_invariant() {
        use rand::{Rng, SeedableRng};
        let (model, ric, set, z) = two_dof_terminal();
        let TerminalSet::Ellipsoid { p, alpha, center } = &set else { panic!() };
        assert!(*alpha > 0.0);
        assert!(set.contains(center));
        let chol = p.clone().cholesky().unwrap();
        let l_inv_t = chol.l().solve_lower_triangular(&DMatrix::identity(4, 4)).unwrap().transpose();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let rho = model.nominal_param();
        for _ in 0..1000 {
            // uniform in the ellipsoid: direction times radius^(1/n)
            let v = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
            let r = rng.gen_range(0.0f64..1.0).powf(0.25) * alpha.sqrt();
            let x = &l_inv_t * v.normalize() * r;
            let u = -&ric.k * &x;
            assert!(z.residual(&x, &u).iter().all(|&v| v <= 1e-9));
            let next = model.rk4_step(&x, &u, &rho, 0.02, DEFAULT_SUBSTEPS);
            assert!(set.contains(&next) || set.membership_residual(&next) < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn dare_residual_and_stability(seed in any::<u64>(), n in 1usize..=6, m in 1usize..=3) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0)) * 0.9;
            let b = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
            let q = DMatrix::identity(n, n);
            let r = DMatrix::identity(m, m);
            if let Ok(ric) = solve_dare(&a, &b, &q, &r, 1e-12) {
                prop_assert!(dare_residual(&a, &b, &q, &r, &ric.p) < 1e-8);
                prop_assert!((&ric.p - ric.p.transpose()).amax() < 1e-10);
                prop_assert!(spectral_radius(&(&a - &b * &ric.k)) < 1.0);
            }
        }
    }
}
