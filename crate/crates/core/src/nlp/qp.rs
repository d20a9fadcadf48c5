//! Dense strictly convex QP by the Goldfarb–Idnani dual active-set method.
//!
//! Solves `min ½zᵀHz + gᵀz` s.t. `A_eq z = b_eq`, `A_in z ≤ b_in`,
//! `lo ≤ z ≤ hi` (infinite bounds allowed). Multipliers follow the convention
//! `Hz + g + A_eqᵀλ + A_inᵀμ + ν = 0` with `μ ≥ 0`; `ν_i > 0` means the upper
//! bound is active and `ν_i < 0` the lower one.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("equality constraints are inconsistent")]
    InconsistentEqualities,
    #[error("constraints are infeasible")]
    Infeasible,
    #[error("no convergence after {0} active-set changes")]
    MaxIterations(usize),
    #[error("Hessian could not be made positive definite")]
    NotConvex,
}

pub struct QpProblem<'a> {
    pub h: &'a DMatrix<f64>,
    pub g: &'a DVector<f64>,
    pub a_eq: &'a DMatrix<f64>,
    pub b_eq: &'a DVector<f64>,
    pub a_in: &'a DMatrix<f64>,
    pub b_in: &'a DVector<f64>,
    pub lo: &'a DVector<f64>,
    pub hi: &'a DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub eq_multipliers: DVector<f64>,
    pub ineq_multipliers: DVector<f64>,
    pub bound_multipliers: DVector<f64>,
    pub iterations: usize,
    /// `λ` added to the Hessian diagonal to make it factorizable.
    pub regularization: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Row {
    Eq(usize),
    In(usize),
    Lower(usize),
    Upper(usize),
}

/// Constraint rows in the `nᵀz ≥ b` form the dual method works with.
struct Rows<'a> {
    p: &'a QpProblem<'a>,
    /// Sign applied to equality rows so they are violated when first added.
    eq_sign: Vec<f64>,
    eq_norm: Vec<f64>,
    in_norm: Vec<f64>,
}

impl Rows<'_> {
    fn dot(&self, r: Row, v: &DVector<f64>) -> f64 {
        match r {
            Row::Eq(i) => self.eq_sign[i] * self.p.a_eq.row(i).transpose().dot(v),
            Row::In(i) => -self.p.a_in.row(i).transpose().dot(v),
            Row::Lower(i) => v[i],
            Row::Upper(i) => -v[i],
        }
    }

    fn rhs(&self, r: Row) -> f64 {
        match r {
            Row::Eq(i) => self.eq_sign[i] * self.p.b_eq[i],
            Row::In(i) => -self.p.b_in[i],
            Row::Lower(i) => self.p.lo[i],
            Row::Upper(i) => -self.p.hi[i],
        }
    }

    fn norm(&self, r: Row) -> f64 {
        match r {
            Row::Eq(i) => self.eq_norm[i],
            Row::In(i) => self.in_norm[i],
            Row::Lower(_) | Row::Upper(_) => 1.0,
        }
    }

    /// `Jᵀ n` for the row normal `n`.
    fn project(&self, r: Row, j: &DMatrix<f64>) -> DVector<f64> {
        match r {
            Row::Eq(i) => j.tr_mul(&self.p.a_eq.row(i).transpose()) * self.eq_sign[i],
            Row::In(i) => -j.tr_mul(&self.p.a_in.row(i).transpose()),
            Row::Lower(i) => j.row(i).transpose(),
            Row::Upper(i) => -j.row(i).transpose(),
        }
    }

    /// Signed slack `nᵀz − b`; negative means violated.
    fn slack(&self, r: Row, z: &DVector<f64>) -> f64 {
        self.dot(r, z) - self.rhs(r)
    }

    /// Activation tolerance given `z_max = ‖z‖∞`.
    fn tolerance(&self, r: Row, z_max: f64) -> f64 {
        1e-11 * (1.0 + self.rhs(r).abs() + self.norm(r) * z_max)
    }
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let h = a.hypot(b);
    if h == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / h, b / h, h)
    }
}

fn rotate_columns(j: &mut DMatrix<f64>, c0: usize, c1: usize, c: f64, s: f64) {
    for r in 0..j.nrows() {
        let (x, y) = (j[(r, c0)], j[(r, c1)]);
        j[(r, c0)] = c * x + s * y;
        j[(r, c1)] = -s * x + c * y;
    }
}

fn check_dims(p: &QpProblem) -> Result<usize, QpError> {
    let d = p.g.len();
    let bad = |what: &str| Err(QpError::DimensionMismatch(what.to_string()));
    if p.h.shape() != (d, d) {
        return bad("H must be d×d");
    }
    if (p.a_eq.ncols() != d && p.a_eq.nrows() > 0) || p.a_eq.nrows() != p.b_eq.len() {
        return bad("A_eq / b_eq");
    }
    if (p.a_in.ncols() != d && p.a_in.nrows() > 0) || p.a_in.nrows() != p.b_in.len() {
        return bad("A_in / b_in");
    }
    if p.lo.len() != d || p.hi.len() != d {
        return bad("bounds");
    }
    Ok(d)
}

/// Cholesky of `H + λI`, escalating `λ` from `1e-8·max(1, ‖H‖∞)` when needed.
fn factor(h: &DMatrix<f64>) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64), QpError> {
    let sym = (h + h.transpose()) * 0.5;
    if let Some(ch) = sym.clone().cholesky() {
        return Ok((ch, 0.0));
    }
    let scale = sym.amax().max(1.0);
    let mut lambda = 1e-8 * scale;
    for _ in 0..12 {
        let mut reg = sym.clone();
        for i in 0..reg.nrows() {
            reg[(i, i)] += lambda;
        }
        if let Some(ch) = reg.cholesky() {
            return Ok((ch, lambda));
        }
        lambda *= 100.0;
    }
    Err(QpError::NotConvex)
}

/// Solve the QP; `max_iters` bounds the number of active-set changes.
///
/// Variables with `lo == hi` are eliminated before the dual iteration, so
/// their two bound rows never compete in the active set.
pub fn solve_qp(p: &QpProblem, max_iters: usize) -> Result<QpSolution, QpError> {
    let d = check_dims(p)?;
    for i in 0..d {
        if p.lo[i] > p.hi[i] {
            return Err(QpError::Infeasible);
        }
    }
    let free: Vec<usize> = (0..d).filter(|&i| p.lo[i] != p.hi[i]).collect();
    if free.len() == d {
        return solve_dual(p, max_iters);
    }
    let mut fixed = DVector::zeros(d);
    for i in 0..d {
        if p.lo[i] == p.hi[i] {
            fixed[i] = p.lo[i];
        }
    }
    let nf = free.len();
    let h = DMatrix::from_fn(nf, nf, |r, c| p.h[(free[r], free[c])]);
    let hz = p.h * &fixed;
    let g = DVector::from_fn(nf, |r, _| p.g[free[r]] + hz[free[r]]);
    let a_eq = DMatrix::from_fn(p.a_eq.nrows(), nf, |r, c| p.a_eq[(r, free[c])]);
    let b_eq = p.b_eq - p.a_eq * &fixed;
    let a_in = DMatrix::from_fn(p.a_in.nrows(), nf, |r, c| p.a_in[(r, free[c])]);
    let b_in = p.b_in - p.a_in * &fixed;
    let lo = DVector::from_fn(nf, |r, _| p.lo[free[r]]);
    let hi = DVector::from_fn(nf, |r, _| p.hi[free[r]]);
    let reduced = QpProblem { h: &h, g: &g, a_eq: &a_eq, b_eq: &b_eq, a_in: &a_in, b_in: &b_in, lo: &lo, hi: &hi };
    let sol = solve_dual(&reduced, max_iters)?;
    let mut z = fixed;
    for (r, &i) in free.iter().enumerate() {
        z[i] = sol.z[r];
    }
    // fixed variables absorb the full stationarity residual
    let residual = p.h * &z + p.g + p.a_eq.tr_mul(&sol.eq_multipliers) + p.a_in.tr_mul(&sol.ineq_multipliers);
    let mut bound_multipliers = -residual;
    for (r, &i) in free.iter().enumerate() {
        bound_multipliers[i] = sol.bound_multipliers[r];
    }
    Ok(QpSolution { z, bound_multipliers, ..sol })
}

fn solve_dual(p: &QpProblem, max_iters: usize) -> Result<QpSolution, QpError> {
    let d = p.g.len();
    let (chol, regularization) = factor(p.h)?;
    // J = L^{-T}
    let l_inv = chol.l().solve_lower_triangular(&DMatrix::identity(d, d)).ok_or(QpError::NotConvex)?;
    let mut j = l_inv.transpose();
    let mut r_mat = DMatrix::<f64>::zeros(d, d);
    let mut z = -chol.solve(p.g);

    let mut rows = Rows {
        p,
        eq_sign: vec![1.0; p.a_eq.nrows()],
        eq_norm: p.a_eq.row_iter().map(|r| r.norm()).collect(),
        in_norm: p.a_in.row_iter().map(|r| r.norm()).collect(),
    };
    let mut candidates: Vec<Row> = (0..p.a_in.nrows()).map(Row::In).collect();
    for i in 0..d {
        if p.lo[i].is_finite() {
            candidates.push(Row::Lower(i));
        }
        if p.hi[i].is_finite() {
            candidates.push(Row::Upper(i));
        }
    }

    let mut active: Vec<Row> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut iterations = 0;

    // Add one constraint by Givens rotations; `dvec = Jᵀn`.
    let add = |j: &mut DMatrix<f64>, r_mat: &mut DMatrix<f64>, q: usize, mut dvec: DVector<f64>| {
        for col in (q + 1..d).rev() {
            let (c, s, h) = givens(dvec[col - 1], dvec[col]);
            if h != 0.0 {
                rotate_columns(j, col - 1, col, c, s);
            }
            dvec[col - 1] = h;
            dvec[col] = 0.0;
        }
        for row in 0..=q {
            r_mat[(row, q)] = dvec[row];
        }
    };

    let drop = |j: &mut DMatrix<f64>, r_mat: &mut DMatrix<f64>, q: usize, l: usize| {
        for col in l..q - 1 {
            for row in 0..=col + 1 {
                r_mat[(row, col)] = r_mat[(row, col + 1)];
            }
        }
        for row in 0..d {
            r_mat[(row, q - 1)] = 0.0;
        }
        for col in l..q - 1 {
            let (c, s, h) = givens(r_mat[(col, col)], r_mat[(col + 1, col)]);
            if s == 0.0 {
                continue;
            }
            r_mat[(col, col)] = h;
            r_mat[(col + 1, col)] = 0.0;
            for k in col + 1..q - 1 {
                let (x, y) = (r_mat[(col, k)], r_mat[(col + 1, k)]);
                r_mat[(col, k)] = c * x + s * y;
                r_mat[(col + 1, k)] = -s * x + c * y;
            }
            rotate_columns(j, col, col + 1, c, s);
        }
    };

    // Step directions for candidate `row`: primal `dz = J₂ d₂`, dual `r = R⁻¹ d₁`.
    let directions = |j: &DMatrix<f64>, r_mat: &DMatrix<f64>, q: usize, dvec: &DVector<f64>| {
        let mut dz = DVector::zeros(d);
        for col in q..d {
            if dvec[col] != 0.0 {
                dz.axpy(dvec[col], &j.column(col), 1.0);
            }
        }
        let mut r = vec![0.0; q];
        for row in (0..q).rev() {
            let mut acc = dvec[row];
            for k in row + 1..q {
                acc -= r_mat[(row, k)] * r[k];
            }
            r[row] = acc / r_mat[(row, row)];
        }
        let free_norm = dvec.rows(q, d - q).norm();
        (dz, r, free_norm)
    };

    // Equalities first; they are never dropped afterwards.
    for i in 0..p.a_eq.nrows() {
        let row = Row::Eq(i);
        rows.eq_sign[i] = 1.0;
        if rows.slack(row, &z) > 0.0 {
            rows.eq_sign[i] = -1.0;
        }
        let q = active.len();
        let dvec = rows.project(row, &j);
        let (dz, r, free_norm) = directions(&j, &r_mat, q, &dvec);
        let s = rows.slack(row, &z);
        if free_norm <= 1e-12 * dvec.norm().max(1e-300) {
            if s.abs() <= 1e-9 * (1.0 + rows.rhs(row).abs() + rows.norm(row) * z.amax()) {
                continue;
            }
            return Err(QpError::InconsistentEqualities);
        }
        let t = -s / rows.dot(row, &dz);
        z.axpy(t, &dz, 1.0);
        for (uk, rk) in u.iter_mut().zip(&r) {
            *uk -= t * rk;
        }
        add(&mut j, &mut r_mat, q, dvec);
        active.push(row);
        u.push(t);
        iterations += 1;
    }

    loop {
        // most violated (normalized) inequality
        let mut pick: Option<(Row, f64)> = None;
        let z_max = z.amax();
        for &row in &candidates {
            let s = rows.slack(row, &z);
            if s < -rows.tolerance(row, z_max) && !active.contains(&row) {
                let score = s / rows.norm(row);
                if pick.map_or(true, |(_, best)| score < best) {
                    pick = Some((row, score));
                }
            }
        }
        let Some((row, _)) = pick else { break };
        let mut u_new = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iters {
                return Err(QpError::MaxIterations(max_iters));
            }
            let q = active.len();
            let dvec = rows.project(row, &j);
            let (dz, r, free_norm) = directions(&j, &r_mat, q, &dvec);
            // partial step: largest dual move keeping active inequality multipliers ≥ 0
            let mut t1 = f64::INFINITY;
            let mut blocking = None;
            for (k, (&a, &rk)) in active.iter().zip(&r).enumerate() {
                if !matches!(a, Row::Eq(_)) && rk > 0.0 {
                    let ratio = u[k] / rk;
                    if ratio < t1 {
                        t1 = ratio;
                        blocking = Some(k);
                    }
                }
            }
            let primal = free_norm > 1e-12 * dvec.norm().max(1e-300);
            let t2 = if primal {
                let curv = rows.dot(row, &dz);
                if curv > 0.0 {
                    -rows.slack(row, &z) / curv
                } else {
                    f64::INFINITY
                }
            } else {
                f64::INFINITY
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpError::Infeasible);
            }
            if t2.is_finite() {
                z.axpy(t, &dz, 1.0);
            }
            for (uk, rk) in u.iter_mut().zip(&r) {
                *uk -= t * rk;
            }
            u_new += t;
            if t2 <= t1 {
                add(&mut j, &mut r_mat, q, dvec);
                active.push(row);
                u.push(u_new);
                break;
            }
            let l = blocking.expect("finite partial step has a blocking constraint");
            drop(&mut j, &mut r_mat, q, l);
            active.remove(l);
            u.remove(l);
        }
    }

    let mut eq_multipliers = DVector::zeros(p.a_eq.nrows());
    let mut ineq_multipliers = DVector::zeros(p.a_in.nrows());
    let mut bound_multipliers = DVector::zeros(d);
    for (&row, &uk) in active.iter().zip(&u) {
        match row {
            Row::Eq(i) => eq_multipliers[i] = -rows.eq_sign[i] * uk,
            Row::In(i) => ineq_multipliers[i] = uk.max(0.0),
            Row::Lower(i) => bound_multipliers[i] = -uk.max(0.0),
            Row::Upper(i) => bound_multipliers[i] = uk.max(0.0),
        }
    }
    Ok(QpSolution { z, eq_multipliers, ineq_multipliers, bound_multipliers, iterations, regularization })
}
