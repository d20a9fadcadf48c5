//! Admissible frequency bands over the parameter variation `ϱ = (m_l, y_l)`.
//!
//! Natural frequencies are the roots `Ω` of a characteristic equation
//! `G(m_l, y_l, Ω) = 0`. Sampling those roots on a grid gives a resonance
//! hypersurface per branch, which is approximated by a bivariate polynomial
//! `P_p`. Bands are then `P_p ± ξ`, or a fixed one-sided lower bound.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::{BeamModes, CraneParams, ParamPoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BandError {
    #[error("need at least {needed} samples for degree {degree}, got {got}")]
    TooFewSamples { degree: usize, needed: usize, got: usize },
    #[error("rank-deficient design for degree {degree}: sample grid is degenerate")]
    RankDeficient { degree: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

type Evaluator = dyn Fn(f64, f64, f64) -> f64 + Send + Sync;

/// Scan interval for natural frequencies in rad/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OmegaSearch {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl OmegaSearch {
    /// Bracketing step defaults to 1/2000 of the interval.
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi, step: (hi - lo) / 2000.0 }
    }
}

/// `G(m_l, y_l, Ω)` together with its parameter domain and search interval.
#[derive(Clone)]
pub struct CharacteristicFn {
    evaluator: Arc<Evaluator>,
    pub domain: (ParamPoint, ParamPoint),
    pub search: OmegaSearch,
}

impl fmt::Debug for CharacteristicFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CharacteristicFn").field("domain", &self.domain).field("search", &self.search).finish_non_exhaustive()
    }
}

impl CharacteristicFn {
    pub fn new<F>(evaluator: F, domain: (ParamPoint, ParamPoint), search: OmegaSearch) -> Self
    where
        F: Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
    {
        Self { evaluator: Arc::new(evaluator), domain, search }
    }

    pub fn eval(&self, m_l: f64, y_l: f64, omega: f64) -> f64 {
        (self.evaluator)(m_l, y_l, omega)
    }

    /// Clamped-free Euler-Bernoulli beam with a lumped tip mass.
    ///
    /// `G = 1 + cos βL cosh βL + μ βL (cos βL sinh βL − sin βL cosh βL)` with
    /// `β⁴ = Ω² ρA / EI` and tip-mass ratio `μ = m_tip / (ρAL)`. The lift mass
    /// enters as `m_tip = m_t + m_l ψ₁(y_l)²`, its kinetic energy seen by the
    /// first mode shape normalised to `ψ₁(L) = 1`.
    pub fn cantilever(p: &CraneParams) -> Self {
        let modes = BeamModes::new(p);
        let rho_a = p.density * p.area;
        let (l, ei, m_t) = (p.length, p.ei, p.m_t);
        let domain = (ParamPoint::new(0.5 * p.m_l, 0.0), ParamPoint::new(2.0 * p.m_l, p.length));
        let evaluator = move |m_l: f64, y_l: f64, omega: f64| {
            let psi = modes.psi(0, y_l);
            let mu = (m_t + m_l * psi * psi) / (rho_a * l);
            let bl = (omega * omega * rho_a / ei).sqrt().sqrt() * l;
            let (c, s, ch, sh) = (bl.cos(), bl.sin(), bl.cosh(), bl.sinh());
            1.0 + c * ch + mu * bl * (c * sh - s * ch)
        };
        Self::new(evaluator, domain, OmegaSearch::new(0.1, 400.0))
    }
}

/// One root of `G` at a grid node; `omega` in rad/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceSample {
    pub m_l: f64,
    pub y_l: f64,
    pub omega: f64,
    pub branch: usize,
}

impl SurfaceSample {
    pub fn in_hz(self) -> Self {
        Self { omega: self.omega / (2.0 * PI), ..self }
    }
}

/// Bisection on a sign-changing bracket down to adjacent floating-point values.
fn bisect(g: impl Fn(f64) -> f64, mut a: f64, mut b: f64, mut ga: f64) -> f64 {
    let mut gb = g(b);
    loop {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        let gm = g(mid);
        if gm == 0.0 {
            return mid;
        }
        if (gm < 0.0) == (ga < 0.0) {
            a = mid;
            ga = gm;
        } else {
            b = mid;
            gb = gm;
        }
    }
    if ga.abs() <= gb.abs() {
        a
    } else {
        b
    }
}

/// Roots of `G(m_l, y_l, ·)` in ascending order, at most `max_branches`.
pub fn find_roots(g: &CharacteristicFn, m_l: f64, y_l: f64, max_branches: usize) -> Result<Vec<SurfaceSample>, BandError> {
    let OmegaSearch { lo, hi, step } = g.search;
    if !(step > 0.0) || !(hi > lo) {
        return Err(BandError::InvalidArgument(format!("bad search interval [{lo}, {hi}] step {step}")));
    }
    let f = |w: f64| g.eval(m_l, y_l, w);
    let mut roots = Vec::new();
    let steps = ((hi - lo) / step).ceil() as usize;
    let mut a = lo;
    let mut ga = f(a);
    for k in 1..=steps {
        if roots.len() >= max_branches {
            break;
        }
        let b = (lo + k as f64 * step).min(hi);
        let gb = f(b);
        let omega = if ga == 0.0 {
            Some(a)
        } else if gb != 0.0 && (ga < 0.0) != (gb < 0.0) {
            Some(bisect(f, a, b, ga))
        } else {
            None
        };
        if let Some(omega) = omega {
            roots.push(SurfaceSample { m_l, y_l, omega, branch: roots.len() });
        }
        a = b;
        ga = gb;
    }
    if ga == 0.0 && roots.len() < max_branches && roots.last().map_or(true, |r| r.omega < a) {
        roots.push(SurfaceSample { m_l, y_l, omega: a, branch: roots.len() });
    }
    Ok(roots)
}

/// Result of sampling one branch over a grid.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HypersurfaceSamples {
    pub samples: Vec<SurfaceSample>,
    /// Grid nodes `(m_l, y_l)` where the branch was not found.
    pub missing: Vec<(f64, f64)>,
}

/// Sample branch `branch` at every node of the grid `masses × positions`.
pub fn sample_hypersurface(
    g: &CharacteristicFn,
    masses: &[f64],
    positions: &[f64],
    branch: usize,
) -> Result<HypersurfaceSamples, BandError> {
    let mut out = HypersurfaceSamples::default();
    for &m in masses {
        for &y in positions {
            match find_roots(g, m, y, branch + 1)?.get(branch) {
                Some(s) => out.samples.push(*s),
                None => out.missing.push((m, y)),
            }
        }
    }
    Ok(out)
}

/// `n` evenly spaced points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Bivariate polynomial `P_p(m, y) = Σ_{i+j≤p} c_ij m^i y^j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolySurface {
    pub degree: usize,
    /// `coeffs[i][j]` multiplies `m^i y^j`; zero when `i + j > p`.
    pub coeffs: Vec<Vec<f64>>,
    pub fit_rms: f64,
    /// Bounding box of the fitted samples.
    pub domain: (ParamPoint, ParamPoint),
}

fn monomials(p: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..=p).flat_map(move |total| (0..=total).map(move |i| (i, total - i)))
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

impl PolySurface {
    /// Constant surface, handy for fixed-width bands.
    pub fn constant(value: f64, domain: (ParamPoint, ParamPoint)) -> Self {
        Self { degree: 0, coeffs: vec![vec![value]], fit_rms: 0.0, domain }
    }

    pub fn eval(&self, m: f64, y: f64) -> f64 {
        // Horner in y inside Horner in m
        self.coeffs.iter().rev().fold(0.0, |acc, row| acc * m + row.iter().rev().fold(0.0, |a, c| a * y + c))
    }

    /// `(∂P/∂m, ∂P/∂y)`.
    pub fn gradient(&self, m: f64, y: f64) -> (f64, f64) {
        let mut dm = 0.0;
        let mut dy = 0.0;
        for (i, row) in self.coeffs.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                if i > 0 {
                    dm += c * i as f64 * m.powi(i as i32 - 1) * y.powi(j as i32);
                }
                if j > 0 {
                    dy += c * j as f64 * m.powi(i as i32) * y.powi(j as i32 - 1);
                }
            }
        }
        (dm, dy)
    }
}

/// Least-squares fit of a total-degree-`p` polynomial to `(m_l, y_l) ↦ omega`.
///
/// Inputs are scaled affinely onto `[-1, 1]²` and the design solved by SVD;
/// the coefficients are then expanded back to raw monomials. Values are fitted
/// in whatever unit the samples carry.
pub fn fit_poly_surface(samples: &[SurfaceSample], p: usize) -> Result<PolySurface, BandError> {
    let terms: Vec<(usize, usize)> = monomials(p).collect();
    if samples.len() < terms.len() {
        return Err(BandError::TooFewSamples { degree: p, needed: terms.len(), got: samples.len() });
    }
    let bounds = |sel: fn(&SurfaceSample) -> f64| {
        samples.iter().map(sel).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (m_lo, m_hi) = bounds(|s| s.m_l);
    let (y_lo, y_hi) = bounds(|s| s.y_l);
    let affine = |lo: f64, hi: f64| {
        let half = 0.5 * (hi - lo);
        let half = if half > 0.0 { half } else { 1.0 };
        (0.5 * (hi + lo), half)
    };
    let (mc, mh) = affine(m_lo, m_hi);
    let (yc, yh) = affine(y_lo, y_hi);

    let design = DMatrix::from_fn(samples.len(), terms.len(), |r, c| {
        let (i, j) = terms[c];
        let s = &samples[r];
        ((s.m_l - mc) / mh).powi(i as i32) * ((s.y_l - yc) / yh).powi(j as i32)
    });
    let rhs = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.omega));
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= 1e-10 * smax {
        return Err(BandError::RankDeficient { degree: p });
    }
    let scaled = svd.solve(&rhs, 0.0).map_err(|_| BandError::RankDeficient { degree: p })?;

    // ((m − mc)/mh)^i = Σ_a C(i,a) m^a (−mc)^{i−a} / mh^i, likewise for y
    let mut coeffs = vec![vec![0.0; p + 1]; p + 1];
    for (t, &(i, j)) in terms.iter().enumerate() {
        let d = scaled[t] / (mh.powi(i as i32) * yh.powi(j as i32));
        for a in 0..=i {
            let cm = binomial(i, a) * (-mc).powi((i - a) as i32);
            for b in 0..=j {
                coeffs[a][b] += d * cm * binomial(j, b) * (-yc).powi((j - b) as i32);
            }
        }
    }
    let mut surface = PolySurface { degree: p, coeffs, fit_rms: 0.0, domain: (ParamPoint::new(m_lo, y_lo), ParamPoint::new(m_hi, y_hi)) };
    let sq: f64 = samples.iter().map(|s| (surface.eval(s.m_l, s.y_l) - s.omega).powi(2)).sum();
    surface.fit_rms = (sq / samples.len() as f64).sqrt();
    Ok(surface)
}

/// Admissible frequency band in Hz.
#[derive(Debug, Clone, PartialEq)]
pub enum FrequencyBand {
    /// `[P_p(ϱ) − ξ, P_p(ϱ) + ξ]`.
    Surface { poly: PolySurface, xi: f64 },
    /// `[ω, +∞)`, time invariant.
    FixedLower { hz: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandValue {
    pub lower: f64,
    /// `+∞` for one-sided bands.
    pub upper: f64,
    /// Whether `ϱ` had to be clamped into the surface domain.
    pub clamped: bool,
    /// `(∂/∂m_l, ∂/∂y_l)` of both bounds; zero for fixed bands and when clamped
    /// in that coordinate.
    pub gradient: (f64, f64),
}

impl FrequencyBand {
    pub fn is_one_sided(&self) -> bool {
        matches!(self, FrequencyBand::FixedLower { .. })
    }
}

/// Evaluate the band boundaries at `rho`.
pub fn eval_band(band: &FrequencyBand, rho: &ParamPoint) -> BandValue {
    match band {
        FrequencyBand::FixedLower { hz } => BandValue { lower: *hz, upper: f64::INFINITY, clamped: false, gradient: (0.0, 0.0) },
        FrequencyBand::Surface { poly, xi } => {
            let (lo, hi) = poly.domain;
            let (r, clamped) = rho.clamp_to(&lo, &hi);
            let center = poly.eval(r.mass, r.position);
            let (mut gm, mut gy) = poly.gradient(r.mass, r.position);
            if r.mass != rho.mass {
                gm = 0.0;
            }
            if r.position != rho.position {
                gy = 0.0;
            }
            BandValue { lower: center - xi, upper: center + xi, clamped, gradient: (gm, gy) }
        }
    }
}

/// Sample, convert to Hz and fit one branch of `g` over a `grid_m × grid_y` grid.
pub fn build_surface_band(
    g: &CharacteristicFn,
    grid_m: usize,
    grid_y: usize,
    branch: usize,
    degree: usize,
    xi: f64,
) -> Result<FrequencyBand, BandError> {
    if !(xi >= 0.0) {
        return Err(BandError::InvalidArgument(format!("xi must be >= 0, got {xi}")));
    }
    let (lo, hi) = g.domain;
    let masses = linspace(lo.mass, hi.mass, grid_m);
    let positions = linspace(lo.position, hi.position, grid_y);
    let sampled = sample_hypersurface(g, &masses, &positions, branch)?;
    let hz: Vec<SurfaceSample> = sampled.samples.into_iter().map(SurfaceSample::in_hz).collect();
    let poly = fit_poly_surface(&hz, degree)?;
    Ok(FrequencyBand::Surface { poly, xi })
}
