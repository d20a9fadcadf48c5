//! Receding-horizon loop: solve, apply the first input, shift, and hand over
//! to the terminal controller once the state enters `X_f`.

use std::fmt::Write as _;

use nalgebra::DVector;
use thiserror::Error;

use crate::freqband::FrequencyBand;
use crate::model::{ControlVector, ModelError, ParamPoint, PlantModel, StateVector, DEFAULT_SUBSTEPS};
use crate::nlp::{solve_sqp, NlpSolution, SqpOptions, SqpStatus};
use crate::ocp::{
    transcribe_quasi, transcribe_soft, DecisionLayout, Ocp, OcpError, OcpOptions, OcpSetup, OcpWeights, PolytopicConstraint, ProblemClass,
    TerminalSet,
};
use crate::terminal::{dual_mode_control, DualModeController};

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("measured state is not finite")]
    NonFiniteState,
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarmStart {
    Shift,
    Cold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Mpc,
    Terminal,
    /// Solver failed; the tail of the last successful plan was applied.
    Degraded,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Mpc => "mpc",
            Mode::Terminal => "terminal",
            Mode::Degraded => "degraded",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MpcConfig {
    pub class: ProblemClass,
    /// Controller model; the plant passed to [`run_closed_loop`] may differ.
    pub model: PlantModel,
    pub horizon: usize,
    pub ts: f64,
    pub weights: OcpWeights,
    pub bands: Vec<FrequencyBand>,
    pub constraints: PolytopicConstraint,
    pub terminal_set: TerminalSet,
    pub controller: DualModeController,
    pub warm_start: WarmStart,
    pub max_steps: usize,
    /// Initial guesses for the horizon length tried in order on cold solves.
    pub time_guesses: Vec<f64>,
    /// Steps to keep running after terminal entry; `None` runs to `t_end`.
    pub settle_steps: Option<usize>,
    /// Major-iteration cap per solve; `None` keeps the per-class default.
    pub max_major_iters: Option<usize>,
    pub ocp_options: OcpOptions,
}

impl MpcConfig {
    pub fn new(
        class: ProblemClass,
        model: PlantModel,
        horizon: usize,
        ts: f64,
        terminal_set: TerminalSet,
        controller: DualModeController,
    ) -> Self {
        let (n, m) = (model.state_dim(), model.input_dim());
        Self {
            class,
            horizon,
            ts,
            weights: OcpWeights::zeros(n, m, 0),
            bands: Vec::new(),
            constraints: PolytopicConstraint::empty(n, m),
            terminal_set,
            controller,
            warm_start: WarmStart::Shift,
            max_steps: 10_000,
            time_guesses: vec![1.0, 0.5, 2.0, 3.0],
            settle_steps: None,
            max_major_iters: None,
            ocp_options: OcpOptions::default(),
            model,
        }
    }

    pub fn validate(&self) -> Result<(), MpcError> {
        if !(self.ts > 0.0) {
            return Err(MpcError::InvalidConfig(format!("T_s must be > 0, got {}", self.ts)));
        }
        if self.horizon < crate::spectral::MIN_SAMPLES {
            return Err(MpcError::InvalidConfig(format!(
                "horizon must be >= {} in closed loop, got {}",
                crate::spectral::MIN_SAMPLES,
                self.horizon
            )));
        }
        if self.time_guesses.is_empty() || self.time_guesses.iter().any(|t| !(*t > 0.0)) {
            return Err(MpcError::InvalidConfig("time guesses must be positive and non-empty".into()));
        }
        let m = self.model.input_dim();
        if self.controller.gain.shape() != (m, self.model.state_dim()) {
            return Err(MpcError::InvalidConfig("terminal gain has the wrong shape".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub x: StateVector,
    pub u: ControlVector,
    /// Optimal slacks at the first node; zeros outside MPC mode.
    pub s: DVector<f64>,
    /// Open-loop transition time of the solve.
    pub transition_time: f64,
    pub cost: f64,
    pub predicted_frequencies: Vec<f64>,
    /// Largest band violation of the predicted frequencies over the nodes.
    pub band_violation: Vec<f64>,
    pub status: Option<SqpStatus>,
    pub iters: usize,
    pub mode: Mode,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClosedLoopLog {
    pub rows: Vec<LogRow>,
    /// State after the last applied input.
    pub final_state: Option<StateVector>,
}

fn status_str(s: Option<SqpStatus>) -> &'static str {
    match s {
        None => "none",
        Some(SqpStatus::Converged) => "converged",
        Some(SqpStatus::MaxIters) => "max_iters",
        Some(SqpStatus::QpFailure) => "qp_failure",
        Some(SqpStatus::Diverged) => "diverged",
    }
}

impl ClosedLoopLog {
    /// CSV with columns `t, x…, u…, s…, T, J, mode, status, iters`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let Some(first) = self.rows.first() else {
            return "t,T,J,mode,status,iters\n".into();
        };
        let mut header = vec!["t".to_string()];
        header.extend((0..first.x.len()).map(|i| format!("x{i}")));
        header.extend((0..first.u.len()).map(|i| format!("u{i}")));
        header.extend((0..first.s.len()).map(|i| format!("s{i}")));
        header.extend(["T", "J", "mode", "status", "iters"].map(String::from));
        out.push_str(&header.join(","));
        out.push('\n');
        for r in &self.rows {
            let mut cols: Vec<String> = vec![format!("{:.6}", r.t)];
            cols.extend(r.x.iter().chain(r.u.iter()).chain(r.s.iter()).map(|v| format!("{v:.12e}")));
            cols.push(format!("{:.12e}", r.transition_time));
            cols.push(format!("{:.12e}", r.cost));
            cols.push(r.mode.as_str().into());
            cols.push(status_str(r.status).into());
            cols.push(r.iters.to_string());
            out.push_str(&cols.join(","));
            out.push('\n');
        }
        out
    }

    /// Whitespace-separated `t x… u…` columns with a `#` header.
    pub fn to_plot_data(&self) -> String {
        let mut out = String::from("# t x... u...\n");
        for r in &self.rows {
            let _ = write!(out, "{:.6}", r.t);
            for v in r.x.iter().chain(r.u.iter()) {
                let _ = write!(out, " {v:.9e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn max_slack(&self) -> f64 {
        self.rows.iter().flat_map(|r| r.s.iter().copied()).fold(0.0, f64::max)
    }

    /// Time of the first terminal-mode row.
    pub fn terminal_entry_time(&self) -> Option<f64> {
        self.rows.iter().find(|r| r.mode == Mode::Terminal).map(|r| r.t)
    }
}

/// Last successful plan, for degraded mode and time-aware warm starts.
#[derive(Debug, Clone)]
struct Plan {
    times: Vec<f64>,
    states: Vec<StateVector>,
    inputs: Vec<ControlVector>,
    rho: Vec<ParamPoint>,
    age: usize,
}

impl Plan {
    fn interval_at(&self, t: f64) -> Option<usize> {
        self.times.windows(2).position(|w| t < w[1] - 1e-12)
    }

    /// Input scheduled `t` seconds after the plan was computed.
    fn input_at(&self, t: f64, fallback: &ControlVector) -> ControlVector {
        self.interval_at(t).map_or_else(|| fallback.clone(), |k| self.inputs[k].clone())
    }

    /// Predicted state `t` seconds after the plan was computed.
    fn state_at(&self, model: &PlantModel, t: f64) -> StateVector {
        match self.interval_at(t) {
            Some(k) => {
                let dt = (t - self.times[k]).max(0.0);
                if dt == 0.0 {
                    self.states[k].clone()
                } else {
                    model.rk4_step(&self.states[k], &self.inputs[k], &self.rho[k], dt, DEFAULT_SUBSTEPS)
                }
            }
            None => self.states.last().expect("plan has nodes").clone(),
        }
    }
}

/// Warm start for the time-scaled classes: the previous plan advanced by one
/// sample and resampled onto the new grid, whose first interval is `T_s` and
/// whose remaining intervals split the rest of the old plan evenly.
fn resampled_warm_start(cfg: &MpcConfig, ocp: &Ocp, plan: &Plan, x: &StateVector) -> DVector<f64> {
    let lay = &ocp.layout;
    let big_n = lay.horizon;
    let ts = cfg.ts;
    let total = plan.times.last().copied().unwrap_or(0.0);
    let rest = (total - 2.0 * ts).max(0.0);
    let t_rest = (rest * big_n as f64 / (big_n - 1) as f64).max(cfg.ocp_options.t_min);
    let mut z = DVector::zeros(lay.dim());
    z[lay.t(0)] = big_n as f64 * ts;
    for k in 1..big_n {
        z[lay.t(k)] = t_rest;
    }
    let node_times = ocp.node_times(&z);
    z.rows_mut(lay.x(0).start, lay.n).copy_from(x);
    for k in 1..=big_n {
        let xk = plan.state_at(&cfg.model, ts + node_times[k]);
        z.rows_mut(lay.x(k).start, lay.n).copy_from(&xk);
    }
    for k in 0..big_n {
        let mid = ts + 0.5 * (node_times[k] + node_times[k + 1]);
        z.rows_mut(lay.u(k).start, lay.m).copy_from(&plan.input_at(mid, &cfg.controller.u_f));
    }
    ocp.fill_slacks(&mut z);
    z
}

/// State carried between samples.
#[derive(Debug, Clone, Default)]
pub struct SolverState {
    prev: Option<(DecisionLayout, NlpSolution)>,
    plan: Option<Plan>,
    in_terminal: bool,
    step: usize,
}

impl SolverState {
    pub fn in_terminal(&self) -> bool {
        self.in_terminal
    }
}

/// Shift states, inputs and slacks one interval, duplicate the last one and
/// set all time variables to their mean.
pub fn warm_start_shift(prev: &DVector<f64>, layout: &DecisionLayout) -> DVector<f64> {
    let mut z = prev.clone();
    let big_n = layout.horizon;
    for k in 0..=big_n {
        let src = (k + 1).min(big_n);
        z.rows_mut(layout.x(k).start, layout.n).copy_from(&prev.rows(layout.x(src).start, layout.n));
        if layout.s > 0 {
            z.rows_mut(layout.s(k).start, layout.s).copy_from(&prev.rows(layout.s(src).start, layout.s));
        }
        if k < big_n {
            let src = (k + 1).min(big_n - 1);
            z.rows_mut(layout.u(k).start, layout.m).copy_from(&prev.rows(layout.u(src).start, layout.m));
        }
    }
    if !layout.times.is_empty() {
        let mean = prev.rows_range(layout.times.clone()).mean();
        for i in layout.times.clone() {
            z[i] = mean;
        }
    }
    z
}

fn transcribe(cfg: &MpcConfig, x: &StateVector, rho_schedule: Vec<ParamPoint>) -> Result<Ocp, MpcError> {
    let mut setup = OcpSetup::new(cfg.model.clone(), x.clone(), cfg.terminal_set.clone(), cfg.horizon, cfg.ts);
    setup.constraints = cfg.constraints.clone();
    setup.rho_schedule = rho_schedule;
    setup.closed_loop = true;
    setup.options = cfg.ocp_options.clone();
    let ocp = match cfg.class {
        // in closed loop the first interval is pinned to T_s, which needs the
        // per-interval times; without bands the soft cost reduces to Σ T_k/N
        ProblemClass::Hard => {
            let (n, m) = (cfg.model.state_dim(), cfg.model.input_dim());
            setup.weights = OcpWeights::zeros(n, m, 0);
            transcribe_soft(&setup)?
        }
        ProblemClass::Soft => {
            setup.weights = cfg.weights.clone();
            setup.bands = cfg.bands.clone();
            transcribe_soft(&setup)?
        }
        ProblemClass::Quasi => {
            setup.weights = cfg.weights.clone();
            setup.bands = cfg.bands.clone();
            transcribe_quasi(&setup)?
        }
    };
    Ok(ocp)
}

fn sqp_options(cfg: &MpcConfig, ocp: &Ocp) -> SqpOptions {
    let mut opts = ocp.sqp_options();
    if let Some(cap) = cfg.max_major_iters {
        opts.max_major_iters = cap;
    }
    opts
}

fn usable(sol: &NlpSolution) -> bool {
    sol.z.iter().all(|v| v.is_finite())
        && (sol.status == SqpStatus::Converged || (sol.status == SqpStatus::MaxIters && sol.constraint_violation_inf < 1e-6))
}

/// Cold solves from every horizon-length guess, holding the terminal input;
/// the cheapest usable result wins, otherwise the least infeasible one.
fn multi_start(cfg: &MpcConfig, ocp: &Ocp) -> (NlpSolution, usize) {
    let opts = sqp_options(cfg, ocp);
    let hold = clamp_to_box(&cfg.controller.u_f, &cfg.constraints);
    // the quasi problem has no free horizon length to guess
    let guesses = match cfg.class {
        ProblemClass::Quasi => &cfg.time_guesses[..1],
        _ => &cfg.time_guesses[..],
    };
    let mut iters = 0;
    let mut best: Option<NlpSolution> = None;
    for &t in guesses {
        let sol = solve_sqp(ocp, &ocp.initial_guess(std::slice::from_ref(&hold), t), &opts);
        iters += sol.major_iters;
        let better = match &best {
            None => true,
            Some(b) => match (usable(&sol), usable(b)) {
                (true, true) => sol.cost < b.cost,
                (true, false) => true,
                (false, true) => false,
                (false, false) => sol.constraint_violation_inf < b.constraint_violation_inf,
            },
        };
        if better {
            best = Some(sol);
        }
    }
    (best.expect("time_guesses is non-empty"), iters)
}

fn clamp_to_box(u: &ControlVector, constraints: &PolytopicConstraint) -> ControlVector {
    let (lo, hi) = constraints.input_box();
    DVector::from_fn(u.len(), |j, _| u[j].clamp(lo[j], hi[j]))
}

/// One sample: terminal law inside `X_f`, otherwise a warm-started solve.
pub fn mpc_step(cfg: &MpcConfig, state: &mut SolverState, x: &StateVector) -> Result<(ControlVector, LogRow), MpcError> {
    if !x.iter().all(|v| v.is_finite()) {
        return Err(MpcError::NonFiniteState);
    }
    let t = state.step as f64 * cfg.ts;
    state.step += 1;
    let s_dim = match cfg.class {
        ProblemClass::Hard => 0,
        _ => cfg.bands.len(),
    };
    if state.in_terminal || cfg.terminal_set.contains(x) {
        // once entered, stay in terminal mode
        state.in_terminal = true;
        let u = clamp_to_box(&dual_mode_control(&cfg.controller, x, 0), &cfg.constraints);
        let row = LogRow {
            t,
            x: x.clone(),
            u: u.clone(),
            s: DVector::zeros(s_dim),
            transition_time: 0.0,
            cost: 0.0,
            predicted_frequencies: Vec::new(),
            band_violation: Vec::new(),
            status: None,
            iters: 0,
            mode: Mode::Terminal,
        };
        return Ok((u, row));
    }

    let rho0 = cfg.model.param_at(x);
    let mut rho = vec![rho0];
    if let Some((lay, sol)) = &state.prev {
        rho.extend((2..=lay.horizon).map(|k| cfg.model.param_at(&lay.state(&sol.z, k))));
    }
    let ocp = transcribe(cfg, x, rho)?;
    let opts = sqp_options(cfg, &ocp);
    let mut total_iters = 0;
    let warm = match (&state.prev, &state.plan, cfg.warm_start) {
        (Some((lay, prev)), Some(plan), WarmStart::Shift) if *lay == ocp.layout => {
            let z0 = if cfg.class == ProblemClass::Quasi {
                let mut z0 = warm_start_shift(&prev.z, &ocp.layout);
                z0.rows_mut(ocp.layout.x(0).start, ocp.layout.n).copy_from(x);
                ocp.fill_slacks(&mut z0);
                z0
            } else {
                resampled_warm_start(cfg, &ocp, plan, x)
            };
            let sol = solve_sqp(&ocp, &z0, &opts);
            total_iters += sol.major_iters;
            usable(&sol).then_some(sol)
        }
        _ => None,
    };
    let sol = match warm {
        Some(sol) => sol,
        None => {
            let (sol, iters) = multi_start(cfg, &ocp);
            total_iters += iters;
            sol
        }
    };

    let fallback = cfg.controller.u_f.clone();
    if usable(&sol) {
        let lay = &ocp.layout;
        let u = clamp_to_box(&lay.input(&sol.z, 0), &cfg.constraints);
        let freqs = ocp.predicted_frequencies(&sol.z);
        let row = LogRow {
            t,
            x: x.clone(),
            u: u.clone(),
            s: if lay.s > 0 { lay.slack(&sol.z, 0) } else { DVector::zeros(s_dim) },
            transition_time: ocp.transition_time(&sol.z),
            cost: sol.cost,
            band_violation: ocp.band_violation(&freqs),
            predicted_frequencies: freqs,
            status: Some(sol.status),
            iters: total_iters,
            mode: Mode::Mpc,
        };
        state.plan = Some(Plan {
            times: ocp.node_times(&sol.z),
            states: (0..=lay.horizon).map(|k| lay.state(&sol.z, k)).collect(),
            inputs: (0..lay.horizon).map(|k| lay.input(&sol.z, k)).collect(),
            rho: {
                let sched = &ocp.setup.rho_schedule;
                (0..lay.horizon).map(|k| sched[k.min(sched.len() - 1)]).collect()
            },
            age: 0,
        });
        state.prev = Some((ocp.layout.clone(), sol));
        Ok((u, row))
    } else {
        log::warn!("step {}: solver returned {:?}; applying the previous plan", state.step - 1, sol.status);
        let u = match state.plan.as_mut() {
            Some(plan) => {
                plan.age += 1;
                plan.input_at(plan.age as f64 * cfg.ts, &fallback)
            }
            None => fallback,
        };
        let u = clamp_to_box(&u, &cfg.constraints);
        let row = LogRow {
            t,
            x: x.clone(),
            u: u.clone(),
            s: DVector::zeros(s_dim),
            transition_time: f64::NAN,
            cost: f64::NAN,
            predicted_frequencies: Vec::new(),
            band_violation: Vec::new(),
            status: Some(sol.status),
            iters: total_iters,
            mode: Mode::Degraded,
        };
        Ok((u, row))
    }
}

/// Closed loop with a perfect state measurement.
pub fn run_closed_loop(plant: &PlantModel, cfg: &MpcConfig, x0: &StateVector, t_end: f64) -> Result<ClosedLoopLog, MpcError> {
    run_closed_loop_with(plant, cfg, x0, t_end, |x, _| x.clone())
}

/// Closed loop where `measure(x, step)` produces the state fed to the controller.
pub fn run_closed_loop_with<F>(
    plant: &PlantModel,
    cfg: &MpcConfig,
    x0: &StateVector,
    t_end: f64,
    mut measure: F,
) -> Result<ClosedLoopLog, MpcError>
where
    F: FnMut(&StateVector, usize) -> StateVector,
{
    cfg.validate()?;
    if !(t_end >= cfg.ts) {
        return Err(MpcError::InvalidConfig(format!("t_end must be >= T_s, got {t_end}")));
    }
    let steps = ((t_end / cfg.ts).round() as usize).min(cfg.max_steps);
    let mut state = SolverState::default();
    let mut log = ClosedLoopLog::default();
    let mut x = x0.clone();
    let mut settled = 0;
    for k in 0..steps {
        let (u, row) = mpc_step(cfg, &mut state, &measure(&x, k))?;
        log.rows.push(row);
        let traj = plant.integrate_rk4(&x, std::slice::from_ref(&u), &[plant.param_at(&x)], cfg.ts, DEFAULT_SUBSTEPS)?;
        x = traj.states.last().expect("one step").clone();
        if state.in_terminal {
            settled += 1;
            if cfg.settle_steps.is_some_and(|s| settled > s) {
                break;
            }
        }
    }
    log.final_state = Some(x);
    Ok(log)
}
