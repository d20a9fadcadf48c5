use nalgebra::{DMatrix, DVector};

use toc_nmpc::freqband::FrequencyBand;
use toc_nmpc::model::PlantModel;
use toc_nmpc::mpc::{mpc_step, run_closed_loop, warm_start_shift, ClosedLoopLog, Mode, MpcConfig, SolverState};
use toc_nmpc::nlp::{solve_sqp, NlpProblem, SqpStatus};
use toc_nmpc::ocp::{transcribe_quasi, OcpSetup, OcpWeights, PolytopicConstraint, ProblemClass, TerminalSet};
use toc_nmpc::terminal::{solve_dare, terminal_set_or_point, AlphaSearch, DualModeController, TerminalDesign};

const TS: f64 = 0.02;

fn two_dof() -> PlantModel {
    PlantModel::two_dof(1000.0, 1000.0, 1000.0, 1.0, 1.0)
}

fn two_dof_box() -> PolytopicConstraint {
    let inf = f64::INFINITY;
    PolytopicConstraint::from_boxes(&[-1.0, -1.0, -inf, -inf], &[1.0, 1.0, inf, inf], &[-200.0; 2], &[200.0; 2])
}

fn quasi_weights() -> OcpWeights {
    let mut w = OcpWeights::zeros(4, 2, 2);
    w.s = DMatrix::identity(2, 2) * 2e7;
    w.p_slack = DMatrix::identity(2, 2) * 2e7;
    w.q = DMatrix::from_diagonal(&DVector::from_vec(vec![2000.0, 2000.0, 10.0, 10.0]));
    w.r = DMatrix::identity(2, 2);
    w.f_time = 1e5;
    w
}

fn two_dof_quasi() -> MpcConfig {
    let model = two_dof();
    let (x_f, u_f) = (DVector::zeros(4), DVector::zeros(2));
    let rho = model.nominal_param();
    let (a, b) = model.linearize_discrete(&x_f, &u_f, &rho, TS).unwrap();
    let ric = solve_dare(&a, &b, &quasi_weights().q, &DMatrix::identity(2, 2), 1e-9).unwrap();
    let z = two_dof_box();
    let design = TerminalDesign { model: &model, ric: &ric, x_f: &x_f, u_f: &u_f, rho, ts: TS, constraints: &z };
    let (set, _) = terminal_set_or_point(&design, &AlphaSearch::default());
    let ctl = DualModeController::from_riccati(&ric, x_f, u_f);
    let mut cfg = MpcConfig::new(ProblemClass::Quasi, model, 17, TS, set, ctl);
    cfg.constraints = z;
    cfg.bands = vec![FrequencyBand::FixedLower { hz: 5.033 }, FrequencyBand::FixedLower { hz: 8.717 }];
    cfg.weights = quasi_weights();
    cfg
}

fn x0() -> DVector<f64> {
    DVector::from_vec(vec![1.0, -1.0, 0.0, 0.0])
}

fn assert_constraints(cfg: &MpcConfig, log: &ClosedLoopLog) {
    let (lo, hi) = cfg.constraints.input_box();
    for row in &log.rows {
        for j in 0..row.u.len() {
            assert!(row.u[j] >= lo[j] - 1e-8 && row.u[j] <= hi[j] + 1e-8, "t = {}: u = {}", row.t, row.u);
        }
        if let Some((i, v)) = cfg.constraints.state_violation(&row.x, 1e-6) {
            panic!("t = {}: state row {i} violated by {v}", row.t);
        }
    }
}

/// `xᵀ K x / 2 + vᵀ v / 2` of the unit-mass chain.
fn energy(x: &DVector<f64>) -> f64 {
    let (x1, x2) = (x[0], x[1]);
    0.5 * (2000.0 * x1 * x1 - 2000.0 * x1 * x2 + 2000.0 * x2 * x2) + 0.5 * (x[2] * x[2] + x[3] * x[3])
}

#[test]
fn quasi_two_dof_respects_constraints_and_damps() {
    let cfg = two_dof_quasi();
    let log = run_closed_loop(&cfg.model, &cfg, &x0(), 2.0).unwrap();
    assert_constraints(&cfg, &log);
    assert!(log.rows.iter().all(|r| r.mode != Mode::Degraded));
    let e_end = energy(log.final_state.as_ref().unwrap());
    assert!(e_end < 0.5 * energy(&x0()), "{e_end} vs {}", energy(&x0()));
    for (k, row) in log.rows.iter().enumerate() {
        assert!((row.t - k as f64 * TS).abs() < 1e-12);
    }
}

#[test]
fn slacks_are_active_only_on_band_violation() {
    let cfg = two_dof_quasi();
    let log = run_closed_loop(&cfg.model, &cfg, &x0(), 1.0).unwrap();
    for row in &log.rows {
        assert!(row.s.iter().all(|&s| s >= -1e-9), "negative slack at t = {}", row.t);
        for (j, &s) in row.s.iter().enumerate() {
            if s > 1e-6 {
                assert!(row.band_violation[j] > 0.0, "t = {}: slack {s} on band {j} without violation", row.t);
            }
        }
    }
}

#[test]
fn shifted_quasi_solution_keeps_matching_residual() {
    let cfg = two_dof_quasi();
    let mut setup = OcpSetup::new(cfg.model.clone(), x0(), cfg.terminal_set.clone(), 17, TS);
    setup.constraints = cfg.constraints.clone();
    setup.weights = cfg.weights.clone();
    setup.bands = cfg.bands.clone();
    setup.closed_loop = true;
    let ocp = transcribe_quasi(&setup).unwrap();
    let sol = solve_sqp(&ocp, &ocp.initial_guess(&[DVector::zeros(2)], 0.0), &ocp.sqp_options());
    assert_eq!(sol.status, SqpStatus::Converged);

    // the plant is the model, so the measured state is the predicted x_1
    let lay = &ocp.layout;
    let x1 = cfg.model.rk4_step(&x0(), &lay.input(&sol.z, 0), &cfg.model.nominal_param(), TS, 4);
    assert!((&x1 - lay.state(&sol.z, 1)).amax() < 1e-6);
    setup.x0 = x1;
    let next = transcribe_quasi(&setup).unwrap();
    let z = warm_start_shift(&sol.z, &next.layout);
    let eq = next.eq_constraints(&z);
    // the appended last interval duplicates the tail and is not a shooting result
    let shifted = (lay.horizon - 1) * lay.n;
    let residual = eq.rows(0, shifted).amax();
    assert!(residual < 1e-6, "matching residual {residual}");
}

/// Soft regression check: the open-loop cost trades position against velocity
/// at twice the vibration frequency, so single steps may rise; the envelope
/// over half a period (3 samples) must not.
#[test]
fn quasi_open_loop_cost_decays() {
    let cfg = two_dof_quasi();
    let mut state = SolverState::default();
    let mut x = x0();
    let mut costs = Vec::new();
    for _ in 0..60 {
        let (u, row) = mpc_step(&cfg, &mut state, &x).unwrap();
        if row.mode != Mode::Mpc {
            break;
        }
        costs.push(row.cost);
        x = cfg.model.rk4_step(&x, &u, &cfg.model.nominal_param(), TS, 4);
    }
    assert!(costs.len() > 9);
    let rises = costs.windows(2).skip(3).filter(|w| w[1] > w[0] * (1.0 + 1e-6)).count();
    if rises > 0 {
        eprintln!("quasi cost: {rises} single-step rises after step 3");
    }
    let envelope: Vec<f64> = costs[3..].chunks_exact(3).map(|c| c.iter().cloned().fold(f64::MIN, f64::max)).collect();
    assert!(envelope.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-6)), "envelope {envelope:?}");
}

#[test]
fn double_integrator_closed_loop_respects_input_box() {
    let model = PlantModel::double_integrator();
    let ts = 0.05;
    let (a, b) = model.linearize_discrete(&DVector::zeros(2), &DVector::zeros(1), &model.nominal_param(), ts).unwrap();
    let ric = solve_dare(&a, &b, &DMatrix::identity(2, 2), &DMatrix::identity(1, 1), 1e-12).unwrap();
    let ctl = DualModeController::from_riccati(&ric, DVector::zeros(2), DVector::zeros(1));
    let mut cfg = MpcConfig::new(ProblemClass::Hard, model.clone(), 40, ts, TerminalSet::Point(DVector::zeros(2)), ctl);
    cfg.constraints = PolytopicConstraint::from_boxes(&[f64::NEG_INFINITY, -0.8], &[f64::INFINITY, 0.8], &[-1.0], &[1.0]);
    cfg.time_guesses = vec![2.0, 1.0, 3.0];
    let log = run_closed_loop(&model, &cfg, &DVector::from_vec(vec![-1.0, 0.0]), 2.5).unwrap();
    assert_constraints(&cfg, &log);
    assert!(log.final_state.as_ref().unwrap().amax() < 2e-2);
}
