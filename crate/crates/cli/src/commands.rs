//! Pipelines behind the subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use toc_nmpc::freqband::{fit_poly_surface, linspace, sample_hypersurface, CharacteristicFn, PolySurface, SurfaceSample};
use toc_nmpc::model::{CraneParams, ParamPoint};
use toc_nmpc::mpc::{run_closed_loop_with, ClosedLoopLog, Mode};
use toc_nmpc::nlp::{solve_sqp, NlpSolution, SqpStatus};
use toc_nmpc::ocp::{transcribe_hard_time_optimal, transcribe_quasi, transcribe_soft, Ocp, ProblemClass};
use toc_nmpc::spectral::welch_psd;

use crate::io::{self, fmt_f64, Table};
use crate::scenario::Scenario;

pub const LOG_FILE: &str = "log.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const PLOT_FILE: &str = "plot.dat";

/// `key = value` lines in insertion order.
#[derive(Debug, Default)]
pub struct Summary(Vec<(String, String)>);

impl Summary {
    pub fn add(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.0.push((key.to_string(), value.to_string()));
        self
    }

    pub fn render(&self) -> String {
        self.0.iter().fold(String::new(), |mut out, (k, v)| {
            let _ = writeln!(out, "{k} = {v}");
            out
        })
    }
}

fn class_name(c: ProblemClass) -> &'static str {
    match c {
        ProblemClass::Hard => "hard",
        ProblemClass::Soft => "soft",
        ProblemClass::Quasi => "quasi",
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), fmt_f64)
}

fn write_file(dir: &Path, name: &str, text: &str) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub dir: PathBuf,
    /// Samples where the solver failed and the previous plan was applied.
    pub failed_solves: usize,
}

/// Closed loop of `scn`; writes the log, summary and plot data into `out`.
pub fn simulate(scn: &Scenario, out: &Path, t_end: Option<f64>) -> Result<RunOutcome> {
    let start = Instant::now();
    let cfg = scn.mpc_config()?;
    let t_end = t_end.unwrap_or(scn.t_end);
    let mut rng = ChaCha8Rng::seed_from_u64(scn.seed);
    let noise = Normal::new(0.0, scn.noise_std).context("noise.std")?;
    let noisy = scn.noise_std > 0.0;
    let log = run_closed_loop_with(
        &cfg.model,
        &cfg,
        &scn.x0,
        t_end,
        |x, _| {
            if noisy {
                x.map(|v| v + noise.sample(&mut rng))
            } else {
                x.clone()
            }
        },
    )
    .with_context(|| format!("closed loop of {}", scn.name))?;

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_file(out, LOG_FILE, &log.to_csv())?;
    write_file(out, PLOT_FILE, &log.to_plot_data())?;
    let summary = closed_loop_summary(scn, &log, t_end, start.elapsed().as_secs_f64());
    write_file(out, SUMMARY_FILE, &summary.render())?;
    let failed_solves = log.rows.iter().filter(|r| r.mode == Mode::Degraded).count();
    Ok(RunOutcome { dir: out.to_path_buf(), failed_solves })
}

fn closed_loop_summary(scn: &Scenario, log: &ClosedLoopLog, t_end: f64, wall: f64) -> Summary {
    let solves: Vec<_> = log.rows.iter().filter(|r| r.status.is_some()).collect();
    let mpc: Vec<_> = log.rows.iter().filter(|r| r.mode == Mode::Mpc).collect();
    let count = |s: SqpStatus| solves.iter().filter(|r| r.status == Some(s)).count();
    let iters: usize = solves.iter().map(|r| r.iters).sum();
    let err = log.final_state.as_ref().map(|x| (x - &scn.x_f).amax());
    let mut s = Summary::default();
    s.add("scenario", &scn.name)
        .add("model", scn.model.name())
        .add("class", class_name(scn.class))
        .add("t_end", fmt_f64(t_end))
        .add("steps", log.rows.len())
        .add("transition_time", fmt_opt(mpc.first().map(|r| r.transition_time)))
        .add("final_transition_time", fmt_opt(mpc.last().map(|r| r.transition_time)))
        .add("terminal_entry_time", fmt_opt(log.terminal_entry_time()))
        .add("final_cost", fmt_opt(mpc.last().map(|r| r.cost)))
        .add("max_slack", fmt_f64(log.max_slack()))
        .add("final_state_error", fmt_opt(err))
        .add("solves", solves.len())
        .add("converged", count(SqpStatus::Converged))
        .add("max_iters", count(SqpStatus::MaxIters))
        .add("qp_failure", count(SqpStatus::QpFailure))
        .add("diverged", count(SqpStatus::Diverged))
        .add("degraded_steps", log.rows.iter().filter(|r| r.mode == Mode::Degraded).count())
        .add("major_iterations", iters)
        .add("wall_time_s", format!("{wall:.3}"));
    s
}

/// Scenario files of `dir` in name order.
pub fn batch_scenarios(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "scn"));
    files.sort();
    if files.is_empty() {
        bail!("no .scn files in {}", dir.display());
    }
    Ok(files)
}

fn transcribe(scn: &Scenario) -> Result<(Ocp, toc_nmpc::mpc::MpcConfig)> {
    let cfg = scn.mpc_config()?;
    let setup = scn.ocp_setup(&cfg);
    let ocp = match scn.class {
        ProblemClass::Hard => transcribe_hard_time_optimal(&setup)?,
        ProblemClass::Soft => transcribe_soft(&setup)?,
        ProblemClass::Quasi => transcribe_quasi(&setup)?,
    };
    Ok((ocp, cfg))
}

fn usable(sol: &NlpSolution) -> bool {
    sol.status == SqpStatus::Converged || (sol.status == SqpStatus::MaxIters && sol.constraint_violation_inf < 1e-6)
}

/// Cold starts from every horizon-length guess; the cheapest usable wins.
fn solve_multi_start(scn: &Scenario, ocp: &Ocp, cfg: &toc_nmpc::mpc::MpcConfig) -> NlpSolution {
    let mut opts = ocp.sqp_options();
    if let Some(cap) = scn.max_iters {
        opts.max_major_iters = cap;
    }
    let (lo, hi) = cfg.constraints.input_box();
    let u = &cfg.controller.u_f;
    let hold = DVector::from_fn(u.len(), |j, _| u[j].clamp(lo[j], hi[j]));
    let guesses = match scn.class {
        ProblemClass::Quasi => &cfg.time_guesses[..1],
        _ => &cfg.time_guesses[..],
    };
    let mut best: Option<NlpSolution> = None;
    for &t in guesses {
        let sol = solve_sqp(ocp, &ocp.initial_guess(std::slice::from_ref(&hold), t), &opts);
        log::info!("guess T = {t}: {:?} after {} iterations, cost {}", sol.status, sol.major_iters, sol.cost);
        let better = best.as_ref().is_none_or(|b| match (usable(&sol), usable(b)) {
            (true, true) => sol.cost < b.cost,
            (new_ok, old_ok) if new_ok != old_ok => new_ok,
            _ => sol.constraint_violation_inf < b.constraint_violation_inf,
        });
        if better {
            best = Some(sol);
        }
    }
    best.expect("time guesses are non-empty")
}

/// One open-loop solve from `x0`; returns whether the solution is usable.
pub fn solve_ocp(scn: &Scenario, out: &Path) -> Result<bool> {
    let start = Instant::now();
    let (ocp, cfg) = transcribe(scn)?;
    let sol = solve_multi_start(scn, &ocp, &cfg);
    let lay = &ocp.layout;

    let mut header = vec!["t".to_string()];
    header.extend((0..lay.n).map(|i| format!("x{i}")));
    header.extend((0..lay.m).map(|i| format!("u{i}")));
    header.extend((0..lay.s).map(|i| format!("s{i}")));
    let mut traj = Table::new(header);
    let times = ocp.node_times(&sol.z);
    for (k, &t) in times.iter().enumerate() {
        // the last node holds the final input and slack
        let j = k.min(lay.horizon - 1);
        let mut row = vec![t];
        row.extend(lay.state(&sol.z, k).iter());
        row.extend(lay.input(&sol.z, j).iter());
        if lay.s > 0 {
            row.extend(lay.slack(&sol.z, j).iter());
        }
        traj.rows.push(row);
    }
    let plot = traj.rows.iter().fold(format!("# {}\n", traj.headers.join(" ")), |mut acc, r| {
        let cols: Vec<String> = r.iter().map(|v| format!("{v:.9e}")).collect();
        let _ = writeln!(acc, "{}", cols.join(" "));
        acc
    });
    let max_slack = lay.slacks.clone().map(|i| sol.z[i]).fold(0.0, f64::max);
    let x_n = lay.state(&sol.z, lay.horizon);
    let ok = usable(&sol);

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    traj.write(Some(&out.join(TRAJECTORY_FILE)))?;
    write_file(out, PLOT_FILE, &plot)?;
    let mut s = Summary::default();
    s.add("scenario", &scn.name)
        .add("model", scn.model.name())
        .add("class", class_name(scn.class))
        .add("transition_time", fmt_f64(ocp.transition_time(&sol.z)))
        .add("cost", fmt_f64(sol.cost))
        .add("status", format!("{:?}", sol.status))
        .add("usable", ok)
        .add("major_iterations", sol.major_iters)
        .add("kkt_residual", fmt_f64(sol.kkt_residual))
        .add("constraint_violation", fmt_f64(sol.constraint_violation_inf))
        .add("max_slack", fmt_f64(max_slack))
        .add("final_state_error", fmt_f64((&x_n - &scn.x_f).amax()))
        .add("wall_time_s", format!("{:.3}", start.elapsed().as_secs_f64()));
    write_file(out, SUMMARY_FILE, &s.render())?;
    Ok(ok)
}

/// Schema, dimension and controller-design checks without solving.
pub fn validate(scn: &Scenario) -> Result<()> {
    transcribe(scn)?;
    Ok(())
}

pub struct PsdArgs<'a> {
    pub input: &'a Path,
    pub dt: f64,
    pub segment: usize,
    pub overlap: f64,
    pub sigma: f64,
    pub column: Option<&'a str>,
}

/// Welch PSD of one value column; the first column is time.
pub fn psd(a: &PsdArgs) -> Result<Table> {
    let t = Table::read(a.input)?;
    let col = match a.column {
        Some(name) => t.column_index(name)?,
        None if t.headers.len() >= 2 => 1,
        None => bail!("{}: expected a time column and at least one value column", a.input.display()),
    };
    let est = welch_psd(&t.column(col), a.dt, a.segment, a.overlap, a.sigma)?;
    let mut out = Table::new(["frequency", "power"]);
    out.rows = est.frequencies.iter().zip(&est.power).map(|(f, p)| vec![*f, *p]).collect();
    Ok(out)
}

/// Least-squares surface of total degree `degree` through `m_l,y_l,omega` samples.
pub fn fit_surface(input: &Path, degree: usize) -> Result<PolySurface> {
    let samples = io::read_surface_samples(input)?;
    Ok(fit_poly_surface(&samples, degree)?)
}

/// `lo,hi,n` grid specification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl std::str::FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [lo, hi, n] = parts[..] else {
            return Err(format!("expected `lo,hi,n`, got `{s}`"));
        };
        let num = |v: &str| v.parse::<f64>().map_err(|_| format!("cannot parse `{v}`"));
        let n = n.parse::<usize>().map_err(|_| format!("cannot parse count `{n}`"))?;
        Ok(Self { lo: num(lo)?, hi: num(hi)?, n })
    }
}

impl Grid {
    pub fn points(&self) -> Vec<f64> {
        linspace(self.lo, self.hi, self.n)
    }
}

pub enum SurfaceSource<'a> {
    /// `omega = P(m_l, y_l)` for a coefficient table.
    Polynomial(&'a Path),
    /// Tip-mass cantilever roots, converted to Hz.
    Cantilever { params: CraneParams, branch: usize },
}

pub fn crane_params(overrides: &[(String, f64)]) -> Result<CraneParams> {
    let mut p = CraneParams::default();
    for (k, v) in overrides {
        let slot = match k.as_str() {
            "m_c" => &mut p.m_c,
            "m_t" => &mut p.m_t,
            "m_l" => &mut p.m_l,
            "L" => &mut p.length,
            "A" => &mut p.area,
            "rho" => &mut p.density,
            "EI" => &mut p.ei,
            other => bail!("crane has no parameter `{other}`"),
        };
        *slot = *v;
    }
    Ok(p)
}

/// Grid samples of a frequency surface; `None` grids span the source's domain.
pub fn sample_surface(source: &SurfaceSource, masses: Option<Grid>, positions: Option<Grid>) -> Result<Vec<SurfaceSample>> {
    match source {
        SurfaceSource::Polynomial(path) => {
            let (Some(mg), Some(pg)) = (masses, positions) else {
                bail!("a polynomial source needs --masses and --positions");
            };
            let dom = (ParamPoint::new(mg.lo, pg.lo), ParamPoint::new(mg.hi, pg.hi));
            let poly = io::read_coefficients(path, dom)?;
            Ok(mg
                .points()
                .into_iter()
                .flat_map(|m| pg.points().into_iter().map(move |y| (m, y)))
                .map(|(m, y)| SurfaceSample { m_l: m, y_l: y, omega: poly.eval(m, y), branch: 0 })
                .collect())
        }
        SurfaceSource::Cantilever { params, branch } => {
            let g = CharacteristicFn::cantilever(params);
            let (lo, hi) = g.domain;
            let mg = masses.unwrap_or(Grid { lo: lo.mass, hi: hi.mass, n: 6 });
            let pg = positions.unwrap_or(Grid { lo: lo.position, hi: hi.position, n: 11 });
            let sampled = sample_hypersurface(&g, &mg.points(), &pg.points(), *branch)?;
            for (m, y) in &sampled.missing {
                log::warn!("no root of branch {branch} at m_l = {m}, y_l = {y}");
            }
            Ok(sampled.samples.into_iter().map(SurfaceSample::in_hz).collect())
        }
    }
}
