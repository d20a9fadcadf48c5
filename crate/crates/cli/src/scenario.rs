//! Scenario files: model, problem class, horizon, weights, bands, boxes,
//! boundary states, noise and output location.
//!
//! ```text
//! [model]         name = two_dof, plus parameter overrides such as k1 = 1000
//! [problem]       class = hard | soft | quasi
//! [horizon]       N, Ts, t_end, optional time_guesses and max_iters
//! [weights]       S, P, Q, R (scalar = multiple of I, list = diagonal), F
//! [bands]         fixed_lower = hz, ...  or  surface = file, ... with xi, degree
//! [constraints]   x_min, x_max, u_min, u_max (default unbounded)
//! [state]         x0, x_f, optional u_f (default: equilibrium input at x_f)
//! [terminal]      set = ellipsoid | point, optional Q and R for the Riccati design
//! [noise]         seed, std (measurement noise on the fed-back state)
//! [output]        dir
//! ```
//!
//! Surface files are sample CSVs (`m_l,y_l,omega`, omega in Hz) resolved
//! against the scenario's directory and fitted on load.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;
use toc_nmpc::freqband::{fit_poly_surface, FrequencyBand};
use toc_nmpc::model::{ControlVector, PlantModel, StateVector};
use toc_nmpc::mpc::MpcConfig;
use toc_nmpc::ocp::{OcpSetup, OcpWeights, PolytopicConstraint, ProblemClass, TerminalSet};
use toc_nmpc::terminal::{equilibrium_input, solve_dare, terminal_set_or_point, AlphaSearch, DualModeController, TerminalDesign};

use crate::ini::{Entry, Ini, KeyPath, SchemaError};
use crate::io;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Schema { path: PathBuf, source: SchemaError },
    #[error("{path}: cannot build the controller: {msg}")]
    Build { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminalKind {
    Ellipsoid,
    Point,
}

#[derive(Clone)]
pub struct Scenario {
    pub path: PathBuf,
    pub name: String,
    pub model: PlantModel,
    pub class: ProblemClass,
    pub horizon: usize,
    pub ts: f64,
    pub t_end: f64,
    pub time_guesses: Option<Vec<f64>>,
    pub max_iters: Option<usize>,
    pub weights: OcpWeights,
    pub bands: Vec<FrequencyBand>,
    pub constraints: PolytopicConstraint,
    pub x0: StateVector,
    pub x_f: StateVector,
    pub u_f: Option<ControlVector>,
    pub terminal: TerminalKind,
    pub terminal_q: DMatrix<f64>,
    pub terminal_r: DMatrix<f64>,
    pub seed: u64,
    pub noise_std: f64,
    pub output_dir: Option<PathBuf>,
}

/// Typed reads from an [`Ini`] with errors carrying key path and line.
struct Reader {
    doc: Ini,
}

fn invalid(key: &KeyPath, line: usize, msg: impl Into<String>) -> SchemaError {
    SchemaError::Invalid { key: key.clone(), line, msg: msg.into() }
}

fn parse_list<T: FromStr>(key: &KeyPath, e: &Entry) -> Result<Vec<T>, SchemaError> {
    e.value.split(',').map(|v| v.trim().parse::<T>().map_err(|_| invalid(key, e.line, format!("cannot parse `{}`", v.trim())))).collect()
}

impl Reader {
    fn get<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<(T, usize)>, SchemaError> {
        let path = KeyPath::new(section, key);
        self.doc
            .take(section, key)
            .map(|e| e.value.parse::<T>().map(|v| (v, e.line)).map_err(|_| invalid(&path, e.line, format!("cannot parse `{}`", e.value))))
            .transpose()
    }

    fn need<T: FromStr>(&mut self, section: &str, key: &str) -> Result<(T, usize), SchemaError> {
        self.get(section, key)?.ok_or_else(|| SchemaError::Missing(KeyPath::new(section, key)))
    }

    fn list<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<(Vec<T>, usize)>, SchemaError> {
        let path = KeyPath::new(section, key);
        self.doc.take(section, key).map(|e| parse_list(&path, &e).map(|v| (v, e.line))).transpose()
    }

    /// A vector of exactly `len` entries.
    fn vector(&mut self, section: &str, key: &str, len: usize) -> Result<Option<DVector<f64>>, SchemaError> {
        let Some((v, line)) = self.list::<f64>(section, key)? else { return Ok(None) };
        if v.len() != len {
            return Err(invalid(&KeyPath::new(section, key), line, format!("expected {len} values, got {}", v.len())));
        }
        Ok(Some(DVector::from_vec(v)))
    }

    /// Scalar `c` gives `c·I`; a list gives a diagonal. Entries must be `>= 0`.
    fn diag_matrix(&mut self, section: &str, key: &str, dim: usize) -> Result<Option<(DMatrix<f64>, usize)>, SchemaError> {
        let Some((v, line)) = self.list::<f64>(section, key)? else { return Ok(None) };
        let path = KeyPath::new(section, key);
        let diag = match v.len() {
            1 => vec![v[0]; dim],
            n if n == dim => v,
            n => return Err(invalid(&path, line, format!("expected 1 or {dim} values, got {n}"))),
        };
        if diag.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(invalid(&path, line, "weights must be finite and >= 0"));
        }
        Ok(Some((DMatrix::from_diagonal(&DVector::from_vec(diag)), line)))
    }
}

fn parse_class(key: &KeyPath, e: &Entry) -> Result<ProblemClass, SchemaError> {
    match e.value.as_str() {
        "hard" => Ok(ProblemClass::Hard),
        "soft" => Ok(ProblemClass::Soft),
        "quasi" => Ok(ProblemClass::Quasi),
        other => Err(invalid(key, e.line, format!("expected hard, soft or quasi, got `{other}`"))),
    }
}

fn build_model(r: &mut Reader) -> Result<PlantModel, SchemaError> {
    let name_key = KeyPath::new("model", "name");
    let name = r.doc.require("model", "name")?;
    let mut overrides = BTreeMap::new();
    for (key, e) in r.doc.drain_section("model") {
        let path = KeyPath::new("model", &key);
        let v: f64 = e.value.parse().map_err(|_| invalid(&path, e.line, format!("cannot parse `{}`", e.value)))?;
        let single = BTreeMap::from([(key.clone(), v)]);
        if let Err(err) = PlantModel::by_name(&name.value, &single) {
            // an unknown model is reported against `model.name` below
            if PlantModel::by_name(&name.value, &BTreeMap::new()).is_ok() {
                return Err(invalid(&path, e.line, err.to_string()));
            }
        }
        overrides.insert(key, v);
    }
    PlantModel::by_name(&name.value, &overrides).map_err(|err| invalid(&name_key, name.line, err.to_string()))
}

fn load_bands(r: &mut Reader, base: &Path) -> Result<Vec<FrequencyBand>, SchemaError> {
    let fixed = r.doc.take("bands", "fixed_lower");
    let surface = r.doc.take("bands", "surface");
    match (fixed, surface) {
        (Some(_), Some(s)) => Err(invalid(&KeyPath::new("bands", "surface"), s.line, "set either fixed_lower or surface, not both")),
        (Some(f), None) => {
            let path = KeyPath::new("bands", "fixed_lower");
            let hz: Vec<f64> = parse_list(&path, &f)?;
            if hz.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
                return Err(invalid(&path, f.line, "frequencies must be finite and > 0"));
            }
            Ok(hz.into_iter().map(|hz| FrequencyBand::FixedLower { hz }).collect())
        }
        (None, Some(s)) => {
            let (xi, xi_line) = r.need::<f64>("bands", "xi")?;
            if !(xi >= 0.0) {
                return Err(invalid(&KeyPath::new("bands", "xi"), xi_line, "xi must be >= 0"));
            }
            let degree = r.get::<usize>("bands", "degree")?.map_or(5, |(d, _)| d);
            let path = KeyPath::new("bands", "surface");
            let files: Vec<String> = parse_list(&path, &s)?;
            files
                .iter()
                .map(|f| {
                    let file = base.join(f);
                    if !file.is_file() {
                        return Err(invalid(&path, s.line, format!("file `{}` does not exist", file.display())));
                    }
                    let samples = io::read_surface_samples(&file).map_err(|e| invalid(&path, s.line, format!("{e:#}")))?;
                    let poly =
                        fit_poly_surface(&samples, degree).map_err(|e| invalid(&path, s.line, format!("{}: {e}", file.display())))?;
                    Ok(FrequencyBand::Surface { poly, xi })
                })
                .collect()
        }
        (None, None) => {
            for key in ["xi", "degree"] {
                if let Some(e) = r.doc.take("bands", key) {
                    return Err(invalid(&KeyPath::new("bands", key), e.line, "needs `bands.surface`"));
                }
            }
            Ok(Vec::new())
        }
    }
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Read { path: path.into(), source })?;
        Self::parse(&text, path).map_err(|source| ScenarioError::Schema { path: path.into(), source })
    }

    /// Parses `text`; `path` names the scenario and anchors relative files.
    pub fn parse(text: &str, path: &Path) -> Result<Self, SchemaError> {
        let mut r = Reader { doc: Ini::parse(text)? };
        let base = path.parent().unwrap_or(Path::new("."));
        let model = build_model(&mut r)?;
        let (n, m) = (model.state_dim(), model.input_dim());

        let class_entry = r.doc.require("problem", "class")?;
        let class = parse_class(&KeyPath::new("problem", "class"), &class_entry)?;

        let (horizon, n_line) = r.need::<usize>("horizon", "N")?;
        if horizon < 2 {
            return Err(invalid(&KeyPath::new("horizon", "N"), n_line, "N must be >= 2"));
        }
        let (ts, ts_line) = r.need::<f64>("horizon", "Ts")?;
        if !(ts > 0.0) {
            return Err(invalid(&KeyPath::new("horizon", "Ts"), ts_line, "Ts must be > 0"));
        }
        let (t_end, t_line) = r.need::<f64>("horizon", "t_end")?;
        if !(t_end >= ts) {
            return Err(invalid(&KeyPath::new("horizon", "t_end"), t_line, "t_end must be >= Ts"));
        }
        let time_guesses = match r.list::<f64>("horizon", "time_guesses")? {
            Some((g, line)) if g.is_empty() || g.iter().any(|t| !(*t > 0.0)) => {
                return Err(invalid(&KeyPath::new("horizon", "time_guesses"), line, "guesses must be > 0"));
            }
            other => other.map(|(g, _)| g),
        };
        let max_iters = r.get::<usize>("horizon", "max_iters")?.map(|(v, _)| v);

        let bands = load_bands(&mut r, base)?;
        let s = bands.len();
        let mut weights = OcpWeights::zeros(n, m, s);
        if let Some((w, _)) = r.diag_matrix("weights", "S", s)? {
            weights.s = w;
        }
        if let Some((w, _)) = r.diag_matrix("weights", "P", s)? {
            weights.p_slack = w;
        }
        if let Some((w, _)) = r.diag_matrix("weights", "Q", n)? {
            weights.q = w;
        }
        let r_weight = r.diag_matrix("weights", "R", m)?;
        if let Some((w, line)) = &r_weight {
            if class != ProblemClass::Hard && w.diagonal().min() <= 0.0 {
                return Err(invalid(&KeyPath::new("weights", "R"), *line, "R must be positive definite"));
            }
            weights.r = w.clone();
        } else if class != ProblemClass::Hard {
            return Err(SchemaError::Missing(KeyPath::new("weights", "R")));
        }
        if let Some((f, line)) = r.get::<f64>("weights", "F")? {
            if !(f >= 0.0) {
                return Err(invalid(&KeyPath::new("weights", "F"), line, "F must be >= 0"));
            }
            weights.f_time = f;
        }

        let x0 = r.vector("state", "x0", n)?.ok_or_else(|| SchemaError::Missing(KeyPath::new("state", "x0")))?;
        let x_f = r.vector("state", "x_f", n)?.ok_or_else(|| SchemaError::Missing(KeyPath::new("state", "x_f")))?;
        let u_f = r.vector("state", "u_f", m)?;
        weights.x_f = x_f.clone();
        weights.x_s = x_f.clone();
        if let Some(u) = &u_f {
            weights.u_s = u.clone();
        }

        let inf = f64::INFINITY;
        let x_min = r.vector("constraints", "x_min", n)?.unwrap_or_else(|| DVector::from_element(n, -inf));
        let x_max = r.vector("constraints", "x_max", n)?.unwrap_or_else(|| DVector::from_element(n, inf));
        let u_min = r.vector("constraints", "u_min", m)?.unwrap_or_else(|| DVector::from_element(m, -inf));
        let u_max = r.vector("constraints", "u_max", m)?.unwrap_or_else(|| DVector::from_element(m, inf));
        let constraints = PolytopicConstraint::from_boxes(x_min.as_slice(), x_max.as_slice(), u_min.as_slice(), u_max.as_slice());

        let terminal = match r.doc.take("terminal", "set") {
            None => TerminalKind::Ellipsoid,
            Some(e) => match e.value.as_str() {
                "ellipsoid" => TerminalKind::Ellipsoid,
                "point" => TerminalKind::Point,
                other => {
                    return Err(invalid(&KeyPath::new("terminal", "set"), e.line, format!("expected ellipsoid or point, got `{other}`")))
                }
            },
        };
        let nonzero = |w: &DMatrix<f64>| w.amax() > 0.0;
        let terminal_q = match r.diag_matrix("terminal", "Q", n)? {
            Some((q, _)) => q,
            None if nonzero(&weights.q) => weights.q.clone(),
            None => DMatrix::identity(n, n),
        };
        let terminal_r = match r.diag_matrix("terminal", "R", m)? {
            Some((w, line)) if w.diagonal().min() <= 0.0 => {
                return Err(invalid(&KeyPath::new("terminal", "R"), line, "R must be positive definite"));
            }
            Some((w, _)) => w,
            None if nonzero(&weights.r) => weights.r.clone(),
            None => DMatrix::identity(m, m),
        };

        let seed = r.get::<u64>("noise", "seed")?.map_or(0, |(v, _)| v);
        let noise_std = match r.get::<f64>("noise", "std")? {
            Some((v, line)) if !(v >= 0.0) || !v.is_finite() => {
                return Err(invalid(&KeyPath::new("noise", "std"), line, "std must be finite and >= 0"))
            }
            other => other.map_or(0.0, |(v, _)| v),
        };
        let output_dir = r.doc.take("output", "dir").map(|e| PathBuf::from(e.value));

        if let Some((key, line)) = r.doc.first_leftover() {
            return Err(SchemaError::Unknown { key, line });
        }
        if class == ProblemClass::Hard && s > 0 {
            log::warn!("{}: bands are ignored by the hard class", path.display());
        }
        let name = path.file_stem().map_or_else(|| "scenario".to_string(), |s| s.to_string_lossy().into_owned());
        Ok(Self {
            path: path.to_path_buf(),
            name,
            model,
            class,
            horizon,
            ts,
            t_end,
            time_guesses,
            max_iters,
            weights,
            bands,
            constraints,
            x0,
            x_f,
            u_f,
            terminal,
            terminal_q,
            terminal_r,
            seed,
            noise_std,
            output_dir,
        })
    }

    fn build_err(&self, msg: impl ToString) -> ScenarioError {
        ScenarioError::Build { path: self.path.clone(), msg: msg.to_string() }
    }

    /// Closed-loop configuration: terminal input, Riccati gain and terminal set.
    pub fn mpc_config(&self) -> Result<MpcConfig, ScenarioError> {
        let model = &self.model;
        let rho_f = model.param_at(&self.x_f);
        let u_f = match &self.u_f {
            Some(u) => u.clone(),
            None => equilibrium_input(model, &self.x_f, &rho_f, &DVector::zeros(model.input_dim())).map_err(|e| self.build_err(e))?,
        };
        let (a, b) = model.linearize_discrete(&self.x_f, &u_f, &rho_f, self.ts).map_err(|e| self.build_err(e))?;
        let ric = solve_dare(&a, &b, &self.terminal_q, &self.terminal_r, 1e-9).map_err(|e| self.build_err(e))?;
        let set = match self.terminal {
            TerminalKind::Point => TerminalSet::Point(self.x_f.clone()),
            TerminalKind::Ellipsoid => {
                let design =
                    TerminalDesign { model, ric: &ric, x_f: &self.x_f, u_f: &u_f, rho: rho_f, ts: self.ts, constraints: &self.constraints };
                terminal_set_or_point(&design, &AlphaSearch::default()).0
            }
        };
        let ctl = DualModeController::from_riccati(&ric, self.x_f.clone(), u_f.clone());
        let mut cfg = MpcConfig::new(self.class, model.clone(), self.horizon, self.ts, set, ctl);
        cfg.constraints = self.constraints.clone();
        cfg.bands = self.bands.clone();
        cfg.weights = self.weights.clone();
        if self.u_f.is_none() {
            cfg.weights.u_s = u_f;
        }
        if let Some(g) = &self.time_guesses {
            cfg.time_guesses = g.clone();
        }
        cfg.max_major_iters = self.max_iters;
        cfg.validate().map_err(|e| self.build_err(e))?;
        Ok(cfg)
    }

    /// Open-loop setup from `x0` over the closed-loop configuration.
    pub fn ocp_setup(&self, cfg: &MpcConfig) -> OcpSetup {
        let mut setup = OcpSetup::new(self.model.clone(), self.x0.clone(), cfg.terminal_set.clone(), self.horizon, self.ts);
        setup.constraints = cfg.constraints.clone();
        setup.rho_schedule = vec![self.model.param_at(&self.x0)];
        if self.class != ProblemClass::Hard {
            setup.weights = cfg.weights.clone();
            setup.bands = cfg.bands.clone();
        }
        setup
    }
}
