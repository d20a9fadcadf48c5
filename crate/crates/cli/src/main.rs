//! `toc-nmpc`: scenario-driven front end for the time-optimal NMPC library.

mod commands;
mod ini;
mod io;
mod scenario;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{ArgGroup, Parser, Subcommand};

use commands::{Grid, PsdArgs, SurfaceSource};
use io::Table;
use scenario::Scenario;

#[derive(Debug, Parser)]
#[command(name = "toc-nmpc", version, about = "Time-optimal NMPC with vibration frequency bands")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the closed loop of a scenario, or of every `.scn` file in a directory.
    #[command(group(ArgGroup::new("source").required(true).args(["scenario", "batch"])))]
    Simulate {
        scenario: Option<PathBuf>,
        /// Run every scenario of DIR concurrently, each into OUT/<name>.
        #[arg(long, value_name = "DIR")]
        batch: Option<PathBuf>,
        /// Output directory; defaults to `output.dir`, then `out/<name>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override `horizon.t_end`.
        #[arg(long)]
        t_end: Option<f64>,
    },
    /// Solve one open-loop problem from the scenario's initial state.
    SolveOcp {
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Welch power spectral density of a sampled signal.
    Psd {
        /// CSV with a time column followed by value columns.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        dt: f64,
        /// Segment length in samples.
        #[arg(long)]
        segment: usize,
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
        /// Gaussian window standard deviation as a fraction of half a segment.
        #[arg(long, default_value_t = 0.25)]
        sigma: f64,
        /// Value column name; defaults to the second column.
        #[arg(long)]
        column: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a bivariate polynomial to `m_l,y_l,omega` samples.
    FitSurface {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        degree: usize,
        /// Coefficient CSV (`i,j,c`); stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit grid samples of a frequency surface.
    #[command(group(ArgGroup::new("source").required(true).args(["poly", "cantilever"])))]
    SampleSurface {
        /// Coefficient CSV of a generator polynomial.
        #[arg(long)]
        poly: Option<PathBuf>,
        /// Roots of the tip-mass cantilever characteristic function, in Hz.
        #[arg(long)]
        cantilever: bool,
        /// Crane parameter override `name=value`, repeatable.
        #[arg(long = "param", value_parser = parse_param)]
        params: Vec<(String, f64)>,
        #[arg(long, default_value_t = 0)]
        branch: usize,
        /// Payload mass grid `lo,hi,n`.
        #[arg(long)]
        masses: Option<Grid>,
        /// Lift position grid `lo,hi,n`.
        #[arg(long)]
        positions: Option<Grid>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check scenarios without solving.
    Validate {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
    },
}

fn parse_param(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected name=value, got `{s}`"))?;
    let v = v.trim().parse::<f64>().map_err(|_| format!("cannot parse `{v}`"))?;
    Ok((k.trim().to_string(), v))
}

fn output_dir(scn: &Scenario, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf).or_else(|| scn.output_dir.clone()).unwrap_or_else(|| Path::new("out").join(&scn.name))
}

fn simulate_one(path: &Path, out: Option<&Path>, t_end: Option<f64>) -> Result<bool> {
    let scn = Scenario::load(path)?;
    let dir = output_dir(&scn, out);
    let outcome = commands::simulate(&scn, &dir, t_end)?;
    if outcome.failed_solves > 0 {
        log::error!("{}: {} samples without a usable solution", scn.name, outcome.failed_solves);
    }
    println!("{}: wrote {}", scn.name, outcome.dir.display());
    Ok(outcome.failed_solves == 0)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate { scenario: Some(path), out, t_end, .. } => simulate_one(&path, out.as_deref(), t_end),
        Command::Simulate { batch: Some(dir), out, t_end, .. } => {
            let files = commands::batch_scenarios(&dir)?;
            let root = out.unwrap_or_else(|| PathBuf::from("out"));
            let results: Vec<Result<bool>> = std::thread::scope(|s| {
                let handles: Vec<_> = files
                    .iter()
                    .map(|f| {
                        let stem = f.file_stem().map(|s| root.join(s)).unwrap_or_else(|| root.clone());
                        s.spawn(move || simulate_one(f, Some(&stem), t_end))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(anyhow::anyhow!("run panicked")))).collect()
            });
            let mut all_ok = true;
            for (f, r) in files.iter().zip(results) {
                match r {
                    Ok(ok) => all_ok &= ok,
                    Err(e) => {
                        eprintln!("{}: {e:#}", f.display());
                        all_ok = false;
                    }
                }
            }
            Ok(all_ok)
        }
        Command::Simulate { .. } => unreachable!("clap requires a scenario or --batch"),
        Command::SolveOcp { scenario, out } => {
            let scn = Scenario::load(&scenario)?;
            let dir = output_dir(&scn, out.as_deref());
            let ok = commands::solve_ocp(&scn, &dir)?;
            println!("{}: wrote {}", scn.name, dir.display());
            Ok(ok)
        }
        Command::Psd { input, dt, segment, overlap, sigma, column, out } => {
            let table = commands::psd(&PsdArgs { input: &input, dt, segment, overlap, sigma, column: column.as_deref() })?;
            table.write(out.as_deref())?;
            Ok(true)
        }
        Command::FitSurface { input, degree, out } => {
            let poly = commands::fit_surface(&input, degree)?;
            io::coefficients_table(&poly).write(out.as_deref())?;
            match out {
                Some(_) => println!("fit_rms = {}", io::fmt_f64(poly.fit_rms)),
                None => eprintln!("fit_rms = {}", io::fmt_f64(poly.fit_rms)),
            }
            Ok(true)
        }
        Command::SampleSurface { poly, cantilever, params, branch, masses, positions, out } => {
            let source = match poly {
                Some(ref p) if !cantilever => SurfaceSource::Polynomial(p),
                _ => SurfaceSource::Cantilever { params: commands::crane_params(&params)?, branch },
            };
            let samples = commands::sample_surface(&source, masses, positions)?;
            let table: Table = io::surface_samples_table(&samples);
            table.write(out.as_deref()).context("writing samples")?;
            Ok(true)
        }
        Command::Validate { scenarios } => {
            for path in &scenarios {
                let scn = Scenario::load(path)?;
                commands::validate(&scn)?;
                println!("{}: ok", path.display());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TOC_NMPC_LOG_LEVEL", "warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
