//! Numeric CSV tables: header row, `.` decimals, LF line endings.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use toc_nmpc::freqband::{PolySurface, SurfaceSample};
use toc_nmpc::model::ParamPoint;

/// Shortest round-trip text; exponent form outside `[1e-4, 1e9)`.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-4..1e9).contains(&a) {
        format!("{v:e}")
    } else {
        v.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new<S: Into<String>>(headers: impl IntoIterator<Item = S>) -> Self {
        Self { headers: headers.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr =
            csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let headers: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for (idx, rec) in rdr.records().enumerate() {
            let rec = rec.with_context(|| format!("{}: record {}", path.display(), idx + 1))?;
            let row = rec
                .iter()
                .map(|v| v.parse::<f64>().with_context(|| format!("{}: line {}: cannot parse `{v}`", path.display(), idx + 2)))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(Self { headers, rows })
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.headers.iter().position(|h| h == name).with_context(|| format!("no column `{name}` in {:?}", self.headers))
    }

    pub fn column(&self, index: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[index]).collect()
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.headers)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| fmt_f64(*v)))?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }

    /// Writes to `path`, or to stdout when `path` is `None`.
    pub fn write(&self, path: Option<&Path>) -> Result<()> {
        let text = self.to_csv_string()?;
        match path {
            Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
            None => Ok(std::io::stdout().lock().write_all(text.as_bytes())?),
        }
    }
}

/// `m_l,y_l,omega` samples; an optional `branch` column is carried along.
pub fn read_surface_samples(path: &Path) -> Result<Vec<SurfaceSample>> {
    let t = Table::read(path)?;
    let (m, y, w) = (t.column_index("m_l")?, t.column_index("y_l")?, t.column_index("omega")?);
    let branch = t.column_index("branch").ok();
    Ok(t.rows.iter().map(|r| SurfaceSample { m_l: r[m], y_l: r[y], omega: r[w], branch: branch.map_or(0, |b| r[b] as usize) }).collect())
}

pub fn surface_samples_table(samples: &[SurfaceSample]) -> Table {
    let mut t = Table::new(["m_l", "y_l", "omega"]);
    t.rows = samples.iter().map(|s| vec![s.m_l, s.y_l, s.omega]).collect();
    t
}

/// `i,j,c` rows for every monomial `m^i y^j` with `i + j <= degree`.
pub fn coefficients_table(poly: &PolySurface) -> Table {
    let mut t = Table::new(["i", "j", "c"]);
    for total in 0..=poly.degree {
        for i in 0..=total {
            let j = total - i;
            let c = poly.coeffs.get(i).and_then(|row| row.get(j)).copied().unwrap_or(0.0);
            t.rows.push(vec![i as f64, j as f64, c]);
        }
    }
    t
}

pub fn read_coefficients(path: &Path, domain: (ParamPoint, ParamPoint)) -> Result<PolySurface> {
    let t = Table::read(path)?;
    let (ci, cj, cc) = (t.column_index("i")?, t.column_index("j")?, t.column_index("c")?);
    let mut terms = Vec::with_capacity(t.rows.len());
    for r in &t.rows {
        let (i, j) = (r[ci], r[cj]);
        if i < 0.0 || j < 0.0 || i.fract() != 0.0 || j.fract() != 0.0 {
            bail!("{}: exponents must be non-negative integers, got ({i}, {j})", path.display());
        }
        terms.push((i as usize, j as usize, r[cc]));
    }
    let degree = terms.iter().map(|(i, j, _)| i + j).max().context("empty coefficient table")?;
    let mut coeffs = vec![vec![0.0; degree + 1]; degree + 1];
    for (i, j, c) in terms {
        coeffs[i][j] += c;
    }
    Ok(PolySurface { degree, coeffs, fit_rms: 0.0, domain })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_format_compactly() {
        assert_eq!(fmt_f64(0.5), "0.5");
        assert_eq!(fmt_f64(4.5e-9), "4.5e-9");
        assert_eq!(fmt_f64(-2e12), "-2e12");
        assert_eq!(fmt_f64(0.0), "0");
        assert_eq!(fmt_f64(f64::NEG_INFINITY), "-inf");
    }

    #[test]
    fn csv_round_trip_is_exact_with_lf_endings() {
        let mut t = Table::new(["a", "b"]);
        t.rows = vec![vec![0.1, -1e-300], vec![f64::INFINITY, 12345.678]];
        let text = t.to_csv_string().unwrap();
        assert!(!text.contains('\r'));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, &text).unwrap();
        assert_eq!(Table::read(&p).unwrap(), t);
    }

    #[test]
    fn coefficients_round_trip() {
        let dom = (ParamPoint::new(0.0, 0.0), ParamPoint::new(1.0, 1.0));
        let poly = PolySurface {
            degree: 2,
            coeffs: vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 0.0], vec![6.0, 0.0, 0.0]],
            fit_rms: 0.0,
            domain: dom,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        coefficients_table(&poly).write(Some(&p)).unwrap();
        let back = read_coefficients(&p, dom).unwrap();
        assert_eq!(back.coeffs, poly.coeffs);
        assert_eq!(back.eval(0.3, 0.7), poly.eval(0.3, 0.7));
    }
}
