//! The `pcdyn-csv v1` trajectory format.
//!
//! ```text
//! # pcdyn-csv v1
//! # model = darwin
//! # epsilon = 1e-2
//! t,r0_x,r0_y,...,H_C,H_D,H_RR,dissipation_rate,constraint_residual
//! 0e0,5e-1,...
//! ```
//!
//! Metadata lines are `# key = value`. Numbers are written in the shortest
//! form that parses back to the same `f64`, so output is byte-identical for
//! identical runs and reading loses nothing.

use std::io::{BufRead, Write};

use pcdyn_core::diagnostics::energy_report;
use pcdyn_core::integrate::{StateLayout, Trajectory};
use pcdyn_core::{ParticleSystem, PhaseState, Vec3};

pub const MAGIC: &str = "# pcdyn-csv v1";

#[derive(Debug, thiserror::Error)]
pub enum CsvError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("missing metadata `{0}`")]
    MissingMeta(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error(transparent)]
    Core(#[from] pcdyn_core::Error),
}

fn format_err(line: usize, message: impl Into<String>) -> CsvError {
    CsvError::Format { line, message: message.into() }
}

/// Shortest round-trip text for a float.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:e}")
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    /// Metadata in file order.
    pub meta: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str, CsvError> {
        self.meta(key).ok_or_else(|| CsvError::MissingMeta(key.to_string()))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64, CsvError> {
        let v = self.require_meta(key)?;
        v.parse().map_err(|_| format_err(0, format!("metadata `{key}` is not a number: {v}")))
    }

    pub fn meta_list(&self, key: &str) -> Result<Vec<f64>, CsvError> {
        let v = self.require_meta(key)?;
        v.split(',')
            .map(|s| s.trim().parse().map_err(|_| format_err(0, format!("metadata `{key}` has a bad entry `{s}`"))))
            .collect()
    }

    pub fn column_index(&self, name: &str) -> Result<usize, CsvError> {
        self.columns.iter().position(|c| c == name).ok_or_else(|| CsvError::MissingColumn(name.to_string()))
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>, CsvError> {
        let i = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{MAGIC}")?;
        for (k, v) in &self.meta {
            writeln!(w, "# {k} = {v}")?;
        }
        writeln!(w, "{}", self.columns.join(","))?;
        for row in &self.rows {
            writeln!(w, "{}", fmt_list(row))?;
        }
        w.flush()
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, CsvError> {
        let mut lines = r.lines().enumerate();
        match lines.next() {
            Some((_, Ok(first))) if first.trim_end() == MAGIC => {}
            Some((_, Ok(first))) => return Err(format_err(1, format!("expected `{MAGIC}`, found `{first}`"))),
            Some((_, Err(e))) => return Err(e.into()),
            None => return Err(format_err(1, "empty file")),
        }
        let mut table = Table::default();
        for (i, line) in lines {
            let line = line?;
            let lineno = i + 1;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| format_err(lineno, "metadata must look like `# key = value`"))?;
                table.meta.push((k.trim().to_string(), v.trim().to_string()));
            } else if table.columns.is_empty() {
                table.columns = line.split(',').map(|c| c.trim().to_string()).collect();
            } else {
                let row = line
                    .split(',')
                    .map(|s| s.trim().parse::<f64>().map_err(|_| format_err(lineno, format!("bad number `{s}`"))))
                    .collect::<Result<Vec<_>, _>>()?;
                if row.len() != table.columns.len() {
                    return Err(format_err(
                        lineno,
                        format!("{} fields, header has {}", row.len(), table.columns.len()),
                    ));
                }
                table.rows.push(row);
            }
        }
        if table.columns.is_empty() {
            return Err(format_err(0, "no header row"));
        }
        Ok(table)
    }
}

fn vec_columns(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).flat_map(move |a| ["x", "y", "z"].into_iter().map(move |c| format!("{prefix}{a}_{c}")))
}

pub fn trajectory_columns(n: usize, with_y: bool) -> Vec<String> {
    let mut cols = vec!["t".to_string()];
    cols.extend(vec_columns("r", n));
    cols.extend(vec_columns("u", n));
    cols.extend(vec_columns("a", n));
    if with_y {
        cols.extend(["y_x", "y_y", "y_z"].map(String::from));
    }
    cols.extend(["H_C", "H_D", "H_RR", "dissipation_rate", "constraint_residual"].map(String::from));
    cols
}

/// Run description stored in the metadata block.
#[derive(Debug, Clone)]
pub struct RunMeta<'a> {
    pub model: &'a str,
    pub epsilon: f64,
    pub seed: u64,
    pub termination: &'a str,
}

/// One row per stored sample, energies recomputed from the sample.
pub fn trajectory_table(traj: &Trajectory, sys: &ParticleSystem, meta: &RunMeta) -> Result<Table, CsvError> {
    let n = traj.n();
    let with_y = traj.layout() == StateLayout::Dae;
    let mut table = Table {
        meta: vec![
            ("model".into(), meta.model.into()),
            ("epsilon".into(), fmt_f64(meta.epsilon)),
            ("seed".into(), meta.seed.to_string()),
            ("particles".into(), n.to_string()),
            ("charges".into(), fmt_list(sys.charges())),
            ("masses".into(), fmt_list(sys.masses())),
            ("star_masses".into(), fmt_list(sys.star_masses())),
            ("termination".into(), meta.termination.into()),
        ],
        columns: trajectory_columns(n, with_y),
        rows: Vec::with_capacity(traj.len()),
    };
    for i in 0..traj.len() {
        let s = traj.phase_state(i);
        let a = traj.accelerations(i);
        let e = energy_report(&s, &a, sys, meta.epsilon)?;
        let mut row = Vec::with_capacity(table.columns.len());
        row.push(s.t);
        for v in s.r.iter().chain(&s.u).chain(&a) {
            row.extend(v.to_array());
        }
        if let Some(y) = traj.y(i) {
            row.extend(y.to_array());
        }
        row.extend([e.h_c, e.h_d, e.h_rr, e.dissipation_rate, traj.constraint_residual(i)]);
        table.rows.push(row);
    }
    Ok(table)
}

/// A trajectory file read back with its particle system.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub model: String,
    pub epsilon: f64,
    pub system: ParticleSystem,
    pub states: Vec<PhaseState>,
    pub accelerations: Vec<Vec<Vec3>>,
    pub table: Table,
}

impl LoadedRun {
    pub fn from_table(table: Table) -> Result<Self, CsvError> {
        let model = table.require_meta("model")?.to_string();
        let epsilon = table.meta_f64("epsilon")?;
        let charges = table.meta_list("charges")?;
        let n = charges.len();
        let system =
            ParticleSystem::from_effective(charges, table.meta_list("masses")?, table.meta_list("star_masses")?)?;
        let grab = |prefix: &str| -> Result<Vec<[usize; 3]>, CsvError> {
            (0..n)
                .map(|a| {
                    Ok([
                        table.column_index(&format!("{prefix}{a}_x"))?,
                        table.column_index(&format!("{prefix}{a}_y"))?,
                        table.column_index(&format!("{prefix}{a}_z"))?,
                    ])
                })
                .collect()
        };
        let (ri, ui, ai) = (grab("r")?, grab("u")?, grab("a")?);
        let ti = table.column_index("t")?;
        let pick = |row: &[f64], idx: &[[usize; 3]]| -> Vec<Vec3> {
            idx.iter().map(|c| Vec3::new(row[c[0]], row[c[1]], row[c[2]])).collect()
        };
        let mut states = Vec::with_capacity(table.rows.len());
        let mut accelerations = Vec::with_capacity(table.rows.len());
        for row in &table.rows {
            states.push(PhaseState::new(row[ti], pick(row, &ri), pick(row, &ui))?);
            accelerations.push(pick(row, &ai));
        }
        Ok(LoadedRun { model, epsilon, system, states, accelerations, table })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_exactly() {
        for x in [0.0, -0.0, 1.0, 0.1, 1.0 / 3.0, -2.5e-300, 6.02e23, f64::MIN_POSITIVE, f64::MAX] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
        }
    }

    #[test]
    fn table_round_trip() {
        let t = Table {
            meta: vec![("model".into(), "darwin".into()), ("epsilon".into(), "1e-2".into())],
            columns: vec!["t".into(), "x".into()],
            rows: vec![vec![0.0, 0.1], vec![0.5, 1.0 / 3.0]],
        };
        let mut buf = Vec::new();
        t.write(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# pcdyn-csv v1\n# model = darwin\n"));
        assert_eq!(Table::read(&buf[..]).unwrap(), t);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(Table::read(&b"t,x\n0,1\n"[..]).is_err());
        let err = Table::read(&b"# pcdyn-csv v1\nt,x\n0,1\n0\n"[..]).unwrap_err().to_string();
        assert!(err.starts_with("line 4"), "{err}");
        let err = Table::read(&b"# pcdyn-csv v1\nt,x\n0,abc\n"[..]).unwrap_err().to_string();
        assert!(err.contains("abc"), "{err}");
    }

    #[test]
    fn column_names() {
        let c = trajectory_columns(2, true);
        assert_eq!(c.len(), 1 + 18 + 3 + 5);
        assert_eq!(&c[..4], ["t", "r0_x", "r0_y", "r0_z"]);
        assert_eq!(c[7], "u0_x");
        assert_eq!(c[19], "y_x");
        assert_eq!(c.last().unwrap(), "constraint_residual");
    }
}
