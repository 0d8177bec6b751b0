//! CSV and report writers. Numbers are written with 17 significant digits.

use anyhow::{Context, Result};
use mfrobust::linalg::Mat;
use std::fs;
use std::path::{Path, PathBuf};

pub fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

/// Row-major entries of `m`.
pub fn flat(m: &Mat) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| m[(i, j)]))
}

/// Column names `name_ij` (1-based) for an `r × c` matrix.
pub fn names(name: &str, r: usize, c: usize) -> Vec<String> {
    (1..=r).flat_map(|i| (1..=c).map(move |j| format!("{name}_{i}{j}"))).collect()
}

pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn push_nums(&mut self, row: impl IntoIterator<Item = f64>) {
        self.push(row.into_iter().map(num).collect());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Output directory, created on first use.
pub struct OutDir(PathBuf);

impl OutDir {
    pub fn create(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("cannot create output directory {}", path.display()))?;
        Ok(Self(path.to_path_buf()))
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    pub fn table(&self, name: &str, t: &Table) -> Result<()> {
        t.write(&self.file(name))
    }

    /// Writes `lines` to `name` and echoes them to stdout.
    pub fn report(&self, name: &str, lines: &[String]) -> Result<()> {
        for l in lines {
            println!("{l}");
        }
        let path = self.file(name);
        fs::write(&path, lines.join("\n") + "\n").with_context(|| format!("cannot write {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23] {
            let s = num(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
            assert_eq!(s.split('e').next().unwrap().trim_start_matches('-').replace('.', "").len(), 17);
        }
    }

    #[test]
    fn names_are_row_major() {
        assert_eq!(names("P", 2, 2), ["P_11", "P_12", "P_21", "P_22"]);
        let m = Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(flat(&m).collect::<Vec<_>>(), [1.0, 2.0, 3.0, 4.0]);
    }
}
