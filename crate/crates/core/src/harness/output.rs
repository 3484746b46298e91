use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::macro_solver::Diagnostics;

/// Files produced by one experiment, relative to its output directory.
#[derive(Debug, Clone, Default)]
pub struct OutputSet {
    files: Vec<(PathBuf, String)>,
}

impl OutputSet {
    pub fn add(&mut self, path: impl Into<PathBuf>, contents: String) {
        self.files.push((path.into(), contents));
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.files.iter().map(|(p, _)| p.as_path())
    }

    pub fn get(&self, path: impl AsRef<Path>) -> Option<&str> {
        let path = path.as_ref();
        self.files.iter().find(|(p, _)| p == path).map(|(_, c)| c.as_str())
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// Writes every file below `root`.
    pub fn write_all(&self, root: &Path) -> Result<()> {
        for (rel, contents) in &self.files {
            write_atomic(&root.join(rel), contents.as_bytes())?;
        }
        Ok(())
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Full-precision scientific notation; round-trips every `f64`.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Comma-separated table with a header row.
pub fn csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Row-major cell field, `ny` lines of `nx` values, bottom row first.
pub fn snapshot_csv(values: &[f64], nx: usize, ny: usize, t: f64) -> String {
    let mut out = String::with_capacity(values.len() * 24 + 64);
    let _ = writeln!(out, "# nx,ny,t");
    let _ = writeln!(out, "# {nx},{ny},{}", num(t));
    for row in values.chunks(nx).take(ny) {
        let line: Vec<String> = row.iter().map(|&v| num(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn snapshot_name(step: usize) -> String {
    format!("snapshots/S_f_{step:05}.csv")
}

/// `t, mass, source_total, grad_P_norm, grad_theta_norm`, one row per time
/// level; the initial row carries zero rates.
pub fn timeseries_csv(diag: &Diagnostics) -> String {
    let rows = (0..diag.times.len()).map(|i| {
        let at = |v: &[f64]| if i == 0 { 0.0 } else { v[i - 1] };
        vec![
            num(diag.times[i]),
            num(diag.mass[i]),
            num(at(&diag.source_total)),
            num(at(&diag.grad_p_norm)),
            num(at(&diag.grad_theta_norm)),
        ]
    });
    csv(&["t", "mass", "source_total", "grad_P_norm", "grad_theta_norm"], rows)
}
