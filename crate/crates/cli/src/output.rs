//! Result rows and deterministic CSV/JSON emission.

use anyhow::{Context, Result};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const CSV_HEADER: &str =
    "mode,policy,d,lambda,delta,r,scv,f,k,T,N,ew,eq,er,ew_rel_vs_sq,iters,residual,runs,sd";

/// One experiment result; optional fields stay empty in the CSV.
#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub mode: String,
    pub policy: String,
    pub d: usize,
    pub lambda: f64,
    pub delta: Option<f64>,
    pub r: Option<usize>,
    pub scv: f64,
    pub f: f64,
    pub k: usize,
    #[serde(rename = "T")]
    pub threshold: Option<f64>,
    #[serde(rename = "N")]
    pub n: Option<usize>,
    pub ew: f64,
    pub eq: f64,
    pub er: f64,
    pub ew_rel_vs_sq: Option<f64>,
    pub iters: Option<usize>,
    pub residual: Option<f64>,
    pub runs: Option<usize>,
    pub sd: Option<f64>,
}

/// Plain decimal with ten significant digits, so runs diff cleanly.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (9 - magnitude).max(0) as usize;
    format!("{:.*}", decimals, x)
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(fmt_sig).unwrap_or_default()
}

fn opt_usize(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Row {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.mode,
            self.policy,
            self.d,
            fmt_sig(self.lambda),
            opt_f64(self.delta),
            opt_usize(self.r),
            fmt_sig(self.scv),
            fmt_sig(self.f),
            self.k,
            opt_f64(self.threshold),
            opt_usize(self.n),
            fmt_sig(self.ew),
            fmt_sig(self.eq),
            fmt_sig(self.er),
            opt_f64(self.ew_rel_vs_sq),
            opt_usize(self.iters),
            self.residual.map(|v| format!("{v:.3e}")).unwrap_or_default(),
            opt_usize(self.runs),
            opt_f64(self.sd),
        )
    }
}

/// Applies the output-directory override to relative paths.
pub fn resolve_out_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("ASTLB_OUT_DIR") {
        Some(dir) => PathBuf::from(dir).join(path),
        None => path.to_path_buf(),
    }
}

pub fn write_csv(path: &Path, rows: &[Row]) -> Result<()> {
    let path = resolve_out_path(path);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("cannot create {}", parent.display()))?;
        }
    }
    let mut file = std::fs::File::create(&path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    writeln!(file, "{CSV_HEADER}")?;
    for row in rows {
        writeln!(file, "{}", row.to_csv_line())?;
    }
    Ok(())
}

pub fn write_json(path: &Path, rows: &[Row]) -> Result<()> {
    let path = resolve_out_path(path).with_extension("json");
    let file = std::fs::File::create(&path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    serde_json::to_writer_pretty(file, rows)?;
    Ok(())
}
