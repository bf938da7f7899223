//! Output tables and files.
//!
//! `draws.bin` layout (all integers `u64`, all values `f64`, little-endian):
//!
//! ```text
//! magic      8 bytes  "MIMADRW1"
//! n_chains   u64
//! n_draws    u64      retained draws per chain
//! n_columns  u64
//! names      n_columns x (u64 byte length, UTF-8 bytes)
//! values     n_chains x n_draws x n_columns  (chain, then draw, then column)
//! deviance   n_chains x n_draws
//! ```

use std::io::Write;
use std::path::Path;

use mima_core::diagnostics::{summarize_posterior, ConvergenceReport, DEFAULT_QUANTILES};
use mima_core::model::Support;
use mima_core::PosteriorDraws;
use serde::Serialize;

use crate::{io_err, CliResult};

pub const DRAWS_MAGIC: &[u8; 8] = b"MIMADRW1";

pub fn num(x: f64) -> String {
    format!("{x:.6}")
}

/// One reported quantity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub parameter: String,
    pub group: String,
    pub mean: f64,
    pub sd: f64,
    pub lo95: f64,
    pub median: f64,
    pub hi95: f64,
}

impl SummaryRow {
    pub fn from_draws(parameter: &str, group: &str, draws: &[f64]) -> CliResult<Self> {
        let s = summarize_posterior(draws, &DEFAULT_QUANTILES)?;
        Ok(Self {
            parameter: parameter.to_string(),
            group: group.to_string(),
            mean: s.mean,
            sd: s.sd,
            lo95: s.lo95(),
            median: s.median(),
            hi95: s.hi95(),
        })
    }
}

const FAMILIES: [&str; 4] = ["effect", "intercept", "slope", "cond_sd"];

/// Row group of a monitored column: `indication` for the active
/// indication-level values, `mixture_probability` for indicators (their
/// mean is the posterior mixture probability), `mixture_weight`, `component`
/// for per-indication building blocks, `pooled` otherwise.
pub fn group_of(draws: &PosteriorDraws, column: &str) -> &'static str {
    let base = column.split('[').next().unwrap_or(column);
    if FAMILIES.contains(&base) {
        return "indication";
    }
    match draws.model.layout.block(base) {
        Some(b) if b.support == Support::Binary => "mixture_probability",
        Some(b) if b.support == Support::UnitInterval => "mixture_weight",
        Some(b) if !b.labels.iter().all(String::is_empty) => "component",
        _ => "pooled",
    }
}

/// Summary rows for every monitored column, indication-level values first.
pub fn summary_rows(draws: &PosteriorDraws) -> CliResult<Vec<SummaryRow>> {
    let mut rows = Vec::with_capacity(draws.columns.len());
    for pass in [true, false] {
        for c in &draws.columns {
            let g = group_of(draws, c);
            if (g == "indication") == pass {
                rows.push(SummaryRow::from_draws(
                    c,
                    g,
                    &draws.column(c).expect("monitored column"),
                )?);
            }
        }
    }
    Ok(rows)
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| io_err(path, e))
}

pub fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> CliResult<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_summary(dir: &Path, rows: &[SummaryRow]) -> CliResult<()> {
    write_rows(
        &dir.join("summary.csv"),
        &["parameter", "group", "mean", "sd", "q2.5", "median", "q97.5"],
        rows.iter().map(|r| {
            vec![
                r.parameter.clone(),
                r.group.clone(),
                num(r.mean),
                num(r.sd),
                num(r.lo95),
                num(r.median),
                num(r.hi95),
            ]
        }),
    )
}

pub fn write_forest(dir: &Path, rows: &[SummaryRow]) -> CliResult<()> {
    write_rows(
        &dir.join("forest.csv"),
        &["label", "median", "lo95", "hi95", "group"],
        rows.iter().map(|r| {
            vec![
                r.parameter.clone(),
                num(r.median),
                num(r.lo95),
                num(r.hi95),
                r.group.clone(),
            ]
        }),
    )
}

pub fn write_convergence(dir: &Path, report: &ConvergenceReport) -> CliResult<()> {
    write_rows(
        &dir.join("convergence.csv"),
        &["parameter", "rhat", "ess", "flag", "warning"],
        report.entries.iter().map(|e| {
            vec![
                e.name.clone(),
                num(e.rhat),
                format!("{:.1}", e.ess),
                e.flag.to_string(),
                e.warning.clone().unwrap_or_default(),
            ]
        }),
    )
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn write_draws(path: &Path, draws: &PosteriorDraws) -> CliResult<()> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| io_err(path, e));
    put(DRAWS_MAGIC)?;
    for n in [draws.n_chains(), draws.n_draws(), draws.n_columns()] {
        put(&(n as u64).to_le_bytes())?;
    }
    for c in &draws.columns {
        put(&(c.len() as u64).to_le_bytes())?;
        put(c.as_bytes())?;
    }
    for ch in &draws.chains {
        for x in &ch.values {
            put(&x.to_le_bytes())?;
        }
    }
    for ch in &draws.chains {
        for x in &ch.deviance {
            put(&x.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads a `draws.bin` file back into `(columns, per-chain values,
/// per-chain deviance)`.
pub fn read_draws(bytes: &[u8]) -> Option<(Vec<String>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut pos = 8;
    if bytes.get(..8)? != DRAWS_MAGIC {
        return None;
    }
    let u64_at = |pos: &mut usize| -> Option<u64> {
        let v = u64::from_le_bytes(bytes.get(*pos..*pos + 8)?.try_into().ok()?);
        *pos += 8;
        Some(v)
    };
    let (nc, nd, nk) = (
        u64_at(&mut pos)? as usize,
        u64_at(&mut pos)? as usize,
        u64_at(&mut pos)? as usize,
    );
    let mut names = Vec::with_capacity(nk);
    for _ in 0..nk {
        let len = u64_at(&mut pos)? as usize;
        names.push(String::from_utf8(bytes.get(pos..pos + len)?.to_vec()).ok()?);
        pos += len;
    }
    let f64s = |count: usize, pos: &mut usize| -> Option<Vec<f64>> {
        let out = bytes
            .get(*pos..*pos + 8 * count)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        *pos += 8 * count;
        Some(out)
    };
    let values = (0..nc).map(|_| f64s(nd * nk, &mut pos)).collect::<Option<Vec<_>>>()?;
    let deviance = (0..nc).map(|_| f64s(nd, &mut pos)).collect::<Option<Vec<_>>>()?;
    (pos == bytes.len()).then_some((names, values, deviance))
}
