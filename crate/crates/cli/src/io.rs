//! CSV readers and writers. Every written CSV starts with a `# <schema> v1`
//! line; readers skip `#` lines.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use mbll_core::em::EmTrace;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

pub fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, v)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// CSV writer with the schema line already emitted.
pub fn csv_writer(path: &Path, schema: &str, header: &[String]) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    let mut w = create(path)?;
    writeln!(w, "# {schema} v{SCHEMA_VERSION}")?;
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(header)?;
    Ok(wr)
}

pub fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v}")
    }
}

/// Columns `x_names..., y_names...`, one row per sample.
pub fn write_samples(path: &Path, schema: &str, blocks: &[(&[String], &DMatrix<f64>)]) -> Result<(), CliError> {
    let header: Vec<String> = blocks.iter().flat_map(|(n, _)| n.iter().cloned()).collect();
    let mut wr = csv_writer(path, schema, &header)?;
    let n = blocks.first().map_or(0, |(_, m)| m.ncols());
    for j in 0..n {
        let row: Vec<String> = blocks.iter().flat_map(|(_, m)| m.column(j).iter().map(|v| fmt(*v)).collect::<Vec<_>>()).collect();
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads the named columns into a `names.len() × N` matrix per group.
pub fn read_columns(path: &Path, groups: &[&[String]]) -> Result<Vec<DMatrix<f64>>, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut idx = Vec::new();
    for g in groups {
        let mut gi = Vec::new();
        for name in g.iter() {
            gi.push(
                headers
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| CliError::Input(format!("{}: missing column '{name}'", path.display())))?,
            );
        }
        idx.push(gi);
    }
    let mut cols: Vec<Vec<Vec<f64>>> = idx.iter().map(|g| vec![Vec::new(); g.len()]).collect();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (g, gi) in idx.iter().enumerate() {
            for (k, &c) in gi.iter().enumerate() {
                let s = rec.get(c).unwrap_or("").trim();
                let v: f64 = s
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| CliError::Input(format!("row {}: non-numeric value '{s}' in '{}'", r + 1, headers[c])))?;
                cols[g][k].push(v);
            }
        }
    }
    Ok(cols
        .into_iter()
        .map(|g| {
            let n = g.first().map_or(0, Vec::len);
            DMatrix::from_fn(g.len(), n, |i, j| g[i][j])
        })
        .collect())
}

pub fn write_trace(path: &Path, trace: &EmTrace) -> Result<(), CliError> {
    let header: Vec<String> = [
        "iteration", "log_evidence", "log_map", "trace_k", "trace_psi", "m_rel_err", "neg_q1", "sigma2_mean", "lr_halvings",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut wr = csv_writer(path, "mbll-trace", &header)?;
    for r in &trace.records {
        wr.write_record([
            r.iteration.to_string(),
            fmt(r.log_evidence),
            fmt(r.log_map),
            fmt(r.trace_k),
            fmt(r.trace_psi),
            fmt(r.m_rel_err),
            fmt(r.neg_q1),
            fmt(r.sigma2_mean),
            r.lr_halvings.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
