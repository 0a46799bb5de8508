//! CSV writers for the three report schemas and the merge/summary step.

use std::path::{Path, PathBuf};

use super::eval::{AblationRow, CompoundRow, ExtrapolationRow};
use crate::error::{Error, Result};

pub const EXTRAPOLATION_HEADER: [&str; 8] = [
    "transform",
    "operator",
    "degree_mode",
    "K",
    "degree_units",
    "group_index",
    "accuracy",
    "n",
];
pub const COMPOUND_HEADER: [&str; 5] = ["kx", "ky", "accuracy", "n", "in_training_cross"];
pub const ABLATION_HEADER: [&str; 5] = ["N", "K", "seed", "acc_pose", "acc_cls"];

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Fixed four-decimal accuracy keeps reports stable and diffable.
fn acc(x: f64) -> String {
    format!("{x:.4}")
}

pub fn write_extrapolation(path: &Path, rows: &[ExtrapolationRow]) -> Result<()> {
    write_rows(
        path,
        &EXTRAPOLATION_HEADER,
        rows.iter().map(|r| {
            vec![
                r.transform.to_string(),
                r.operator.clone(),
                r.degree_mode.to_string(),
                r.k.map(|k| k.to_string()).unwrap_or_default(),
                r.degree_units.to_string(),
                r.group_index.to_string(),
                acc(r.accuracy),
                r.n.to_string(),
            ]
        }),
    )
}

pub fn write_compound(path: &Path, rows: &[CompoundRow]) -> Result<()> {
    write_rows(
        path,
        &COMPOUND_HEADER,
        rows.iter().map(|r| {
            vec![
                r.kx.to_string(),
                r.ky.to_string(),
                acc(r.accuracy),
                r.n.to_string(),
                r.in_training_cross.to_string(),
            ]
        }),
    )
}

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    write_rows(
        path,
        &ABLATION_HEADER,
        rows.iter().map(|r| {
            vec![
                r.n.to_string(),
                r.k.to_string(),
                r.seed.map_or("mean".to_string(), |s| s.to_string()),
                acc(r.acc_pose),
                acc(r.acc_cls),
            ]
        }),
    )
}

/// Header and rows of one report file.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::format(path.display().to_string(), offset, format!("{kind:?}")),
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(|e| csv_error(path, e))?.iter().map(str::to_string).collect());
    }
    Ok(Table { header, rows })
}

/// Concatenates report files that share one schema.
pub fn merge_tables(inputs: &[PathBuf]) -> Result<Table> {
    let (first, rest) = inputs
        .split_first()
        .ok_or_else(|| Error::config("report needs at least one input"))?;
    let mut merged = read_table(first)?;
    for path in rest {
        let t = read_table(path)?;
        if t.header != merged.header {
            return Err(Error::config(format!(
                "{} has columns `{}`, expected `{}`",
                path.display(),
                t.header.join(","),
                merged.header.join(",")
            )));
        }
        merged.rows.extend(t.rows);
    }
    Ok(merged)
}

pub fn write_table(path: &Path, t: &Table) -> Result<()> {
    let header: Vec<&str> = t.header.iter().map(String::as_str).collect();
    write_rows(path, &header, t.rows.iter().cloned())
}

/// Plain-text table with columns padded to their widest cell.
pub fn summarize(t: &Table) -> String {
    let mut widths: Vec<usize> = t.header.iter().map(String::len).collect();
    for r in &t.rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| -> String {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(&t.header);
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for r in &t.rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}
