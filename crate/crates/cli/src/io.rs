//! Headerless CSV matrices, JSON reports and hashing.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use bjmd::evaluation::LabelMatrix;
use nalgebra::DMatrix;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Writes one matrix row per line with 17 significant digits.
pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    for i in 0..m.nrows() {
        let line: Vec<String> = m.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(out, "{}", line.join(",")).with_context(|| format!("writing {}", path.display()))?;
    }
    out.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_records<T>(path: &Path, parse: impl Fn(&str) -> Option<T>) -> Result<(usize, usize, Vec<T>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut values = Vec::new();
    let mut ncols = None;
    let mut nrows = 0;
    for rec in reader.records() {
        let rec = rec.with_context(|| format!("reading {}", path.display()))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(nrows as u64 + 1);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        match ncols {
            None => ncols = Some(rec.len()),
            Some(n) if n != rec.len() => {
                bail!("{}:{line}: expected {n} fields, found {}", path.display(), rec.len())
            }
            _ => {}
        }
        for (col, field) in rec.iter().enumerate() {
            let v = parse(field).ok_or_else(|| {
                anyhow!("{}:{line}: field {} ('{field}') is not a valid value", path.display(), col + 1)
            })?;
            values.push(v);
        }
        nrows += 1;
    }
    let ncols = ncols.ok_or_else(|| anyhow!("{}: no data rows", path.display()))?;
    Ok((nrows, ncols, values))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let (r, c, v) = read_records(path, |s| s.parse::<f64>().ok().filter(|x| x.is_finite()))?;
    Ok(DMatrix::from_row_slice(r, c, &v))
}

pub fn write_labels(path: &Path, labels: &LabelMatrix) -> Result<()> {
    let m = labels.matrix();
    let mut text = String::new();
    for i in 0..m.nrows() {
        let line: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        text.push_str(&line.join(","));
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_labels(path: &Path) -> Result<LabelMatrix> {
    let (r, c, v) = read_records(path, |s| s.parse::<u8>().ok().filter(|x| *x <= 1))?;
    LabelMatrix::new(DMatrix::from_row_slice(r, c, &v)).with_context(|| format!("labels in {}", path.display()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating directory {}", path.display()))
}

/// `×100`, rounded to two decimals.
pub fn percent(r: f64) -> f64 {
    (r * 10_000.0).round() / 100.0
}
