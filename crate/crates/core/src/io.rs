//! File formats: binary and CSV matrices, PGM heatmaps, tabular outputs and
//! run manifests.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::design::ChosenDesign;
use crate::error::{Error, Result};
use crate::geometry::{DesignPoint, ImageGrid};
use crate::simulation::{ErrorRow, HyperSummaryRow};
use crate::targets::{csv_err, Criterion};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Writes `u32 rows, u32 cols` (little endian) then the entries row-major as
/// little-endian `f64`.
pub fn write_matrix_bin<W: Write>(m: &DMatrix<f64>, mut out: W) -> Result<()> {
    let dim = |d: usize| u32::try_from(d).map_err(|_| Error::Parse(format!("matrix dimension {d} exceeds u32")));
    out.write_all(&dim(m.nrows())?.to_le_bytes())?;
    out.write_all(&dim(m.ncols())?.to_le_bytes())?;
    let mut buf = Vec::with_capacity(m.ncols() * 8);
    for r in 0..m.nrows() {
        buf.clear();
        for c in 0..m.ncols() {
            buf.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_matrix_bin<R: Read>(mut input: R) -> Result<DMatrix<f64>> {
    let mut head = [0u8; 8];
    input
        .read_exact(&mut head)
        .map_err(|e| Error::Parse(format!("matrix header: {e}")))?;
    let rows = u32::from_le_bytes(head[..4].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(head[4..].try_into().expect("4 bytes")) as usize;
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    let want = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Parse("matrix dimensions overflow".into()))?;
    if body.len() != want {
        return Err(Error::Parse(format!("matrix body has {} bytes, header implies {want}", body.len())));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn save_matrix_bin(m: &DMatrix<f64>, path: &Path) -> Result<()> {
    write_matrix_bin(m, BufWriter::new(File::create(path)?))
}

pub fn load_matrix_bin(path: &Path) -> Result<DMatrix<f64>> {
    read_matrix_bin(BufReader::new(File::open(path)?))
}

/// Headerless CSV, one matrix row per line, shortest round-trip formatting.
pub fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for r in 0..m.nrows() {
        w.write_record((0..m.ncols()).map(|c| m[(r, c)].to_string()))
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv<R: Read>(input: R) -> Result<DMatrix<f64>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        match cols {
            None => cols = Some(rec.len()),
            Some(c) if c != rec.len() => {
                return Err(Error::Parse(format!("row {rows} has {} columns, expected {c}", rec.len())))
            }
            _ => {}
        }
        for f in rec.iter() {
            values.push(f.trim().parse::<f64>().map_err(|e| Error::Parse(format!("row {rows}: {f:?}: {e}")))?);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, cols.unwrap_or(0), &values))
}

/// Plain-text grey map; the first written row is the top of the domain.
/// Values are mapped linearly from `[lo, hi]` onto `0..=255`.
pub fn write_pgm<W: Write>(grid: &ImageGrid, values: &[f64], lo: f64, hi: f64, mut out: W) -> Result<()> {
    let n = grid.side();
    if values.len() != grid.pixel_count() {
        return Err(Error::DimensionMismatch {
            what: "heatmap",
            expected: grid.pixel_count(),
            found: values.len(),
        });
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    writeln!(out, "P2\n{n} {n}\n255")?;
    for row in (0..n).rev() {
        let line: Vec<String> = (0..n)
            .map(|col| {
                let v = (values[grid.index(row, col)] - lo) / span;
                ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string()
            })
            .collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

/// Heatmap scaled to the data range.
pub fn save_pgm(grid: &ImageGrid, values: &[f64], path: &Path) -> Result<()> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    write_pgm(grid, values, lo, hi, BufWriter::new(File::create(path)?))
}

/// Design list with columns `angle_deg, offset`.
pub fn write_designs_csv<W: Write>(points: &[DesignPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["angle_deg", "offset"]).map_err(csv_err)?;
    for p in points {
        w.write_record([p.angle_deg.to_string(), p.offset.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_designs_csv<R: Read>(input: R) -> Result<Vec<DesignPoint>> {
    #[derive(Deserialize)]
    struct Row {
        angle_deg: f64,
        offset: f64,
    }
    let mut rd = csv::Reader::from_reader(input);
    rd.deserialize::<Row>()
        .map(|r| r.map(|r| DesignPoint::new(r.angle_deg, r.offset)).map_err(csv_err))
        .collect()
}

/// Per-round target values of the chosen designs.
pub fn write_targets_csv<W: Write>(criterion: Criterion, chosen: &[ChosenDesign], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "angle_deg", "offset", criterion.column_name(), "display_value", "active_rays"])
        .map_err(csv_err)?;
    for (k, c) in chosen.iter().enumerate() {
        w.write_record([
            (k + 1).to_string(),
            c.point.angle_deg.to_string(),
            c.point.offset.to_string(),
            c.value.raw.to_string(),
            c.value.display.to_string(),
            c.m_active.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Error table with columns `policy, k, mean_error, std_error`.
pub fn write_error_table<W: Write>(rows: &[ErrorRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    if rows.is_empty() {
        w.write_record(["policy", "k", "mean_error", "std_error"]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_error_table<R: Read>(input: R) -> Result<Vec<ErrorRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}

/// Correlation length estimate after each measurement, `k` counting from 1.
pub fn write_hyper_trace<W: Write>(trace: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "ell"]).map_err(csv_err)?;
    for (k, ell) in trace.iter().enumerate() {
        w.write_record([(k + 1).to_string(), ell.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_hyper_summary<W: Write>(rows: &[HyperSummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Provenance record written next to every output set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    /// Named sub-seeds used by the run.
    #[serde(default)]
    pub seeds: Vec<(String, u64)>,
    #[serde(default)]
    pub threads: Option<usize>,
}

impl Manifest {
    pub fn new(command: &str, config_json: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            version: VERSION.to_string(),
            config_sha256: sha256_hex(config_json.as_bytes()),
            seed,
            seeds: Vec::new(),
            threads: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}
