//! CSV traces and the run manifest.
//!
//! Numbers are written with 17 significant digits so that parsing recovers
//! the written value exactly. Densities are reported in veh/km and speeds in
//! km/h; everything else stays SI.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::units::PlotUnit;
use crate::error::{Error, Result};
use crate::simulator::SimResult;

pub const SNAPSHOT_HEADER: [&str; 5] = ["t", "x", "rho_veh_per_km", "v_km_per_h", "h_acc_s"];
pub const NORMS_HEADER: [&str; 7] = ["t", "l2_rho", "l2_v", "l2_hacc", "V0", "V1", "V2"];

/// `x` with 17 significant digits.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt17).unwrap_or_default()
}

/// One row of the norms CSV, in the CSV's units. `v0` is `ln V0`; the
/// Lyapunov columns are empty between monitor samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormRow {
    pub t: f64,
    pub l2_rho: f64,
    pub l2_v: f64,
    pub l2_hacc: f64,
    pub v0: Option<f64>,
    pub v1: Option<f64>,
    pub v2: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnapshotRow {
    pub t: f64,
    pub x: f64,
    pub rho: f64,
    pub v: f64,
    pub h_acc: f64,
}

pub fn norm_rows(result: &SimResult) -> Vec<NormRow> {
    result
        .norms
        .iter()
        .map(|n| NormRow {
            t: n.t,
            l2_rho: PlotUnit::Density.from_si(n.l2_rho),
            l2_v: PlotUnit::Speed.from_si(n.l2_v),
            l2_hacc: n.l2_hacc,
            v0: n.lyapunov.map(|l| l.ln_v0),
            v1: n.lyapunov.map(|l| l.v1),
            v2: n.lyapunov.map(|l| l.v2),
        })
        .collect()
}

pub fn snapshot_rows(result: &SimResult) -> Vec<SnapshotRow> {
    let g = &result.grid;
    result
        .snapshots
        .iter()
        .flat_map(|s| {
            (0..g.nodes()).map(move |i| SnapshotRow {
                t: s.t,
                x: g.x(i),
                rho: PlotUnit::Density.from_si(s.rho[i]),
                v: PlotUnit::Speed.from_si(s.v[i]),
                h_acc: s.h_acc[i],
            })
        })
        .collect()
}

pub fn write_norms<W: Write>(w: W, rows: &[NormRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(NORMS_HEADER)?;
    for r in rows {
        out.write_record([
            fmt17(r.t),
            fmt17(r.l2_rho),
            fmt17(r.l2_v),
            fmt17(r.l2_hacc),
            fmt_opt(r.v0),
            fmt_opt(r.v1),
            fmt_opt(r.v2),
        ])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_snapshots<W: Write>(w: W, rows: &[SnapshotRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SNAPSHOT_HEADER)?;
    for r in rows {
        out.write_record([fmt17(r.t), fmt17(r.x), fmt17(r.rho), fmt17(r.v), fmt17(r.h_acc)])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn check_header(found: &csv::StringRecord, want: &[&str], what: &str) -> Result<()> {
    if found.iter().ne(want.iter().copied()) {
        return Err(Error::Validation(format!(
            "{what} header is `{}`, expected `{}`",
            found.iter().collect::<Vec<_>>().join(","),
            want.join(",")
        )));
    }
    Ok(())
}

fn parse_cell(record: &csv::StringRecord, i: usize, line: u64) -> Result<Option<f64>> {
    let cell = record.get(i).unwrap_or("");
    if cell.is_empty() {
        return Ok(None);
    }
    cell.parse().map(Some).map_err(|_| Error::Validation(format!("line {line}: `{cell}` is not a number")))
}

fn required(record: &csv::StringRecord, i: usize, line: u64) -> Result<f64> {
    parse_cell(record, i, line)?.ok_or_else(|| Error::Validation(format!("line {line}: column {} is empty", i + 1)))
}

fn records<R: Read>(r: R, header: &[&str], what: &str) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut input = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    check_header(input.headers()?, header, what)?;
    let mut out = Vec::new();
    for record in input.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(Error::Validation(format!(
                "line {line}: expected {} fields, got {}",
                header.len(),
                record.len()
            )));
        }
        out.push((line, record));
    }
    Ok(out)
}

/// Parses a norms CSV written by [`write_norms`].
pub fn read_norms<R: Read>(r: R) -> Result<Vec<NormRow>> {
    records(r, &NORMS_HEADER, "norms CSV")?
        .into_iter()
        .map(|(line, rec)| {
            Ok(NormRow {
                t: required(&rec, 0, line)?,
                l2_rho: required(&rec, 1, line)?,
                l2_v: required(&rec, 2, line)?,
                l2_hacc: required(&rec, 3, line)?,
                v0: parse_cell(&rec, 4, line)?,
                v1: parse_cell(&rec, 5, line)?,
                v2: parse_cell(&rec, 6, line)?,
            })
        })
        .collect()
}

pub fn read_snapshots<R: Read>(r: R) -> Result<Vec<SnapshotRow>> {
    records(r, &SNAPSHOT_HEADER, "snapshot CSV")?
        .into_iter()
        .map(|(line, rec)| {
            Ok(SnapshotRow {
                t: required(&rec, 0, line)?,
                x: required(&rec, 1, line)?,
                rho: required(&rec, 2, line)?,
                v: required(&rec, 3, line)?,
                h_acc: required(&rec, 4, line)?,
            })
        })
        .collect()
}

/// Creates `path` and hands a buffered writer to `body`.
pub fn write_file(path: &Path, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    body(&mut w).map_err(|e| match e {
        Error::Csv(c) if c.is_io_error() => Error::io(path, std::io::Error::other(c.to_string())),
        other => other,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Headline numbers of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_l2_rho: f64,
    pub final_l2_v: f64,
    pub final_l2_hacc: f64,
    pub h_acc_min: f64,
    pub h_acc_max: f64,
    pub saturations: u64,
    pub max_courant: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ttt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fuel: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comfort: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lyapunov_decay_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub label: String,
    pub config_digest: String,
    pub version: String,
    /// Wall-clock seconds since the Unix epoch.
    pub started: f64,
    pub finished: f64,
    /// `ok`, or the error that stopped the run.
    pub status: String,
    pub outputs: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<RunSummary>,
}

impl RunManifest {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text =
            toml::to_string_pretty(self).map_err(|e| Error::Validation(format!("manifest does not serialise: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::ConfigParse { line: 0, message: e.message().to_string() })
    }
}

pub fn unix_now() -> f64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}
