//! One run per value of a numeric key, in parallel.

use std::path::{Path, PathBuf};

use log::{error, info};
use rayon::prelude::*;

use super::config::{numeric_key, RunConfig};
use super::output::{fmt17, write_file, RunManifest};
use super::run::execute;
use super::units::parse_quantity;
use crate::error::{Error, Result};
use crate::linearize::coefficients;
use crate::model::equilibrium;

pub const SUMMARY_FILE: &str = "sweep_summary.csv";

const SUMMARY_HEADER: [&str; 13] = [
    "value",
    "label",
    "status",
    "final_l2_rho",
    "final_l2_v",
    "final_l2_hacc",
    "h_acc_min",
    "h_acc_max",
    "ttt_improvement_pct",
    "fuel_improvement_pct",
    "comfort_improvement_pct",
    "c6",
    "message",
];

/// Outcome of one sweep point.
#[derive(Debug, Clone)]
pub struct SweepEntry {
    /// SI value of the swept key.
    pub value: f64,
    pub label: String,
    pub manifest: Option<RunManifest>,
    pub error: Option<String>,
    /// Process exit code the failure maps to; 0 on success.
    pub exit_code: i32,
    /// Input coefficient of the speed equation at this point, when defined.
    pub c6: Option<f64>,
}

impl SweepEntry {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub axis: String,
    pub entries: Vec<SweepEntry>,
    pub summary: PathBuf,
}

impl SweepReport {
    pub fn failures(&self) -> usize {
        self.entries.iter().filter(|e| !e.ok()).count()
    }
}

/// Parses a comma-separated value list in the unit system of `axis`.
pub fn parse_values(axis: &str, list: &str) -> Result<Vec<f64>> {
    let (_, _, dim) = numeric_key(axis).ok_or_else(|| Error::Validation(format!("`{axis}` is not a numeric key")))?;
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_quantity(s, dim).map_err(|m| Error::Validation(format!("sweep value: {m}"))))
        .collect()
}

/// Label of the run for `value`: the base label, the key and the value with
/// `.` and `-` spelled out so the name is a plain path component.
pub fn point_label(base: &str, axis: &str, value: f64) -> String {
    let key = numeric_key(axis).map_or(axis, |k| k.1);
    let v = format!("{value}").replace('-', "m").replace('.', "p");
    format!("{base}_{key}_{v}")
}

fn sweep_point(base: &RunConfig, axis: &str, value: f64, out_root: &Path) -> SweepEntry {
    let label = point_label(&base.output.label, axis, value);
    let mut cfg = base.clone();
    cfg.output.label = label.clone();
    let c6 = |cfg: &RunConfig| {
        let eq = equilibrium(&cfg.params).ok()?;
        coefficients(&eq, &cfg.params, cfg.sim.k, cfg.sim.d_ctrl).ok().map(|c| c.c6)
    };
    let outcome = cfg.set(axis, value).and_then(|()| cfg.validate()).and_then(|()| execute(&cfg, out_root));
    match outcome {
        Ok(m) => SweepEntry { value, label, manifest: Some(m), error: None, exit_code: 0, c6: c6(&cfg) },
        Err(e) => {
            error!("sweep point {label}: {e}");
            let manifest = RunManifest::read(&out_root.join(&label).join(super::run::MANIFEST_FILE)).ok();
            SweepEntry { value, label, manifest, error: Some(e.to_string()), exit_code: e.exit_code(), c6: c6(&cfg) }
        }
    }
}

/// Runs every value with at most `parallelism` runs at once. Failed points
/// are recorded in the summary; the sweep itself only fails on I/O.
pub fn sweep(base: &RunConfig, axis: &str, values: &[f64], parallelism: usize, out_root: &Path) -> Result<SweepReport> {
    if numeric_key(axis).is_none() {
        return Err(Error::Validation(format!("`{axis}` is not a numeric key")));
    }
    std::fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    info!("sweeping {axis} over {} values", values.len());
    let entries: Vec<SweepEntry> =
        pool.install(|| values.par_iter().map(|&v| sweep_point(base, axis, v, out_root)).collect());
    let summary = out_root.join(format!("{}_{SUMMARY_FILE}", base.output.label));
    write_summary(&summary, &entries)?;
    Ok(SweepReport { axis: axis.to_string(), entries, summary })
}

fn write_summary(path: &Path, entries: &[SweepEntry]) -> Result<()> {
    write_file(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(SUMMARY_HEADER)?;
        for e in entries {
            let s = e.manifest.as_ref().and_then(|m| m.summary.clone());
            let num = |f: Option<f64>| f.map(fmt17).unwrap_or_default();
            out.write_record([
                fmt17(e.value),
                e.label.clone(),
                if e.ok() { "ok".into() } else { "failed".into() },
                num(s.as_ref().map(|s| s.final_l2_rho * 1000.0)),
                num(s.as_ref().map(|s| s.final_l2_v * 3.6)),
                num(s.as_ref().map(|s| s.final_l2_hacc)),
                num(s.as_ref().map(|s| s.h_acc_min)),
                num(s.as_ref().map(|s| s.h_acc_max)),
                num(s.as_ref().and_then(|s| s.ttt)),
                num(s.as_ref().and_then(|s| s.fuel)),
                num(s.as_ref().and_then(|s| s.comfort)),
                num(e.c6),
                e.error.clone().unwrap_or_default(),
            ])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.sim.t_final = 5.0;
        cfg.output.metrics_horizon = 0.0;
        cfg.output.label = "s".into();
        cfg
    }

    #[test]
    fn values_use_the_axis_units() {
        let v = parse_values("q_in", "1200 veh/h, 0.3").unwrap();
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(v[1], 0.3);
        assert!(parse_values("D_actual", "3,4,five").is_err());
        assert!(parse_values("colour", "1").is_err());
        assert!(parse_values("d_actual", "").unwrap().is_empty());
    }

    #[test]
    fn labels_are_deterministic_path_components() {
        assert_eq!(point_label("nominal", "D_actual", 3.0), "nominal_d_actual_3");
        assert_eq!(point_label("n", "alpha", 0.05), "n_alpha_0p05");
    }

    #[test]
    fn empty_sweep_succeeds_with_an_empty_summary() {
        let dir = tempfile::tempdir().unwrap();
        let r = sweep(&short(), "d_actual", &[], 2, dir.path()).unwrap();
        assert!(r.entries.is_empty());
        assert_eq!(std::fs::read_to_string(&r.summary).unwrap().lines().count(), 1);
    }

    #[test]
    fn failed_points_are_recorded_and_the_rest_run() {
        let dir = tempfile::tempdir().unwrap();
        let r = sweep(&short(), "D_actual", &[3.0, 4.3, 5.0], 3, dir.path()).unwrap();
        assert_eq!(r.entries.len(), 3);
        assert_eq!(r.failures(), 1);
        assert!(!r.entries[1].ok());
        let text = std::fs::read_to_string(&r.summary).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().nth(2).unwrap().contains("failed"));
    }

    #[test]
    fn input_coefficient_grows_with_penetration() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = short();
        base.sim.t_final = 0.5;
        let alphas = [0.05, 0.1, 0.15, 0.2, 0.25, 0.3];
        let r = sweep(&base, "alpha", &alphas, 4, dir.path()).unwrap();
        let c6: Vec<f64> = r.entries.iter().map(|e| e.c6.unwrap()).collect();
        for w in c6.windows(2) {
            assert!(w[1] > w[0]);
        }
    }
}
