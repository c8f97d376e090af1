//! One configured run written to disk.

use std::path::{Path, PathBuf};

use log::{info, warn};

use super::config::RunConfig;
use super::output::{
    fmt17, norm_rows, snapshot_rows, unix_now, write_file, write_norms, write_snapshots, RunManifest, RunSummary,
};
use crate::controller::ControlMode;
use crate::error::{Error, Result};
use crate::simulator::metrics::{metrics, FuelReading, Metrics};
use crate::simulator::{run_scenario, EventKind, SimConfig, SimResult};

pub const SNAPSHOTS_FILE: &str = "snapshots.csv";
pub const NORMS_FILE: &str = "norms.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";

/// Version string recorded in every manifest.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Indices of a controlled run and, when asked for, of the open-loop run
/// from the same initial state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub reading: FuelReading,
    pub controlled: Metrics,
    pub open_loop: Option<Metrics>,
}

impl MetricsReport {
    pub fn improvement(&self) -> Option<[f64; 3]> {
        self.open_loop.map(|b| self.controlled.improvement_over(&b))
    }
}

/// Same scenario with `u = 0` and no monitors.
pub fn open_loop_config(sim: &SimConfig) -> SimConfig {
    SimConfig {
        mode: ControlMode::OpenLoop,
        snapshot_every: 0,
        lyapunov_every: 0,
        record_frames: true,
        record_trajectory: false,
        ..sim.clone()
    }
}

/// Evaluates the indices for both fuel readings; `None` when the horizon is
/// zero or longer than the run.
pub fn metrics_reports(cfg: &RunConfig, result: &SimResult) -> Result<Vec<MetricsReport>> {
    let horizon = cfg.output.metrics_horizon;
    if horizon <= 0.0 || horizon > cfg.sim.t_final + 1e-9 {
        if horizon > 0.0 {
            warn!("metrics horizon {horizon} s exceeds the run length {} s; skipping metrics", cfg.sim.t_final);
        }
        return Ok(Vec::new());
    }
    let baseline = if cfg.output.compare_open_loop && cfg.sim.mode != ControlMode::OpenLoop {
        Some(run_scenario(&open_loop_config(&cfg.sim), &cfg.params)?)
    } else {
        None
    };
    [FuelReading::AsPrinted, FuelReading::Cubic]
        .into_iter()
        .map(|reading| {
            Ok(MetricsReport {
                reading,
                controlled: metrics(&result.grid, &result.frames, horizon, reading)?,
                open_loop: baseline.as_ref().map(|b| metrics(&b.grid, &b.frames, horizon, reading)).transpose()?,
            })
        })
        .collect()
}

fn reading_name(r: FuelReading) -> &'static str {
    match r {
        FuelReading::AsPrinted => "as-printed",
        FuelReading::Cubic => "cubic",
    }
}

fn write_metrics(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    write_file(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "fuel_reading",
            "ttt",
            "fuel",
            "comfort",
            "open_loop_ttt",
            "open_loop_fuel",
            "open_loop_comfort",
            "ttt_improvement_pct",
            "fuel_improvement_pct",
            "comfort_improvement_pct",
        ])?;
        for r in reports {
            let c = r.controlled;
            let b = r.open_loop.map(|b| [b.ttt, b.fuel, b.comfort]);
            let cells = |v: Option<[f64; 3]>| v.map_or([String::new(), String::new(), String::new()], |v| v.map(fmt17));
            let [bt, bf, bc] = cells(b);
            let [it, ifu, ic] = cells(r.improvement());
            out.write_record([
                reading_name(r.reading).to_string(),
                fmt17(c.ttt),
                fmt17(c.fuel),
                fmt17(c.comfort),
                bt,
                bf,
                bc,
                it,
                ifu,
                ic,
            ])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    })
}

fn write_events(path: &Path, result: &SimResult) -> Result<()> {
    write_file(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "kind", "nodes", "x", "rho_veh_per_km"])?;
        for e in &result.events {
            let row = match &e.kind {
                EventKind::Saturation { nodes } => {
                    [fmt17(e.t), "saturation".into(), nodes.to_string(), String::new(), String::new()]
                }
                EventKind::LeftCongestedRegime { nodes, x, rho } => {
                    [fmt17(e.t), "left-congested-regime".into(), nodes.to_string(), fmt17(*x), fmt17(rho * 1000.0)]
                }
            };
            out.write_record(row)?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    })
}

/// Headline numbers; the decay rate is fitted after the first delay.
pub fn summarize(cfg: &RunConfig, result: &SimResult, reports: &[MetricsReport]) -> RunSummary {
    let last = result.norms.last();
    let improvement = reports.iter().find(|r| r.reading == FuelReading::AsPrinted).and_then(|r| r.improvement());
    let fit_from = cfg.sim.d_ctrl + cfg.sim.dt;
    RunSummary {
        final_l2_rho: last.map_or(0.0, |n| n.l2_rho),
        final_l2_v: last.map_or(0.0, |n| n.l2_v),
        final_l2_hacc: last.map_or(0.0, |n| n.l2_hacc),
        h_acc_min: result.h_acc_range.0,
        h_acc_max: result.h_acc_range.1,
        saturations: result.saturations,
        max_courant: result.max_courant,
        ttt: improvement.map(|i| i[0]),
        fuel: improvement.map(|i| i[1]),
        comfort: improvement.map(|i| i[2]),
        lyapunov_decay_rate: (cfg.sim.mode == ControlMode::Compensated)
            .then(|| result.lyapunov_decay_rate(fit_from, cfg.sim.t_final))
            .flatten(),
    }
}

/// Runs `cfg` and writes its traces under `out_root/<label>/`.
///
/// The manifest is written whatever happens; a failed run leaves the error in
/// its `status` and returns it.
pub fn execute(cfg: &RunConfig, out_root: &Path) -> Result<RunManifest> {
    let started = unix_now();
    let dir = out_root.join(&cfg.output.label);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut manifest = RunManifest {
        label: cfg.output.label.clone(),
        config_digest: cfg.digest(),
        version: VERSION.to_string(),
        started,
        finished: started,
        status: "ok".into(),
        outputs: Vec::new(),
        summary: None,
    };
    let outcome = run_and_write(cfg, &dir, &mut manifest.outputs);
    manifest.finished = unix_now();
    let manifest_path = dir.join(MANIFEST_FILE);
    match outcome {
        Ok(summary) => {
            manifest.summary = Some(summary);
            manifest.outputs.push(manifest_path.clone());
            manifest.write(&manifest_path)?;
            info!("run `{}` finished in {:.1} s", cfg.output.label, manifest.finished - started);
            Ok(manifest)
        }
        Err(e) => {
            manifest.status = e.to_string();
            manifest.outputs.push(manifest_path.clone());
            manifest.write(&manifest_path)?;
            Err(e)
        }
    }
}

fn run_and_write(cfg: &RunConfig, dir: &Path, outputs: &mut Vec<PathBuf>) -> Result<RunSummary> {
    let result = run_scenario(&cfg.sim, &cfg.params)?;
    let path = dir.join(SNAPSHOTS_FILE);
    write_file(&path, |w| write_snapshots(w, &snapshot_rows(&result)))?;
    outputs.push(path);
    let path = dir.join(NORMS_FILE);
    write_file(&path, |w| write_norms(w, &norm_rows(&result)))?;
    outputs.push(path);
    let path = dir.join(EVENTS_FILE);
    write_events(&path, &result)?;
    outputs.push(path);
    let reports = metrics_reports(cfg, &result)?;
    if !reports.is_empty() {
        let path = dir.join(METRICS_FILE);
        write_metrics(&path, &reports)?;
        outputs.push(path);
    }
    Ok(summarize(cfg, &result, &reports))
}
