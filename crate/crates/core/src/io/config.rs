//! TOML run configuration with units, defaults and line-numbered errors.
//!
//! ```toml
//! [model]
//! q_in = "1200 veh/h"
//! alpha = 0.15
//!
//! [control]
//! mode = "compensated"
//! d_ctrl = "4 s"
//!
//! [simulation]
//! dt = "0.5 s"
//! d_actual = "4 s"
//!
//! [output]
//! label = "nominal"
//! ```
//!
//! Bare numbers are SI. Missing keys take the nominal profile and are logged.

use std::path::{Path, PathBuf};

use log::info;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use toml::Spanned;

use super::units::{parse_quantity, Dimension};
use crate::controller::{ControlMode, WarmUp};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::simulator::{preflight, InitialCondition, Plant, SimConfig};

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawValue {
    Number(f64),
    Text(String),
}

type Field = Option<Spanned<RawValue>>;
type Count = Option<Spanned<i64>>;
type Word = Option<Spanned<String>>;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    length: Field,
    vehicle_length: Field,
    q_in: Field,
    tau_acc: Field,
    tau_m: Field,
    h_m: Field,
    h_acc_bar: Field,
    alpha: Field,
    v_f: Field,
    h_min: Field,
    h_max: Field,
    rho_min: Field,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawControl {
    mode: Word,
    k: Field,
    d_ctrl: Field,
    warm_up: Word,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSimulation {
    dt: Field,
    dx: Field,
    t_final: Field,
    d_actual: Field,
    plant: Word,
    ic_amplitude: Field,
    ic_waves: Field,
    runaway_factor: Field,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    label: Word,
    dir: Word,
    snapshot_every: Count,
    lyapunov_every: Count,
    metrics_horizon: Field,
    compare_open_loop: Option<Spanned<bool>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVerify {
    kernel_length: Field,
    kernel_s: Field,
    kernel_nodes: Count,
    oracle_samples: Count,
    transform_nodes: Count,
    transform_states: Count,
    seed: Count,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    control: RawControl,
    #[serde(default)]
    simulation: RawSimulation,
    #[serde(default)]
    output: RawOutput,
    #[serde(default)]
    verify: RawVerify,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub label: String,
    /// Output directory; the command line and environment may override it.
    pub dir: Option<PathBuf>,
    /// Horizon of the performance indices (s).
    pub metrics_horizon: f64,
    /// Also run the uncontrolled road to report index improvements.
    pub compare_open_loop: bool,
}

/// Settings of the kernel and transformation self-checks.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    /// Road length for the kernel table (m).
    pub kernel_length: f64,
    /// Delay variable at which the kernel table is written (s).
    pub kernel_s: f64,
    /// Nodes per axis of the kernel table.
    pub kernel_nodes: usize,
    /// Random points per kernel region compared with the oracle.
    pub oracle_samples: usize,
    pub transform_nodes: usize,
    pub transform_states: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            kernel_length: 100.0,
            kernel_s: 2.0,
            kernel_nodes: 101,
            oracle_samples: 1000,
            transform_nodes: 201,
            transform_states: 100,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub params: ModelParams,
    pub sim: SimConfig,
    pub output: OutputConfig,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            params: ModelParams::default(),
            sim: SimConfig::default(),
            output: OutputConfig { label: "run".into(), dir: None, metrics_horizon: 300.0, compare_open_loop: true },
            verify: VerifyConfig::default(),
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

/// Turns raw fields into values, logging every default taken.
struct Resolver<'a> {
    text: &'a str,
}

impl Resolver<'_> {
    fn error(&self, span: std::ops::Range<usize>, message: String) -> Error {
        Error::ConfigParse { line: line_of(self.text, span.start), message }
    }

    fn quantity(&self, section: &str, key: &str, field: Field, dim: Dimension, default: f64) -> Result<f64> {
        let Some(field) = field else {
            info!("{section}.{key} not set, using {default} {}", dim.si_unit());
            return Ok(default);
        };
        let span = field.span();
        match field.into_inner() {
            RawValue::Number(x) if x.is_finite() => Ok(x),
            RawValue::Number(x) => Err(self.error(span, format!("{section}.{key} = {x} is not finite"))),
            RawValue::Text(t) => parse_quantity(&t, dim).map_err(|e| self.error(span, format!("{section}.{key}: {e}"))),
        }
    }

    fn optional_quantity(&self, section: &str, key: &str, field: Field, dim: Dimension) -> Result<Option<f64>> {
        match field {
            None => Ok(None),
            some => self.quantity(section, key, some, dim, f64::NAN).map(Some),
        }
    }

    fn count(&self, section: &str, key: &str, field: Count, default: usize) -> Result<usize> {
        let Some(field) = field else {
            info!("{section}.{key} not set, using {default}");
            return Ok(default);
        };
        let span = field.span();
        let n = field.into_inner();
        usize::try_from(n)
            .map_err(|_| self.error(span, format!("{section}.{key} must be a nonnegative integer, got {n}")))
    }

    fn word<T>(&self, section: &str, key: &str, field: Word, default: T, parse: impl Fn(&str) -> Option<T>) -> Result<T>
    where
        T: std::fmt::Debug,
    {
        let Some(field) = field else {
            info!("{section}.{key} not set, using {default:?}");
            return Ok(default);
        };
        let span = field.span();
        let text = field.into_inner();
        parse(&text).ok_or_else(|| self.error(span, format!("{section}.{key}: unrecognised value `{text}`")))
    }
}

fn parse_mode(s: &str) -> Option<ControlMode> {
    match s {
        "compensated" => Some(ControlMode::Compensated),
        "uncompensated" => Some(ControlMode::Uncompensated),
        "open-loop" => Some(ControlMode::OpenLoop),
        _ => None,
    }
}

fn parse_warm_up(s: &str) -> Option<WarmUp> {
    match s {
        "hold" => Some(WarmUp::Hold),
        "immediate" => Some(WarmUp::Immediate),
        _ => None,
    }
}

fn parse_plant(s: &str) -> Option<Plant> {
    match s {
        "nonlinear" => Some(Plant::Nonlinear),
        "linear" => Some(Plant::Linear),
        _ => None,
    }
}

/// Numeric keys a sweep may vary, with their section and dimension.
pub const NUMERIC_KEYS: &[(&str, &str, Dimension)] = &[
    ("model", "length", Dimension::Length),
    ("model", "vehicle_length", Dimension::Length),
    ("model", "q_in", Dimension::Flow),
    ("model", "tau_acc", Dimension::Time),
    ("model", "tau_m", Dimension::Time),
    ("model", "h_m", Dimension::Time),
    ("model", "h_acc_bar", Dimension::Time),
    ("model", "alpha", Dimension::Ratio),
    ("model", "v_f", Dimension::Speed),
    ("model", "h_min", Dimension::Time),
    ("model", "h_max", Dimension::Time),
    ("model", "rho_min", Dimension::Density),
    ("control", "k", Dimension::Rate),
    ("control", "d_ctrl", Dimension::Time),
    ("simulation", "dt", Dimension::Time),
    ("simulation", "dx", Dimension::Length),
    ("simulation", "t_final", Dimension::Time),
    ("simulation", "d_actual", Dimension::Time),
    ("simulation", "ic_amplitude", Dimension::Density),
    ("simulation", "ic_waves", Dimension::Ratio),
    ("simulation", "runaway_factor", Dimension::Ratio),
];

/// Resolves `key` or `section.key`, case-insensitively.
pub fn numeric_key(name: &str) -> Option<(&'static str, &'static str, Dimension)> {
    let name = name.trim().to_ascii_lowercase();
    let (section, key) = match name.split_once('.') {
        Some((s, k)) => (Some(s.to_string()), k.to_string()),
        None => (None, name),
    };
    NUMERIC_KEYS.iter().find(|(s, k, _)| *k == key && section.as_deref().is_none_or(|want| want == *s)).copied()
}

impl RunConfig {
    /// Parses and validates a configuration document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::ConfigParse {
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        let r = Resolver { text };
        let d = RunConfig::default();
        let (pm, sm) = (&d.params, &d.sim);
        let RawModel {
            length,
            vehicle_length,
            q_in,
            tau_acc,
            tau_m,
            h_m,
            h_acc_bar,
            alpha,
            v_f,
            h_min,
            h_max,
            rho_min,
        } = raw.model;
        let params = ModelParams {
            length: r.quantity("model", "length", length, Dimension::Length, pm.length)?,
            vehicle_length: r.quantity(
                "model",
                "vehicle_length",
                vehicle_length,
                Dimension::Length,
                pm.vehicle_length,
            )?,
            q_in: r.quantity("model", "q_in", q_in, Dimension::Flow, pm.q_in)?,
            tau_acc: r.quantity("model", "tau_acc", tau_acc, Dimension::Time, pm.tau_acc)?,
            tau_m: r.quantity("model", "tau_m", tau_m, Dimension::Time, pm.tau_m)?,
            h_m: r.quantity("model", "h_m", h_m, Dimension::Time, pm.h_m)?,
            h_acc_bar: r.quantity("model", "h_acc_bar", h_acc_bar, Dimension::Time, pm.h_acc_bar)?,
            alpha: r.quantity("model", "alpha", alpha, Dimension::Ratio, pm.alpha)?,
            v_f: r.optional_quantity("model", "v_f", v_f, Dimension::Speed)?,
            h_min: r.quantity("model", "h_min", h_min, Dimension::Time, pm.h_min)?,
            h_max: r.quantity("model", "h_max", h_max, Dimension::Time, pm.h_max)?,
            rho_min: r.quantity("model", "rho_min", rho_min, Dimension::Density, pm.rho_min)?,
        };
        let c = raw.control;
        let s = raw.simulation;
        let o = raw.output;
        let sim = SimConfig {
            dt: r.quantity("simulation", "dt", s.dt, Dimension::Time, sm.dt)?,
            dx: r.quantity("simulation", "dx", s.dx, Dimension::Length, sm.dx)?,
            t_final: r.quantity("simulation", "t_final", s.t_final, Dimension::Time, sm.t_final)?,
            mode: r.word("control", "mode", c.mode, sm.mode, parse_mode)?,
            d_actual: r.quantity("simulation", "d_actual", s.d_actual, Dimension::Time, sm.d_actual)?,
            d_ctrl: r.quantity("control", "d_ctrl", c.d_ctrl, Dimension::Time, sm.d_ctrl)?,
            k: r.quantity("control", "k", c.k, Dimension::Rate, sm.k)?,
            warm_up: r.word("control", "warm_up", c.warm_up, sm.warm_up, parse_warm_up)?,
            initial: InitialCondition {
                amplitude: r.quantity(
                    "simulation",
                    "ic_amplitude",
                    s.ic_amplitude,
                    Dimension::Density,
                    sm.initial.amplitude,
                )?,
                waves: r.quantity("simulation", "ic_waves", s.ic_waves, Dimension::Ratio, sm.initial.waves)?,
            },
            plant: r.word("simulation", "plant", s.plant, sm.plant, parse_plant)?,
            snapshot_every: r.count("output", "snapshot_every", o.snapshot_every, sm.snapshot_every)?,
            lyapunov_every: r.count("output", "lyapunov_every", o.lyapunov_every, sm.lyapunov_every)?,
            runaway_factor: r.quantity(
                "simulation",
                "runaway_factor",
                s.runaway_factor,
                Dimension::Ratio,
                sm.runaway_factor,
            )?,
            record_frames: true,
            record_trajectory: false,
        };
        let output = OutputConfig {
            label: r.word("output", "label", o.label, d.output.label.clone(), |s| {
                let ok = !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
                ok.then(|| s.to_string())
            })?,
            dir: o.dir.map(|d| PathBuf::from(d.into_inner())),
            metrics_horizon: r.quantity(
                "output",
                "metrics_horizon",
                o.metrics_horizon,
                Dimension::Time,
                d.output.metrics_horizon,
            )?,
            compare_open_loop: o.compare_open_loop.map_or(d.output.compare_open_loop, Spanned::into_inner),
        };
        let v = raw.verify;
        let dv = &d.verify;
        let verify = VerifyConfig {
            kernel_length: r.quantity(
                "verify",
                "kernel_length",
                v.kernel_length,
                Dimension::Length,
                dv.kernel_length,
            )?,
            kernel_s: r.quantity("verify", "kernel_s", v.kernel_s, Dimension::Time, dv.kernel_s)?,
            kernel_nodes: r.count("verify", "kernel_nodes", v.kernel_nodes, dv.kernel_nodes)?,
            oracle_samples: r.count("verify", "oracle_samples", v.oracle_samples, dv.oracle_samples)?,
            transform_nodes: r.count("verify", "transform_nodes", v.transform_nodes, dv.transform_nodes)?,
            transform_states: r.count("verify", "transform_states", v.transform_states, dv.transform_states)?,
            seed: r.count("verify", "seed", v.seed, dv.seed as usize)? as u64,
        };
        let cfg = RunConfig { params, sim, output, verify };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Model, grid, delay and CFL checks; nothing is simulated.
    pub fn validate(&self) -> Result<()> {
        if !(self.output.metrics_horizon >= 0.0) {
            return Err(Error::Validation(format!(
                "metrics horizon must be nonnegative, got {}",
                self.output.metrics_horizon
            )));
        }
        let v = &self.verify;
        if !(v.kernel_length > 0.0) || v.kernel_nodes < 2 || v.transform_nodes < 2 {
            return Err(Error::Validation("verify section needs a positive length and at least two nodes".into()));
        }
        preflight(&self.sim, &self.params)
    }

    /// Sets a numeric key (see [`NUMERIC_KEYS`]) to an SI value.
    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        let (_, name, _) =
            numeric_key(key).ok_or_else(|| Error::Validation(format!("`{key}` is not a numeric key")))?;
        let (p, s) = (&mut self.params, &mut self.sim);
        let slot = match name {
            "length" => &mut p.length,
            "vehicle_length" => &mut p.vehicle_length,
            "q_in" => &mut p.q_in,
            "tau_acc" => &mut p.tau_acc,
            "tau_m" => &mut p.tau_m,
            "h_m" => &mut p.h_m,
            "h_acc_bar" => &mut p.h_acc_bar,
            "alpha" => &mut p.alpha,
            "v_f" => {
                p.v_f = Some(value);
                return Ok(());
            }
            "h_min" => &mut p.h_min,
            "h_max" => &mut p.h_max,
            "rho_min" => &mut p.rho_min,
            "k" => &mut s.k,
            "d_ctrl" => &mut s.d_ctrl,
            "dt" => &mut s.dt,
            "dx" => &mut s.dx,
            "t_final" => &mut s.t_final,
            "d_actual" => &mut s.d_actual,
            "ic_amplitude" => &mut s.initial.amplitude,
            "ic_waves" => &mut s.initial.waves,
            "runaway_factor" => &mut s.runaway_factor,
            other => unreachable!("key table and setter disagree on `{other}`"),
        };
        *slot = value;
        Ok(())
    }

    /// SHA-256 over every resolved value that affects results.
    pub fn digest(&self) -> String {
        let canonical =
            format!("{:?}\n{:?}\n{:?}\n{}", self.params, self.sim, self.verify, self.output.metrics_horizon);
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
