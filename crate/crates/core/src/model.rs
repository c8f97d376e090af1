//! Mixed manual/ACC traffic model primitives: time constants, mixed time gap,
//! equilibrium speed profile, fundamental diagram and the feasible set.
//!
//! Everything here is SI: metres, seconds, vehicles per metre.

use log::warn;

use crate::error::{Error, Result};

/// Physical constants of the mixed-traffic road stretch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    /// Road length (m).
    pub length: f64,
    /// Effective vehicle length (m).
    pub vehicle_length: f64,
    /// Constant inflow (veh/s).
    pub q_in: f64,
    pub tau_acc: f64,
    pub tau_m: f64,
    /// Manual time gap (s).
    pub h_m: f64,
    /// Steady ACC time gap (s).
    pub h_acc_bar: f64,
    /// Fraction of ACC-equipped vehicles.
    pub alpha: f64,
    /// Free-flow speed (m/s); feasibility checks on speed are skipped when unknown.
    pub v_f: Option<f64>,
    pub h_min: f64,
    pub h_max: f64,
    /// Lowest congested density (veh/m).
    pub rho_min: f64,
}

impl Default for ModelParams {
    /// Reference profile with 15% ACC penetration.
    fn default() -> Self {
        ModelParams {
            length: 1000.0,
            vehicle_length: 5.0,
            q_in: 1200.0 / 3600.0,
            tau_acc: 2.0,
            tau_m: 60.0,
            h_m: 1.0,
            h_acc_bar: 1.5,
            alpha: 0.15,
            v_f: None,
            h_min: 0.5,
            h_max: 3.0,
            rho_min: 37.0 / 1000.0,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("road length", self.length),
            ("vehicle length", self.vehicle_length),
            ("inflow", self.q_in),
            ("ACC time constant", self.tau_acc),
            ("manual time constant", self.tau_m),
            ("manual time gap", self.h_m),
            ("steady ACC time gap", self.h_acc_bar),
            ("minimum time gap", self.h_min),
            ("maximum time gap", self.h_max),
            ("minimum congested density", self.rho_min),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::Validation(format!("{name} must be positive and finite, got {value}")));
            }
        }
        if let Some(v_f) = self.v_f {
            if !(v_f > 0.0 && v_f.is_finite()) {
                return Err(Error::Validation(format!("free-flow speed must be positive, got {v_f}")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Validation(format!("ACC penetration must lie in [0, 1], got {}", self.alpha)));
        }
        if self.h_min > self.h_acc_bar.min(self.h_m) {
            return Err(Error::Validation(format!(
                "h_min = {} s exceeds min(h_acc_bar, h_m) = {} s",
                self.h_min,
                self.h_acc_bar.min(self.h_m)
            )));
        }
        if self.h_max < self.h_acc_bar.max(self.h_m) {
            return Err(Error::Validation(format!(
                "h_max = {} s is below max(h_acc_bar, h_m) = {} s",
                self.h_max,
                self.h_acc_bar.max(self.h_m)
            )));
        }
        if self.rho_min > 1.0 / self.vehicle_length {
            return Err(Error::Validation(format!(
                "rho_min = {} veh/m exceeds the jam density {} veh/m",
                self.rho_min,
                1.0 / self.vehicle_length
            )));
        }
        Ok(())
    }

    pub fn jam_density(&self) -> f64 {
        1.0 / self.vehicle_length
    }
}

/// Steady state dictated by the constant inflow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Equilibrium {
    pub v_bar: f64,
    pub rho_bar: f64,
    pub h_mix_bar: f64,
    pub tau_mix: f64,
}

/// Relaxation time constant of the manual/ACC mixture.
pub fn mixed_time_constant(alpha: f64, tau_acc: f64, tau_m: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::domain(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if !(tau_acc > 0.0 && tau_m > 0.0) {
        return Err(Error::domain(format!("time constants must be positive, got {tau_acc} and {tau_m}")));
    }
    Ok(1.0 / (alpha / tau_acc + (1.0 - alpha) / tau_m))
}

/// Mixed time gap as a function of the ACC time gap.
pub fn mixed_time_gap(h_acc: f64, p: &ModelParams) -> Result<f64> {
    if !(h_acc > 0.0) {
        return Err(Error::domain(format!("ACC time gap must be positive, got {h_acc}")));
    }
    Ok(mixed_time_gap_unchecked(h_acc, p))
}

#[inline]
pub(crate) fn mixed_time_gap_unchecked(h_acc: f64, p: &ModelParams) -> f64 {
    let manual = (1.0 - p.alpha) * p.tau_acc / p.tau_m;
    (p.alpha + manual) / (p.alpha + manual * h_acc / p.h_m) * h_acc
}

/// Equilibrium speed profile of the mixed flow.
pub fn v_mix(rho: f64, h_acc: f64, p: &ModelParams) -> Result<f64> {
    check_density(rho, p)?;
    Ok((1.0 / rho - p.vehicle_length) / mixed_time_gap(h_acc, p)?)
}

#[inline]
pub(crate) fn v_mix_unchecked(rho: f64, h_mix: f64, vehicle_length: f64) -> f64 {
    (1.0 / rho - vehicle_length) / h_mix
}

/// Fundamental-diagram flow `rho * v_mix`.
pub fn flow_q(rho: f64, h_acc: f64, p: &ModelParams) -> Result<f64> {
    check_density(rho, p)?;
    Ok((1.0 - p.vehicle_length * rho) / mixed_time_gap(h_acc, p)?)
}

fn check_density(rho: f64, p: &ModelParams) -> Result<()> {
    if !(rho > 0.0 && rho <= p.jam_density()) {
        return Err(Error::domain(format!("density {rho} veh/m outside (0, {}]", p.jam_density())));
    }
    Ok(())
}

/// Steady state for the configured inflow and ACC time gap.
pub fn equilibrium(p: &ModelParams) -> Result<Equilibrium> {
    p.validate()?;
    let h_mix_bar = mixed_time_gap(p.h_acc_bar, p)?;
    let headway_time = 1.0 / p.q_in;
    if headway_time <= h_mix_bar {
        return Err(Error::InfeasibleEquilibrium(format!(
            "1/q_in = {headway_time} s does not exceed the mixed time gap {h_mix_bar} s"
        )));
    }
    let v_bar = p.vehicle_length / (headway_time - h_mix_bar);
    let rho_bar = 1.0 / (p.vehicle_length + h_mix_bar * v_bar);
    let tau_mix = mixed_time_constant(p.alpha, p.tau_acc, p.tau_m)?;
    if !in_feasible_set(rho_bar, v_bar, p.h_acc_bar, p) {
        return Err(Error::InfeasibleEquilibrium(format!(
            "steady state rho = {rho_bar} veh/m, v = {v_bar} m/s lies outside the feasible set"
        )));
    }
    Ok(Equilibrium { v_bar, rho_bar, h_mix_bar, tau_mix })
}

/// Membership in the feasible set; all bounds inclusive. The speed cap is
/// skipped when no free-flow speed is configured.
pub fn in_feasible_set(rho: f64, v: f64, h_acc: f64, p: &ModelParams) -> bool {
    let speed_ok = v >= 0.0 && p.v_f.is_none_or(|v_f| v <= v_f);
    speed_ok && rho >= p.rho_min && rho <= p.jam_density() && h_acc >= p.h_min && h_acc <= p.h_max
}

/// Logs once per call site that speed feasibility cannot be checked.
pub fn warn_if_no_free_flow_speed(p: &ModelParams) {
    if p.v_f.is_none() {
        warn!("no free-flow speed configured; feasibility checks against v_f are skipped");
    }
}

/// ACC penetration that reproduces a given steady mixed time gap.
pub fn alpha_from_mixed_time_gap(h_mix_bar: f64, p: &ModelParams) -> Result<f64> {
    let r = p.tau_acc / p.tau_m;
    let a = r * p.h_acc_bar / p.h_m;
    let h = p.h_acc_bar;
    let denom = h_mix_bar * (1.0 - a) - h * (1.0 - r);
    if denom.abs() < 1e-15 {
        return Err(Error::domain("mixed time gap does not determine alpha for these parameters"));
    }
    let alpha = (h * r - h_mix_bar * a) / denom;
    if !(-1e-12..=1.0 + 1e-12).contains(&alpha) {
        return Err(Error::domain(format!("mixed time gap {h_mix_bar} s implies alpha = {alpha} outside [0, 1]")));
    }
    Ok(alpha.clamp(0.0, 1.0))
}

/// ACC penetration that reproduces a given mixed time constant.
pub fn alpha_from_time_constant(tau_mix: f64, tau_acc: f64, tau_m: f64) -> Result<f64> {
    let denom = 1.0 / tau_acc - 1.0 / tau_m;
    if denom.abs() < 1e-15 || !(tau_mix > 0.0) {
        return Err(Error::domain("time constant does not determine alpha for these parameters"));
    }
    let alpha = (1.0 / tau_mix - 1.0 / tau_m) / denom;
    if !(-1e-12..=1.0 + 1e-12).contains(&alpha) {
        return Err(Error::domain(format!("time constant {tau_mix} s implies alpha = {alpha} outside [0, 1]")));
    }
    Ok(alpha.clamp(0.0, 1.0))
}

/// `(alpha, tau_mix)` samples for the time-constant curve.
pub fn time_constant_curve(tau_acc: f64, tau_m: f64, samples: usize) -> Result<Vec<(f64, f64)>> {
    let n = samples.max(2);
    (0..n)
        .map(|i| {
            let alpha = i as f64 / (n - 1) as f64;
            mixed_time_constant(alpha, tau_acc, tau_m).map(|t| (alpha, t))
        })
        .collect()
}

/// `(h_mix, rho, q)` samples of the congested fundamental diagram for mixed
/// time gaps spanning `[h_min, h_max]`.
pub fn fundamental_diagram(p: &ModelParams, gaps: usize, densities: usize) -> Vec<(f64, f64, f64)> {
    let ng = gaps.max(2);
    let nr = densities.max(2);
    let mut out = Vec::with_capacity(ng * nr);
    for g in 0..ng {
        let h_mix = p.h_min + (p.h_max - p.h_min) * g as f64 / (ng - 1) as f64;
        for r in 0..nr {
            let rho = p.rho_min + (p.jam_density() - p.rho_min) * r as f64 / (nr - 1) as f64;
            out.push((h_mix, rho, (1.0 - p.vehicle_length * rho) / h_mix));
        }
    }
    out
}
