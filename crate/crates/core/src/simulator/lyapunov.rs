//! Lyapunov monitors for the target system.
//!
//! The weights `e^{sigma x}` with `sigma` near `1e9 /m` and the outlet gain
//! `k3 ~ e^{sigma L}` overflow any float, so parameters and the weighted
//! functional are kept as natural logarithms.

use crate::grid::{log_sum_exp, Grid, SlicedField};
use crate::linearize::{LinearCoeffs, LinearState};

/// Parameters of the weighted functional
/// `V0 = int e^{-sigma x} z^2 + k2 int e^{sigma x} v^2 + k3 v(L)^2
///      + k4 int int e^{sigma (s + x)} beta^2 + k5 int e^{sigma s} beta(L, s)^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovParams {
    pub sigma: f64,
    /// Young's-inequality parameter.
    pub p: f64,
    pub ln_k2: f64,
    pub ln_k3: f64,
    pub ln_k4: f64,
    pub ln_k5: f64,
    /// `ln E`, `E = sup e^{c2 x} = e^{c2 L}`.
    pub ln_e: f64,
}

/// Each lower bound is multiplied by this factor.
pub const MARGIN: f64 = 1.1;

/// `ln(e^a + e^b)` for finite or `-inf` arguments.
fn ln_add(a: f64, b: f64) -> f64 {
    log_sum_exp(&[a, b])
}

/// Lower bounds, in order: sigma, p, k2, k3, k4, k5 (the last four as logs).
/// `sigma` and `p` are plain values; the bounds for `k2..k5` use the supplied
/// `sigma`, `p` and `k2, k3` logs.
fn lower_bounds(c: &LinearCoeffs, length: f64, sigma: f64, p: f64, ln_k2: f64, ln_k3: f64) -> [f64; 6] {
    let e = (c.c2 * length).exp();
    let sigma_lb = 2.0 * c.c2 + e * c.c3 / (2.0 * c.c1) + e * c.k * c.c3 / (2.0 * c.c1 * c.c6);
    let p_lb = c.c6 / (4.0 * c.k);
    let k2_lb =
        (2.0 * e * c.k * c.c3 / (c.c6 * (c.c4 * sigma - c.c6 / 2.0 + 2.0 * c.k))).max(c.c1 * c.c7 * c.c7 / c.c4);
    let ln_k3_lb = ln_k2 + c.c4.ln() + sigma * length - (2.0 * c.k - c.c6 / (2.0 * p)).ln();
    let ln_k4_lb = ln_add((2.0 * e * c.c3).ln(), (2.0 * c.c6).ln() + ln_k2);
    let ln_k5_lb = (2.0 * c.c6 / p).ln() + ln_k3;
    [sigma_lb, p_lb, k2_lb.ln(), ln_k3_lb, ln_k4_lb, ln_k5_lb]
}

/// Parameters meeting every inequality with a 10% margin.
pub fn choose_lyapunov_params(c: &LinearCoeffs, length: f64) -> LyapunovParams {
    let ln_m = MARGIN.ln();
    let b0 = lower_bounds(c, length, 0.0, 1.0, 0.0, 0.0);
    let sigma = MARGIN * b0[0];
    let p = MARGIN * b0[1];
    let ln_k2 = lower_bounds(c, length, sigma, p, 0.0, 0.0)[2] + ln_m;
    let ln_k3 = lower_bounds(c, length, sigma, p, ln_k2, 0.0)[3] + ln_m;
    let b = lower_bounds(c, length, sigma, p, ln_k2, ln_k3);
    LyapunovParams { sigma, p, ln_k2, ln_k3, ln_k4: b[4] + ln_m, ln_k5: b[5] + ln_m, ln_e: c.c2 * length }
}

/// Outcome of each inequality, in the order sigma, p, k2, k3, k4, k5.
pub fn check_lyapunov_params(lp: &LyapunovParams, c: &LinearCoeffs, length: f64) -> [bool; 6] {
    let e = lp.ln_e.exp();
    let sigma_ok = lp.sigma > 2.0 * c.c2 + e * c.c3 / (2.0 * c.c1) + e * c.k * c.c3 / (2.0 * c.c1 * c.c6);
    let p_ok = lp.p > c.c6 / (4.0 * c.k);
    let gap = c.c4 * lp.sigma - c.c6 / 2.0 + 2.0 * c.k;
    let k2_ok = gap > 0.0
        && lp.ln_k2 > (2.0 * e * c.k * c.c3 / (c.c6 * gap)).ln()
        && lp.ln_k2 > (c.c1 * c.c7 * c.c7 / c.c4).ln();
    let rate = 2.0 * c.k - c.c6 / (2.0 * lp.p);
    let k3_ok = rate > 0.0 && lp.ln_k3 > lp.ln_k2 + c.c4.ln() + lp.sigma * length - rate.ln();
    let k4_ok = lp.ln_k4 > ln_add((2.0 * e * c.c3).ln(), (2.0 * c.c6).ln() + lp.ln_k2);
    let k5_ok = lp.ln_k5 > (2.0 * c.c6 / lp.p).ln() + lp.ln_k3;
    [sigma_ok, p_ok, k2_ok, k3_ok, k4_ok, k5_ok]
}

/// Decay rate guaranteed by the dissipation inequality: each dissipation
/// coefficient divided by the weight of its term in `V0`.
pub fn guaranteed_rate(lp: &LyapunovParams, c: &LinearCoeffs, length: f64) -> f64 {
    let e = lp.ln_e.exp();
    let k2 = lp.ln_k2.exp();
    let v_rate = (c.c4 * lp.sigma - c.c6 / 2.0 + 2.0 * c.k) - 2.0 * e * c.k * c.c3 / (c.c6 * k2);
    let z_rate = c.c1 * lp.sigma - 2.0 * c.c1 * c.c2 - e * c.c3 / 2.0 - e * c.k * c.c3 / (2.0 * c.c6);
    let outlet_rate = (2.0 * c.k - c.c6 / (2.0 * lp.p)) - (lp.ln_k2 + c.c4.ln() + lp.sigma * length - lp.ln_k3).exp();
    [v_rate, z_rate, outlet_rate, lp.sigma].into_iter().fold(f64::INFINITY, f64::min)
}

/// `ln int w(x) f(x)^2 dx` with `w = e^{rate x}`, trapezoid weights.
fn ln_weighted_sq(grid: &Grid, f: &[f64], rate: f64) -> f64 {
    let n = f.len();
    let dx = grid.dx();
    let terms: Vec<f64> = (0..n)
        .map(|i| {
            let w = if i == 0 || i == n - 1 { 0.5 * dx } else { dx };
            (w * f[i] * f[i]).ln() + rate * grid.x(i)
        })
        .collect();
    log_sum_exp(&terms)
}

/// One sample of the three monitors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovSample {
    /// `ln V0`
    pub ln_v0: f64,
    pub v1: f64,
    pub v2: f64,
}

/// Evaluates `ln V0`, `V1` (plant variables) and `V2` (target variables).
pub fn lyapunov_sample(
    grid: &Grid,
    state: &LinearState,
    psi: &SlicedField,
    beta: &SlicedField,
    lp: &LyapunovParams,
) -> LyapunovSample {
    let base = grid.norm_sq(&state.z) + grid.norm_sq(&state.v) + state.v_l * state.v_l;
    let v1 = base + psi.norm_sq(grid) + psi.outlet_norm_sq();
    let v2 = base + beta.norm_sq(grid) + beta.outlet_norm_sq();

    let ds = beta.ds();
    let depth = beta.depth();
    let s_weight = |m: usize| {
        if depth == 0 {
            1.0
        } else if m == 0 || m == depth {
            0.5 * ds
        } else {
            ds
        }
    };
    let slices: Vec<f64> = (0..=depth)
        .map(|m| s_weight(m).ln() + lp.sigma * m as f64 * ds + ln_weighted_sq(grid, beta.slice(m), lp.sigma))
        .collect();
    let outlet: Vec<f64> = (0..=depth)
        .map(|m| {
            let b = beta.slice(m)[grid.nodes() - 1];
            (s_weight(m) * b * b).ln() + lp.sigma * m as f64 * ds
        })
        .collect();
    let terms = [
        ln_weighted_sq(grid, &state.z, -lp.sigma),
        lp.ln_k2 + ln_weighted_sq(grid, &state.v, lp.sigma),
        lp.ln_k3 + (state.v_l * state.v_l).ln(),
        lp.ln_k4 + log_sum_exp(&slices),
        lp.ln_k5 + log_sum_exp(&outlet),
    ];
    LyapunovSample { ln_v0: log_sum_exp(&terms), v1, v2 }
}

/// Least-squares decay rate of `ln V0` over `[t_from, t_to]`:
/// `-(slope of the fitted line)`. Samples with `ln V0 = -inf` are skipped.
pub fn fit_decay_rate(times: &[f64], ln_v: &[f64], t_from: f64, t_to: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(ln_v)
        .filter(|(t, v)| **t >= t_from && **t <= t_to && v.is_finite())
        .map(|(t, v)| (*t, *v))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mv = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - mv)).sum();
    (sxx > 0.0).then(|| -sxy / sxx)
}

/// `max_t [ln V0(t) + rate t/2] - [ln V0(t0) + rate t0/2]` over `t >= t0`:
/// the log of the running maximum of `V0 e^{rate t/2}` relative to its start.
pub fn envelope_excess(times: &[f64], ln_v: &[f64], t0: f64, rate: f64) -> Option<f64> {
    let mut start = None;
    let mut worst = f64::NEG_INFINITY;
    for (t, v) in times.iter().zip(ln_v) {
        if *t < t0 || !v.is_finite() {
            continue;
        }
        let e = v + 0.5 * rate * t;
        start.get_or_insert(e);
        worst = worst.max(e);
    }
    start.map(|s| worst - s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linearize::coefficients;
    use crate::model::{equilibrium, ModelParams};

    fn coeffs() -> LinearCoeffs {
        let p = ModelParams::default();
        coefficients(&equilibrium(&p).unwrap(), &p, 0.1, 4.0).unwrap()
    }

    #[test]
    fn chosen_parameters_pass_the_validator() {
        let c = coeffs();
        let lp = choose_lyapunov_params(&c, 1000.0);
        assert_eq!(check_lyapunov_params(&lp, &c, 1000.0), [true; 6]);
        let e = (c.c2 * 1000.0).exp();
        assert!(lp.sigma > 2.0 * c.c2 + e * c.c3 / (2.0 * c.c1) + e * c.k * c.c3 / (2.0 * c.c1 * c.c6));
        assert!(lp.p > c.c6 / (4.0 * c.k));
        assert!(guaranteed_rate(&lp, &c, 1000.0) > 0.0);
    }

    #[test]
    fn perturbed_parameters_fail() {
        let c = coeffs();
        let mut lp = choose_lyapunov_params(&c, 1000.0);
        lp.ln_k3 -= 1.0;
        let ok = check_lyapunov_params(&lp, &c, 1000.0);
        assert!(!ok[3]);
        let mut lp = choose_lyapunov_params(&c, 1000.0);
        lp.p = 0.5 * c.c6 / (4.0 * c.k);
        assert!(!check_lyapunov_params(&lp, &c, 1000.0)[1]);
    }

    #[test]
    fn zero_trajectory_gives_zero_monitors() {
        let g = Grid::new(1000.0, 21).unwrap();
        let c = coeffs();
        let lp = choose_lyapunov_params(&c, 1000.0);
        let z = SlicedField::zeros(&g, 0.5, 8);
        let s = lyapunov_sample(&g, &LinearState::zeros(&g), &z, &z, &lp);
        assert_eq!(s.v1, 0.0);
        assert_eq!(s.v2, 0.0);
        assert_eq!(s.ln_v0, f64::NEG_INFINITY);
    }

    #[test]
    fn weighted_norm_matches_direct_sum_for_small_rates() {
        let g = Grid::new(10.0, 11).unwrap();
        let f: Vec<f64> = g.xs().iter().map(|x| 1.0 + x).collect();
        let direct = g.integrate_field(&f.iter().map(|v| v * v).collect::<Vec<_>>(), 0.0, 10.0, |x| (0.1 * x).exp());
        assert!((ln_weighted_sq(&g, &f, 0.1) - direct.ln()).abs() < 1e-12);
    }

    #[test]
    fn decay_fit_recovers_an_exponential() {
        let t: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let v: Vec<f64> = t.iter().map(|t| 3.0 - 0.25 * t).collect();
        assert!((fit_decay_rate(&t, &v, 10.0, 90.0).unwrap() - 0.25).abs() < 1e-12);
        assert!(envelope_excess(&t, &v, 10.0, 0.25).unwrap() <= 1e-12);
        assert!(fit_decay_rate(&t, &v, 200.0, 300.0).is_none());
    }
}
