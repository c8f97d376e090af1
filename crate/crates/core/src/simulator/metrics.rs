//! Travel time, fuel and comfort indices over a stored run.

use crate::error::{Error, Result};
use crate::grid::{trapezoid_uniform, Grid};

/// Fuel-rate coefficients.
pub const B0: f64 = 25e-3;
pub const B1: f64 = 24.5e-6;
pub const B3: f64 = 32.5e-9;
pub const B4: f64 = 125e-6;

/// Density and speed at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub t: f64,
    pub rho: Vec<f64>,
    pub v: Vec<f64>,
}

/// How the third fuel coefficient enters the fuel rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FuelReading {
    /// `b0 + b1 v + b3 v + b4 v a`
    AsPrinted,
    /// `b0 + b1 v + b3 v^3 + b4 v a`
    Cubic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// `int int rho` (veh s)
    pub ttt: f64,
    pub fuel: f64,
    pub comfort: f64,
}

impl Metrics {
    /// Percentage improvement of `self` over `baseline` for each index.
    pub fn improvement_over(&self, baseline: &Metrics) -> [f64; 3] {
        let pct = |b: f64, s: f64| 100.0 * (b - s) / b;
        [pct(baseline.ttt, self.ttt), pct(baseline.fuel, self.fuel), pct(baseline.comfort, self.comfort)]
    }
}

pub fn fuel_rate(v: f64, a: f64, reading: FuelReading) -> f64 {
    let third = match reading {
        FuelReading::AsPrinted => B3 * v,
        FuelReading::Cubic => B3 * v * v * v,
    };
    (B0 + B1 * v + third + B4 * v * a).max(0.0)
}

/// Difference quotient of `f(k)` at index `k` of `n` uniform samples: central
/// inside, one-sided at the ends.
fn diff_at(n: usize, k: usize, h: f64, f: impl Fn(usize) -> f64) -> f64 {
    if n < 2 {
        0.0
    } else if k == 0 {
        (f(1) - f(0)) / h
    } else if k == n - 1 {
        (f(n - 1) - f(n - 2)) / h
    } else {
        (f(k + 1) - f(k - 1)) / (2.0 * h)
    }
}

/// Evaluates the three indices over `[0, horizon]` with material acceleration
/// `a = v_t + v v_x` and its time derivative by difference quotients.
pub fn metrics(grid: &Grid, frames: &[Frame], horizon: f64, reading: FuelReading) -> Result<Metrics> {
    let last = frames.last().ok_or_else(|| Error::Validation("metrics need a non-empty run".into()))?;
    if last.t + 1e-9 < horizon {
        return Err(Error::Validation(format!("metric horizon {horizon} s exceeds the run length {} s", last.t)));
    }
    let used: Vec<&Frame> = frames.iter().take_while(|f| f.t <= horizon + 1e-9).collect();
    let nt = used.len();
    let nx = grid.nodes();
    let dt = if nt > 1 { used[1].t - used[0].t } else { 1.0 };
    let dx = grid.dx();
    for f in &used {
        grid.check(&f.rho)?;
        grid.check(&f.v)?;
    }
    let accel: Vec<Vec<f64>> = (0..nt)
        .map(|k| {
            (0..nx)
                .map(|i| {
                    let v_t = diff_at(nt, k, dt, |j| used[j].v[i]);
                    let v_x = diff_at(nx, i, dx, |j| used[k].v[j]);
                    v_t + used[k].v[i] * v_x
                })
                .collect()
        })
        .collect();
    let mut ttt = Vec::with_capacity(nt);
    let mut fuel = Vec::with_capacity(nt);
    let mut comfort = Vec::with_capacity(nt);
    for k in 0..nt {
        let f = used[k];
        let mut row_f = Vec::with_capacity(nx);
        let mut row_c = Vec::with_capacity(nx);
        for i in 0..nx {
            let a = accel[k][i];
            let a_t = diff_at(nt, k, dt, |j| accel[j][i]);
            row_f.push(fuel_rate(f.v[i], a, reading) * f.rho[i]);
            row_c.push((a * a + a_t * a_t) * f.rho[i]);
        }
        ttt.push(trapezoid_uniform(&f.rho, dx));
        fuel.push(trapezoid_uniform(&row_f, dx));
        comfort.push(trapezoid_uniform(&row_c, dx));
    }
    Ok(Metrics {
        ttt: trapezoid_uniform(&ttt, dt),
        fuel: trapezoid_uniform(&fuel, dt),
        comfort: trapezoid_uniform(&comfort, dt),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_run(rho: f64, v: f64, t_end: f64) -> (Grid, Vec<Frame>) {
        let g = Grid::new(1000.0, 201).unwrap();
        let frames = (0..=(t_end / 0.5) as usize)
            .map(|k| Frame { t: k as f64 * 0.5, rho: vec![rho; 201], v: vec![v; 201] })
            .collect();
        (g, frames)
    }

    #[test]
    fn constant_state_has_no_discomfort() {
        let (g, frames) = constant_run(0.1, 3.0, 300.0);
        let m = metrics(&g, &frames, 300.0, FuelReading::AsPrinted).unwrap();
        assert_eq!(m.comfort, 0.0);
        assert!((m.ttt - 0.1 * 1000.0 * 300.0).abs() < 1e-9);
        let rate = B0 + B1 * 3.0 + B3 * 3.0;
        assert!((m.fuel - rate * 0.1 * 1000.0 * 300.0).abs() < 1e-9);
    }

    #[test]
    fn horizon_beyond_run_is_rejected() {
        let (g, frames) = constant_run(0.1, 3.0, 100.0);
        assert!(metrics(&g, &frames, 300.0, FuelReading::AsPrinted).is_err());
    }

    #[test]
    fn uniform_deceleration_is_measured() {
        let g = Grid::new(100.0, 11).unwrap();
        let frames: Vec<Frame> =
            (0..=20).map(|k| Frame { t: k as f64, rho: vec![0.1; 11], v: vec![5.0 - 0.1 * k as f64; 11] }).collect();
        let m = metrics(&g, &frames, 20.0, FuelReading::AsPrinted).unwrap();
        // a = -0.1 everywhere, a_t = 0
        assert!((m.comfort - 0.01 * 0.1 * 100.0 * 20.0).abs() < 1e-9);
    }

    #[test]
    fn fuel_rate_is_clipped_at_zero() {
        assert_eq!(fuel_rate(10.0, -100.0, FuelReading::AsPrinted), 0.0);
        assert!(fuel_rate(10.0, 0.0, FuelReading::Cubic) > fuel_rate(10.0, 0.0, FuelReading::AsPrinted));
    }
}
