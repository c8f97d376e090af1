//! Actuator memory and the feedback laws.
//!
//! The distributed input `u(x, t)` (deviation of the ACC time gap from its
//! equilibrium value) reaches the road after a delay. Its recent past is the
//! transport state `psi(x, s, t) = u(x, t + s - D)` for `t + s > D`, and the
//! initial memory `theta0(x, t + s)` before that.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::grid::{Grid, SlicedField};
use crate::linearize::{to_riemann, LinearCoeffs, LinearState, TrafficField};
use crate::model::{Equilibrium, ModelParams};
use crate::transforms::Transform;

/// Ring buffer of past inputs on the delay grid `s_m = m dt`.
#[derive(Debug, Clone)]
pub struct ControlHistory {
    grid: Grid,
    dt: f64,
    depth: usize,
    /// Most recent first.
    past: VecDeque<Vec<f64>>,
    keep: usize,
    pushes: usize,
    memory: SlicedField,
}

/// `delay / dt` as an integer, or an error if it is not one.
pub fn delay_steps(delay: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(delay >= 0.0) || !delay.is_finite() {
        return Err(Error::Validation(format!("need dt > 0 and a finite delay >= 0, got dt={dt}, delay={delay}")));
    }
    let ratio = delay / dt;
    let steps = ratio.round();
    if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::DelayNotMultiple { delay, dt });
    }
    Ok(steps as usize)
}

impl ControlHistory {
    /// History for window length `delay` with zero initial memory.
    pub fn new(grid: Grid, delay: f64, dt: f64) -> Result<Self> {
        let depth = delay_steps(delay, dt)?;
        Ok(ControlHistory {
            grid,
            dt,
            depth,
            past: VecDeque::with_capacity(depth + 1),
            keep: depth + 1,
            pushes: 0,
            memory: SlicedField::zeros(&grid, dt, depth),
        })
    }

    /// Replaces the initial memory `theta0` (slices on the same delay grid).
    pub fn with_memory(mut self, memory: SlicedField) -> Result<Self> {
        if memory.depth() != self.depth || (memory.ds() - self.dt).abs() > 1e-12 * self.dt {
            return Err(Error::Validation(format!(
                "initial memory needs {} slices at spacing {} s",
                self.depth + 1,
                self.dt
            )));
        }
        self.grid.check(memory.slice(0))?;
        self.memory = memory;
        Ok(self)
    }

    /// Keeps at least `steps + 1` past inputs, for lags longer than the window.
    pub fn retain(mut self, steps: usize) -> Self {
        self.keep = self.keep.max(steps + 1);
        self
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn delay(&self) -> f64 {
        self.depth as f64 * self.dt
    }

    pub fn pushes(&self) -> usize {
        self.pushes
    }

    /// Time of the most recent push, `0` before any.
    pub fn now(&self) -> f64 {
        self.pushes.saturating_sub(1) as f64 * self.dt
    }

    pub fn push(&mut self, u_now: Vec<f64>) -> Result<()> {
        self.grid.check(&u_now)?;
        if self.past.len() == self.keep {
            self.past.pop_back();
        }
        self.past.push_front(u_now);
        self.pushes += 1;
        Ok(())
    }

    /// Input pushed at time index `j`, if still held.
    fn input(&self, j: i64) -> Option<&[f64]> {
        let newest = self.pushes as i64 - 1;
        if j < 0 || j > newest {
            return None;
        }
        self.past.get((newest - j) as usize).map(|v| v.as_slice())
    }

    fn memory_at(&self, index: i64) -> &[f64] {
        self.memory.slice(index.clamp(0, self.depth as i64) as usize)
    }

    /// `psi(., m dt, t)` at time index `n`; falls back on the initial memory
    /// for `t + s <= D`.
    fn slice_at(&self, n: i64, m: usize) -> Result<&[f64]> {
        let j = n + m as i64 - self.depth as i64;
        if j < 0 || (j == 0 && self.pushes == 0) {
            return Ok(self.memory_at(n + m as i64));
        }
        self.input(j).ok_or(Error::HistoryUnavailable { index: j })
    }

    /// `psi(., m dt, now)`.
    pub fn slice(&self, m: usize) -> Result<Vec<f64>> {
        if m > self.depth {
            return Err(Error::Validation(format!("slice {m} beyond the window depth {}", self.depth)));
        }
        let n = self.pushes.saturating_sub(1) as i64;
        self.slice_at(n, m).map(<[f64]>::to_vec)
    }

    /// `psi(x, s, now)` with linear interpolation in both directions.
    pub fn sample(&self, x: f64, s: f64) -> Result<f64> {
        Ok(self.window()?.sample(&self.grid, x, s))
    }

    /// The whole window `psi(., ., now)`.
    pub fn window(&self) -> Result<SlicedField> {
        let slices = (0..=self.depth).map(|m| self.slice(m)).collect::<Result<Vec<_>>>()?;
        SlicedField::from_slices(self.dt, slices)
    }

    /// Window one step ahead with `candidate` as the input about to be pushed.
    pub fn pending_window(&self, candidate: &[f64]) -> Result<SlicedField> {
        self.grid.check(candidate)?;
        let n = self.pushes as i64;
        let mut slices = Vec::with_capacity(self.depth + 1);
        for m in 0..self.depth {
            slices.push(self.slice_at(n, m)?.to_vec());
        }
        slices.push(candidate.to_vec());
        SlicedField::from_slices(self.dt, slices)
    }

    /// Input issued `lag` steps before the most recent push, or the initial
    /// memory it stands for.
    pub fn lagged(&self, lag: usize) -> Result<Vec<f64>> {
        let newest = self.pushes as i64 - 1;
        let j = newest - lag as i64;
        if j >= 0 {
            return self.input(j).map(<[f64]>::to_vec).ok_or(Error::HistoryUnavailable { index: j });
        }
        // u(t - lag) with t - lag < 0 is theta0 at s = D + (t - lag)
        Ok(self.memory_at(self.depth as i64 + j).to_vec())
    }
}

/// Which feedback drives the road.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlMode {
    /// Predictor feedback that cancels the delay.
    Compensated,
    /// State feedback designed for zero delay, applied through the delay.
    Uncompensated,
    /// `u = 0`.
    OpenLoop,
}

/// What to do while `t <= D`, before the law is defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WarmUp {
    /// Keep `u = 0`.
    Hold,
    /// Evaluate the law from the first step on.
    Immediate,
}

/// Solver tolerance of the implicit endpoint in the control equation.
const SOLVE_TOL: f64 = 1e-13;
const SOLVE_MAX_ITER: usize = 50;

/// Feedback law on the linearized coordinates.
#[derive(Debug, Clone)]
pub struct Controller {
    transform: Transform,
    mode: ControlMode,
    warm_up: WarmUp,
    saturations: u64,
}

impl Controller {
    pub fn new(transform: Transform, mode: ControlMode, warm_up: WarmUp) -> Self {
        Controller { transform, mode, warm_up, saturations: 0 }
    }

    pub fn transform(&self) -> &Transform {
        &self.transform
    }

    pub fn coeffs(&self) -> &LinearCoeffs {
        self.transform.coeffs()
    }

    pub fn mode(&self) -> ControlMode {
        self.mode
    }

    /// Node-steps clamped to the admissible time-gap range so far.
    pub fn saturations(&self) -> u64 {
        self.saturations
    }

    /// Predictor feedback: the input `u` that makes `beta(., D) = 0` when
    /// pushed as the newest slice of the window.
    ///
    /// The delay integrals put weight on the newest slice through their
    /// endpoints, so `beta(., D)` is affine in `u` with a dominant diagonal.
    /// The solve iterates `u <- u - beta(u)/a` with `a = beta(1) - beta(0)`.
    pub fn compensated(&self, state: &LinearState, history: &ControlHistory) -> Result<Vec<f64>> {
        let tr = &self.transform;
        let d = tr.kernels().delay();
        if (history.delay() - d).abs() > 1e-9 * d.max(1.0) {
            return Err(Error::Validation(format!(
                "history window {} s differs from the design delay {d} s",
                history.delay()
            )));
        }
        let n = tr.grid().nodes();
        let eval = |u: &[f64]| -> Result<Vec<f64>> { tr.forward_transform(state, &history.pending_window(u)?, d) };
        let offset = eval(&vec![0.0; n])?;
        let ones = eval(&vec![1.0; n])?;
        let diag: Vec<f64> = ones.iter().zip(&offset).map(|(a, b)| a - b).collect();
        if let Some(i) = diag.iter().position(|a| !(a.abs() > 1e-6)) {
            return Err(Error::Domain(format!("control equation degenerate at node {i} (diagonal {})", diag[i])));
        }
        let mut u: Vec<f64> = offset.iter().zip(&diag).map(|(b, a)| -b / a).collect();
        let scale = offset.iter().chain(&u).fold(f64::MIN_POSITIVE, |m, v| m.max(v.abs()));
        let mut residual = f64::INFINITY;
        for _ in 0..SOLVE_MAX_ITER {
            let r = eval(&u)?;
            residual = r.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if residual <= SOLVE_TOL * scale {
                return Ok(u);
            }
            for ((ui, ri), ai) in u.iter_mut().zip(&r).zip(&diag) {
                *ui -= ri / ai;
            }
        }
        Err(Error::NonConvergence { iterations: SOLVE_MAX_ITER, residual })
    }

    /// Zero-delay state feedback `u = -(c5/c6) e^{-c2 x} z + (k/c6) v`, the
    /// limit of the predictor law as `D -> 0`.
    pub fn uncompensated(&self, state: &LinearState) -> Result<Vec<f64>> {
        let g = self.transform.grid();
        g.check(&state.z)?;
        g.check(&state.v)?;
        let c = self.coeffs();
        let m = g.nodes() - 1;
        Ok((0..=m)
            .map(|i| {
                let v = if i == m { state.v_l } else { state.v[i] };
                -c.c5 / c.c6 * (-c.c2 * g.x(i)).exp() * state.z[i] + c.k / c.c6 * v
            })
            .collect())
    }

    /// Input at time `t` on the linearized coordinates, before saturation.
    pub fn linear_law(&self, state: &LinearState, history: &ControlHistory, t: f64) -> Result<Vec<f64>> {
        let n = self.transform.grid().nodes();
        let warm = t > self.transform.kernels().delay() + 1e-9 * history.dt();
        match self.mode {
            ControlMode::OpenLoop => Ok(vec![0.0; n]),
            _ if self.warm_up == WarmUp::Hold && !warm => Ok(vec![0.0; n]),
            ControlMode::Compensated => self.compensated(state, history),
            ControlMode::Uncompensated => self.uncompensated(state),
        }
    }

    /// Time-gap law on the physical fields: converts to the Riemann
    /// coordinates (weight `e^{c2 x}`), applies [`Controller::linear_law`],
    /// adds `h_acc_bar` and clamps to `[h_min, h_max]`. `history` holds past
    /// time-gap deviations from `h_acc_bar`, as applied.
    pub fn physical_law(
        &mut self,
        field: &TrafficField,
        eq: &Equilibrium,
        params: &ModelParams,
        history: &ControlHistory,
        t: f64,
    ) -> Result<PhysicalControl> {
        let state = linear_state(field, eq, self.coeffs())?;
        let raw = self.linear_law(&state, history, t)?;
        let mut clamped = 0u64;
        let h_acc: Vec<f64> = raw
            .iter()
            .map(|u| {
                let h = params.h_acc_bar + u;
                let c = h.clamp(params.h_min, params.h_max);
                if c != h {
                    clamped += 1;
                }
                c
            })
            .collect();
        self.saturations += clamped;
        Ok(PhysicalControl { raw_deviation: raw, h_acc, clamped })
    }
}

/// Output of [`Controller::physical_law`].
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalControl {
    /// Unclamped deviation from `h_acc_bar`.
    pub raw_deviation: Vec<f64>,
    /// Clamped time gap in seconds.
    pub h_acc: Vec<f64>,
    /// Nodes clamped this step.
    pub clamped: u64,
}

impl PhysicalControl {
    /// Applied deviation from `h_acc_bar`.
    pub fn applied_deviation(&self, h_acc_bar: f64) -> Vec<f64> {
        self.h_acc.iter().map(|h| h - h_acc_bar).collect()
    }
}

/// Linearized coordinates `(z, v - v_bar, v(L) - v_bar)` of a physical field.
pub fn linear_state(field: &TrafficField, eq: &Equilibrium, c: &LinearCoeffs) -> Result<LinearState> {
    let rho_err: Vec<f64> = field.rho.iter().map(|r| r - eq.rho_bar).collect();
    let v_err: Vec<f64> = field.v.iter().map(|v| v - eq.v_bar).collect();
    let z = to_riemann(&field.grid, &rho_err, &v_err, c)?;
    Ok(LinearState { z, v: v_err, v_l: field.v_l - eq.v_bar })
}
