//! Uniform spatial grid, sliced (x, s) fields and the quadrature rules shared
//! by the transformation, controller and monitors.
//!
//! All integrals are composite trapezoid rules whose node sets contain the
//! grid points strictly inside the integration interval plus both end points;
//! values away from grid points come from linear interpolation.

use crate::error::{Error, Result};

/// Uniform grid of `nodes` points on `[0, length]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    length: f64,
    nodes: usize,
}

impl Grid {
    pub fn new(length: f64, nodes: usize) -> Result<Self> {
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::domain(format!("grid length must be positive, got {length}")));
        }
        if nodes < 2 {
            return Err(Error::domain(format!("grid needs at least 2 nodes, got {nodes}")));
        }
        Ok(Grid { length, nodes })
    }

    /// Grid with spacing `dx`; `length / dx` must be (close to) an integer.
    pub fn with_spacing(length: f64, dx: f64) -> Result<Self> {
        if !(dx > 0.0) {
            return Err(Error::domain(format!("grid spacing must be positive, got {dx}")));
        }
        let cells = length / dx;
        let rounded = cells.round();
        if (cells - rounded).abs() > 1e-9 * cells.max(1.0) || rounded < 1.0 {
            return Err(Error::Validation(format!("road length {length} m is not a whole number of cells of {dx} m")));
        }
        Grid::new(length, rounded as usize + 1)
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn cells(&self) -> usize {
        self.nodes - 1
    }

    pub fn dx(&self) -> f64 {
        self.length / self.cells() as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        if i == self.cells() {
            self.length
        } else {
            i as f64 * self.dx()
        }
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nodes).map(|i| self.x(i)).collect()
    }

    pub fn check(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.nodes {
            return Err(Error::GridMismatch { expected: self.nodes, got: values.len() });
        }
        Ok(())
    }

    /// Linear interpolation of nodal `values` at `x`, clamped to `[0, L]`.
    #[inline]
    pub fn interp(&self, values: &[f64], x: f64) -> f64 {
        let (i, w) = self.locate(x);
        if w == 0.0 {
            values[i]
        } else {
            values[i] * (1.0 - w) + values[i + 1] * w
        }
    }

    /// Cell index and fractional offset of `x`; `x` is clamped to the domain.
    #[inline]
    pub fn locate(&self, x: f64) -> (usize, f64) {
        let cells = self.cells();
        let u = (x / self.length).clamp(0.0, 1.0) * cells as f64;
        let i = u.floor() as usize;
        if i >= cells {
            (cells, 0.0)
        } else {
            let w = u - i as f64;
            // snap round-off so that on-grid arguments read exact nodal values
            if w < 1e-12 {
                (i, 0.0)
            } else if w > 1.0 - 1e-12 {
                (i + 1, 0.0)
            } else {
                (i, w)
            }
        }
    }

    /// Trapezoid integral over `[lo, hi]` of `f(y)`, where `f` is sampled at
    /// every grid node inside the interval and at both end points.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, lo: f64, hi: f64, mut f: F) -> f64 {
        let lo = lo.max(0.0);
        let hi = hi.min(self.length);
        if !(hi > lo) {
            return 0.0;
        }
        let dx = self.dx();
        let first = (lo / dx).floor() as usize + 1;
        let mut prev_y = lo;
        let mut prev_f = f(lo);
        let mut acc = 0.0;
        let mut i = first;
        while i < self.nodes {
            let y = self.x(i);
            if y >= hi - 1e-12 * dx {
                break;
            }
            if y > prev_y + 1e-12 * dx {
                let fy = f(y);
                acc += 0.5 * (y - prev_y) * (prev_f + fy);
                prev_y = y;
                prev_f = fy;
            }
            i += 1;
        }
        acc + 0.5 * (hi - prev_y) * (prev_f + f(hi))
    }

    /// Trapezoid integral of a nodal field against a weight function over `[lo, hi]`.
    pub fn integrate_field<W: FnMut(f64) -> f64>(&self, values: &[f64], lo: f64, hi: f64, mut weight: W) -> f64 {
        self.integrate(lo, hi, |y| weight(y) * self.interp(values, y))
    }

    /// Squared L2 norm of a nodal field (trapezoid).
    pub fn norm_sq(&self, values: &[f64]) -> f64 {
        let dx = self.dx();
        let n = values.len();
        let inner: f64 = values[1..n - 1].iter().map(|v| v * v).sum();
        dx * (inner + 0.5 * (values[0] * values[0] + values[n - 1] * values[n - 1]))
    }

    pub fn norm(&self, values: &[f64]) -> f64 {
        self.norm_sq(values).sqrt()
    }
}

/// Trapezoid integral of `f(tau)` over `[a, b]` with nodes at `offset + j * step`
/// strictly inside the interval plus both end points.
///
/// With `offset = s` and nodes `s - m * ds` this lands every interior node on
/// the delay grid of a [`SlicedField`] when the field is sampled at `s - tau`.
pub fn integrate_tau<F: FnMut(f64) -> f64>(a: f64, b: f64, step: f64, offset: f64, mut f: F) -> f64 {
    if !(b > a) {
        return 0.0;
    }
    let eps = 1e-9 * step;
    // nodes tau_m = offset - m * step, visited in increasing tau order
    let m_hi = ((offset - a) / step - 1e-9).floor();
    let m_lo = ((offset - b) / step + 1e-9).ceil();
    let mut prev_t = a;
    let mut prev_f = f(a);
    let mut acc = 0.0;
    let mut m = m_hi;
    while m >= m_lo {
        let t = offset - m * step;
        if t > prev_t + eps && t < b - eps {
            let ft = f(t);
            acc += 0.5 * (t - prev_t) * (prev_f + ft);
            prev_t = t;
            prev_f = ft;
        }
        m -= 1.0;
    }
    acc + 0.5 * (b - prev_t) * (prev_f + f(b))
}

/// A field over `(x, s)` stored as slices on a uniform delay grid
/// `s_m = m * ds`, `m = 0..=depth`. Used for both the actuator state and the
/// transformed target state.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicedField {
    ds: f64,
    slices: Vec<Vec<f64>>,
}

impl SlicedField {
    pub fn zeros(grid: &Grid, ds: f64, depth: usize) -> Self {
        SlicedField { ds, slices: vec![vec![0.0; grid.nodes()]; depth + 1] }
    }

    pub fn from_slices(ds: f64, slices: Vec<Vec<f64>>) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::domain("sliced field needs at least one slice"));
        }
        let n = slices[0].len();
        if let Some(bad) = slices.iter().find(|s| s.len() != n) {
            return Err(Error::GridMismatch { expected: n, got: bad.len() });
        }
        if !(ds > 0.0) && slices.len() > 1 {
            return Err(Error::domain(format!("slice spacing must be positive, got {ds}")));
        }
        Ok(SlicedField { ds, slices })
    }

    /// Tabulates `f(x, s)` on the grid.
    pub fn from_fn<F: FnMut(f64, f64) -> f64>(grid: &Grid, ds: f64, depth: usize, mut f: F) -> Self {
        let slices = (0..=depth)
            .map(|m| {
                let s = m as f64 * ds;
                (0..grid.nodes()).map(|i| f(grid.x(i), s)).collect()
            })
            .collect();
        SlicedField { ds, slices }
    }

    pub fn ds(&self) -> f64 {
        self.ds
    }

    pub fn depth(&self) -> usize {
        self.slices.len() - 1
    }

    pub fn max_s(&self) -> f64 {
        self.depth() as f64 * self.ds
    }

    pub fn slice(&self, m: usize) -> &[f64] {
        &self.slices[m]
    }

    pub fn slice_mut(&mut self, m: usize) -> &mut Vec<f64> {
        &mut self.slices[m]
    }

    pub fn slices(&self) -> &[Vec<f64>] {
        &self.slices
    }

    /// Bilinear interpolation at `(x, s)`; `s` is clamped to `[0, depth * ds]`.
    #[inline]
    pub fn sample(&self, grid: &Grid, x: f64, s: f64) -> f64 {
        let depth = self.depth();
        if depth == 0 {
            return grid.interp(&self.slices[0], x);
        }
        let u = (s / self.ds).clamp(0.0, depth as f64);
        let m = u.floor() as usize;
        let w = u - m as f64;
        if m >= depth || w < 1e-9 {
            grid.interp(&self.slices[m.min(depth)], x)
        } else if w > 1.0 - 1e-9 {
            grid.interp(&self.slices[m + 1], x)
        } else {
            (1.0 - w) * grid.interp(&self.slices[m], x) + w * grid.interp(&self.slices[m + 1], x)
        }
    }

    /// Squared L2 norm over `[0, L] x [0, D]` (trapezoid in both directions).
    pub fn norm_sq(&self, grid: &Grid) -> f64 {
        let per_slice: Vec<f64> = self.slices.iter().map(|s| grid.norm_sq(s)).collect();
        trapezoid_uniform(&per_slice, self.ds)
    }

    /// Squared L2 norm of the trace `s -> field(L, s)`.
    pub fn outlet_norm_sq(&self) -> f64 {
        let trace: Vec<f64> = self.slices.iter().map(|s| s[s.len() - 1].powi(2)).collect();
        trapezoid_uniform(&trace, self.ds)
    }

    pub fn scale(&self) -> f64 {
        self.slices.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Trapezoid rule on uniformly spaced samples.
pub fn trapezoid_uniform(values: &[f64], h: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => h * (values[1..n - 1].iter().sum::<f64>() + 0.5 * (values[0] + values[n - 1])),
    }
}

/// `ln(sum(exp(terms)))`, tolerating `-inf` entries.
pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}
