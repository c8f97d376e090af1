//! Backstepping kernels in closed form, with explicit region logic and
//! Dirac lines carried as `(location, weight)` descriptors, plus an
//! independent successive-approximation solver used as an oracle.
//!
//! All kernels are parametrised by the output position `x`, the delay
//! coordinate `s` and the integration variable `y`. Dirac weights are
//! expressed in the `y` measure, so each one integrates to
//! `weight * f(location)`.

use crate::error::{Error, Result};
use crate::linearize::{require_assumption1, LinearCoeffs};

/// Region of the `z`-kernel, following the printed case order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GammaRegion {
    /// `0 <= y <= c4 (s - x/c1)`: smooth part plus pulse.
    A,
    /// Pulse only.
    B,
    /// Near the outlet, smooth part only.
    C,
    /// Overlap of pulse and the outlet-driven smooth part.
    D,
    /// Constant outlet part.
    E,
    Zero,
}

impl GammaRegion {
    pub const ALL: [GammaRegion; 6] =
        [GammaRegion::A, GammaRegion::B, GammaRegion::C, GammaRegion::D, GammaRegion::E, GammaRegion::Zero];

    pub fn label(self) -> &'static str {
        match self {
            GammaRegion::A => "a",
            GammaRegion::B => "b",
            GammaRegion::C => "c",
            GammaRegion::D => "d",
            GammaRegion::E => "e",
            GammaRegion::Zero => "otherwise",
        }
    }
}

/// Region of the `v`-kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EtaRegion {
    A,
    B,
    C,
    Zero,
}

impl EtaRegion {
    pub const ALL: [EtaRegion; 4] = [EtaRegion::A, EtaRegion::B, EtaRegion::C, EtaRegion::Zero];

    pub fn label(self) -> &'static str {
        match self {
            EtaRegion::A => "a",
            EtaRegion::B => "b",
            EtaRegion::C => "c",
            EtaRegion::Zero => "otherwise",
        }
    }
}

/// A Dirac line crossing the `y` axis at `location` with weight `weight`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiracPoint {
    pub location: f64,
    pub weight: f64,
}

/// Closed-form kernels for one set of coefficients on a road of length `L`.
#[derive(Debug, Clone, Copy)]
pub struct KernelSet {
    c: LinearCoeffs,
    length: f64,
    /// `c1 + c4`
    a: f64,
    /// `c1 c2 / (c1 + c4)`
    mu: f64,
    /// `c2 c4 / (c1 + c4)`
    nu: f64,
}

const TOL: f64 = 1e-9;

impl KernelSet {
    pub fn new(c: LinearCoeffs, length: f64) -> Result<Self> {
        if !(length > 0.0) {
            return Err(Error::domain(format!("road length must be positive, got {length}")));
        }
        require_assumption1(&c, length)?;
        let a = c.c1 + c.c4;
        Ok(KernelSet { c, length, a, mu: c.c1 * c.c2 / a, nu: c.c2 * c.c4 / a })
    }

    pub fn coeffs(&self) -> &LinearCoeffs {
        &self.c
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn delay(&self) -> f64 {
        self.c.delay
    }

    /// `(c1 + c4)/c4 L - (c1/c4) x - c1 tau`, the line where the outlet
    /// boundary feedback takes over.
    #[inline]
    pub fn outlet_line(&self, x: f64, tau: f64) -> f64 {
        let c = &self.c;
        self.a / c.c4 * self.length - c.c1 / c.c4 * x - c.c1 * tau
    }

    fn check_point(&self, x: f64, s: f64, y: f64) -> Result<()> {
        let l = self.length;
        let d = self.c.delay;
        let inside = |v: f64, hi: f64| v >= -TOL * hi.max(1.0) && v <= hi + TOL * hi.max(1.0);
        if !(inside(x, l) && inside(s, d) && inside(y, l)) {
            return Err(Error::domain(format!("kernel point (x={x}, s={s}, y={y}) outside [0,{l}]x[0,{d}]x[0,{l}]")));
        }
        Ok(())
    }

    /// Case selection of the `z`-kernel, checked in the printed order so that
    /// ties on shared boundaries go to the earlier case.
    pub fn gamma_region(&self, x: f64, s: f64, y: f64) -> GammaRegion {
        let c = &self.c;
        let l = self.length;
        let lead = c.c4 * (s - x / c.c1);
        let reach = x + c.c4 * s;
        let trail = x - c.c1 * s;
        let outlet = self.outlet_line(x, s);
        if 0.0 <= y && y <= lead {
            GammaRegion::A
        } else if (reach < y && y <= l - c.c1 * s) || (0.0 <= y && y <= trail) {
            GammaRegion::B
        } else if l - c.c1 * s < y && y <= reach.min(outlet) {
            GammaRegion::C
        } else if lead.max(trail) < y && y <= reach.min(l - c.c1 * s) {
            GammaRegion::D
        } else if outlet <= y && y <= l {
            GammaRegion::E
        } else {
            GammaRegion::Zero
        }
    }

    pub fn eta_region(&self, x: f64, s: f64, y: f64) -> EtaRegion {
        let c = &self.c;
        let lead = c.c4 * s - c.c4 / c.c1 * x;
        if 0.0 <= y && y <= lead {
            EtaRegion::A
        } else if lead.max(0.0) < y && y <= c.c4 * s {
            EtaRegion::B
        } else if c.c4 * s < y && y <= self.length {
            EtaRegion::C
        } else {
            EtaRegion::Zero
        }
    }

    /// Smooth part of the inlet-reflected component, `-c5 (k + c5 c7)/(c6 (c1+c4)) e^{-c2(x+y)}`.
    #[inline]
    pub fn gamma_reflected(&self, x: f64, y: f64) -> f64 {
        let c = &self.c;
        -c.c5 * (c.k + c.c5 * c.c7) / (c.c6 * self.a) * (-c.c2 * (x + y)).exp()
    }

    /// Smooth part driven by the target gain along characteristics.
    #[inline]
    pub fn gamma_gain(&self, x: f64, s: f64, y: f64) -> f64 {
        let c = &self.c;
        -c.k * c.c5 / (c.c6 * self.a) * (-self.mu * x - self.nu * (y + c.c1 * s)).exp()
    }

    /// Constant outlet part, `-k c5/(c1 c6) e^{-c2 L}`.
    #[inline]
    pub fn gamma_outlet(&self) -> f64 {
        let c = &self.c;
        -c.k * c.c5 / (c.c1 * c.c6) * (-c.c2 * self.length).exp()
    }

    /// Non-Dirac part of the `z`-kernel.
    pub fn gamma_smooth(&self, x: f64, s: f64, y: f64) -> Result<f64> {
        self.check_point(x, s, y)?;
        Ok(self.gamma_smooth_unchecked(x, s, y))
    }

    #[inline]
    pub(crate) fn gamma_smooth_unchecked(&self, x: f64, s: f64, y: f64) -> f64 {
        match self.gamma_region(x, s, y) {
            GammaRegion::A => self.gamma_reflected(x, y),
            GammaRegion::B | GammaRegion::Zero => 0.0,
            GammaRegion::C | GammaRegion::D => self.gamma_gain(x, s, y),
            GammaRegion::E => self.gamma_outlet(),
        }
    }

    /// `c1 c5 c7 (k + c5 c7)/(c4 c6 (c1+c4)) e^{-c2 x}`, independent of `s` and `y`.
    #[inline]
    pub fn eta_reflected(&self, x: f64) -> f64 {
        let c = &self.c;
        c.c1 * c.c5 * c.c7 * (c.k + c.c5 * c.c7) / (c.c4 * c.c6 * self.a) * (-c.c2 * x).exp()
    }

    /// Non-Dirac part of the `v`-kernel.
    pub fn eta_smooth(&self, x: f64, s: f64, y: f64) -> Result<f64> {
        self.check_point(x, s, y)?;
        Ok(self.eta_smooth_unchecked(x, s, y))
    }

    #[inline]
    pub(crate) fn eta_smooth_unchecked(&self, x: f64, s: f64, y: f64) -> f64 {
        match self.eta_region(x, s, y) {
            EtaRegion::A => self.eta_reflected(x),
            _ => 0.0,
        }
    }

    /// Pulse of the `z`-kernel on `y = x - c1 s`.
    pub fn gamma_dirac(&self, x: f64, s: f64) -> Option<DiracPoint> {
        let c = &self.c;
        let location = x - c.c1 * s;
        (location >= 0.0).then(|| DiracPoint { location, weight: -c.c5 / c.c6 * (-c.c2 * x).exp() })
    }

    /// Pulses of the `v`-kernel: the inlet reflection on
    /// `y = (c4/c1)(c1 s - x)` and the gain line on `y = x + c4 s`.
    ///
    /// The reflection is printed as `delta(x - c1 s + (c1/c4) y)` with factor
    /// `c1 c5 c7/(c4 c6)`; in the `y` measure the slope `c1/c4` contributes the
    /// Jacobian `c4/c1`, which leaves the weight `c5 c7/c6 e^{-c2 x}`.
    pub fn eta_diracs(&self, x: f64, s: f64) -> (Option<DiracPoint>, Option<DiracPoint>) {
        let c = &self.c;
        let reflect_at = c.c4 / c.c1 * (c.c1 * s - x);
        let reflect = (reflect_at >= 0.0)
            .then(|| DiracPoint { location: reflect_at, weight: c.c5 * c.c7 / c.c6 * (-c.c2 * x).exp() });
        let gain_at = x + c.c4 * s;
        let gain = (gain_at <= self.length).then(|| DiracPoint { location: gain_at, weight: c.k / c.c6 });
        (reflect, gain)
    }

    /// Outlet kernel `r(x, s)`: the gain line of the `v`-kernel integrated
    /// across `y = L`, i.e. `k/c6` once `x + c4 s` has passed the outlet.
    pub fn r_kernel(&self, x: f64, s: f64) -> Result<f64> {
        self.check_point(x, s, 0.0)?;
        Ok(self.r_unchecked(x, s))
    }

    #[inline]
    pub(crate) fn r_unchecked(&self, x: f64, s: f64) -> f64 {
        if x > self.length - self.c.c4 * s {
            self.c.k / self.c.c6
        } else {
            0.0
        }
    }

    /// Smooth part of the actuator kernel `G(x, s, y, r)`. It depends on `s - r`
    /// only; the `z`-kernel enters with the weight `e^{c2 y}` that cancels the
    /// input term `e^{c2 y} c3 psi(y, 0)` of the `z` equation.
    pub fn g_smooth(&self, x: f64, s: f64, y: f64, r: f64) -> Result<f64> {
        if !(r >= -TOL && r <= s + TOL) {
            return Err(Error::domain(format!("actuator kernel needs 0 <= r <= s, got r={r}, s={s}")));
        }
        let lag = (s - r).max(0.0);
        self.check_point(x, lag, y)?;
        let c = &self.c;
        Ok(-c.c3 * (c.c2 * y).exp() * self.gamma_smooth_unchecked(x, lag, y)
            - c.c6 * self.eta_smooth_unchecked(x, lag, y))
    }

    /// Dirac lines of `G(x, s, y, r)` in the `y` measure, including the
    /// outlet line `y = L` carrying `-c6 r(x, s - r)`.
    pub fn g_diracs(&self, x: f64, s: f64, r: f64) -> Vec<DiracPoint> {
        let c = &self.c;
        let lag = (s - r).max(0.0);
        let mut out = Vec::with_capacity(4);
        if let Some(p) = self.gamma_dirac(x, lag) {
            out.push(DiracPoint { location: p.location, weight: -c.c3 * (c.c2 * p.location).exp() * p.weight });
        }
        let (reflect, gain) = self.eta_diracs(x, lag);
        for p in [reflect, gain].into_iter().flatten() {
            out.push(DiracPoint { location: p.location, weight: -c.c6 * p.weight });
        }
        let r_val = self.r_unchecked(x, lag);
        if r_val != 0.0 {
            out.push(DiracPoint { location: self.length, weight: -c.c6 * r_val });
        }
        out
    }

    /// Residuals of the two kernel transport equations,
    /// `gamma_s - c1 gamma_y + c5 e^{-c2 y} eta` and `eta_s + c4 eta_y`, for the
    /// smooth parts by central differences of step `h`. Only meaningful at
    /// least `h` away from the lines of [`KernelSet::distance_to_lines`].
    pub fn pde_residuals(&self, x: f64, s: f64, y: f64, h: f64) -> Result<(f64, f64)> {
        if !(h > 0.0) || s - h < 0.0 || s + h > self.c.delay || y - h < 0.0 || y + h > self.length {
            return Err(Error::domain(format!("stencil of width {h} around (s, y) = ({s}, {y}) leaves the domain")));
        }
        self.check_point(x, s, y)?;
        let c = &self.c;
        let g = |s: f64, y: f64| self.gamma_smooth_unchecked(x, s, y);
        let e = |s: f64, y: f64| self.eta_smooth_unchecked(x, s, y);
        let d = 2.0 * h;
        let gamma_s = (g(s + h, y) - g(s - h, y)) / d;
        let gamma_y = (g(s, y + h) - g(s, y - h)) / d;
        let eta_s = (e(s + h, y) - e(s - h, y)) / d;
        let eta_y = (e(s, y + h) - e(s, y - h)) / d;
        Ok((gamma_s - c.c1 * gamma_y + c.c5 * (-c.c2 * y).exp() * e(s, y), eta_s + c.c4 * eta_y))
    }

    /// Signed distance-like measure from `(x, s, y)` to the nearest line on
    /// which the smooth `z`- or `v`-kernel may jump or a pulse sits. Used by
    /// residual checks to stay away from non-smooth loci.
    pub fn distance_to_lines(&self, x: f64, s: f64, y: f64) -> f64 {
        let c = &self.c;
        let l = self.length;
        [
            y - c.c4 * (s - x / c.c1),
            y - (x + c.c4 * s),
            y - (x - c.c1 * s),
            y - (l - c.c1 * s),
            y - self.outlet_line(x, s),
            y - c.c4 * s,
            y,
            l - y,
        ]
        .iter()
        .fold(f64::INFINITY, |m, d| m.min(d.abs()))
    }
}

/// Successive-approximation solution of the kernel integral equations for one
/// output position `x`.
///
/// Along characteristics the `z`-kernel at `y = 0` obeys a Volterra equation
/// of the second kind in the delay variable,
/// `g(s) = f(s) + lambda * int_{x/c1}^{s} e^{A(theta - s)} g(theta) dtheta`,
/// with `lambda = c1 c5 c7/(c1+c4)` and `A = c1 c2 c4/(c1+c4)`. The forcing
/// `f` collects the gain-line pulse (first iterate) and, from the second
/// iterate on, the inlet-reflected pulse. Every other smooth value follows
/// from `g` by one more quadrature.
#[derive(Debug, Clone)]
pub struct KernelOracle {
    ks: KernelSet,
    x: f64,
    start: f64,
    step: f64,
    /// `g` on `theta_j = start + j step`.
    g: Vec<f64>,
    /// Cumulative `int_{start}^{theta_j} e^{A theta} g`.
    cumulative: Vec<f64>,
    include_reflection: bool,
    residuals: Vec<f64>,
}

impl KernelOracle {
    /// Runs at most `n_iter` iterations on `nodes` quadrature nodes over
    /// `[x/c1, D]`; stops early once the update reaches round-off.
    pub fn solve(ks: &KernelSet, x: f64, n_iter: usize, nodes: usize) -> Result<Self> {
        if n_iter == 0 {
            return Err(Error::domain("successive approximations need at least one iteration"));
        }
        if !(0.0..=ks.length).contains(&x) {
            return Err(Error::domain(format!("oracle position {x} outside [0, {}]", ks.length)));
        }
        let c = ks.c;
        let start = x / c.c1;
        let span = (c.delay - start).max(0.0);
        let n = nodes.max(2);
        let step = if span > 0.0 { span / (n - 1) as f64 } else { 1.0 };
        let mut oracle = KernelOracle {
            ks: *ks,
            x,
            start,
            step,
            g: vec![0.0; n],
            cumulative: vec![0.0; n],
            include_reflection: false,
            residuals: Vec::new(),
        };
        let scale = ks.gamma_reflected(x, 0.0).abs().max(ks.gamma_gain(x, 0.0, 0.0).abs());
        let mut stalled = 0;
        for iter in 1..=n_iter {
            oracle.include_reflection = iter >= 2;
            let next: Vec<f64> = (0..n).map(|j| oracle.gamma_at(start + j as f64 * step, 0.0)).collect();
            let residual = next.iter().zip(&oracle.g).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
            oracle.g = next;
            oracle.accumulate();
            if let Some(&prev) = oracle.residuals.last() {
                if residual >= prev && residual > 1e-14 * scale {
                    stalled += 1;
                    if stalled >= 3 {
                        return Err(Error::NonConvergence { iterations: iter, residual });
                    }
                } else {
                    stalled = 0;
                }
            }
            oracle.residuals.push(residual);
            if iter >= 2 && residual <= 1e-15 * scale {
                break;
            }
        }
        Ok(oracle)
    }

    fn accumulate(&mut self) {
        let a_rate = self.rate();
        let mut acc = 0.0;
        self.cumulative[0] = 0.0;
        for j in 1..self.g.len() {
            let t0 = self.start + (j - 1) as f64 * self.step;
            let t1 = t0 + self.step;
            acc += 0.5 * self.step * ((a_rate * t0).exp() * self.g[j - 1] + (a_rate * t1).exp() * self.g[j]);
            self.cumulative[j] = acc;
        }
    }

    fn rate(&self) -> f64 {
        let c = &self.ks.c;
        c.c1 * c.c2 * c.c4 / self.ks.a
    }

    fn lambda(&self) -> f64 {
        let c = &self.ks.c;
        c.c1 * c.c5 * c.c7 / self.ks.a
    }

    /// `int_{x/c1}^{theta} e^{A t} g(t) dt`, linear in between nodes.
    fn cumulative_at(&self, theta: f64) -> f64 {
        if theta <= self.start {
            return 0.0;
        }
        let u = (theta - self.start) / self.step;
        let j = u.floor() as usize;
        let last = self.cumulative.len() - 1;
        if j >= last {
            return self.cumulative[last];
        }
        let w = u - j as f64;
        self.cumulative[j] * (1.0 - w) + self.cumulative[j + 1] * w
    }

    fn g_at(&self, theta: f64) -> f64 {
        if theta < self.start - 1e-12 {
            return 0.0;
        }
        let u = ((theta - self.start) / self.step).max(0.0);
        let j = u.floor() as usize;
        let last = self.g.len() - 1;
        if j >= last {
            return self.g[last];
        }
        let w = u - j as f64;
        self.g[j] * (1.0 - w) + self.g[j + 1] * w
    }

    fn gamma_at(&self, s: f64, y: f64) -> f64 {
        let ks = &self.ks;
        let c = &ks.c;
        let x = self.x;
        let l = ks.length;
        if y > l - c.c1 * s {
            // characteristic leaves through the outlet boundary
            if y >= ks.outlet_line(x, s) {
                return ks.gamma_outlet();
            }
            return if y <= x + c.c4 * s { ks.gamma_gain(x, s, y) } else { 0.0 };
        }
        let mut value = 0.0;
        if x - c.c1 * s <= y && y <= x + c.c4 * s {
            value += ks.gamma_gain(x, s, y);
        }
        if self.include_reflection {
            if y <= c.c4 * (s - x / c.c1) {
                value -= c.c5 * c.c5 * c.c7 / (c.c6 * ks.a) * (-c.c2 * x - ks.nu * (y + c.c1 * s - x)).exp();
            }
            if y < c.c4 * s {
                value += self.lambda() * (-ks.nu * (y + c.c1 * s)).exp() * self.cumulative_at(s - y / c.c4);
            }
        }
        value
    }

    /// Smooth `z`-kernel at `(x, s, y)` after the last iterate.
    pub fn gamma(&self, s: f64, y: f64) -> f64 {
        self.gamma_at(s, y)
    }

    /// Smooth `v`-kernel, transported from the inlet values of the `z`-kernel.
    pub fn eta(&self, s: f64, y: f64) -> f64 {
        let c = &self.ks.c;
        if y <= c.c4 * s {
            -c.c1 * c.c7 / c.c4 * self.g_at(s - y / c.c4)
        } else {
            0.0
        }
    }

    /// Max-norm updates of the inlet trace, one per iteration.
    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn x(&self) -> f64 {
        self.x
    }
}

/// Oracle kernels tabulated on a uniform `(x, s, y)` grid.
#[derive(Debug, Clone)]
pub struct KernelTable {
    pub xs: Vec<f64>,
    pub ss: Vec<f64>,
    pub ys: Vec<f64>,
    /// `gamma[i][m][j]` at `(xs[i], ss[m], ys[j])`.
    pub gamma: Vec<Vec<Vec<f64>>>,
    pub eta: Vec<Vec<Vec<f64>>>,
    /// Final update size for each `x`.
    pub residual: Vec<f64>,
}

/// Grid for [`solve_kernels_successive`].
#[derive(Debug, Clone, Copy)]
pub struct OracleGrid {
    pub x_nodes: usize,
    pub s_nodes: usize,
    pub y_nodes: usize,
    /// Quadrature nodes of the Volterra solve in the delay variable.
    pub theta_nodes: usize,
}

impl Default for OracleGrid {
    fn default() -> Self {
        OracleGrid { x_nodes: 21, s_nodes: 21, y_nodes: 201, theta_nodes: 2001 }
    }
}

/// Tabulates the smooth kernels by successive approximations.
pub fn solve_kernels_successive(ks: &KernelSet, n_iter: usize, grid: OracleGrid) -> Result<KernelTable> {
    let lin = |n: usize, hi: f64| -> Vec<f64> {
        let n = n.max(2);
        (0..n).map(|i| hi * i as f64 / (n - 1) as f64).collect()
    };
    let xs = lin(grid.x_nodes, ks.length);
    let ss = lin(grid.s_nodes, ks.c.delay);
    let ys = lin(grid.y_nodes, ks.length);
    let mut gamma = Vec::with_capacity(xs.len());
    let mut eta = Vec::with_capacity(xs.len());
    let mut residual = Vec::with_capacity(xs.len());
    for &x in &xs {
        let o = KernelOracle::solve(ks, x, n_iter, grid.theta_nodes)?;
        gamma.push(ss.iter().map(|&s| ys.iter().map(|&y| o.gamma(s, y)).collect()).collect());
        eta.push(ss.iter().map(|&s| ys.iter().map(|&y| o.eta(s, y)).collect()).collect());
        residual.push(o.residuals().last().copied().unwrap_or(0.0));
    }
    Ok(KernelTable { xs, ss, ys, gamma, eta, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linearize::coefficients;
    use crate::model::{equilibrium, ModelParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Reference steady state on a 100 m stretch.
    fn short_road() -> KernelSet {
        let p = ModelParams::default();
        let c = coefficients(&equilibrium(&p).unwrap(), &p, 0.1, 4.0).unwrap();
        KernelSet::new(c, 100.0).unwrap()
    }

    #[test]
    fn gain_only_region_has_no_smooth_part() {
        let ks = short_road();
        let c = ks.coeffs();
        // x + c4 s < y <= L - c1 s
        let (x, s) = (20.0, 2.0);
        let y = x + c.c4 * s + 5.0;
        assert_eq!(ks.gamma_region(x, s, y), GammaRegion::B);
        assert_eq!(ks.gamma_smooth(x, s, y).unwrap(), 0.0);
    }

    #[test]
    fn outlet_region_is_constant() {
        let ks = short_road();
        let want = ks.gamma_outlet();
        let c = *ks.coeffs();
        assert!((want + c.k * c.c5 / (c.c1 * c.c6) * (-c.c2 * 100.0).exp()).abs() < 1e-18);
        for &(x, s) in &[(95.0, 3.0), (99.0, 4.0), (90.0, 3.9)] {
            let y = 99.9;
            assert_eq!(ks.gamma_region(x, s, y), GammaRegion::E, "{x} {s}");
            assert_eq!(ks.gamma_smooth(x, s, y).unwrap(), want);
        }
    }

    #[test]
    fn eta_regions() {
        let ks = short_road();
        let c = *ks.coeffs();
        assert_eq!(ks.eta_smooth(10.0, 2.0, c.c4 * 2.0 + 1.0).unwrap(), 0.0);
        let x = 3.0;
        let a1 = ks.eta_smooth(x, 3.0, 0.5).unwrap();
        let a2 = ks.eta_smooth(x, 4.0, 2.0).unwrap();
        assert_eq!(ks.eta_region(x, 3.0, 0.5), EtaRegion::A);
        assert_eq!(a1, a2);
        assert_eq!(a1, ks.eta_reflected(x));
    }

    #[test]
    fn outlet_kernel() {
        let ks = short_road();
        let c = *ks.coeffs();
        for x in [0.0, 50.0, 100.0] {
            assert_eq!(ks.r_kernel(x, 0.0).unwrap(), 0.0);
        }
        assert_eq!(ks.r_kernel(99.0, 2.0).unwrap(), c.k / c.c6);
        assert_eq!(ks.r_kernel(50.0, 2.0).unwrap(), 0.0);
        assert!(ks.r_kernel(50.0, 5.0).is_err());
    }

    #[test]
    fn actuator_kernel_composes_the_others() {
        let ks = short_road();
        let c = *ks.coeffs();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let x = rng.gen_range(0.0..100.0);
            let s = rng.gen_range(0.0..4.0);
            let r = rng.gen_range(0.0..=s);
            let y = rng.gen_range(0.0..100.0);
            let g = ks.g_smooth(x, s, y, r).unwrap();
            let want = -c.c3 * (c.c2 * y).exp() * ks.gamma_smooth(x, s - r, y).unwrap()
                - c.c6 * ks.eta_smooth(x, s - r, y).unwrap();
            assert!((g - want).abs() <= 1e-12 * want.abs().max(1e-300));
            // depends on s - r only
            let shift = rng.gen_range(0.0..(4.0 - s));
            assert_eq!(ks.g_smooth(x, s + shift, y, r + shift).unwrap(), g);
        }
        // r = s leaves only pulses
        for x in [1.0, 40.0, 99.0] {
            for y in [0.5, 33.0, 77.0] {
                assert_eq!(ks.g_smooth(x, 2.0, y, 2.0).unwrap(), 0.0);
            }
        }
        assert!(ks.g_smooth(10.0, 1.0, 5.0, 2.0).is_err());
    }

    #[test]
    fn boundary_relations_hold_for_smooth_parts() {
        let ks = short_road();
        let c = *ks.coeffs();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let x = rng.gen_range(0.0..100.0);
            let s = rng.gen_range(0.0..4.0);
            let at_outlet = ks.gamma_smooth(x, s, 100.0).unwrap();
            let want = -c.c5 / c.c1 * (-c.c2 * 100.0).exp() * ks.r_kernel(x, s).unwrap();
            assert!((at_outlet - want).abs() < 1e-8);
            let inlet = ks.eta_smooth(x, s, 0.0).unwrap();
            let want = -c.c1 * c.c7 / c.c4 * ks.gamma_smooth(x, s, 0.0).unwrap();
            assert!((inlet - want).abs() < 1e-8);
        }
    }

    #[test]
    fn dirac_descriptors() {
        let ks = short_road();
        let c = *ks.coeffs();
        let p = ks.gamma_dirac(50.0, 2.0).unwrap();
        assert!((p.location - (50.0 - 2.0 * c.c1)).abs() < 1e-12);
        assert!((p.weight + c.c5 / c.c6 * (-c.c2 * 50.0).exp()).abs() < 1e-15);
        assert!(ks.gamma_dirac(1.0, 2.0).is_none());
        let (reflect, gain) = ks.eta_diracs(1.0, 2.0);
        let reflect = reflect.unwrap();
        assert!((reflect.location - c.c4 / c.c1 * (2.0 * c.c1 - 1.0)).abs() < 1e-12);
        assert!((reflect.weight - c.c5 * c.c7 / c.c6 * (-c.c2).exp()).abs() < 1e-15);
        assert!((gain.unwrap().location - (1.0 + 2.0 * c.c4)).abs() < 1e-12);
        let (reflect, gain) = ks.eta_diracs(99.0, 2.0);
        assert!(reflect.is_none() && gain.is_none());
    }

    #[test]
    fn first_iterate_is_the_gain_term() {
        let ks = short_road();
        let c = *ks.coeffs();
        let x = 2.0;
        let o = KernelOracle::solve(&ks, x, 1, 401).unwrap();
        for &(s, y) in &[(3.0, 1.0), (4.0, 5.0), (3.5, 0.2)] {
            assert!(x - c.c1 * s <= y && y <= x + c.c4 * s);
            assert!((o.gamma(s, y) - ks.gamma_gain(x, s, y)).abs() < 1e-15);
        }
    }

    #[test]
    fn series_converges_to_reflected_part() {
        let ks = short_road();
        let x = 2.0;
        let o = KernelOracle::solve(&ks, x, 60, 2001).unwrap();
        let (s, y) = (4.0, 1.0);
        assert_eq!(ks.gamma_region(x, s, y), GammaRegion::A);
        assert!((o.gamma(s, y) - ks.gamma_reflected(x, y)).abs() < 1e-6);
        let r = o.residuals();
        for w in r.windows(2).skip(1) {
            if w[0] > 1e-14 {
                assert!(w[1] < w[0], "{r:?}");
            }
        }
    }

    #[test]
    fn table_matches_closed_form() {
        let ks = short_road();
        let t =
            solve_kernels_successive(&ks, 60, OracleGrid { x_nodes: 6, s_nodes: 5, y_nodes: 41, theta_nodes: 1001 })
                .unwrap();
        for (i, &x) in t.xs.iter().enumerate() {
            for (m, &s) in t.ss.iter().enumerate() {
                for (j, &y) in t.ys.iter().enumerate() {
                    if ks.distance_to_lines(x, s, y) < 1e-6 {
                        continue;
                    }
                    let g = ks.gamma_smooth(x, s, y).unwrap();
                    let e = ks.eta_smooth(x, s, y).unwrap();
                    assert!((t.gamma[i][m][j] - g).abs() < 1e-6, "gamma at {x} {s} {y}");
                    assert!((t.eta[i][m][j] - e).abs() < 1e-6, "eta at {x} {s} {y}");
                }
            }
        }
    }

    #[test]
    fn smooth_parts_solve_the_transport_equations() {
        let p = ModelParams::default();
        let c = coefficients(&equilibrium(&p).unwrap(), &p, 0.1, 4.0).unwrap();
        let h = 1e-4;
        for ks in [short_road(), KernelSet::new(c, 1000.0).unwrap()] {
            let l = ks.length();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut checked = 0;
            while checked < 1000 {
                let (x, s, y) = (rng.gen_range(0.0..l), rng.gen_range(h..4.0 - h), rng.gen_range(h..l - h));
                if ks.distance_to_lines(x, s, y) < 10.0 * h {
                    continue;
                }
                let (rg, re) = ks.pde_residuals(x, s, y, h).unwrap();
                assert!(rg.abs() < 1e-4 && re.abs() < 1e-4, "({x}, {s}, {y}): {rg} {re}");
                checked += 1;
            }
        }
        assert!(short_road().pde_residuals(1.0, 0.0, 5.0, h).is_err());
    }

    #[test]
    fn oracle_rejects_bad_input() {
        let ks = short_road();
        assert!(KernelOracle::solve(&ks, 10.0, 0, 100).is_err());
        assert!(KernelOracle::solve(&ks, 120.0, 5, 100).is_err());
        let c = *ks.coeffs();
        assert!(KernelSet::new(c.with_delay(20.0), 100.0).is_err());
    }
}
