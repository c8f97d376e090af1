//! The three-branch backstepping transformation from the plant state
//! `(z, v, v(L), psi)` to the target state `beta`, its explicit inverse, and
//! numerical checks of the target system along stored trajectories.
//!
//! Integrals over the delay variable use [`integrate_tau`] with nodes on the
//! slice grid of the actuator field; integrals over space use the grid
//! trapezoid rule. Off-grid values come from (bi)linear interpolation.

use crate::error::{Error, Result};
use crate::grid::{integrate_tau, Grid, SlicedField};
use crate::kernels::{EtaRegion, GammaRegion, KernelSet};
use crate::linearize::{LinearCoeffs, LinearState};
use rand::Rng;

/// Target state `beta(x, s)` on the same slice grid as the actuator field.
pub type TargetField = SlicedField;

/// Which of the three spatial intervals a point belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// `0 <= x <= c1 s`
    Inlet,
    /// `c1 s < x <= L - c4 s`
    Middle,
    /// `L - c4 s < x <= L`
    Outlet,
}

/// Forward and inverse transformation on a fixed grid.
#[derive(Debug, Clone)]
pub struct Transform {
    grid: Grid,
    ks: KernelSet,
}

impl Transform {
    pub fn new(grid: Grid, ks: KernelSet) -> Result<Self> {
        if (grid.length() - ks.length()).abs() > 1e-9 * grid.length() {
            return Err(Error::Validation(format!(
                "grid length {} differs from kernel road length {}",
                grid.length(),
                ks.length()
            )));
        }
        Ok(Transform { grid, ks })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn kernels(&self) -> &KernelSet {
        &self.ks
    }

    pub fn coeffs(&self) -> &LinearCoeffs {
        self.ks.coeffs()
    }

    pub fn branch(&self, x: f64, s: f64) -> Branch {
        let c = self.coeffs();
        if x <= c.c1 * s {
            Branch::Inlet
        } else if x <= self.grid.length() - c.c4 * s {
            Branch::Middle
        } else {
            Branch::Outlet
        }
    }

    fn check_inputs(&self, state: &LinearState, field: &SlicedField, s: f64) -> Result<()> {
        self.grid.check(&state.z)?;
        self.grid.check(&state.v)?;
        self.grid.check(field.slice(0))?;
        if s < -1e-12 || s > field.max_s() + 1e-9 {
            return Err(Error::Validation(format!(
                "delay coordinate {s} s exceeds the stored window of {} s",
                field.max_s()
            )));
        }
        if s > self.ks.delay() + 1e-9 {
            return Err(Error::Validation(format!(
                "delay coordinate {s} s exceeds the design delay {} s",
                self.ks.delay()
            )));
        }
        Ok(())
    }

    /// Breakpoints in the delay variable where integrands switch form, plus
    /// the times at which sampling paths cross the seams of a target field.
    fn tau_breaks(&self, x: f64, s: f64) -> [f64; 5] {
        let c = self.coeffs();
        let l = self.grid.length();
        let a = c.c1 + c.c4;
        [x / c.c1, (l - x) / c.c4, (c.c1 * s - x) / a, (c.c1 * s + c.c4 * x / c.c1) / a, (x - l + c.c4 * s) / a]
    }

    fn tau_integral<F: FnMut(f64) -> f64>(&self, x: f64, a: f64, b: f64, step: f64, s: f64, mut f: F) -> f64 {
        self.tau_integral_pieces(x, a, b, step, s, |t, _, _| f(t))
    }

    /// Delay integral split at the branch times of `x`; `f` also receives the
    /// bounds of the piece it is evaluated on.
    fn tau_integral_pieces<F: FnMut(f64, f64, f64) -> f64>(
        &self,
        x: f64,
        a: f64,
        b: f64,
        step: f64,
        s: f64,
        mut f: F,
    ) -> f64 {
        if !(b > a) {
            return 0.0;
        }
        let mut cuts: Vec<f64> =
            self.tau_breaks(x, s).into_iter().filter(|&t| t > a + 1e-12 && t < b - 1e-12).collect();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup_by(|p, q| (*p - *q).abs() < 1e-12);
        let mut lo = a;
        let mut acc = 0.0;
        for hi in cuts.into_iter().chain(std::iter::once(b)) {
            acc += integrate_tau(lo, hi, step, s, |t| f(t, lo, hi));
            lo = hi;
        }
        acc
    }

    /// `beta(x, s)` for the given branch (used directly for seam checks).
    pub fn forward_branch(&self, branch: Branch, x: f64, s: f64, state: &LinearState, psi: &SlicedField) -> f64 {
        let c = *self.coeffs();
        let g = &self.grid;
        let l = g.length();
        let ds = psi.ds();
        let a = c.c1 + c.c4;
        let mu = c.c1 * c.c2 / a;
        let p = |y: f64, sigma: f64| psi.sample(g, y, sigma);
        let zf = |y: f64| g.interp(&state.z, y);
        let vf = |y: f64| speed_at(g, state, y);
        let gain_kernel = |y: f64, tau: f64| c.k * c.c1 * c.c2 / a * (-mu * (x - y + c.c4 * tau)).exp();
        let z_gain = |y: f64| -self.ks.gamma_gain(x, s, y);
        let decay_x = (-c.c2 * x).exp();
        let tau = |lo: f64, hi: f64, f: &mut dyn FnMut(f64) -> f64| self.tau_integral(x, lo, hi, ds, s, f);

        let mut val = p(x, s);
        match branch {
            Branch::Inlet => {
                let t0 = x / c.c1;
                let lead = c.c4 * (s - t0);
                val -= tau(0.0, t0.min(s), &mut |t| c.c1 * c.c2 * (-c.c1 * c.c2 * t).exp() * p(x - c.c1 * t, s - t));
                val += tau(t0, s, &mut |t| c.c5 * c.c7 * decay_x * p(c.c4 * (t - t0), s - t));
                val -= tau(0.0, s, &mut |t| {
                    let lo = (x - c.c1 * t).max(c.c4 * (t - t0));
                    g.integrate(lo, x + c.c4 * t, |y| gain_kernel(y, t) * p(y, s - t))
                });
                val += tau(0.0, s, &mut |t| c.k * p(x + c.c4 * t, s - t));
                val -= g.integrate(0.0, lead, |y| self.ks.gamma_reflected(x, y) * zf(y));
                val += g.integrate(lead, x + c.c4 * s, |y| z_gain(y) * zf(y));
                val -= c.c5 * c.c7 / c.c6 * decay_x * vf(lead);
                val -= c.k / c.c6 * vf(x + c.c4 * s);
                val -= self.ks.eta_reflected(x) * g.integrate(0.0, lead, vf);
            }
            Branch::Middle => {
                val -= tau(0.0, s, &mut |t| c.c1 * c.c2 * (-c.c1 * c.c2 * t).exp() * p(x - c.c1 * t, s - t));
                val += tau(0.0, s, &mut |t| c.k * p(x + c.c4 * t, s - t));
                val -=
                    tau(0.0, s, &mut |t| g.integrate(x - c.c1 * t, x + c.c4 * t, |y| gain_kernel(y, t) * p(y, s - t)));
                val += c.c5 / c.c6 * decay_x * zf(x - c.c1 * s);
                val += g.integrate(x - c.c1 * s, x + c.c4 * s, |y| z_gain(y) * zf(y));
                val -= c.k / c.c6 * vf(x + c.c4 * s);
            }
            Branch::Outlet => {
                let t_l = ((l - x) / c.c4).min(s);
                let outlet = |t: f64| self.ks.outlet_line(x, t);
                val -= tau(0.0, s, &mut |t| c.c1 * c.c2 * (-c.c1 * c.c2 * t).exp() * p(x - c.c1 * t, s - t));
                val += tau(0.0, t_l, &mut |t| c.k * p(x + c.c4 * t, s - t));
                val += tau(t_l, s, &mut |t| c.k * p(l, s - t));
                val -= tau(0.0, s, &mut |t| {
                    g.integrate(x - c.c1 * t, (x + c.c4 * t).min(outlet(t)), |y| gain_kernel(y, t) * p(y, s - t))
                });
                val -= tau(t_l, s, &mut |t| {
                    g.integrate(outlet(t), l, |y| c.k * c.c2 * (-c.c2 * (l - y)).exp() * p(y, s - t))
                });
                val += c.c5 / c.c6 * decay_x * zf(x - c.c1 * s);
                val -= self.ks.gamma_outlet() * g.integrate(outlet(s), l, zf);
                val += g.integrate(x - c.c1 * s, outlet(s), |y| z_gain(y) * zf(y));
                val -= c.k / c.c6 * state.v_l;
            }
        }
        val
    }

    /// `beta(x, s)` at one point.
    pub fn forward_point(&self, x: f64, s: f64, state: &LinearState, psi: &SlicedField) -> f64 {
        self.forward_branch(self.branch(x, s), x, s, state, psi)
    }

    /// `beta(., s)` on the grid.
    pub fn forward_transform(&self, state: &LinearState, psi: &SlicedField, s: f64) -> Result<Vec<f64>> {
        self.check_inputs(state, psi, s)?;
        Ok((0..self.grid.nodes()).map(|i| self.forward_point(self.grid.x(i), s, state, psi)).collect())
    }

    /// `beta` on every slice of the actuator field.
    pub fn forward_field(&self, state: &LinearState, psi: &SlicedField) -> Result<TargetField> {
        let slices = (0..=psi.depth())
            .map(|m| self.forward_transform(state, psi, m as f64 * psi.ds()))
            .collect::<Result<Vec<_>>>()?;
        SlicedField::from_slices(psi.ds(), slices)
    }

    /// `psi(x, s)` from the target state for the given branch.
    pub fn inverse_branch(&self, branch: Branch, x: f64, s: f64, state: &LinearState, beta: &TargetField) -> f64 {
        let c = *self.coeffs();
        let g = &self.grid;
        let l = g.length();
        let ds = beta.ds();
        let a = c.c1 + c.c4;
        let b = |y: f64, sigma: f64| self.sample_target(beta, y, sigma);
        let vf = |y: f64| speed_at(g, state, y);
        let kernel = |y: f64, tau: f64| c.k * c.c1 * c.c2 / a * (c.k * (x - y - c.c1 * tau) / a).exp();
        let v_kernel = |y: f64| c.k * c.c1 * c.c2 / (c.c6 * a) * (c.k * (x - y - c.c1 * s) / a).exp();
        let tau = |lo: f64, hi: f64, f: &mut dyn FnMut(f64) -> f64| self.tau_integral(x, lo, hi, ds, s, f);
        let decay_s = (-c.k * s).exp();

        let mut val = b(x, s);
        match branch {
            Branch::Inlet => {
                let t0 = x / c.c1;
                let lead = c.c4 * (s - t0);
                val -= tau(t0, s, &mut |t| g.integrate(c.c4 * (t - t0), x + c.c4 * t, |y| kernel(y, t) * b(y, s - t)));
                val -= tau(0.0, t0.min(s), &mut |t| {
                    g.integrate(x - c.c1 * t, x + c.c4 * t, |y| kernel(y, t) * b(y, s - t))
                });
                val -= tau(t0, s, &mut |t| c.c2 * c.c4 * (c.k * (t0 - t)).exp() * b(c.c4 * (t - t0), s - t));
                val += tau(0.0, t0.min(s), &mut |t| c.c1 * c.c2 * b(x - c.c1 * t, s - t));
                val -= tau(0.0, s, &mut |t| c.k * (-c.k * t).exp() * b(x + c.c4 * t, s - t));
                val += c.c2 * c.c4 / c.c6 * (c.k * (t0 - s)).exp() * vf(lead);
                val += c.k / c.c6 * decay_s * vf(x + c.c4 * s);
                val += g.integrate(lead, x + c.c4 * s, |y| v_kernel(y) * vf(y));
            }
            Branch::Middle | Branch::Outlet => {
                let outlet = branch == Branch::Outlet;
                let t_l = if outlet { ((l - x) / c.c4).min(s) } else { s };
                val -= tau(0.0, s, &mut |t| {
                    g.integrate(x - c.c1 * t, (x + c.c4 * t).min(l), |y| kernel(y, t) * b(y, s - t))
                });
                val += tau(0.0, s, &mut |t| c.c1 * c.c2 * b(x - c.c1 * t, s - t));
                val -= tau(0.0, t_l, &mut |t| c.k * (-c.k * t).exp() * b(x + c.c4 * t, s - t));
                if outlet {
                    val -= tau(t_l, s, &mut |t| {
                        let w = c.c1 * c.c2 * (c.k * (x - l - c.c1 * t) / a).exp() - c.c1 * c.c2 * (-c.k * t).exp()
                            + c.k * (-c.k * t).exp();
                        w * b(l, s - t)
                    });
                    val += g.integrate(x - c.c1 * s, l, |y| v_kernel(y) * vf(y));
                    let w =
                        c.c1 * c.c2 / c.c6 * ((c.k * (x - l - c.c1 * s) / a).exp() - decay_s) + c.k / c.c6 * decay_s;
                    val += w * state.v_l;
                } else {
                    val += c.k / c.c6 * decay_s * vf(x + c.c4 * s);
                    val += g.integrate(x - c.c1 * s, x + c.c4 * s, |y| v_kernel(y) * vf(y));
                }
                val -= c.c5 / c.c6 * (c.c2 * (c.c1 * s - x)).exp() * g.interp(&state.z, x - c.c1 * s);
            }
        }
        val
    }

    /// Spatial interval of the branch holding `(y, s)`.
    fn branch_bounds(&self, y: f64, s: f64) -> (Branch, f64, f64) {
        let c = self.coeffs();
        let l = self.grid.length();
        let branch = self.branch(y, s);
        let (lo, hi) = match branch {
            Branch::Inlet => (0.0, c.c1 * s),
            Branch::Middle => (c.c1 * s, l - c.c4 * s),
            Branch::Outlet => (l - c.c4 * s, l),
        };
        (branch, lo, hi)
    }

    /// `beta(y, s)` interpolated from nodes of the branch holding `(y, s)`
    /// only. The target field has slope jumps on the seams; interpolating
    /// across them costs a first-order error along every path that runs
    /// parallel to a seam.
    fn sample_target(&self, beta: &TargetField, y: f64, s: f64) -> f64 {
        let g = &self.grid;
        let depth = beta.depth();
        if depth == 0 {
            return g.interp(beta.slice(0), y);
        }
        let (branch, _, _) = self.branch_bounds(y, s);
        let at_slice = |m: usize| {
            let sm = m as f64 * beta.ds();
            let c = self.coeffs();
            let l = g.length();
            let (lo, hi) = match branch {
                Branch::Inlet => (0.0, c.c1 * sm),
                Branch::Middle => (c.c1 * sm, l - c.c4 * sm),
                Branch::Outlet => (l - c.c4 * sm, l),
            };
            interp_within(g, beta.slice(m), y, lo, hi)
        };
        let u = (s / beta.ds()).clamp(0.0, depth as f64);
        let m = u.floor() as usize;
        let w = u - m as f64;
        if m >= depth || w < 1e-9 {
            at_slice(m.min(depth))
        } else if w > 1.0 - 1e-9 {
            at_slice(m + 1)
        } else {
            (1.0 - w) * at_slice(m) + w * at_slice(m + 1)
        }
    }

    pub fn inverse_point(&self, x: f64, s: f64, state: &LinearState, beta: &TargetField) -> f64 {
        self.inverse_branch(self.branch(x, s), x, s, state, beta)
    }

    /// `psi(., s)` on the grid from the target state.
    pub fn inverse_transform(&self, beta: &TargetField, state: &LinearState, s: f64) -> Result<Vec<f64>> {
        self.check_inputs(state, beta, s)?;
        Ok((0..self.grid.nodes()).map(|i| self.inverse_point(self.grid.x(i), s, state, beta)).collect())
    }

    pub fn inverse_field(&self, beta: &TargetField, state: &LinearState) -> Result<SlicedField> {
        let slices = (0..=beta.depth())
            .map(|m| self.inverse_transform(beta, state, m as f64 * beta.ds()))
            .collect::<Result<Vec<_>>>()?;
        SlicedField::from_slices(beta.ds(), slices)
    }

    /// `beta(x, s)` assembled directly from the kernels,
    /// `psi - int gamma z - int eta v - r v(L) - int int G psi`,
    /// with smooth parts integrated piecewise between region lines and every
    /// pulse evaluated at its location. Independent of the explicit operators.
    pub fn kernel_route_point(&self, x: f64, s: f64, state: &LinearState, psi: &SlicedField) -> f64 {
        let ks = &self.ks;
        let c = *self.coeffs();
        let g = &self.grid;
        let l = g.length();
        let zf = |y: f64| g.interp(&state.z, y);
        let vf = |y: f64| speed_at(g, state, y);

        let mut val = psi.sample(g, x, s);
        val -= self.smooth_integral(x, s, |region_g, region_e, y| {
            gamma_in_region(ks, region_g, x, s, y) * zf(y) + eta_in_region(ks, region_e, x) * vf(y)
        });
        if let Some(p) = ks.gamma_dirac(x, s) {
            val -= p.weight * zf(p.location);
        }
        let (reflect, gain) = ks.eta_diracs(x, s);
        for p in [reflect, gain].into_iter().flatten() {
            val -= p.weight * vf(p.location);
        }
        val -= ks.r_unchecked(x, s) * state.v_l;

        // Pulses switch on and off at the piece ends of the delay integral, so
        // the kernel is evaluated a hair inside the current piece.
        let actuator = |t: f64, lo: f64, hi: f64| -> f64 {
            let sigma = s - t;
            let nudge = 1e-9 * psi.ds();
            let t = t.clamp(lo + nudge, (hi - nudge).max(lo + nudge));
            let p = |y: f64| psi.sample(g, y, sigma);
            let mut acc = self.smooth_integral(x, t, |region_g, region_e, y| {
                (-c.c3 * (c.c2 * y).exp() * gamma_in_region(ks, region_g, x, t, y)
                    - c.c6 * eta_in_region(ks, region_e, x))
                    * p(y)
            });
            for d in ks.g_diracs(x, t, 0.0) {
                if d.location <= l {
                    acc += d.weight * p(d.location);
                }
            }
            acc
        };
        val -= self.tau_integral_pieces(x, 0.0, s, psi.ds(), s, actuator);
        val
    }

    /// `int_0^L f(region_gamma, region_eta, y) dy`, split at every line where a
    /// region changes.
    fn smooth_integral<F: Fn(GammaRegion, EtaRegion, f64) -> f64>(&self, x: f64, s: f64, f: F) -> f64 {
        let c = self.coeffs();
        let l = self.grid.length();
        let mut cuts = vec![
            0.0,
            l,
            c.c4 * (s - x / c.c1),
            x + c.c4 * s,
            x - c.c1 * s,
            l - c.c1 * s,
            self.ks.outlet_line(x, s),
            c.c4 * s,
        ];
        cuts.retain(|&y| (0.0..=l).contains(&y));
        cuts.sort_by(f64::total_cmp);
        cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        let mut acc = 0.0;
        for w in cuts.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            let rg = self.ks.gamma_region(x, s, mid);
            let re = self.ks.eta_region(x, s, mid);
            acc += self.grid.integrate(w[0], w[1], |y| f(rg, re, y));
        }
        acc
    }

    pub fn kernel_route(&self, state: &LinearState, psi: &SlicedField, s: f64) -> Result<Vec<f64>> {
        self.check_inputs(state, psi, s)?;
        Ok((0..self.grid.nodes()).map(|i| self.kernel_route_point(self.grid.x(i), s, state, psi)).collect())
    }
}

/// Norms of the transformation inputs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InputNorms {
    /// `||psi||` over `[0, L] x [0, D]`
    pub psi: f64,
    /// `||psi(L, .)||` over `[0, D]`
    pub psi_outlet: f64,
    pub z: f64,
    pub v: f64,
    pub v_l: f64,
}

impl InputNorms {
    pub fn of(grid: &Grid, state: &LinearState, psi: &SlicedField) -> Self {
        InputNorms {
            psi: psi.norm_sq(grid).sqrt(),
            psi_outlet: psi.outlet_norm_sq().sqrt(),
            z: grid.norm(&state.z),
            v: grid.norm(&state.v),
            v_l: state.v_l.abs(),
        }
    }
}

/// Gains of an a-priori bound `||beta|| <= sum_i gain_i * norm_i`, assembled
/// by Cauchy-Schwarz from kernel norms (smooth parts) and pulse weights times
/// path lengths (pulse parts).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformBound {
    pub psi: f64,
    pub psi_outlet: f64,
    pub z: f64,
    pub v: f64,
    pub v_l: f64,
}

impl TransformBound {
    pub fn apply(&self, n: &InputNorms) -> f64 {
        self.psi * n.psi + self.psi_outlet * n.psi_outlet + self.z * n.z + self.v * n.v + self.v_l * n.v_l
    }
}

impl Transform {
    /// Estimates the bound gains by sampling the kernels; `samples` sets the
    /// resolution per axis. The smooth-kernel norms get a 10% margin for
    /// the sampling error.
    pub fn bound(&self, samples: usize) -> TransformBound {
        let ks = &self.ks;
        let c = *self.coeffs();
        let l = self.grid.length();
        let d = ks.delay();
        let n = samples.max(4);
        let hx = l / n as f64;
        let hs = d / n as f64;
        let mid = |i: usize, h: f64| (i as f64 + 0.5) * h;
        let (mut gz, mut gv, mut gr, mut gg) = (0.0, 0.0, 0.0, 0.0);
        let (mut w_gamma, mut w_reflect, mut w_gain): (f64, f64, f64) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let x = mid(i, hx);
            for j in 0..n {
                let s = mid(j, hs);
                for m in 0..n {
                    let y = mid(m, hx);
                    gz += ks.gamma_smooth_unchecked(x, s, y).powi(2);
                    gv += ks.eta_smooth_unchecked(x, s, y).powi(2);
                    for q in 0..n {
                        let t = mid(q, s / n as f64);
                        let gs = -c.c3 * (c.c2 * y).exp() * ks.gamma_smooth_unchecked(x, t, y)
                            - c.c6 * ks.eta_smooth_unchecked(x, t, y);
                        gg += gs * gs * (s / n as f64) / hs;
                    }
                }
                gr += ks.r_unchecked(x, s).powi(2);
                if let Some(p) = ks.gamma_dirac(x, s) {
                    w_gamma = w_gamma.max((c.c3 * (c.c2 * p.location).exp() * p.weight).abs());
                }
                let (reflect, gain) = ks.eta_diracs(x, s);
                if let Some(p) = reflect {
                    w_reflect = w_reflect.max(p.weight.abs());
                }
                if let Some(p) = gain {
                    w_gain = w_gain.max(p.weight.abs());
                }
            }
        }
        let margin = 1.1;
        let cell3 = hx * hs * hx;
        let z_pulse = (c.c5 / c.c6).abs();
        let sd = d.sqrt();
        let ratio = (c.c1 / c.c4).sqrt();
        TransformBound {
            psi: 1.0 + margin * (gg * cell3 * hs).sqrt() + d * (w_gamma + c.c6 * w_reflect * ratio + c.c6 * w_gain),
            psi_outlet: d * l.sqrt() * c.k.abs(),
            z: margin * (gz * cell3).sqrt() + sd * z_pulse,
            v: margin * (gv * cell3).sqrt() + sd * (w_reflect * ratio + w_gain),
            v_l: margin * (gr * hx * hs).sqrt(),
        }
    }
}

/// `v(y)`, taking the outlet value from the dedicated ODE state.
#[inline]
/// Linear interpolation of `values` at `y` from the two nearest nodes inside
/// `[lo, hi]`, extrapolating when `y` sits in a cell cut by an end. An interval
/// holding fewer than two nodes is bridged from its node (if any) to the
/// neighbouring pieces extrapolated onto its ends, which the field matches by
/// continuity.
fn interp_within(g: &Grid, values: &[f64], y: f64, lo: f64, hi: f64) -> f64 {
    let (i, w) = g.locate(y);
    if w == 0.0 {
        return values[i];
    }
    let dx = g.dx();
    let tol = 1e-9 * dx;
    let nodes = g.nodes();
    let line = |j: usize, x: f64| values[j] + (values[j + 1] - values[j]) * (x - g.x(j)) / dx;
    let first = ((lo - tol) / dx).ceil().max(0.0) as usize;
    let last = (((hi + tol) / dx).floor().max(0.0) as usize).min(nodes - 1);
    if first < last {
        return line(i.clamp(first, last - 1), y);
    }
    let mut knots: Vec<(f64, f64)> = Vec::with_capacity(3);
    if first >= 2 {
        knots.push((lo, line(first - 2, lo)));
    }
    if first == last {
        knots.push((g.x(first), values[first]));
    }
    if last + 2 < nodes {
        knots.push((hi, line(last + 1, hi)));
    }
    match knots.windows(2).find(|k| y >= k[0].0 - tol && y <= k[1].0 + tol) {
        Some(k) if k[1].0 - k[0].0 > tol => {
            let t = (y - k[0].0) / (k[1].0 - k[0].0);
            k[0].1 * (1.0 - t) + k[1].1 * t
        }
        _ => values[i] * (1.0 - w) + values[i + 1] * w,
    }
}

fn speed_at(g: &Grid, state: &LinearState, y: f64) -> f64 {
    if y >= g.length() * (1.0 - 1e-12) {
        state.v_l
    } else {
        g.interp(&state.v, y)
    }
}

fn gamma_in_region(ks: &KernelSet, region: GammaRegion, x: f64, s: f64, y: f64) -> f64 {
    match region {
        GammaRegion::A => ks.gamma_reflected(x, y),
        GammaRegion::C | GammaRegion::D => ks.gamma_gain(x, s, y),
        GammaRegion::E => ks.gamma_outlet(),
        GammaRegion::B | GammaRegion::Zero => 0.0,
    }
}

fn eta_in_region(ks: &KernelSet, region: EtaRegion, x: f64) -> f64 {
    match region {
        EtaRegion::A => ks.eta_reflected(x),
        _ => 0.0,
    }
}

/// Two-sided discrepancies `(inlet seam, outlet seam)` of the forward
/// transformation at delay coordinate `s`.
pub fn seam_discrepancy(tr: &Transform, state: &LinearState, psi: &SlicedField, s: f64) -> (f64, f64) {
    let c = tr.coeffs();
    let x1 = c.c1 * s;
    let x2 = tr.grid().length() - c.c4 * s;
    let d1 = tr.forward_branch(Branch::Inlet, x1, s, state, psi) - tr.forward_branch(Branch::Middle, x1, s, state, psi);
    let d2 =
        tr.forward_branch(Branch::Middle, x2, s, state, psi) - tr.forward_branch(Branch::Outlet, x2, s, state, psi);
    (d1.abs(), d2.abs())
}

/// `||inverse(forward(psi)) - psi|| / ||psi||` over all slices.
pub fn round_trip_error(tr: &Transform, state: &LinearState, psi: &SlicedField) -> Result<f64> {
    let beta = tr.forward_field(state, psi)?;
    let back = tr.inverse_field(&beta, state)?;
    let g = tr.grid();
    let diff = SlicedField::from_slices(
        psi.ds(),
        psi.slices().iter().zip(back.slices()).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p - q).collect()).collect(),
    )?;
    let den = psi.norm_sq(g);
    if !(den > 0.0) {
        return Err(Error::Validation("round-trip error needs a nonzero actuator field".into()));
    }
    Ok((diff.norm_sq(g) / den).sqrt())
}

/// Linear closed-loop (or open-loop) trajectory sampled every `dt`, with the
/// actuator window at each sample.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<LinearState>,
    pub psi: Vec<SlicedField>,
}

/// Residuals of the target system along a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualReport {
    /// `max |beta_t - beta_s|`
    pub transport_max: f64,
    /// Space-delay-time RMS of `beta_t - beta_s`.
    pub transport_l2: f64,
    /// `max |beta(x, D, t)|`
    pub boundary_max: f64,
    /// `max |z_t + c1 z_x - c1 c2 z + c3 e^{c2 x} beta(x,0) + k c3/c6 e^{c2 x} v|`
    pub z_equation_max: f64,
    /// `max |v_t - c4 v_x + c6 beta(x,0) + k v|` over interior nodes.
    pub v_equation_max: f64,
    /// Largest `|beta|` seen, for scaling.
    pub beta_scale: f64,
}

/// Finite-difference residuals of the target system on a stored trajectory.
/// Time derivatives are forward differences; the delay derivative is the
/// forward difference on the slice grid, which equals `dt`.
pub fn target_residual(traj: &Trajectory, tr: &Transform) -> Result<ResidualReport> {
    if traj.states.len() < 3 || traj.psi.len() != traj.states.len() {
        return Err(Error::Validation(format!(
            "target residual needs at least 3 samples with actuator windows, got {} states and {} windows",
            traj.states.len(),
            traj.psi.len()
        )));
    }
    let betas = traj.states.iter().zip(&traj.psi).map(|(st, p)| tr.forward_field(st, p)).collect::<Result<Vec<_>>>()?;
    let g = tr.grid();
    let c = *tr.coeffs();
    let dt = traj.dt;
    let ds = betas[0].ds();
    let depth = betas[0].depth();
    let nx = g.nodes();
    let dx = g.dx();
    let mut rep = ResidualReport {
        transport_max: 0.0,
        transport_l2: 0.0,
        boundary_max: 0.0,
        z_equation_max: 0.0,
        v_equation_max: 0.0,
        beta_scale: 0.0,
    };
    let mut count = 0usize;
    for n in 0..betas.len() - 1 {
        let (b0, b1) = (&betas[n], &betas[n + 1]);
        rep.beta_scale = rep.beta_scale.max(b0.scale());
        rep.boundary_max = rep.boundary_max.max(b0.slice(depth).iter().fold(0.0_f64, |m, v| m.max(v.abs())));
        for m in 0..depth {
            for i in 0..nx {
                let r = (b1.slice(m)[i] - b0.slice(m)[i]) / dt - (b0.slice(m + 1)[i] - b0.slice(m)[i]) / ds;
                rep.transport_max = rep.transport_max.max(r.abs());
                rep.transport_l2 += r * r;
                count += 1;
            }
        }
        let (s0, s1) = (&traj.states[n], &traj.states[n + 1]);
        let beta0 = b0.slice(0);
        for i in 1..nx {
            let grow = (c.c2 * g.x(i)).exp();
            let r = (s1.z[i] - s0.z[i]) / dt + c.c1 * (s0.z[i] - s0.z[i - 1]) / dx - c.c1 * c.c2 * s0.z[i]
                + c.c3 * grow * beta0[i]
                + c.k * c.c3 / c.c6 * grow * s0.v[i];
            rep.z_equation_max = rep.z_equation_max.max(r.abs());
        }
        for i in 0..nx - 1 {
            let r = (s1.v[i] - s0.v[i]) / dt - c.c4 * (s0.v[i + 1] - s0.v[i]) / dx + c.c6 * beta0[i] + c.k * s0.v[i];
            rep.v_equation_max = rep.v_equation_max.max(r.abs());
        }
    }
    let last = betas.last().expect("at least three samples");
    rep.boundary_max = rep.boundary_max.max(last.slice(depth).iter().fold(0.0_f64, |m, v| m.max(v.abs())));
    rep.beta_scale = rep.beta_scale.max(last.scale());
    rep.transport_l2 = (rep.transport_l2 / count.max(1) as f64).sqrt();
    Ok(rep)
}

/// Smooth random state of three sine modes per field, satisfying the inlet
/// relation `z(0) = -c7 v(0)`, with an actuator window of `depth` slices.
pub fn random_state<R: Rng>(tr: &Transform, rng: &mut R, ds: f64, depth: usize) -> (LinearState, SlicedField) {
    let g = *tr.grid();
    let l = g.length();
    let c = *tr.coeffs();
    let mut modes = || -> [(f64, f64, f64); 3] {
        [(); 3].map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(0.5..4.0), rng.gen_range(0.0..6.3)))
    };
    let (mz, mv, mp) = (modes(), modes(), modes());
    let eval = |m: &[(f64, f64, f64); 3], x: f64| {
        m.iter().map(|(a, f, ph)| a * (f * x / l * std::f64::consts::TAU + ph).sin()).sum::<f64>()
    };
    let v: Vec<f64> = g.xs().iter().map(|&x| eval(&mv, x)).collect();
    let mut z: Vec<f64> = g.xs().iter().map(|&x| eval(&mz, x)).collect();
    let shift = -c.c7 * v[0] - z[0];
    for (i, zi) in z.iter_mut().enumerate() {
        *zi += shift * (-(g.x(i) / 50.0)).exp();
    }
    let v_l = v[v.len() - 1];
    let psi = SlicedField::from_fn(&g, ds, depth, |x, s| eval(&mp, x) * (1.0 + 0.1 * s));
    (LinearState { z, v, v_l }, psi)
}
