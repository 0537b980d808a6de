//! Radial reduction of the two-population system on an annulus `a < |x| < b`.
//!
//! This is an independent 1D implementation used as ground truth for the 2D
//! solver: the ball integral of a radial function is reduced to a ring kernel,
//! the radial Laplacian is discretized in conservative form and each linear
//! subproblem is a tridiagonal solve.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use crate::anderson::Anderson;
use crate::error::{Error, Result};

/// Annulus problem in radial coordinates. Population 1 lives on the inner
/// rim, population 2 on the outer rim.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialProblem {
    pub a: f64,
    pub b: f64,
    pub f_a: f64,
    pub f_b: f64,
    pub epsilon: f64,
    /// Number of radial cells across `(a, b)`.
    pub n_r: usize,
}

impl RadialProblem {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.b > self.a) {
            return Err(Error::InvalidInput(format!(
                "annulus radii must satisfy 0 < a < b (a={}, b={})",
                self.a, self.b
            )));
        }
        if self.b - self.a <= 2.0 {
            return Err(Error::GeometryTooThin(format!(
                "b - a = {} must exceed 2",
                self.b - self.a
            )));
        }
        if !(self.f_a >= 0.0 && self.f_b >= 0.0) {
            return Err(Error::InvalidInput("boundary densities must be >= 0".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidInput("epsilon must be positive".into()));
        }
        if self.n_r < 8 {
            return Err(Error::InvalidInput("n_r must be at least 8".into()));
        }
        Ok(())
    }
}

/// Arc length of the circle `|y| = s` inside the unit Euclidean ball centred
/// at distance `r` from the origin.
pub fn ring_kernel(r: f64, s: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    if (r - s).abs() >= 1.0 {
        return 0.0;
    }
    if r <= 0.0 {
        // centre at the origin: the whole ring is inside when s < 1
        return 2.0 * PI * s;
    }
    let c = ((r * r + s * s - 1.0) / (2.0 * r * s)).clamp(-1.0, 1.0);
    2.0 * s * c.acos()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialSolverOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Anderson mixing depth; 0 keeps plain damped iteration.
    pub anderson_depth: usize,
}

impl Default for RadialSolverOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-8,
            max_iter: 20_000,
            anderson_depth: 0,
        }
    }
}

/// Radial profiles on the node grid `r_k = r_min + k*dr`, covering the inner
/// strip, the annulus and the outer strip.
#[derive(Debug, Clone)]
pub struct RadialProfiles {
    pub problem: RadialProblem,
    pub r: Vec<f64>,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub residual_history: Vec<f64>,
}

impl RadialProfiles {
    pub fn dr(&self) -> f64 {
        self.r[1] - self.r[0]
    }

    /// Largest radius inside `(a, b)` where `u1` exceeds the threshold.
    pub fn u1_support_edge(&self, threshold: f64) -> Option<f64> {
        let (a, b) = (self.problem.a, self.problem.b);
        self.r
            .iter()
            .zip(&self.u1)
            .filter(|(r, u)| **r > a && **r < b && **u > threshold)
            .map(|(r, _)| *r)
            .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |m| m.max(r))))
    }

    /// Smallest radius inside `(a, b)` where `u2` exceeds the threshold.
    pub fn u2_support_edge(&self, threshold: f64) -> Option<f64> {
        let (a, b) = (self.problem.a, self.problem.b);
        self.r
            .iter()
            .zip(&self.u2)
            .filter(|(r, u)| **r > a && **r < b && **u > threshold)
            .map(|(r, _)| *r)
            .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |m| m.min(r))))
    }

    /// Threshold-free gap between the supports, located by linear
    /// interpolation of the crossing of each profile with `threshold`.
    pub fn gap(&self, threshold: f64) -> Option<f64> {
        let r1 = crossing(&self.r, &self.u1, threshold, false)?;
        let r2 = crossing(&self.r, &self.u2, threshold, true)?;
        Some(r2 - r1)
    }

    /// Linear interpolation of a profile at radius `r`.
    pub fn sample(&self, which: usize, r: f64) -> f64 {
        let u = if which == 1 { &self.u1 } else { &self.u2 };
        let dr = self.dr();
        let x = ((r - self.r[0]) / dr).clamp(0.0, (self.r.len() - 1) as f64);
        let k = (x.floor() as usize).min(self.r.len() - 2);
        let t = x - k as f64;
        u[k] * (1.0 - t) + u[k + 1] * t
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "r,u1,u2")?;
        for k in 0..self.r.len() {
            writeln!(w, "{:.12e},{:.12e},{:.12e}", self.r[k], self.u1[k], self.u2[k])?;
        }
        Ok(())
    }
}

/// Radius where a profile crosses `threshold`; `rising` selects the first
/// upward crossing (population 2), otherwise the last downward one.
fn crossing(r: &[f64], u: &[f64], threshold: f64, rising: bool) -> Option<f64> {
    let n = r.len();
    if rising {
        (0..n - 1)
            .find(|&k| u[k] <= threshold && u[k + 1] > threshold)
            .map(|k| lerp_cross(r[k], r[k + 1], u[k], u[k + 1], threshold))
    } else {
        (0..n - 1)
            .rev()
            .find(|&k| u[k] > threshold && u[k + 1] <= threshold)
            .map(|k| lerp_cross(r[k], r[k + 1], u[k], u[k + 1], threshold))
    }
}

fn lerp_cross(r0: f64, r1: f64, u0: f64, u1: f64, t: f64) -> f64 {
    if u1 == u0 {
        return 0.5 * (r0 + r1);
    }
    r0 + (t - u0) / (u1 - u0) * (r1 - r0)
}

/// Banded quadrature of the ring kernel on the node grid.
struct RingQuadrature {
    half: usize,
    rows: Vec<Vec<f64>>,
}

impl RingQuadrature {
    fn new(r: &[f64], dr: f64) -> Self {
        let half = (1.0 / dr).ceil() as usize + 1;
        let n = r.len();
        let rows = (0..n)
            .map(|k| {
                let lo = k.saturating_sub(half);
                let hi = (k + half).min(n - 1);
                (lo..=hi).map(|m| ring_kernel(r[k], r[m]) * dr).collect()
            })
            .collect();
        Self { half, rows }
    }

    fn apply(&self, w: &[f64], out: &mut [f64]) {
        let n = w.len();
        for (k, o) in out.iter_mut().enumerate() {
            let lo = k.saturating_sub(self.half);
            let hi = (k + self.half).min(n - 1);
            *o = self.rows[k]
                .iter()
                .zip(&w[lo..=hi])
                .map(|(kw, v)| kw * v)
                .sum();
        }
    }
}

/// Node grid and index range of the unknowns for a radial problem.
fn radial_grid(rp: &RadialProblem) -> (Vec<f64>, usize, usize) {
    let dr = (rp.b - rp.a) / rp.n_r as f64;
    let below = ((rp.a - (rp.a - 1.0).max(0.0)) / dr).round() as usize;
    let above = (1.0 / dr).round() as usize;
    let n = below + rp.n_r + above + 1;
    let r0 = rp.a - below as f64 * dr;
    let r = (0..n).map(|k| r0 + k as f64 * dr).collect();
    // unknowns are the nodes strictly between a and b
    (r, below + 1, below + rp.n_r - 1)
}

/// Solves `(1/r)(r v')' = c v` on the unknown nodes with Dirichlet values
/// already stored in `v` at the frozen nodes.
fn solve_tridiagonal_screened(r: &[f64], dr: f64, c: &[f64], lo: usize, hi: usize, v: &mut [f64]) {
    let m = hi - lo + 1;
    let mut sub = vec![0.0; m];
    let mut diag = vec![0.0; m];
    let mut sup = vec![0.0; m];
    let mut rhs = vec![0.0; m];
    for (idx, k) in (lo..=hi).enumerate() {
        let rm = r[k] - 0.5 * dr;
        let rp = r[k] + 0.5 * dr;
        // multiply through by r_k dr^2
        sub[idx] = -rm;
        sup[idx] = -rp;
        diag[idx] = rm + rp + c[k] * r[k] * dr * dr;
        if k == lo {
            rhs[idx] += rm * v[k - 1];
            sub[idx] = 0.0;
        }
        if k == hi {
            rhs[idx] += rp * v[k + 1];
            sup[idx] = 0.0;
        }
    }
    // Thomas algorithm; the matrix is diagonally dominant so no pivoting.
    for i in 1..m {
        let w = sub[i] / diag[i - 1];
        diag[i] -= w * sup[i - 1];
        rhs[i] -= w * rhs[i - 1];
    }
    let mut x = vec![0.0; m];
    x[m - 1] = rhs[m - 1] / diag[m - 1];
    for i in (0..m - 1).rev() {
        x[i] = (rhs[i] - sup[i] * x[i + 1]) / diag[i];
    }
    v[lo..=hi].copy_from_slice(&x);
}

/// Harmonic profile of the radial Laplacian with the given rim values.
fn radial_harmonic(r: &[f64], dr: f64, lo: usize, hi: usize, inner: f64, outer: f64) -> Vec<f64> {
    let mut v = vec![0.0; r.len()];
    for (k, val) in v.iter_mut().enumerate() {
        if k < lo {
            *val = inner;
        } else if k > hi {
            *val = outer;
        }
    }
    let c = vec![0.0; r.len()];
    solve_tridiagonal_screened(r, dr, &c, lo, hi, &mut v);
    v
}

/// Fixed-point solution of the radial epsilon-system, started from the
/// harmonic majorants.
pub fn solve_radial_epsilon(rp: &RadialProblem, opts: &RadialSolverOptions) -> Result<RadialProfiles> {
    solve_radial_epsilon_from(rp, opts, None)
}

/// As [`solve_radial_epsilon`], warm-started from a previous solution on the
/// same radial grid.
pub fn solve_radial_epsilon_from(
    rp: &RadialProblem,
    opts: &RadialSolverOptions,
    warm: Option<&RadialProfiles>,
) -> Result<RadialProfiles> {
    rp.validate()?;
    let (r, lo, hi) = radial_grid(rp);
    let n = r.len();
    let dr = r[1] - r[0];
    let quad = RingQuadrature::new(&r, dr);

    let phi1 = radial_harmonic(&r, dr, lo, hi, rp.f_a, 0.0);
    let phi2 = radial_harmonic(&r, dr, lo, hi, 0.0, rp.f_b);
    let (mut u1, mut u2) = match warm {
        Some(w) if w.r.len() == n => {
            let mut u1 = w.u1.clone();
            let mut u2 = w.u2.clone();
            // refresh the frozen data in case the rim values changed
            for k in (0..lo).chain(hi + 1..n) {
                u1[k] = phi1[k];
                u2[k] = phi2[k];
            }
            (u1, u2)
        }
        _ => (phi1.clone(), phi2.clone()),
    };

    let scale = rp.f_a.max(rp.f_b).max(f64::MIN_POSITIVE);
    let inv_eps2 = 1.0 / (rp.epsilon * rp.epsilon);
    let mut h1 = vec![0.0; n];
    let mut h2 = vec![0.0; n];
    let mut c = vec![0.0; n];
    let mut history = Vec::new();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let m = hi - lo + 1;
    let mut mixer = (opts.anderson_depth > 0).then(|| Anderson::new(opts.anderson_depth, opts.damping));
    while iterations < opts.max_iter {
        iterations += 1;
        quad.apply(&u2, &mut h2);
        quad.apply(&u1, &mut h1);

        let mut v1 = u1.clone();
        for k in 0..n {
            c[k] = h2[k] * inv_eps2;
        }
        solve_tridiagonal_screened(&r, dr, &c, lo, hi, &mut v1);
        let mut v2 = u2.clone();
        for k in 0..n {
            c[k] = h1[k] * inv_eps2;
        }
        solve_tridiagonal_screened(&r, dr, &c, lo, hi, &mut v2);

        let next: Vec<f64> = match mixer.as_mut() {
            Some(acc) => {
                let x: Vec<f64> = u1[lo..=hi].iter().chain(&u2[lo..=hi]).copied().collect();
                let tx: Vec<f64> = v1[lo..=hi].iter().chain(&v2[lo..=hi]).copied().collect();
                acc.next(&x, &tx)
            }
            None => (lo..=hi)
                .map(|k| (1.0 - opts.damping) * u1[k] + opts.damping * v1[k])
                .chain((lo..=hi).map(|k| (1.0 - opts.damping) * u2[k] + opts.damping * v2[k]))
                .collect(),
        };
        residual = 0.0;
        for (idx, k) in (lo..=hi).enumerate() {
            let n1 = next[idx].clamp(0.0, phi1[k]);
            let n2 = next[m + idx].clamp(0.0, phi2[k]);
            residual = f64::max(residual, (n1 - u1[k]).abs().max((n2 - u2[k]).abs()));
            u1[k] = n1;
            u2[k] = n2;
        }
        residual /= scale;
        history.push(residual);
        if residual <= opts.tol {
            break;
        }
    }
    let out = RadialProfiles {
        problem: *rp,
        r,
        u1,
        u2,
        iterations,
        residual,
        residual_history: history,
    };
    if residual > opts.tol {
        return Err(Error::NotConverged {
            iterations,
            residual,
        });
    }
    Ok(out)
}

/// Limit configuration of the radial problem: population 1 harmonic on
/// `(a, R)`, population 2 harmonic on `(R + 1, b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialLimit {
    pub a: f64,
    pub b: f64,
    pub f_a: f64,
    pub f_b: f64,
    /// Free-boundary radius of population 1.
    pub radius: f64,
}

impl RadialLimit {
    pub fn u1(&self, r: f64) -> f64 {
        if r <= self.a {
            self.f_a
        } else if r >= self.radius {
            0.0
        } else {
            self.f_a * (self.radius / r).ln() / (self.radius / self.a).ln()
        }
    }

    pub fn u2(&self, r: f64) -> f64 {
        let r2 = self.radius + 1.0;
        if r >= self.b {
            self.f_b
        } else if r <= r2 {
            0.0
        } else {
            self.f_b * (r / r2).ln() / (self.b / r2).ln()
        }
    }

    /// `|u1'(R)|`, the inward normal slope at the inner free boundary.
    pub fn slope1(&self) -> f64 {
        self.f_a / (self.radius * (self.radius / self.a).ln())
    }

    /// `|u2'(R + 1)|`.
    pub fn slope2(&self) -> f64 {
        let r2 = self.radius + 1.0;
        self.f_b / (r2 * (self.b / r2).ln())
    }

    /// Difference of the total fluxes through the two free boundaries.
    pub fn flux_mismatch(&self) -> f64 {
        2.0 * PI * self.radius * self.slope1() - 2.0 * PI * (self.radius + 1.0) * self.slope2()
    }
}

/// Flux balance `f_a / log(R/a) - f_b / log(b/(R+1))`, increasing in `R`.
pub fn flux_balance(a: f64, b: f64, f_a: f64, f_b: f64, radius: f64) -> f64 {
    f_a / (radius / a).ln() - f_b / (b / (radius + 1.0)).ln()
}

/// Free-boundary radius of the limit problem, by bisection on the flux
/// balance over `(a, b - 1)`.
pub fn solve_radial_limit(a: f64, b: f64, f_a: f64, f_b: f64) -> Result<RadialLimit> {
    if !(a > 0.0 && b - a > 2.0) {
        return Err(Error::GeometryTooThin(format!("need b - a > 2 (a={a}, b={b})")));
    }
    if !(f_a > 0.0 && f_b > 0.0) {
        return Err(Error::NoRoot("both rim densities must be positive".into()));
    }
    // balance(R) -> +inf as R -> a+, -inf as R -> (b-1)-; it is decreasing
    let g = |r: f64| flux_balance(a, b, f_a, f_b, r);
    let mut lo = a;
    let mut hi = b - 1.0;
    let eps = 1e-15 * b;
    let (mut glo, mut ghi) = (g(lo + eps), g(hi - eps));
    if !(glo > 0.0 && ghi < 0.0) {
        return Err(Error::NoRoot(format!(
            "balance does not change sign on ({a}, {}): {glo:.3e}, {ghi:.3e}",
            b - 1.0
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let gm = g(mid);
        if gm == 0.0 {
            lo = mid;
            hi = mid;
            break;
        }
        if gm > 0.0 {
            lo = mid;
            glo = gm;
        } else {
            hi = mid;
            ghi = gm;
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
    }
    let _ = (glo, ghi);
    Ok(RadialLimit {
        a,
        b,
        f_a,
        f_b,
        radius: 0.5 * (lo + hi),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn problem(epsilon: f64, n_r: usize) -> RadialProblem {
        RadialProblem { a: 1.0, b: 6.0, f_a: 1.0, f_b: 1.0, epsilon, n_r }
    }

    #[test]
    fn ring_kernel_geometry() {
        // whole circle inside the ball
        assert_relative_eq!(ring_kernel(0.0, 0.5), PI, epsilon = 1e-15);
        assert_relative_eq!(ring_kernel(0.2, 0.5), 2.0 * PI * 0.5, epsilon = 1e-15);
        // tangent from outside
        assert_eq!(ring_kernel(3.0, 2.0), 0.0);
        assert_eq!(ring_kernel(3.0, 4.5), 0.0);
        // half-angle pi/3 when r = s = 1
        assert_relative_eq!(ring_kernel(1.0, 1.0), 2.0 * PI / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn ring_kernel_integrates_to_ball_area() {
        for r in [0.3, 1.0, 2.5] {
            let n = 200_000;
            let (lo, hi) = ((r - 1.0f64).max(0.0), r + 1.0);
            let ds = (hi - lo) / n as f64;
            let total: f64 = (0..n).map(|k| ring_kernel(r, lo + (k as f64 + 0.5) * ds) * ds).sum();
            assert_relative_eq!(total, PI, max_relative = 1e-6);
        }
    }

    #[test]
    fn limit_roots() {
        // f_a = f_b: R (R + 1) = b
        assert_relative_eq!(solve_radial_limit(1.0, 6.0, 1.0, 1.0).unwrap().radius, 2.0, epsilon = 1e-12);
        assert_relative_eq!(solve_radial_limit(1.0, 12.0, 1.0, 1.0).unwrap().radius, 3.0, epsilon = 1e-12);
        // f_a = 2: R (R + 1)^2 = 36
        let lim = solve_radial_limit(1.0, 6.0, 2.0, 1.0).unwrap();
        assert_relative_eq!(lim.radius, 2.671_149_91, epsilon = 1e-8);
        assert!(lim.flux_mismatch().abs() <= 1e-10);
        assert!(matches!(solve_radial_limit(1.0, 6.0, 1.0, 0.0), Err(Error::NoRoot(_))));
        assert!(matches!(solve_radial_limit(1.0, 2.5, 1.0, 1.0), Err(Error::GeometryTooThin(_))));
    }

    #[test]
    fn limit_profiles_are_continuous() {
        let lim = solve_radial_limit(1.0, 6.0, 1.0, 1.0).unwrap();
        assert_relative_eq!(lim.u1(1.0), 1.0);
        assert_eq!(lim.u1(2.0), 0.0);
        assert_eq!(lim.u2(3.0), 0.0);
        assert_relative_eq!(lim.u2(6.0), 1.0);
        let d = 1e-7;
        assert_relative_eq!((lim.u1(2.0 - d) - lim.u1(2.0)) / d, lim.slope1(), max_relative = 1e-5);
    }

    #[test]
    fn zero_outer_data_gives_majorant() {
        let rp = RadialProblem { f_b: 0.0, ..problem(0.1, 200) };
        let p = solve_radial_epsilon(&rp, &RadialSolverOptions::default()).unwrap();
        assert!(p.u2.iter().all(|&v| v == 0.0));
        for (r, u) in p.r.iter().zip(&p.u1) {
            if *r > 1.0 && *r < 6.0 {
                let exact = (6.0 / r).ln() / 6f64.ln();
                assert!((u - exact).abs() <= 1e-4, "r {r}: {u} vs {exact}");
            }
        }
        assert!(p.iterations <= 2);
    }

    #[test]
    fn symmetric_interaction_balances_fluxes() {
        let p = solve_radial_epsilon(&problem(0.1, 500), &RadialSolverOptions::default()).unwrap();
        let (r, lo, hi) = radial_grid(&p.problem);
        let dr = p.dr();
        let quad = RingQuadrature::new(&r, dr);
        let (mut h1, mut h2) = (vec![0.0; r.len()], vec![0.0; r.len()]);
        quad.apply(&p.u1, &mut h1);
        quad.apply(&p.u2, &mut h2);
        let inv = 1.0 / (p.problem.epsilon * p.problem.epsilon);
        let mass = |u: &[f64], h: &[f64]| -> f64 { (lo..=hi).map(|k| r[k] * dr * inv * h[k] * u[k]).sum() };
        let m1 = mass(&p.u1, &h2);
        let m2 = mass(&p.u2, &h1);
        // telescoped boundary flux of the conservative Laplacian
        let flux = |u: &[f64]| -> f64 {
            ((r[hi] + 0.5 * dr) * (u[hi + 1] - u[hi]) - (r[lo] - 0.5 * dr) * (u[lo] - u[lo - 1])) / dr
        };
        assert_relative_eq!(flux(&p.u1), m1, max_relative = 1e-4);
        assert_relative_eq!(flux(&p.u2), m2, max_relative = 1e-4);
        assert_relative_eq!(m1, m2, max_relative = 1e-3);
    }

    #[test]
    fn gap_widens_as_epsilon_shrinks() {
        let opts = RadialSolverOptions::default();
        let mut prev: Option<RadialProfiles> = None;
        let mut gaps = Vec::new();
        for eps in [0.2, 0.1, 0.05] {
            let p = solve_radial_epsilon_from(&problem(eps, 500), &opts, prev.as_ref()).unwrap();
            gaps.push(p.gap(1e-3).unwrap());
            prev = Some(p);
        }
        assert!(gaps.windows(2).all(|w| w[1] > w[0]), "{gaps:?}");
        assert!(gaps.iter().all(|&g| g < 1.0));
    }

    #[test]
    fn anderson_matches_damped() {
        let rp = problem(0.1, 200);
        let plain = solve_radial_epsilon(&rp, &RadialSolverOptions::default()).unwrap();
        let acc = solve_radial_epsilon(&rp, &RadialSolverOptions { damping: 1.0, anderson_depth: 3, ..Default::default() }).unwrap();
        assert!(acc.iterations < plain.iterations);
        let diff = plain.u1.iter().zip(&acc.u1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-6, "{diff}");
    }

    #[test]
    fn rejects_thin_annulus() {
        let rp = RadialProblem { b: 2.5, ..problem(0.1, 100) };
        assert!(matches!(solve_radial_epsilon(&rp, &RadialSolverOptions::default()), Err(Error::GeometryTooThin(_))));
    }
}
