//! The coupled system `Delta u_i = eps^-2 u_i sum_{j != i} H(u_j)` solved by
//! the fixed-point map `T^eps`, its obstacle-constrained variant and the
//! continuation in `eps`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{extract_support, support_separation};
use crate::anderson::Anderson;
use crate::elliptic::{screened_residual, LinearSolverConfig, Preconditioner, ScreenedStructure};
use crate::error::{Error, Result};
use crate::grid::{harmonic_majorant, BoundaryData, Field, GridDomain, Mask};
use crate::nonlocal::{apply_h, BallStencil, HPath};
use crate::norm::{rho_distance_field, DistanceMode, Norm};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Acceleration {
    #[default]
    None,
    /// Anderson mixing over the last `depth` iterates, with `damping` as the
    /// mixing weight; projected back into the sandwich after each step.
    Anderson { depth: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub damping: f64,
    pub fp_tol: f64,
    pub max_outer: usize,
    pub lin: LinearSolverConfig,
    pub eps_schedule: Vec<f64>,
    pub acceleration: Acceleration,
    pub h_path: HPath,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            damping: 0.5,
            fp_tol: 1e-8,
            max_outer: 2000,
            lin: LinearSolverConfig::default(),
            eps_schedule: vec![0.2, 0.1, 0.05, 0.025],
            acceleration: Acceleration::None,
            h_path: HPath::Auto,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidInput(format!("damping {} outside (0, 1]", self.damping)));
        }
        if !(self.fp_tol > 0.0) {
            return Err(Error::InvalidInput("fp_tol must be positive".into()));
        }
        if !(self.lin.tol > 0.0) {
            return Err(Error::InvalidInput("lin tol must be positive".into()));
        }
        if self.eps_schedule.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::InvalidInput("epsilon values must be positive".into()));
        }
        if self.eps_schedule.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidInput("epsilon schedule must be strictly decreasing".into()));
        }
        if let Acceleration::Anderson { depth } = self.acceleration {
            if depth == 0 {
                return Err(Error::InvalidInput("Anderson depth must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationState {
    pub epsilon: f64,
    pub u: Vec<Field>,
    pub phi: Vec<Field>,
    /// Obstacles, when solved with them.
    pub psi: Option<Vec<Field>>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<f64>,
}

impl PopulationState {
    pub fn k(&self) -> usize {
        self.u.len()
    }

    pub fn require_converged(&self) -> Result<()> {
        if self.converged {
            Ok(())
        } else {
            Err(Error::NotConverged { iterations: self.iterations, residual: self.residual })
        }
    }

    /// Largest violation of `0 <= u_i <= phi_i`.
    pub fn sandwich_violation(&self) -> f64 {
        let mut worst = 0.0f64;
        for (u, phi) in self.u.iter().zip(&self.phi) {
            for (&a, &b) in u.iter().zip(phi.iter()) {
                worst = worst.max(-a).max(a - b);
            }
        }
        worst
    }
}

pub fn majorants(gd: &GridDomain, bd: &BoundaryData, lin: &LinearSolverConfig) -> Result<Vec<Field>> {
    bd.f.iter().map(|f| harmonic_majorant(f, gd, lin)).collect()
}

/// State with `u_i = phi_i`, the upper end of the sandwich.
pub fn initial_state(gd: &GridDomain, bd: &BoundaryData, cfg: &SolverConfig, epsilon: f64) -> Result<PopulationState> {
    let phi = majorants(gd, bd, &cfg.lin)?;
    Ok(PopulationState {
        epsilon,
        u: phi.clone(),
        phi,
        psi: None,
        residual: f64::INFINITY,
        iterations: 0,
        converged: false,
        history: Vec::new(),
    })
}

/// Screening coefficients `eps^-2 sum_{j != i} H(u_j)` on `Omega`.
fn coefficients(gd: &GridDomain, st: &BallStencil, path: HPath, u: &[Field], epsilon: f64) -> Vec<Field> {
    let k = u.len();
    if k == 1 {
        return vec![Field::zeros(gd.shape())];
    }
    let hs: Vec<Field> = u
        .par_iter()
        .map(|w| apply_h(w, st, gd, &gd.omega, path))
        .collect();
    let scale = 1.0 / (epsilon * epsilon);
    (0..k)
        .map(|i| {
            let mut c = Field::zeros(gd.shape());
            for (j, hj) in hs.iter().enumerate() {
                if j != i {
                    c.zip_mut_with(hj, |a, b| *a += b);
                }
            }
            c.mapv_inplace(|v| v * scale);
            c
        })
        .collect()
}

/// Holds the operator structure across sweeps.
struct Sweeper<'a> {
    gd: &'a GridDomain,
    bd: &'a BoundaryData,
    st: &'a BallStencil,
    cfg: &'a SolverConfig,
    structure: ScreenedStructure,
    fmax: f64,
}

impl<'a> Sweeper<'a> {
    fn new(gd: &'a GridDomain, bd: &'a BoundaryData, st: &'a BallStencil, cfg: &'a SolverConfig) -> Result<Self> {
        cfg.validate()?;
        if bd.k() == 0 {
            return Err(Error::InvalidInput("no populations".into()));
        }
        if (st.h - gd.h).abs() > 1e-12 * gd.h {
            return Err(Error::InvalidInput("stencil and grid spacing differ".into()));
        }
        let structure = ScreenedStructure::new(gd, &gd.omega, cfg.lin.preconditioner == Preconditioner::Multigrid);
        let fmax = bd.max_value();
        Ok(Sweeper { gd, bd, st, cfg, structure, fmax: if fmax > 0.0 { fmax } else { 1.0 } })
    }

    fn coefficients(&self, u: &[Field], epsilon: f64) -> Vec<Field> {
        coefficients(self.gd, self.st, self.cfg.h_path, u, epsilon)
    }

    /// The undamped image `T^eps(u)`, projected into the sandwich.
    fn targets(&self, state: &PopulationState) -> Result<Vec<Field>> {
        let coeff = self.coefficients(&state.u, state.epsilon);
        (0..state.k())
            .into_par_iter()
            .map(|i| {
                let (mut v, _) = match &state.psi {
                    Some(psi) => {
                        let (v, rounds) = self.solve_obstacle(&coeff[i], &self.bd.f[i], &psi[i], &state.u[i])?;
                        (v, rounds)
                    }
                    None => {
                        let (v, stats) = self.structure.solve(&coeff[i], &self.bd.f[i], &self.cfg.lin, Some(&state.u[i]))?;
                        (v, stats.iterations)
                    }
                };
                let phi = &state.phi[i];
                for ((vv, &p), &o) in v.iter_mut().zip(phi.iter()).zip(self.gd.omega.iter()) {
                    if o {
                        *vv = vv.clamp(0.0, p.max(0.0));
                    }
                }
                Ok(v)
            })
            .collect()
    }

    /// Linear obstacle problem `min(-Delta v + c v, v - psi) = 0` by a
    /// primal-dual active set iteration over linear solves.
    fn solve_obstacle(&self, c: &Field, f: &Field, psi: &Field, warm: &Field) -> Result<(Field, usize)> {
        let gd = self.gd;
        let (mut v, _) = self.structure.solve(c, f, &self.cfg.lin, Some(warm))?;
        let mut active = Mask::from_elem(gd.shape(), false);
        let mut changed = false;
        for ((a, &o), (&x, &p)) in active.iter_mut().zip(gd.omega.iter()).zip(v.iter().zip(psi.iter())) {
            if o && x.max(0.0) < p {
                *a = true;
                changed = true;
            }
        }
        let mut rounds = 0;
        while changed && rounds < 100 {
            rounds += 1;
            let unknown = Mask::from_shape_fn(gd.shape(), |ij| gd.omega[ij] && !active[ij]);
            let bdry = Field::from_shape_fn(gd.shape(), |ij| if active[ij] { psi[ij] } else { f[ij] });
            let st = ScreenedStructure::new(gd, &unknown, self.cfg.lin.preconditioner == Preconditioner::Multigrid);
            v = st.solve(c, &bdry, &self.cfg.lin, Some(&v))?.0;
            // multiplier h^2(-Delta v + c v) on the contact set must be >= 0
            let mult = screened_residual(gd, &gd.omega, c, &v);
            changed = false;
            for (ij, a) in active.indexed_iter_mut() {
                if !gd.omega[ij] {
                    continue;
                }
                if *a && -mult[ij] < -1e-12 {
                    *a = false;
                    changed = true;
                } else if !*a && v[ij] < psi[ij] {
                    *a = true;
                    changed = true;
                }
            }
        }
        Ok((v, rounds))
    }

    fn lower<'s>(&self, state: &'s PopulationState, i: usize) -> Option<&'s Field> {
        state.psi.as_ref().map(|p| &p[i])
    }
}

/// One damped sweep of `T^eps` (populations updated Jacobi-style from the
/// previous iterate).
pub fn apply_t_epsilon(
    state: &PopulationState,
    gd: &GridDomain,
    bd: &BoundaryData,
    st: &BallStencil,
    cfg: &SolverConfig,
) -> Result<PopulationState> {
    let sw = Sweeper::new(gd, bd, st, cfg)?;
    sweep_damped(&sw, state)
}

fn sweep_damped(sw: &Sweeper, state: &PopulationState) -> Result<PopulationState> {
    let v = sw.targets(state)?;
    let theta = sw.cfg.damping;
    let mut next = state.clone();
    let mut change = 0.0f64;
    for (i, vi) in v.into_iter().enumerate() {
        let lower = sw.lower(state, i);
        let ui = &mut next.u[i];
        for (ij, (a, b)) in ui.iter_mut().zip(vi.iter()).enumerate() {
            let new = if theta == 1.0 { *b } else { (1.0 - theta) * *a + theta * *b };
            let new = match lower {
                Some(l) => new.max(l.as_slice().expect("standard layout")[ij]),
                None => new,
            };
            change = change.max((new - *a).abs());
            *a = new;
        }
    }
    next.residual = change / sw.fmax;
    next.iterations += 1;
    next.history.push(next.residual);
    Ok(next)
}

fn omega_cells(gd: &GridDomain) -> Vec<usize> {
    gd.omega.iter().enumerate().filter(|(_, &o)| o).map(|(k, _)| k).collect()
}

fn iterate(sw: &Sweeper, mut state: PopulationState) -> Result<PopulationState> {
    state.converged = false;
    let cfg = sw.cfg;
    match cfg.acceleration {
        Acceleration::None => {
            for _ in 0..cfg.max_outer {
                state = sweep_damped(sw, &state)?;
                log::debug!("eps={} it={} residual={:.3e}", state.epsilon, state.iterations, state.residual);
                if state.residual <= cfg.fp_tol {
                    state.converged = true;
                    break;
                }
            }
        }
        Acceleration::Anderson { depth } => {
            let cells = omega_cells(sw.gd);
            let n = cells.len();
            let flatten = |fields: &[Field]| -> Vec<f64> {
                let mut x = Vec::with_capacity(n * fields.len());
                for f in fields {
                    let s = f.as_slice().expect("standard layout");
                    x.extend(cells.iter().map(|&c| s[c]));
                }
                x
            };
            let mut acc = Anderson::new(depth, cfg.damping);
            for _ in 0..cfg.max_outer {
                let v = sw.targets(&state)?;
                let x = flatten(&state.u);
                let tx = flatten(&v);
                let next = acc.next(&x, &tx);
                let mut change = 0.0f64;
                for i in 0..state.k() {
                    let lower = sw.lower(&state, i).map(|l| l.as_slice().expect("standard layout").to_vec());
                    let phi = state.phi[i].as_slice().expect("standard layout").to_vec();
                    let u = state.u[i].as_slice_mut().expect("standard layout");
                    for (k, &c) in cells.iter().enumerate() {
                        let lo = lower.as_ref().map_or(0.0, |l| l[c]);
                        let new = next[i * n + k].clamp(lo.min(phi[c]), phi[c].max(0.0));
                        change = change.max((new - u[c]).abs());
                        u[c] = new;
                    }
                }
                state.residual = change / sw.fmax;
                state.iterations += 1;
                state.history.push(state.residual);
                log::debug!("eps={} it={} residual={:.3e}", state.epsilon, state.iterations, state.residual);
                if state.residual <= cfg.fp_tol {
                    state.converged = true;
                    break;
                }
            }
        }
    }
    if !state.converged {
        log::warn!(
            "eps={}: fixed point not converged after {} iterations (residual {:.3e})",
            state.epsilon,
            state.iterations,
            state.residual
        );
    }
    Ok(state)
}

/// Solves the coupled system from the majorants. Non-convergence is flagged
/// on the returned state, not raised.
pub fn solve_system(
    gd: &GridDomain,
    bd: &BoundaryData,
    st: &BallStencil,
    cfg: &SolverConfig,
    epsilon: f64,
) -> Result<PopulationState> {
    let state = initial_state(gd, bd, cfg, epsilon)?;
    solve_system_from(gd, bd, st, cfg, state)
}

/// Continues the iteration from a given state (warm start).
pub fn solve_system_from(
    gd: &GridDomain,
    bd: &BoundaryData,
    st: &BallStencil,
    cfg: &SolverConfig,
    mut state: PopulationState,
) -> Result<PopulationState> {
    let sw = Sweeper::new(gd, bd, st, cfg)?;
    if !(state.epsilon > 0.0) {
        return Err(Error::InvalidInput("epsilon must be positive".into()));
    }
    if gd.h > state.epsilon / 8.0 + 1e-15 {
        log::warn!("h = {} exceeds eps/8 = {}: interface layer under-resolved", gd.h, state.epsilon / 8.0);
    }
    state.iterations = 0;
    state.history.clear();
    iterate(&sw, state)
}

/// Solves with `u_i >= psi_i` enforced in every linear subproblem.
pub fn solve_obstacle_system(
    gd: &GridDomain,
    bd: &BoundaryData,
    st: &BallStencil,
    cfg: &SolverConfig,
    epsilon: f64,
    psi: &[Field],
) -> Result<PopulationState> {
    if psi.len() != bd.k() {
        return Err(Error::InvalidInput("one obstacle per population required".into()));
    }
    let mut state = initial_state(gd, bd, cfg, epsilon)?;
    for (i, p) in psi.iter().enumerate() {
        if p.iter().zip(state.phi[i].iter()).any(|(&a, &b)| a > b + 1e-9) {
            return Err(Error::InvalidInput(format!("obstacle {i} exceeds the majorant")));
        }
    }
    state.psi = Some(psi.to_vec());
    solve_system_from(gd, bd, st, cfg, state)
}

/// `max |Delta u_i - eps^-2 u_i sum H(u_j)|` over `Omega`, per population,
/// in Laplacian units.
pub fn pde_residual(state: &PopulationState, gd: &GridDomain, st: &BallStencil, cfg: &SolverConfig) -> Vec<f64> {
    let coeff = coefficients(gd, st, cfg.h_path, &state.u, state.epsilon);
    let h2 = gd.h * gd.h;
    (0..state.k())
        .map(|i| {
            let r = screened_residual(gd, &gd.omega, &coeff[i], &state.u[i]);
            r.iter().fold(0.0f64, |m, v| m.max(v.abs())) / h2
        })
        .collect()
}

/// Lattice, data and stencil for one continuation stage.
#[derive(Debug, Clone)]
pub struct StageSetup {
    pub gd: GridDomain,
    pub bd: BoundaryData,
    pub stencil: BallStencil,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub delta_abs: f64,
    pub delta_rel: f64,
    /// Interior depths `r` for the gradient proxy `r max |grad u|`.
    pub probe_depths: [f64; 3],
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { delta_abs: 1e-12, delta_rel: 1e-3, probe_depths: [0.25, 0.5, 1.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub epsilon: f64,
    pub h: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub under_resolved: bool,
    /// `d_rho` between the first two thresholded supports.
    pub separation: Option<f64>,
    /// `int u_1 u_2` over the full domain.
    pub overlap_mass: f64,
    /// `int u_i` per population over the full domain.
    pub mass: Vec<f64>,
    /// `(r, max over i and {d(x, boundary) >= r} of r |grad u_i|)`.
    pub gradient_profile: Vec<(f64, f64)>,
}

/// Central-difference `|grad u|` on cells whose four neighbours are on the
/// extended mask.
pub fn gradient_magnitude(u: &Field, gd: &GridDomain) -> Field {
    Field::from_shape_fn(gd.shape(), |(iy, ix)| {
        if !gd.omega[[iy, ix]] {
            return 0.0;
        }
        let read = |dx: i64, dy: i64| gd.resolve(ix as i64 + dx, iy as i64 + dy).filter(|&(a, b)| gd.extended[[b, a]]).map(|(a, b)| u[[b, a]]);
        match (read(1, 0), read(-1, 0), read(0, 1), read(0, -1)) {
            (Some(e), Some(w), Some(n), Some(s)) => ((e - w).hypot(n - s)) / (2.0 * gd.h),
            _ => 0.0,
        }
    })
}

pub fn stage_metrics(setup: &StageSetup, state: &PopulationState, norm: &Norm, mc: &MetricsConfig) -> Result<StageMetrics> {
    let gd = &setup.gd;
    let area = gd.h * gd.h * gd.multiplicity();
    let masks: Vec<Mask> = state.u.iter().map(|u| extract_support(u, gd, mc.delta_abs, mc.delta_rel)).collect();
    let separation = if masks.len() >= 2 && masks.iter().all(|m| m.iter().any(|&b| b)) {
        Some(support_separation(&masks[..2], norm, gd)?[0][1])
    } else {
        None
    };
    let overlap_mass = if state.k() >= 2 {
        state.u[0].iter().zip(state.u[1].iter()).zip(gd.omega.iter()).filter(|(_, &o)| o).map(|((a, b), _)| a * b).sum::<f64>() * area
    } else {
        0.0
    };
    let mass = state
        .u
        .iter()
        .map(|u| u.iter().zip(gd.omega.iter()).filter(|(_, &o)| o).map(|(a, _)| *a).sum::<f64>() * area)
        .collect();
    let outside = gd.omega.mapv(|o| !o);
    let depth = rho_distance_field(&outside, norm, gd, DistanceMode::Sweep)?;
    let grads: Vec<Field> = state.u.iter().map(|u| gradient_magnitude(u, gd)).collect();
    let gradient_profile = mc
        .probe_depths
        .iter()
        .map(|&r| {
            let m = grads
                .iter()
                .flat_map(|g| g.iter().zip(depth.iter()).filter(|(_, &d)| d >= r).map(|(g, _)| *g))
                .fold(0.0f64, f64::max);
            (r, r * m)
        })
        .collect();
    Ok(StageMetrics {
        epsilon: state.epsilon,
        h: gd.h,
        iterations: state.iterations,
        residual: state.residual,
        converged: state.converged,
        under_resolved: gd.h > state.epsilon / 8.0 + 1e-15,
        separation,
        overlap_mass,
        mass,
        gradient_profile,
    })
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub setup: StageSetup,
    pub state: PopulationState,
    pub metrics: StageMetrics,
}

/// Carries a state to a new lattice: resampled in `Omega`, boundary data on
/// the strip, clamped under the new majorants.
pub fn transfer_state(prev: &PopulationState, from: &GridDomain, to: &StageSetup, cfg: &SolverConfig, epsilon: f64) -> Result<PopulationState> {
    let phi = majorants(&to.gd, &to.bd, &cfg.lin)?;
    let same = from.nx == to.gd.nx && from.ny == to.gd.ny && from.h == to.gd.h && from.origin == to.gd.origin;
    let u = prev
        .u
        .iter()
        .zip(&phi)
        .zip(&to.bd.f)
        .map(|((u, p), f)| {
            let moved = if same { u.clone() } else { to.gd.resample_from(from, u) };
            Field::from_shape_fn(to.gd.shape(), |ij| if to.gd.omega[ij] { moved[ij].clamp(0.0, p[ij].max(0.0)) } else { f[ij] })
        })
        .collect();
    Ok(PopulationState { epsilon, u, phi, psi: None, residual: f64::INFINITY, iterations: 0, converged: false, history: Vec::new() })
}

/// Solves each `eps` of the schedule on the lattice `setup(eps)`, warm
/// started from the previous stage.
pub fn run_continuation(
    cfg: &SolverConfig,
    norm: &Norm,
    mc: &MetricsConfig,
    mut setup: impl FnMut(f64) -> Result<StageSetup>,
) -> Result<Vec<StageResult>> {
    cfg.validate()?;
    if cfg.eps_schedule.is_empty() {
        return Err(Error::InvalidInput("empty epsilon schedule".into()));
    }
    let mut out: Vec<StageResult> = Vec::new();
    for &eps in &cfg.eps_schedule {
        let s = setup(eps)?;
        let init = match out.last() {
            Some(prev) => transfer_state(&prev.state, &prev.setup.gd, &s, cfg, eps)?,
            None => initial_state(&s.gd, &s.bd, cfg, eps)?,
        };
        let state = solve_system_from(&s.gd, &s.bd, &s.stencil, cfg, init)?;
        let metrics = stage_metrics(&s, &state, norm, mc)?;
        log::info!(
            "eps={} h={} iterations={} residual={:.2e} separation={:?}",
            eps,
            s.gd.h,
            metrics.iterations,
            metrics.residual,
            metrics.separation
        );
        out.push(StageResult { setup: s, state, metrics });
    }
    Ok(out)
}

/// Continuation on one fixed lattice.
pub fn run_epsilon_continuation(
    gd: &GridDomain,
    bd: &BoundaryData,
    st: &BallStencil,
    cfg: &SolverConfig,
    norm: &Norm,
    mc: &MetricsConfig,
) -> Result<Vec<StageResult>> {
    run_continuation(cfg, norm, mc, |_| Ok(StageSetup { gd: gd.clone(), bd: bd.clone(), stencil: st.clone() }))
}
