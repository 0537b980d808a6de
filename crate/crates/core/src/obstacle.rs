//! Collars `A_i` next to the boundary arcs and the harmonic obstacles
//! `psi_i` that force Lipschitz free boundaries.

use serde::{Deserialize, Serialize};

use crate::elliptic::{LinearSolverConfig, Preconditioner, ScreenedStructure};
use crate::error::{Error, Result};
use crate::grid::{mask_distance, BoundaryData, Field, GridDomain, Mask};
use crate::nonlocal::BallStencil;
use crate::norm::{rho_distance_field, DistanceMode, Norm};
use crate::solver::{solve_obstacle_system, PopulationState, SolverConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleSpec {
    pub mu: f64,
    pub lambda: f64,
    /// `lambda - mu`
    pub a: f64,
    /// Boundary arcs `Gamma_i` as strip cells touching `Omega`.
    pub arcs: Vec<Mask>,
    /// Endpoints of each arc, mirror images included.
    pub endpoints: Vec<Vec<[f64; 2]>>,
    /// `Gamma_i^{mu,lambda}` as a band of exterior cells.
    pub centres: Vec<Mask>,
    pub masks: Vec<Mask>,
    pub psi: Vec<Field>,
    /// Angle of `A_i` at each stored endpoint.
    pub corner_angles: Vec<Vec<f64>>,
}

impl ObstacleSpec {
    pub fn k(&self) -> usize {
        self.masks.len()
    }
}

fn any_neighbour(gd: &GridDomain, ix: usize, iy: usize, diag: bool, pred: impl Fn(usize, usize) -> bool) -> bool {
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            if (dx == 0 && dy == 0) || (!diag && dx != 0 && dy != 0) {
                continue;
            }
            if let Some((jx, jy)) = gd.resolve(ix as i64 + dx, iy as i64 + dy) {
                if pred(jx, jy) {
                    return true;
                }
            }
        }
    }
    false
}

/// Strip cells with a 4-neighbour in `Omega`.
fn boundary_layer(gd: &GridDomain) -> Mask {
    let strip = gd.strip();
    Mask::from_shape_fn(gd.shape(), |(iy, ix)| strip[[iy, ix]] && any_neighbour(gd, ix, iy, false, |a, b| gd.omega[[b, a]]))
}

/// Principal direction of points, oriented away from `from`.
fn direction_from(pts: &[[f64; 2]], from: [f64; 2]) -> Option<[f64; 2]> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in pts {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let ang = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let mut t = [ang.cos(), ang.sin()];
    if t[0] * (mx - from[0]) + t[1] * (my - from[1]) < 0.0 {
        t = [-t[0], -t[1]];
    }
    Some(t)
}

fn cluster(points: &[[f64; 2]], radius: f64) -> Vec<[f64; 2]> {
    let mut groups: Vec<Vec<[f64; 2]>> = Vec::new();
    for &p in points {
        match groups.iter_mut().find(|g| g.iter().any(|q| (q[0] - p[0]).hypot(q[1] - p[1]) <= radius)) {
            Some(g) => g.push(p),
            None => groups.push(vec![p]),
        }
    }
    groups
        .iter()
        .map(|g| {
            let n = g.len() as f64;
            [g.iter().map(|p| p[0]).sum::<f64>() / n, g.iter().map(|p| p[1]).sum::<f64>() / n]
        })
        .collect()
}

fn stored(gd: &GridDomain, p: [f64; 2]) -> bool {
    (!gd.symmetry.mirror_x || p[0] >= 0.0) && (!gd.symmetry.mirror_y || p[1] >= 0.0)
}

/// Builds `A_i = Omega cap {d(x, Gamma_i^{mu,lambda}) < lambda}` and the
/// harmonic `psi_i` on it, for boundary data equal to 1 on its support.
pub fn build_obstacles(
    gd: &GridDomain,
    bd: &BoundaryData,
    mu: f64,
    lambda: f64,
    norm: &Norm,
    lin: &LinearSolverConfig,
) -> Result<ObstacleSpec> {
    if !(0.0 < mu && mu < lambda && lambda < 1.0) {
        return Err(Error::InvalidInput(format!("need 0 < mu < lambda < 1, got mu={mu}, lambda={lambda}")));
    }
    let h = gd.h;
    let layer = boundary_layer(gd);
    let inner = Mask::from_shape_fn(gd.shape(), |(iy, ix)| gd.omega[[iy, ix]] && any_neighbour(gd, ix, iy, false, |a, b| layer[[b, a]]));
    let euclid = Norm::Euclidean;
    let mut spec = ObstacleSpec {
        mu,
        lambda,
        a: lambda - mu,
        arcs: Vec::new(),
        endpoints: Vec::new(),
        centres: Vec::new(),
        masks: Vec::new(),
        psi: Vec::new(),
        corner_angles: Vec::new(),
    };
    for (i, f) in bd.f.iter().enumerate() {
        let arc = Mask::from_shape_fn(gd.shape(), |ij| layer[ij] && f[ij] > 0.0);
        if !arc.iter().any(|&b| b) {
            return Err(Error::EmptySupport(i));
        }
        // endpoints: arc cells next to layer cells outside the arc
        let ends: Vec<[f64; 2]> = arc
            .indexed_iter()
            .filter(|&((iy, ix), &b)| b && any_neighbour(gd, ix, iy, true, |a, c| layer[[c, a]] && !arc[[c, a]]))
            .map(|((iy, ix), _)| gd.center(ix, iy))
            .collect();
        let mut endpoints: Vec<[f64; 2]> = Vec::new();
        for e in cluster(&ends, 3.0 * h) {
            for p in gd.images(e[0], e[1]) {
                if !endpoints.iter().any(|q| (q[0] - p[0]).hypot(q[1] - p[1]) <= 3.0 * h) {
                    endpoints.push(p);
                }
            }
        }
        // distance to the boundary piece: midway between the two cell layers
        let arc_in = Mask::from_shape_fn(gd.shape(), |(iy, ix)| inner[[iy, ix]] && any_neighbour(gd, ix, iy, false, |a, b| arc[[b, a]]));
        let d_out = rho_distance_field(&arc, &euclid, gd, DistanceMode::Sweep)?;
        let d_in = rho_distance_field(&arc_in, &euclid, gd, DistanceMode::Sweep)?;
        let centres = Mask::from_shape_fn(gd.shape(), |(iy, ix)| {
            if gd.omega[[iy, ix]] {
                return false;
            }
            let d = 0.5 * (d_out[[iy, ix]] + d_in[[iy, ix]]);
            if (d - mu).abs() > 0.5 * h {
                return false;
            }
            let p = gd.center(ix, iy);
            endpoints.iter().all(|e| (p[0] - e[0]).hypot(p[1] - e[1]) >= lambda)
        });
        if !centres.iter().any(|&b| b) {
            return Err(Error::EmptySet(format!("Gamma^(mu,lambda) of population {i} is empty")));
        }
        let dc = rho_distance_field(&centres, &euclid, gd, DistanceMode::Sweep)?;
        let mask = Mask::from_shape_fn(gd.shape(), |ij| gd.omega[ij] && dc[ij] < lambda);
        let multigrid = lin.preconditioner == Preconditioner::Multigrid;
        let structure = ScreenedStructure::new(gd, &mask, multigrid);
        let (psi, _) = structure.solve(&Field::zeros(gd.shape()), f, lin, None)?;
        let psi = Field::from_shape_fn(gd.shape(), |ij| if gd.omega[ij] && !mask[ij] { 0.0 } else { psi[ij] });
        // corner angles from tangent fits over a 10-cell window
        let window = 10.0 * h;
        let rim: Vec<[f64; 2]> = mask
            .indexed_iter()
            .filter(|&((iy, ix), &b)| b && any_neighbour(gd, ix, iy, false, |a, c| gd.omega[[c, a]] && !mask[[c, a]]))
            .map(|((iy, ix), _)| gd.center(ix, iy))
            .collect();
        let arc_pts: Vec<[f64; 2]> = arc.indexed_iter().filter(|(_, &b)| b).map(|((iy, ix), _)| gd.center(ix, iy)).collect();
        let near = |pts: &[[f64; 2]], y: [f64; 2]| -> Vec<[f64; 2]> {
            pts.iter()
                .copied()
                .filter(|p| {
                    let d = (p[0] - y[0]).hypot(p[1] - y[1]);
                    d <= window && d >= 1.5 * h
                })
                .collect()
        };
        let angles = endpoints
            .iter()
            .filter(|&&y| stored(gd, y))
            .filter_map(|&y| {
                let t1 = direction_from(&near(&rim, y), y)?;
                let t2 = direction_from(&near(&arc_pts, y), y)?;
                Some((t1[0] * t2[0] + t1[1] * t2[1]).clamp(-1.0, 1.0).acos())
            })
            .collect();
        spec.arcs.push(arc);
        spec.endpoints.push(endpoints);
        spec.centres.push(centres);
        spec.masks.push(mask);
        spec.psi.push(psi);
        spec.corner_angles.push(angles);
    }
    // supports of the obstacles must stay rho-separated by 1
    let supports: Vec<Mask> = spec
        .masks
        .iter()
        .zip(&bd.f)
        .map(|(m, f)| Mask::from_shape_fn(gd.shape(), |ij| m[ij] || f[ij] > 0.0))
        .collect();
    for i in 0..supports.len() {
        for j in i + 1..supports.len() {
            let d = mask_distance(&supports[i], &supports[j], norm, gd)?;
            if d < 1.0 - 2.0 * h {
                return Err(Error::SeparationViolation { i, j, distance: d, required: 1.0 });
            }
        }
    }
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSlope {
    pub population: usize,
    /// Minimum of `psi / depth` over cells 2-3 cells inside `partial A_i cap Omega`.
    pub min_slope: f64,
    /// `min_slope * a`, the constant `c` of the `c/a` law.
    pub c: f64,
    pub flat: bool,
}

/// Minimum inward slope of each `psi_i` next to `partial A_i cap Omega`.
pub fn check_obstacle_gradient(spec: &ObstacleSpec, gd: &GridDomain) -> Result<Vec<ObstacleSlope>> {
    let h = gd.h;
    let euclid = Norm::Euclidean;
    (0..spec.k())
        .map(|i| {
            let mask = &spec.masks[i];
            let outside = Mask::from_shape_fn(gd.shape(), |ij| gd.omega[ij] && !mask[ij]);
            if !outside.iter().any(|&b| b) {
                return Err(Error::EmptySet(format!("A_{i} covers Omega")));
            }
            let depth = rho_distance_field(&outside, &euclid, gd, DistanceMode::Sweep)?;
            let min_slope = mask
                .iter()
                .zip(depth.iter())
                .zip(spec.psi[i].iter())
                .filter(|((&m, &d), _)| m && d >= 1.5 * h && d <= 3.5 * h)
                .map(|((_, &d), &p)| p / d)
                .fold(f64::INFINITY, f64::min);
            let min_slope = if min_slope.is_finite() { min_slope } else { 0.0 };
            Ok(ObstacleSlope { population: i, min_slope, c: min_slope * spec.a, flat: min_slope <= 1e-12 })
        })
        .collect()
}

/// Largest excess of the ring barrier `log(lambda/r)/log(lambda/mu_z)` over
/// `psi_i` on `A_i cap B_lambda(z)`, with `z` running over every `stride`-th
/// centre cell and `mu_z` its distance to `Omega`.
pub fn check_obstacle_barrier(spec: &ObstacleSpec, gd: &GridDomain, i: usize, stride: usize) -> Result<f64> {
    let centres: Vec<(usize, usize)> =
        spec.centres[i].indexed_iter().filter(|(_, &b)| b).map(|((iy, ix), _)| (ix, iy)).step_by(stride.max(1)).collect();
    let to_omega = rho_distance_field(&gd.omega, &Norm::Euclidean, gd, DistanceMode::Sweep)?;
    let lambda = spec.lambda;
    let reach = (lambda / gd.h).ceil() as i64 + 1;
    let mut worst = f64::NEG_INFINITY;
    for (zx, zy) in centres {
        let z = gd.center(zx, zy);
        // cell centres of Omega sit half a cell inside the boundary
        let mu_z = to_omega[[zy, zx]] - 0.5 * gd.h;
        if !(mu_z > 0.0) {
            continue;
        }
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (x, y) = (zx as i64 + dx, zy as i64 + dy);
                if x < 0 || y < 0 || x >= gd.nx as i64 || y >= gd.ny as i64 {
                    continue;
                }
                let (x, y) = (x as usize, y as usize);
                if !spec.masks[i][[y, x]] {
                    continue;
                }
                let p = gd.center(x, y);
                let r = (p[0] - z[0]).hypot(p[1] - z[1]);
                if r >= lambda || r <= mu_z {
                    continue;
                }
                let barrier = (lambda / r).ln() / (lambda / mu_z).ln();
                worst = worst.max(barrier - spec.psi[i][[y, x]]);
            }
        }
    }
    if worst == f64::NEG_INFINITY {
        return Err(Error::EmptySet("no barrier samples".into()));
    }
    Ok(worst)
}

/// `min (u_i - psi_i)` over the cells of `closure(A_i) cap Omega`.
pub fn obstacle_margin(state: &PopulationState, spec: &ObstacleSpec, gd: &GridDomain) -> f64 {
    let mut worst = f64::INFINITY;
    for i in 0..spec.k() {
        let m = &spec.masks[i];
        for ((iy, ix), &o) in gd.omega.indexed_iter() {
            if !o {
                continue;
            }
            let near = m[[iy, ix]] || any_neighbour(gd, ix, iy, true, |a, b| m[[b, a]]);
            if near {
                worst = worst.min(state.u[i][[iy, ix]] - spec.psi[i][[iy, ix]]);
            }
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapAttempt {
    pub a: f64,
    pub mu: f64,
    pub margin: f64,
    pub converged: bool,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GapSweep {
    pub attempts: Vec<GapAttempt>,
    /// The first passing gap with its obstacles and state.
    pub accepted: Option<(ObstacleSpec, PopulationState)>,
}

/// Tries the gaps `a` in decreasing order at fixed `lambda` until the state
/// stays strictly above the obstacles on `closure(A_i) cap Omega`.
#[allow(clippy::too_many_arguments)]
pub fn sweep_obstacle_gap(
    gd: &GridDomain,
    bd: &BoundaryData,
    st: &BallStencil,
    cfg: &SolverConfig,
    norm: &Norm,
    epsilon: f64,
    lambda: f64,
    gaps: &[f64],
) -> Result<GapSweep> {
    let mut gaps = gaps.to_vec();
    gaps.sort_by(|a, b| b.total_cmp(a));
    let mut attempts = Vec::new();
    for a in gaps {
        let mu = lambda - a;
        let spec = build_obstacles(gd, bd, mu, lambda, norm, &cfg.lin)?;
        let state = solve_obstacle_system(gd, bd, st, cfg, epsilon, &spec.psi)?;
        let margin = obstacle_margin(&state, &spec, gd);
        let pass = state.converged && margin > 0.0;
        log::info!("obstacle gap a={a}: margin {margin:.3e}, converged {}", state.converged);
        attempts.push(GapAttempt { a, mu, margin, converged: state.converged, pass });
        if pass {
            return Ok(GapSweep { attempts, accepted: Some((spec, state)) });
        }
    }
    Ok(GapSweep { attempts, accepted: None })
}
