//! Norms defining the interaction ball, distance transforms with respect to
//! them, ball morphology and the curvature of distance level sets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridDomain, Mask};
use crate::morph;

/// Smooth, uniformly convex norm on the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Norm {
    Euclidean,
    /// `rho(x)^2 = (x/a_x)^2 + (y/a_y)^2`.
    Ellipse { a_x: f64, a_y: f64 },
    /// `rho(x)^2 = (1 - blend) * |x|_p^2 + blend * |x|^2`.
    SmoothedP { p: f64, blend: f64 },
}

impl Default for Norm {
    fn default() -> Self {
        Norm::Euclidean
    }
}

/// Floor on the smallest sampled Hessian eigenvalue of `rho^2 / 2`.
pub const CONVEXITY_FLOOR: f64 = 1e-3;
/// Central-difference step, relative to the evaluation radius.
const HESSIAN_STEP: f64 = 1e-4;

impl Norm {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Norm::Euclidean => Ok(()),
            Norm::Ellipse { a_x, a_y } if a_x > 0.0 && a_y > 0.0 => Ok(()),
            Norm::Ellipse { .. } => Err(Error::InvalidInput("ellipse semi-axes must be positive".into())),
            Norm::SmoothedP { p, blend } if p >= 2.0 && (0.0..=1.0).contains(&blend) => Ok(()),
            Norm::SmoothedP { .. } => Err(Error::InvalidInput(
                "smoothed p-norm needs p >= 2 and blend in [0, 1]".into(),
            )),
        }
    }

    #[inline]
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match *self {
            Norm::Euclidean => x.hypot(y),
            Norm::Ellipse { a_x, a_y } => (x / a_x).hypot(y / a_y),
            Norm::SmoothedP { p, blend } => {
                let (ax, ay) = (x.abs(), y.abs());
                let m = ax.max(ay);
                if m == 0.0 {
                    return 0.0;
                }
                // scaled to avoid overflow in the p-th powers
                let lp = m * ((ax / m).powf(p) + (ay / m).powf(p)).powf(1.0 / p);
                ((1.0 - blend) * lp * lp + blend * (x * x + y * y)).sqrt()
            }
        }
    }

    pub fn is_euclidean(&self) -> bool {
        matches!(self, Norm::Euclidean)
            || matches!(*self, Norm::Ellipse { a_x, a_y } if a_x == 1.0 && a_y == 1.0)
            || matches!(*self, Norm::SmoothedP { blend, .. } if blend == 1.0)
    }

    fn half_square(&self, x: f64, y: f64) -> f64 {
        let r = self.eval(x, y);
        0.5 * r * r
    }

    /// Central-difference Hessian of `rho^2 / 2` at `(x, y)`.
    fn hessian(&self, x: f64, y: f64) -> [[f64; 2]; 2] {
        let s = HESSIAN_STEP * x.hypot(y);
        let f = |dx: f64, dy: f64| self.half_square(x + dx, y + dy);
        let f0 = f(0.0, 0.0);
        let fxx = (f(s, 0.0) - 2.0 * f0 + f(-s, 0.0)) / (s * s);
        let fyy = (f(0.0, s) - 2.0 * f0 + f(0.0, -s)) / (s * s);
        let fxy = (f(s, s) - f(s, -s) - f(-s, s) + f(-s, -s)) / (4.0 * s * s);
        [[fxx, fxy], [fxy, fyy]]
    }

    /// Smallest and largest eigenvalues of the Hessian of `rho^2 / 2` over
    /// `n_samples` directions on the unit circle.
    pub fn estimate_convexity_bounds(&self, n_samples: usize) -> Result<(f64, f64)> {
        self.estimate_convexity_bounds_with_floor(n_samples, CONVEXITY_FLOOR)
    }

    pub fn estimate_convexity_bounds_with_floor(&self, n_samples: usize, floor: f64) -> Result<(f64, f64)> {
        if n_samples < 8 {
            return Err(Error::InvalidInput("need at least 8 direction samples".into()));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for k in 0..n_samples {
            let t = 2.0 * std::f64::consts::PI * k as f64 / n_samples as f64;
            let [[a, b], [_, d]] = self.hessian(t.cos(), t.sin());
            let mean = 0.5 * (a + d);
            let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
            lo = lo.min(mean - rad);
            hi = hi.max(mean + rad);
        }
        if lo < floor {
            return Err(Error::DegenerateNorm { a: lo, floor });
        }
        Ok((lo, hi))
    }

    /// Constants `c1 <= c2` with `c1 |x| <= rho(x) <= c2 |x|`, sampled over
    /// directions.
    pub fn equivalence_constants(&self, n_samples: usize) -> (f64, f64) {
        (0..n_samples.max(4))
            .map(|k| {
                let t = 2.0 * std::f64::consts::PI * k as f64 / n_samples.max(4) as f64;
                self.eval(t.cos(), t.sin())
            })
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)))
    }

    /// Largest Euclidean extent of the unit ball along each axis.
    pub fn axis_extent(&self) -> (f64, f64) {
        (1.0 / self.eval(1.0, 0.0), 1.0 / self.eval(0.0, 1.0))
    }
}

/// Exact distance up to grid resolution, or the propagated approximation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    Exact,
    Sweep,
    /// Exact up to [`EXACT_CELL_LIMIT`] masked cells, sweep beyond.
    #[default]
    Auto,
}

pub const EXACT_CELL_LIMIT: usize = 10_000;

/// Cells of `mask` with at least one 8-neighbour outside it (grid edges
/// count as outside unless mirrored).
pub fn boundary_cells(mask: &Mask, gd: &GridDomain) -> Vec<(usize, usize)> {
    let (ny, nx) = mask.dim();
    let mut out = Vec::new();
    for iy in 0..ny {
        for ix in 0..nx {
            if !mask[[iy, ix]] {
                continue;
            }
            let mut edge = false;
            'nb: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    match gd.resolve(ix as i64 + dx, iy as i64 + dy) {
                        Some((jx, jy)) if mask[[jy, jx]] => {}
                        _ => {
                            edge = true;
                            break 'nb;
                        }
                    }
                }
            }
            if edge {
                out.push((ix, iy));
            }
        }
    }
    out
}

/// Cell-centre coordinates of the cells and of their mirror images.
pub(crate) fn with_images(cells: &[(usize, usize)], gd: &GridDomain) -> Vec<[f64; 2]> {
    let mut pts = Vec::with_capacity(cells.len() * 4);
    for &(ix, iy) in cells {
        let [x, y] = gd.center(ix, iy);
        for [px, py] in gd.images(x, y) {
            pts.push([px, py]);
        }
    }
    pts
}

/// `d_rho(x, mask)` at every cell centre.
pub fn rho_distance_field(mask: &Mask, norm: &Norm, gd: &GridDomain, mode: DistanceMode) -> Result<ndarray::Array2<f64>> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptySet("distance to an empty mask".into()));
    }
    let exact = match mode {
        DistanceMode::Exact => true,
        DistanceMode::Sweep => false,
        DistanceMode::Auto => count <= EXACT_CELL_LIMIT,
    };
    if exact {
        Ok(distance_exact(mask, norm, gd))
    } else {
        Ok(distance_sweep(mask, norm, gd))
    }
}

/// Brute force over the boundary cells of the mask (and their mirror
/// images). Exact for the absolute norms provided here: the nearest masked
/// cell to an outside point is always a boundary cell.
fn distance_exact(mask: &Mask, norm: &Norm, gd: &GridDomain) -> ndarray::Array2<f64> {
    let (ny, nx) = mask.dim();
    let sources = with_images(&boundary_cells(mask, gd), gd);
    let mut out = ndarray::Array2::<f64>::zeros((ny, nx));
    out.as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(nx)
        .enumerate()
        .for_each(|(iy, row)| {
            for (ix, v) in row.iter_mut().enumerate() {
                if mask[[iy, ix]] {
                    *v = 0.0;
                    continue;
                }
                let [x, y] = gd.center(ix, iy);
                *v = sources
                    .iter()
                    .map(|s| norm.eval(x - s[0], y - s[1]))
                    .fold(f64::INFINITY, f64::min);
            }
        });
    out
}

/// Nearest-source propagation: each cell inherits the best source of its
/// 8 neighbours, in alternating raster sweeps until nothing changes.
fn distance_sweep(mask: &Mask, norm: &Norm, gd: &GridDomain) -> ndarray::Array2<f64> {
    let (ny, nx) = mask.dim();
    let mut site: Vec<Option<[f64; 2]>> = vec![None; nx * ny];
    let mut dist = vec![f64::INFINITY; nx * ny];
    for iy in 0..ny {
        for ix in 0..nx {
            if mask[[iy, ix]] {
                site[iy * nx + ix] = Some(gd.center(ix, iy));
                dist[iy * nx + ix] = 0.0;
            }
        }
    }
    let relax = |ix: usize, iy: usize, site: &mut Vec<Option<[f64; 2]>>, dist: &mut Vec<f64>| -> bool {
        let p = gd.center(ix, iy);
        let k = iy * nx + ix;
        let mut changed = false;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (jx, jy) = (ix as i64 + dx, iy as i64 + dy);
                if jx < 0 || jy < 0 || jx >= nx as i64 || jy >= ny as i64 {
                    continue;
                }
                if let Some(s) = site[jy as usize * nx + jx as usize] {
                    for [sx, sy] in gd.images(s[0], s[1]) {
                        let d = norm.eval(p[0] - sx, p[1] - sy);
                        if d < dist[k] {
                            dist[k] = d;
                            site[k] = Some([sx, sy]);
                            changed = true;
                        }
                    }
                }
            }
        }
        changed
    };
    loop {
        let mut changed = false;
        for (flip_y, flip_x) in [(false, false), (false, true), (true, false), (true, true)] {
            for jy in 0..ny {
                let iy = if flip_y { ny - 1 - jy } else { jy };
                for jx in 0..nx {
                    let ix = if flip_x { nx - 1 - jx } else { jx };
                    changed |= relax(ix, iy, &mut site, &mut dist);
                }
            }
        }
        if !changed {
            break;
        }
    }
    ndarray::Array2::from_shape_vec((ny, nx), dist).expect("shape")
}

/// `{x : d_rho(x, mask) <= r}`.
pub fn dilate_by_ball(mask: &Mask, r: f64, norm: &Norm, gd: &GridDomain) -> Result<Mask> {
    if !(r > 0.0) {
        return Err(Error::InvalidInput("dilation radius must be positive".into()));
    }
    Ok(morph::dilate(mask, &morph::ball_rows(norm, r / gd.h, true), gd, false))
}

/// Complement of the dilation of the complement; cells beyond the grid
/// count as outside the mask.
pub fn erode_by_ball(mask: &Mask, r: f64, norm: &Norm, gd: &GridDomain) -> Result<Mask> {
    if !(r > 0.0) {
        return Err(Error::InvalidInput("erosion radius must be positive".into()));
    }
    let complement = mask.mapv(|m| !m);
    let grown = morph::dilate(&complement, &morph::ball_rows(norm, r / gd.h, true), gd, true);
    Ok(grown.mapv(|m| !m))
}

/// Curvature of a distance level set after travelling `k` along the normal.
///
/// Orientation: `kappa0` is measured with the travel direction as the
/// positive normal, so a convex set growing outward has `kappa0 < 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvatureTransportInput {
    pub kappa0: f64,
    pub k: f64,
}

pub fn curvature_transport(inp: CurvatureTransportInput) -> Result<f64> {
    let denom = 1.0 - inp.kappa0 * inp.k;
    if denom.abs() < 1e-12 {
        return Err(Error::FocalSingularity(denom));
    }
    Ok(inp.kappa0 / denom)
}
