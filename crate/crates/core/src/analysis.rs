//! Supports, interfaces and the quantitative free-boundary checks.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{mask_distance, Field, GridDomain, Mask};
use crate::morph::pad;
use crate::norm::{dilate_by_ball, erode_by_ball, rho_distance_field, DistanceMode, Norm};

/// `u > max(delta_abs, delta_rel * max u)` on `Omega`.
pub fn support_threshold(u: &Field, gd: &GridDomain, delta_abs: f64, delta_rel: f64) -> f64 {
    let max = u.iter().zip(gd.omega.iter()).filter(|(_, &o)| o).map(|(v, _)| *v).fold(0.0f64, f64::max);
    delta_abs.max(delta_rel * max)
}

pub fn extract_support(u: &Field, gd: &GridDomain, delta_abs: f64, delta_rel: f64) -> Mask {
    let t = support_threshold(u, gd, delta_abs, delta_rel);
    Mask::from_shape_fn(gd.shape(), |ij| gd.omega[ij] && u[ij] > t)
}

/// Pairwise `d_rho` between masks, brute force over boundary cells.
pub fn support_separation(masks: &[Mask], norm: &Norm, gd: &GridDomain) -> Result<Vec<Vec<f64>>> {
    if masks.len() < 2 {
        return Err(Error::EmptySet("separation needs at least two supports".into()));
    }
    let k = masks.len();
    let mut out = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let d = mask_distance(&masks[i], &masks[j], norm, gd)?;
            out[i][j] = d;
            out[j][i] = d;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallRegularization {
    pub support_cells: usize,
    pub closure_cells: usize,
    pub symmetric_difference: usize,
    /// Cells of the symmetric difference farther than the collar from the
    /// boundary of the support.
    pub outside_collar: usize,
    pub pass: bool,
}

/// `T = {d(., S) >= 1}`, `S* = {d(., T) > 1}` inside `Omega`, compared with
/// `S` up to a collar of `collar_cells` cells.
pub fn check_ball_regularization(
    mask: &Mask,
    norm: &Norm,
    gd: &GridDomain,
    collar_cells: f64,
    mode: DistanceMode,
) -> Result<BallRegularization> {
    let s: Mask = Mask::from_shape_fn(gd.shape(), |ij| mask[ij] && gd.omega[ij]);
    let ds = rho_distance_field(&s, norm, gd, mode)?;
    let t = Mask::from_shape_fn(gd.shape(), |ij| gd.omega[ij] && ds[ij] >= 1.0);
    let star = if t.iter().any(|&b| b) {
        let dt = rho_distance_field(&t, norm, gd, mode)?;
        Mask::from_shape_fn(gd.shape(), |ij| gd.omega[ij] && dt[ij] > 1.0)
    } else {
        gd.omega.clone()
    };
    let r = collar_cells * gd.h;
    let grown = dilate_by_ball(&s, r, &Norm::Euclidean, gd)?;
    let shrunk = erode_by_ball(&s, r, &Norm::Euclidean, gd)?;
    let mut sym = 0;
    let mut outside = 0;
    for ((&a, &b), (&g, &e)) in s.iter().zip(star.iter()).zip(grown.iter().zip(shrunk.iter())) {
        if a != b {
            sym += 1;
            if !g || e {
                outside += 1;
            }
        }
    }
    Ok(BallRegularization {
        support_cells: s.iter().filter(|&&b| b).count(),
        closure_cells: star.iter().filter(|&&b| b).count(),
        symmetric_difference: sym,
        outside_collar: outside,
        pass: outside == 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterfaceCurve {
    pub population: usize,
    pub closed: bool,
    pub points: Vec<[f64; 2]>,
    /// Outward unit normals (towards lower `u`).
    pub normals: Vec<[f64; 2]>,
    /// Signed curvature, negative where the support is locally convex.
    pub kappa: Vec<f64>,
    /// Outward normal derivative.
    pub u_nu: Vec<f64>,
    /// Cumulative arclength along the curve.
    pub arclength: Vec<f64>,
    /// Whether the vertex lies in the stored region (not a mirror image).
    pub stored: Vec<bool>,
    /// Length of the part in the stored region.
    pub length: f64,
}

impl InterfaceCurve {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn arc_between(&self, a: usize, b: usize) -> f64 {
        let d = (self.arclength[b] - self.arclength[a]).abs();
        if self.closed {
            let total = self.total_arclength();
            d.min(total - d)
        } else {
            d
        }
    }

    fn total_arclength(&self) -> f64 {
        let n = self.points.len();
        let last = self.arclength[n - 1];
        if self.closed {
            last + dist(self.points[n - 1], self.points[0])
        } else {
            last
        }
    }

    /// Indices within arclength `[lo, hi]` of vertex `k` in direction `dir`.
    fn walk(&self, k: usize, dir: i64, lo: f64, hi: f64) -> Vec<usize> {
        let n = self.points.len() as i64;
        let mut out = Vec::new();
        let mut j = k as i64;
        for _ in 0..n {
            j += dir;
            if self.closed {
                j = j.rem_euclid(n);
            } else if j < 0 || j >= n {
                break;
            }
            if j as usize == k {
                break;
            }
            let s = self.arc_between(k, j as usize);
            if s > hi {
                break;
            }
            if s >= lo {
                out.push(j as usize);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterfaceSet {
    pub threshold: f64,
    pub multiplicity: f64,
    pub curves: Vec<InterfaceCurve>,
}

impl InterfaceSet {
    /// Length of the full interface including mirror images.
    pub fn total_length(&self) -> f64 {
        self.curves.iter().map(|c| c.length).sum::<f64>() * self.multiplicity
    }

    pub fn vertex_count(&self) -> usize {
        self.curves.iter().map(|c| c.len()).sum()
    }

    /// `curve_id,x,y,nx,ny,kappa,u_nu` for the stored vertices.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "curve_id,x,y,nx,ny,kappa,u_nu")?;
        for (id, c) in self.curves.iter().enumerate() {
            for k in 0..c.len() {
                if !c.stored[k] {
                    continue;
                }
                let [x, y] = c.points[k];
                let [nx, ny] = c.normals[k];
                writeln!(out, "{id},{x:.12e},{y:.12e},{nx:.12e},{ny:.12e},{:.12e},{:.12e}", c.kappa[k], c.u_nu[k])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct InterfaceOptions {
    /// Curvature window in cells and in length; the larger wins.
    pub window_cells: f64,
    pub window_length: f64,
    /// Extra cells read through the mirrors so fits near the axes see both
    /// sides.
    pub mirror_margin: usize,
}

impl Default for InterfaceOptions {
    fn default() -> Self {
        InterfaceOptions { window_cells: 10.0, window_length: 0.1, mirror_margin: 32 }
    }
}

impl InterfaceOptions {
    pub fn window(&self, h: f64) -> f64 {
        (self.window_cells * h).max(self.window_length)
    }
}

type EdgeKey = (i64, i64, u8);

/// Marching squares on cell centres, oriented with `u > threshold` on the
/// left. Squares need all four corners on the extended mask and one in
/// `Omega`.
fn contour_chains(u: &Field, gd: &GridDomain, threshold: f64, margin: usize) -> Vec<(Vec<[f64; 2]>, bool)> {
    let m = margin as i64;
    let vals = pad(u, margin, gd, f64::NAN);
    let ext = pad(&gd.extended, margin, gd, false);
    let om = pad(&gd.omega, margin, gd, false);
    let (py, px) = vals.dim();
    let pos = |ix: i64, iy: i64| -> [f64; 2] {
        [gd.origin[0] + ((ix - m) as f64 + 0.5) * gd.h, gd.origin[1] + ((iy - m) as f64 + 0.5) * gd.h]
    };
    let val = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= px as i64 || y >= py as i64 {
            f64::NAN
        } else {
            vals[[y as usize, x as usize]]
        }
    };
    // crossing on the edge a-b: the nearer of linear interpolation and the
    // extrapolation of the two cells behind the high end (exact at kinks)
    let cross = |a: (i64, i64), b: (i64, i64)| -> [f64; 2] {
        let (va, vb) = (val(a.0, a.1), val(b.0, b.1));
        let (hi, lo, vh, vl) = if va > vb { (a, b, va, vb) } else { (b, a, vb, va) };
        let mut t = ((vh - threshold) / (vh - vl)).clamp(0.0, 1.0);
        let behind = val(2 * hi.0 - lo.0, 2 * hi.1 - lo.1);
        if behind > vh {
            t = t.min((vh - threshold) / (behind - vh));
        }
        let (ph, pl) = (pos(hi.0, hi.1), pos(lo.0, lo.1));
        [ph[0] + t * (pl[0] - ph[0]), ph[1] + t * (pl[1] - ph[1])]
    };
    let mut segs: Vec<(EdgeKey, EdgeKey, [f64; 2], [f64; 2])> = Vec::new();
    for iy in 0..py as i64 - 1 {
        for ix in 0..px as i64 - 1 {
            let corners = [(ix, iy), (ix + 1, iy), (ix + 1, iy + 1), (ix, iy + 1)];
            if corners.iter().any(|&(x, y)| !ext[[y as usize, x as usize]] || vals[[y as usize, x as usize]].is_nan()) {
                continue;
            }
            if !corners.iter().any(|&(x, y)| om[[y as usize, x as usize]]) {
                continue;
            }
            let high: Vec<bool> = corners.iter().map(|&(x, y)| vals[[y as usize, x as usize]] > threshold).collect();
            let case = high.iter().enumerate().fold(0u8, |acc, (k, &b)| acc | ((b as u8) << k));
            if case == 0 || case == 15 {
                continue;
            }
            // edges: 0 bottom (c0-c1), 1 right (c1-c2), 2 top (c3-c2), 3 left (c0-c3)
            let edge_key = |e: usize| -> EdgeKey {
                match e {
                    0 => (ix, iy, 0),
                    1 => (ix + 1, iy, 1),
                    2 => (ix, iy + 1, 0),
                    _ => (ix, iy, 1),
                }
            };
            let edge_pt = |e: usize| -> [f64; 2] {
                match e {
                    0 => cross(corners[0], corners[1]),
                    1 => cross(corners[1], corners[2]),
                    2 => cross(corners[3], corners[2]),
                    _ => cross(corners[0], corners[3]),
                }
            };
            // pairs of crossed edges, each with a corner cut off by the segment
            let pairs: Vec<(usize, usize, usize)> = match case {
                5 | 10 => {
                    let c = corners.iter().map(|&(x, y)| vals[[y as usize, x as usize]]).sum::<f64>() / 4.0;
                    let centre_high = c > threshold;
                    if (case == 5) == centre_high {
                        // cut corners 1 and 3
                        vec![(0, 1, 1), (2, 3, 3)]
                    } else {
                        vec![(3, 0, 0), (1, 2, 2)]
                    }
                }
                _ => {
                    let crossed: Vec<usize> = (0..4)
                        .filter(|&e| {
                            let (a, b) = match e {
                                0 => (0, 1),
                                1 => (1, 2),
                                2 => (3, 2),
                                _ => (0, 3),
                            };
                            high[a] != high[b]
                        })
                        .collect();
                    let hi_corner = (0..4).find(|&k| high[k]).expect("mixed case");
                    vec![(crossed[0], crossed[1], hi_corner)]
                }
            };
            for (ea, eb, corner) in pairs {
                let (pa, pb) = (edge_pt(ea), edge_pt(eb));
                let c = pos(corners[corner].0, corners[corner].1);
                let side = (pb[0] - pa[0]) * (c[1] - pa[1]) - (pb[1] - pa[1]) * (c[0] - pa[0]);
                let left_high = (side > 0.0) == high[corner];
                if left_high {
                    segs.push((edge_key(ea), edge_key(eb), pa, pb));
                } else {
                    segs.push((edge_key(eb), edge_key(ea), pb, pa));
                }
            }
        }
    }
    let by_start: HashMap<EdgeKey, usize> = segs.iter().enumerate().map(|(k, s)| (s.0, k)).collect();
    let ends: std::collections::HashSet<EdgeKey> = segs.iter().map(|s| s.1).collect();
    let mut used = vec![false; segs.len()];
    let mut chains = Vec::new();
    let follow = |start: usize, used: &mut Vec<bool>| -> (Vec<[f64; 2]>, bool) {
        let mut pts = vec![segs[start].2];
        let mut k = start;
        loop {
            used[k] = true;
            pts.push(segs[k].3);
            match by_start.get(&segs[k].1) {
                Some(&n) if n == start => return (pts, true),
                Some(&n) if !used[n] => k = n,
                _ => return (pts, false),
            }
        }
    };
    let mut starts: Vec<usize> = (0..segs.len()).filter(|&k| !ends.contains(&segs[k].0)).collect();
    starts.sort_by_key(|&k| segs[k].0);
    for k in starts {
        if !used[k] {
            chains.push(follow(k, &mut used));
        }
    }
    for k in 0..segs.len() {
        if !used[k] {
            chains.push(follow(k, &mut used));
        }
    }
    for (pts, closed) in chains.iter_mut() {
        if *closed {
            pts.pop();
        }
        let tol = 1e-9 * gd.h;
        pts.dedup_by(|a, b| dist(*a, *b) <= tol);
        if *closed && pts.len() > 1 && dist(pts[0], *pts.last().expect("nonempty")) <= tol {
            pts.pop();
        }
    }
    chains
}

/// Principal direction of a point cloud.
fn principal_direction(pts: &[[f64; 2]]) -> [f64; 2] {
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
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    [angle.cos(), angle.sin()]
}

/// Algebraic least-squares circle; `None` for (near) collinear points.
pub fn fit_circle(pts: &[[f64; 2]]) -> Option<([f64; 2], f64)> {
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let scale = pts.iter().map(|p| (p[0] - mx).hypot(p[1] - my)).fold(0.0f64, f64::max);
    if scale == 0.0 {
        return None;
    }
    // z + D x + E y + F = 0 with z = x^2 + y^2, in scaled centred coordinates
    let mut a = [[0.0f64; 3]; 3];
    let mut b = [0.0f64; 3];
    for p in pts {
        let (x, y) = ((p[0] - mx) / scale, (p[1] - my) / scale);
        let z = x * x + y * y;
        let row = [x, y, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] += row[i] * row[j];
            }
            b[i] -= row[i] * z;
        }
    }
    let sol = solve3(a, b)?;
    let (cx, cy) = (-sol[0] / 2.0, -sol[1] / 2.0);
    let r2 = cx * cx + cy * cy - sol[2];
    if !(r2 > 0.0) || r2 > 1e12 {
        return None;
    }
    Some(([mx + cx * scale, my + cy * scale], r2.sqrt() * scale))
}

fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(&a);
    let norm = a.iter().flatten().map(|v| v.abs()).fold(0.0f64, f64::max);
    if d.abs() <= 1e-14 * norm.powi(3) {
        return None;
    }
    let mut out = [0.0; 3];
    for k in 0..3 {
        let mut m = a;
        for i in 0..3 {
            m[i][k] = b[i];
        }
        out[k] = det(&m) / d;
    }
    Some(out)
}

/// Length of the part of segment `a-b` inside the stored region.
fn stored_length(gd: &GridDomain, a: [f64; 2], b: [f64; 2]) -> f64 {
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (axis, mirrored) in [(0, gd.symmetry.mirror_x), (1, gd.symmetry.mirror_y)] {
        if !mirrored {
            continue;
        }
        let (pa, pb) = (a[axis], b[axis]);
        if pa < 0.0 && pb < 0.0 {
            return 0.0;
        }
        if pa < 0.0 || pb < 0.0 {
            let t = pa / (pa - pb);
            if pa < 0.0 {
                t0 = t0.max(t);
            } else {
                t1 = t1.min(t);
            }
        }
    }
    (t1 - t0).max(0.0) * dist(a, b)
}

fn in_stored_region(gd: &GridDomain, p: [f64; 2]) -> bool {
    (!gd.symmetry.mirror_x || p[0] >= 0.0) && (!gd.symmetry.mirror_y || p[1] >= 0.0)
}

/// Traces `partial {u > threshold}` with normals, curvature and outward
/// normal derivative per vertex.
pub fn extract_interface(
    u: &Field,
    gd: &GridDomain,
    threshold: f64,
    population: usize,
    opts: &InterfaceOptions,
) -> Result<InterfaceSet> {
    let chains = contour_chains(u, gd, threshold, opts.mirror_margin);
    let total: usize = chains.iter().map(|c| c.0.len()).sum();
    if total < 6 {
        return Err(Error::DegenerateContour { vertices: total });
    }
    let w = opts.window(gd.h);
    let h = gd.h;
    let mut curves: Vec<InterfaceCurve> = chains
        .into_par_iter()
        .filter(|(pts, _)| pts.len() >= 2)
        .map(|(points, closed)| {
            let n = points.len();
            let mut arclength = vec![0.0; n];
            for k in 1..n {
                arclength[k] = arclength[k - 1] + dist(points[k - 1], points[k]);
            }
            let stored: Vec<bool> = points.iter().map(|&p| in_stored_region(gd, p)).collect();
            let seg_count = if closed { n } else { n - 1 };
            let length = (0..seg_count).map(|k| stored_length(gd, points[k], points[(k + 1) % n])).sum();
            let mut curve = InterfaceCurve {
                population,
                closed,
                points,
                normals: vec![[0.0; 2]; n],
                kappa: vec![0.0; n],
                u_nu: vec![0.0; n],
                arclength,
                stored,
                length,
            };
            for k in 0..n {
                let mut idx = curve.walk(k, -1, 0.0, w);
                idx.reverse();
                idx.push(k);
                idx.extend(curve.walk(k, 1, 0.0, w));
                let win: Vec<[f64; 2]> = idx.iter().map(|&j| curve.points[j]).collect();
                let p = curve.points[k];
                let (first, last) = (win[0], win[win.len() - 1]);
                let mut t = principal_direction(&win);
                if t[0] * (last[0] - first[0]) + t[1] * (last[1] - first[1]) < 0.0 {
                    t = [-t[0], -t[1]];
                }
                let nrm = [t[1], -t[0]];
                curve.normals[k] = nrm;
                curve.kappa[k] = match fit_circle(&win) {
                    Some((c, r)) if win.len() >= 5 => {
                        let inward = (c[0] - p[0]) * nrm[0] + (c[1] - p[1]) * nrm[1] < 0.0;
                        if inward {
                            -1.0 / r
                        } else {
                            1.0 / r
                        }
                    }
                    _ => 0.0,
                };
                let mut s = vec![threshold];
                s.extend((1..4).map(|j| gd.interpolate(u, p[0] - nrm[0] * j as f64 * h, p[1] - nrm[1] * j as f64 * h)));
                let inward_slope = (-11.0 * s[0] + 18.0 * s[1] - 9.0 * s[2] + 2.0 * s[3]) / (6.0 * h);
                curve.u_nu[k] = -inward_slope;
            }
            curve
        })
        .collect();
    curves.retain(|c| c.stored.iter().any(|&s| s));
    curves.sort_by(|a, b| {
        let pa = a.points[a.stored.iter().position(|&s| s).expect("stored vertex")];
        let pb = b.points[b.stored.iter().position(|&s| s).expect("stored vertex")];
        pa.partial_cmp(&pb).expect("finite coordinates")
    });
    let stored_total: usize = curves.iter().map(|c| c.stored.iter().filter(|&&s| s).count()).sum();
    if stored_total < 6 {
        return Err(Error::DegenerateContour { vertices: stored_total });
    }
    Ok(InterfaceSet { threshold, multiplicity: gd.multiplicity(), curves })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStability {
    pub coarse: f64,
    pub fine: f64,
    pub relative_change: f64,
    pub pass: bool,
}

pub fn interface_length_stability(coarse: &InterfaceSet, fine: &InterfaceSet, tol: f64) -> LengthStability {
    let (a, b) = (coarse.total_length(), fine.total_length());
    let rel = (a - b).abs() / a.max(b).max(f64::MIN_POSITIVE);
    LengthStability { coarse: a, fine: b, relative_change: rel, pass: rel <= tol }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularPointRecord {
    pub location: [f64; 2],
    pub theta: f64,
    pub partner: [f64; 2],
    pub partner_angle: f64,
    /// Diameter of the set of opposing vertices realizing the distance.
    pub realization_diameter: f64,
    pub distance: f64,
}

/// Opening in `[0, pi]` between two tangent fits leaving a vertex.
fn opening(curve: &InterfaceCurve, before: &[usize], after: &[usize], centre: [f64; 2]) -> Option<f64> {
    if before.len() < 2 || after.len() < 2 {
        return None;
    }
    let dir = |idx: &[usize]| {
        let pts: Vec<[f64; 2]> = idx.iter().map(|&j| curve.points[j]).collect();
        let mut t = principal_direction(&pts);
        let mx = pts.iter().map(|p| p[0]).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|p| p[1]).sum::<f64>() / pts.len() as f64;
        if t[0] * (mx - centre[0]) + t[1] * (my - centre[1]) < 0.0 {
            t = [-t[0], -t[1]];
        }
        t
    };
    let (a, b) = (dir(before), dir(after));
    Some((a[0] * b[0] + a[1] * b[1]).clamp(-1.0, 1.0).acos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct SingularOptions {
    /// Realization-set diameter threshold in cells.
    pub diameter_cells: f64,
    /// Cells skipped next to the vertex before the tangent fits.
    pub exclude_cells: f64,
    /// Tangent-fit window, cells and length; the larger wins.
    pub window_cells: f64,
    pub window_length: f64,
}

impl Default for SingularOptions {
    fn default() -> Self {
        SingularOptions { diameter_cells: 4.0, exclude_cells: 5.0, window_cells: 10.0, window_length: 0.1 }
    }
}

/// Vertices whose distance to the opposing interface is realized on a set
/// of diameter above `4h`. Realizations are found in reverse: each opposing
/// vertex is assigned to its nearest vertex on `iface`, so a grid-blunted
/// corner collects the whole opposing arc. Runs of adjacent detections
/// form one record.
pub fn detect_singular_points(
    iface: &InterfaceSet,
    opposing: &InterfaceSet,
    norm: &Norm,
    h: f64,
    opts: &SingularOptions,
) -> Vec<SingularPointRecord> {
    let sources: Vec<(usize, usize)> =
        iface.curves.iter().enumerate().flat_map(|(ci, c)| (0..c.len()).map(move |k| (ci, k))).collect();
    let targets: Vec<(usize, usize)> =
        opposing.curves.iter().enumerate().flat_map(|(ci, c)| (0..c.len()).map(move |k| (ci, k))).collect();
    if sources.is_empty() || targets.is_empty() {
        return Vec::new();
    }
    let at = |s: &InterfaceSet, (ci, k): (usize, usize)| s.curves[ci].points[k];
    // foot of each opposing vertex on iface
    let feet: Vec<((usize, usize), f64)> = targets
        .par_iter()
        .map(|&t| {
            let y = at(opposing, t);
            sources
                .iter()
                .map(|&s| {
                    let x = at(iface, s);
                    (s, norm.eval(x[0] - y[0], x[1] - y[1]))
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("nonempty")
        })
        .collect();
    let mut realized: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (ti, (s, _)) in feet.iter().enumerate() {
        realized.entry(*s).or_default().push(ti);
    }
    let diameter = |set: &[usize]| {
        let mut d = 0.0f64;
        for (a, &i) in set.iter().enumerate() {
            for &j in &set[a + 1..] {
                d = d.max(dist(at(opposing, targets[i]), at(opposing, targets[j])));
            }
        }
        d
    };
    let w = (opts.window_cells * h).max(opts.window_length);
    let skip = opts.exclude_cells * h;
    let mut out = Vec::new();
    for (ci, curve) in iface.curves.iter().enumerate() {
        let flagged: Vec<bool> = (0..curve.len())
            .map(|k| realized.get(&(ci, k)).is_some_and(|set| diameter(set) > opts.diameter_cells * h))
            .collect();
        // runs of flagged vertices (wrapping on closed curves)
        let n = curve.len();
        let mut runs: Vec<Vec<usize>> = Vec::new();
        let start = if curve.closed { (0..n).find(|&k| !flagged[k]) } else { Some(0) };
        let Some(start) = start else { continue };
        let mut current: Vec<usize> = Vec::new();
        for step in 0..n {
            let k = (start + step) % n;
            if flagged[k] {
                current.push(k);
            } else if !current.is_empty() {
                runs.push(std::mem::take(&mut current));
            }
        }
        if !current.is_empty() {
            runs.push(current);
        }
        for run in runs {
            if !run.iter().any(|&k| curve.stored[k]) {
                continue;
            }
            let members: Vec<usize> = run.iter().flat_map(|&k| realized[&(ci, k)].iter().copied()).collect();
            let diam = diameter(&members);
            let (first, last) = (run[0], run[run.len() - 1]);
            let centre = curve.points[run[run.len() / 2]];
            let mut before = curve.walk(first, -1, skip, skip + w);
            before.reverse();
            let after = curve.walk(last, 1, skip, skip + w);
            let Some(theta) = opening(curve, &before, &after, centre) else { continue };
            // partner on the opposing curve holding most of the realization set
            let mut by_curve: HashMap<usize, Vec<usize>> = HashMap::new();
            for &m in &members {
                by_curve.entry(targets[m].0).or_default().push(targets[m].1);
            }
            let (oci, mut idx) = by_curve.into_iter().max_by_key(|(c, v)| (v.len(), std::cmp::Reverse(*c))).expect("nonempty");
            idx.sort_unstable();
            let oc = &opposing.curves[oci];
            let mid = idx[idx.len() / 2];
            let mut pb = oc.walk(idx[0], -1, skip, skip + w);
            pb.reverse();
            let pa = oc.walk(idx[idx.len() - 1], 1, skip, skip + w);
            let partner_angle = opening(oc, &pb, &pa, oc.points[mid]).unwrap_or(std::f64::consts::PI);
            let distance = members.iter().map(|&m| feet[m].1).fold(f64::INFINITY, f64::min);
            out.push(SingularPointRecord {
                location: centre,
                theta,
                partner: oc.points[mid],
                partner_angle,
                realization_diameter: diam,
                distance,
            });
        }
    }
    out
}

/// `pi / theta0 - 1`.
pub fn cone_growth_exponent(theta0: f64) -> Result<f64> {
    if !(theta0 > 0.0) {
        return Err(Error::ZeroAngle);
    }
    if theta0 > std::f64::consts::PI + 1e-12 {
        return Err(Error::InvalidInput(format!("opening {theta0} exceeds pi")));
    }
    Ok(std::f64::consts::PI / theta0 - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidInput("a line fit needs at least two samples".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput("degenerate abscissae".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LineFit { slope, intercept: my - slope * mx, r2 })
}

/// Growth exponent of `u` along the ray from `apex` in `direction`, from a
/// log-log fit of bilinear samples at the given radii.
pub fn fit_radial_growth(u: &Field, gd: &GridDomain, apex: [f64; 2], direction: f64, radii: &[f64]) -> Result<LineFit> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &r in radii {
        let v = gd.interpolate(u, apex[0] + r * direction.cos(), apex[1] + r * direction.sin());
        if v > 0.0 {
            xs.push(r.ln());
            ys.push(v.ln());
        }
    }
    fit_line(&xs, &ys)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FbPair {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub distance: f64,
    pub kappa: f64,
    pub measured: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FbReport {
    pub pairs: Vec<FbPair>,
    /// Median of the measured ratios `u_nu^1 / u_nu^2`.
    pub measured: f64,
    /// Median of `1 - kappa_1` (the curvature product in 2D).
    pub predicted: f64,
    pub relative_error: f64,
    /// Fraction of pairs at distance `1 +- 2h`.
    pub paired_fraction: f64,
    pub pass: bool,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Pairs each stored vertex `x` of `iface1` with the vertex of `iface2`
/// nearest to `x + nu(x)` and compares `u_nu^1(x)/u_nu^2(y)` with
/// `kappa(x)/kappa(y) = 1 - kappa(x)`.
pub fn check_fb_condition(iface1: &InterfaceSet, iface2: &InterfaceSet, norm: &Norm, h: f64, tol: f64) -> Result<FbReport> {
    let opp: Vec<(usize, usize)> =
        iface2.curves.iter().enumerate().flat_map(|(ci, c)| (0..c.len()).map(move |k| (ci, k))).collect();
    if opp.is_empty() {
        return Err(Error::EmptySet("opposing interface".into()));
    }
    let mut pairs = Vec::new();
    for c in &iface1.curves {
        for k in 0..c.len() {
            if !c.stored[k] {
                continue;
            }
            let kappa = c.kappa[k];
            if (1.0 - kappa).abs() < 0.1 {
                return Err(Error::CurvatureNearFocal { kappa });
            }
            let x = c.points[k];
            let n = c.normals[k];
            let target = [x[0] + n[0], x[1] + n[1]];
            let &(ci, j) = opp
                .iter()
                .min_by(|a, b| {
                    let pa = iface2.curves[a.0].points[a.1];
                    let pb = iface2.curves[b.0].points[b.1];
                    dist(pa, target).total_cmp(&dist(pb, target))
                })
                .expect("nonempty");
            let oc = &iface2.curves[ci];
            let y = oc.points[j];
            let measured = (c.u_nu[k] / oc.u_nu[j]).abs();
            pairs.push(FbPair {
                x,
                y,
                distance: norm.eval(x[0] - y[0], x[1] - y[1]),
                kappa,
                measured,
                predicted: 1.0 - kappa,
            });
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptySet("no interface vertices to pair".into()));
    }
    let measured = median(pairs.iter().map(|p| p.measured).collect());
    let predicted = median(pairs.iter().map(|p| p.predicted).collect());
    let relative_error = (measured - predicted).abs() / predicted.abs();
    let paired_fraction = pairs.iter().filter(|p| (p.distance - 1.0).abs() <= 2.0 * h).count() as f64 / pairs.len() as f64;
    Ok(FbReport { pairs, measured, predicted, relative_error, paired_fraction, pass: relative_error <= tol && paired_fraction >= 0.5 })
}

/// Cells within `half_width` of the stored vertices of `iface` and of
/// their transports `x + nu(x)`; optionally only vertices accepted by
/// `select`.
pub fn transported_patches(
    iface: &InterfaceSet,
    gd: &GridDomain,
    half_width: f64,
    select: impl Fn([f64; 2]) -> bool,
) -> Result<(Mask, Mask)> {
    let mut src = Mask::from_elem(gd.shape(), false);
    let mut dst = Mask::from_elem(gd.shape(), false);
    for c in &iface.curves {
        for k in 0..c.len() {
            let p = c.points[k];
            if !c.stored[k] || !select(p) {
                continue;
            }
            if let Some((ix, iy)) = gd.cell_of_folded(p[0], p[1]) {
                src[[iy, ix]] = true;
            }
            let q = [p[0] + c.normals[k][0], p[1] + c.normals[k][1]];
            if let Some((ix, iy)) = gd.cell_of_folded(q[0], q[1]) {
                dst[[iy, ix]] = true;
            }
        }
    }
    if !src.iter().any(|&b| b) || !dst.iter().any(|&b| b) {
        return Err(Error::PatchTooSmall { cells: 0 });
    }
    let e = Norm::Euclidean;
    let ds = rho_distance_field(&src, &e, gd, DistanceMode::Sweep)?;
    let dd = rho_distance_field(&dst, &e, gd, DistanceMode::Sweep)?;
    let d = Mask::from_shape_fn(gd.shape(), |ij| gd.omega[ij] && ds[ij] <= half_width);
    let t = Mask::from_shape_fn(gd.shape(), |ij| gd.omega[ij] && dd[ij] <= half_width);
    Ok((d, t))
}

/// `int_D Delta u` as the sum of face fluxes across the boundary of `D`.
pub fn laplacian_mass(u: &Field, patch: &Mask, gd: &GridDomain) -> f64 {
    let mut total = 0.0;
    for ((iy, ix), &inside) in patch.indexed_iter() {
        if !inside {
            continue;
        }
        for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
            let nb = gd.resolve(ix as i64 + dx, iy as i64 + dy);
            match nb {
                Some((jx, jy)) if patch[[jy, jx]] => {}
                Some((jx, jy)) => total += u[[jy, jx]] - u[[iy, ix]],
                None => total -= u[[iy, ix]],
            }
        }
    }
    total * gd.multiplicity()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassBalance {
    pub mass1: f64,
    pub mass2: f64,
    pub relative_difference: f64,
    pub patch_cells: [usize; 2],
    pub pass: bool,
}

pub fn check_mass_balance(u1: &Field, u2: &Field, d: &Mask, e: &Mask, gd: &GridDomain, tol: f64) -> Result<MassBalance> {
    let cells = [d.iter().filter(|&&b| b).count(), e.iter().filter(|&&b| b).count()];
    if cells[0] < 9 || cells[1] < 9 {
        return Err(Error::PatchTooSmall { cells: cells[0].min(cells[1]) });
    }
    let m1 = laplacian_mass(u1, d, gd);
    let m2 = laplacian_mass(u2, e, gd);
    let rel = (m1 - m2).abs() / m1.abs().max(m2.abs()).max(f64::MIN_POSITIVE);
    Ok(MassBalance { mass1: m1, mass2: m2, relative_difference: rel, patch_cells: cells, pass: rel <= tol })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaRatio {
    pub length1: f64,
    pub length2: f64,
    pub measured: f64,
    pub predicted: f64,
    pub kappa_spread: f64,
    pub pass: bool,
}

/// Length of the transported patch `{x + nu(x)}` over the patch itself,
/// against `1 - kappa`.
pub fn check_area_ratio(curve: &InterfaceCurve, range: std::ops::Range<usize>, tol: f64) -> Result<AreaRatio> {
    if range.len() < 3 || range.end > curve.len() {
        return Err(Error::PatchTooSmall { cells: range.len() });
    }
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for k in range.start..range.end - 1 {
        let (a, b) = (curve.points[k], curve.points[k + 1]);
        let (na, nb) = (curve.normals[k], curve.normals[k + 1]);
        l1 += dist(a, b);
        l2 += dist([a[0] + na[0], a[1] + na[1]], [b[0] + nb[0], b[1] + nb[1]]);
    }
    let ks: Vec<f64> = curve.kappa[range.clone()].to_vec();
    let mean = ks.iter().sum::<f64>() / ks.len() as f64;
    let spread = (ks.iter().map(|k| (k - mean).powi(2)).sum::<f64>() / ks.len() as f64).sqrt();
    let measured = l2 / l1;
    let predicted = 1.0 - mean;
    Ok(AreaRatio {
        length1: l1,
        length2: l2,
        measured,
        predicted,
        kappa_spread: spread,
        pass: (measured - predicted).abs() <= tol * predicted.abs(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayEstimate {
    pub probe: [f64; 2],
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// One continuation stage as seen by the decay fit.
#[derive(Debug, Clone, Copy)]
pub struct DecaySample<'a> {
    pub epsilon: f64,
    pub gd: &'a GridDomain,
    pub u: &'a Field,
    /// Boundary data of the same population.
    pub f: &'a Field,
}

/// Affine fit of `log u(probe)` against `1/eps`.
pub fn fit_decay(samples: &[DecaySample<'_>], probe: [f64; 2]) -> Result<DecayEstimate> {
    if samples.len() < 3 {
        return Err(Error::InvalidInput("decay fit needs at least three stages".into()));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in samples {
        let (ix, iy) = s.gd.cell_of_folded(probe[0], probe[1]).ok_or_else(|| Error::ProbeOutsideDecayRegion("probe outside the lattice".into()))?;
        if !s.gd.omega[[iy, ix]] || s.f[[iy, ix]] > 0.0 {
            return Err(Error::ProbeOutsideDecayRegion(format!("probe {probe:?} is on the boundary data")));
        }
        let v = s.gd.interpolate(s.u, probe[0], probe[1]);
        if !(v > 0.0) {
            return Err(Error::ProbeOutsideDecayRegion(format!("u vanishes at {probe:?} for eps = {}", s.epsilon)));
        }
        xs.push(1.0 / s.epsilon);
        ys.push(v.ln());
    }
    let fit = fit_line(&xs, &ys)?;
    Ok(DecayEstimate { probe, slope: fit.slope, intercept: fit.intercept, r2: fit.r2 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBound {
    /// `max r |grad u|` over the fitting stages.
    pub c0: f64,
    /// Largest `r max |grad u|` over the held-out stages.
    pub held_out: f64,
    pub headroom: f64,
    pub pass: bool,
}

/// Fits `C0` on all stages but the last and checks the last stage against
/// `(1 + headroom) C0`. Each stage is a list of `(r, r max |grad u|)`.
pub fn check_gradient_bound(stages: &[Vec<(f64, f64)>], headroom: f64) -> Result<GradientBound> {
    if stages.len() < 2 {
        return Err(Error::InvalidInput("gradient bound needs at least two stages".into()));
    }
    let (fit, test) = stages.split_at(stages.len() - 1);
    let c0 = fit.iter().flatten().map(|p| p.1).fold(0.0f64, f64::max);
    let held_out = test.iter().flatten().map(|p| p.1).fold(0.0f64, f64::max);
    Ok(GradientBound { c0, held_out, headroom, pass: held_out <= (1.0 + headroom) * c0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{DomainShape, DomainSpec};
    use std::f64::consts::PI;

    fn boxed(half: f64, h: f64) -> GridDomain {
        let n = (2.0 * half / h).round() as usize;
        let mut gd = GridDomain::from_box([-half, -half], h, n, n);
        gd.omega = Mask::from_elem(gd.shape(), true);
        gd.extended = gd.omega.clone();
        gd
    }

    #[test]
    fn support_examples() {
        let gd = boxed(3.0, 0.05);
        let zero = Field::zeros(gd.shape());
        assert!(!extract_support(&zero, &gd, 1e-12, 1e-3).iter().any(|&b| b));
        let pos = gd.field_from(|x, _| 4.0 + x);
        assert_eq!(extract_support(&pos, &gd, 1e-12, 1e-3), gd.omega);
    }

    #[test]
    fn separation_of_points() {
        let gd = boxed(3.0, 0.05);
        let a = gd.mask_from(|x, y| (x + 1.475).abs() < 0.02 && (y - 0.025).abs() < 0.02);
        let b = gd.mask_from(|x, y| (x - 1.525).abs() < 0.02 && (y - 0.025).abs() < 0.02);
        let d = support_separation(&[a.clone(), b], &Norm::Euclidean, &gd).unwrap();
        assert!((d[0][1] - 3.0).abs() <= 0.05, "{}", d[0][1]);
        assert_eq!(d[0][0], 0.0);
        assert_eq!(d[0][1], d[1][0]);
        assert!(matches!(support_separation(&[a], &Norm::Euclidean, &gd), Err(Error::EmptySet(_))));
        let touching = [gd.mask_from(|x, _| x < 0.0), gd.mask_from(|x, _| x >= 0.0)];
        assert!(support_separation(&touching, &Norm::Euclidean, &gd).unwrap()[0][1] <= 0.05 + 1e-12);
    }

    #[test]
    fn ball_regularization_examples() {
        let gd = boxed(4.0, 0.04);
        let disk = gd.mask_from(|x, y| x.hypot(y) < 2.0);
        let r = check_ball_regularization(&disk, &Norm::Euclidean, &gd, 2.0, DistanceMode::Sweep).unwrap();
        assert!(r.pass, "{r:?}");
        // square with a notch of width 0.4 and depth 1
        let notched = gd.mask_from(|x, y| x.abs() < 2.5 && y.abs() < 2.5 && !(x.abs() < 0.2 && y > 1.5));
        let r = check_ball_regularization(&notched, &Norm::Euclidean, &gd, 2.0, DistanceMode::Sweep).unwrap();
        assert!(!r.pass, "{r:?}");
        assert!(r.outside_collar > 100);
    }

    fn cone_interface(h: f64, radius: f64) -> (GridDomain, Field, InterfaceSet) {
        let gd = boxed(radius + 1.0, h);
        let u = gd.field_from(|x, y| (radius - x.hypot(y)).max(0.0));
        let set = extract_interface(&u, &gd, 1e-9, 0, &InterfaceOptions::default()).unwrap();
        (gd, u, set)
    }

    #[test]
    fn cone_on_a_disk() {
        let (_, _, set) = cone_interface(1.0 / 64.0, 2.0);
        assert_eq!(set.curves.len(), 1);
        let c = &set.curves[0];
        assert!(c.closed);
        for k in 0..c.len() {
            let p = c.points[k];
            let r = p[0].hypot(p[1]);
            assert!((r - 2.0).abs() < 1e-3);
            // outward normal is radial
            assert!((c.normals[k][0] * p[0] + c.normals[k][1] * p[1]) / r > 0.999);
            assert!((c.kappa[k] + 0.5).abs() <= 0.025, "kappa {}", c.kappa[k]);
            assert!((c.u_nu[k] + 1.0).abs() <= 0.05, "u_nu {}", c.u_nu[k]);
        }
        assert!((set.total_length() - 4.0 * PI).abs() < 0.01);
    }

    #[test]
    fn concave_side_has_positive_curvature() {
        let gd = boxed(4.0, 1.0 / 32.0);
        let u = gd.field_from(|x, y| (x.hypot(y) - 2.0).max(0.0));
        let set = extract_interface(&u, &gd, 1e-9, 1, &InterfaceOptions::default()).unwrap();
        let c = &set.curves[0];
        let mean = c.kappa.iter().sum::<f64>() / c.len() as f64;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
        assert!(c.u_nu.iter().all(|&v| (v + 1.0).abs() < 0.05));
    }

    #[test]
    fn flat_interface() {
        let gd = boxed(2.0, 1.0 / 32.0);
        let u = gd.field_from(|x, _| (0.3 - x).max(0.0));
        let set = extract_interface(&u, &gd, 1e-9, 0, &InterfaceOptions::default()).unwrap();
        for c in &set.curves {
            assert!(!c.closed);
            assert!(c.kappa.iter().all(|k| k.abs() <= 0.02), "{:?}", c.kappa);
            assert!(c.normals.iter().all(|n| (n[0] - 1.0).abs() < 1e-9));
        }
    }

    #[test]
    fn degenerate_contour() {
        let gd = boxed(1.0, 0.25);
        let u = Field::from_shape_fn(gd.shape(), |(iy, ix)| if (ix, iy) == (4, 4) { 1.0 } else { 0.0 });
        assert!(matches!(
            extract_interface(&u, &gd, 0.5, 0, &InterfaceOptions::default()),
            Err(Error::DegenerateContour { .. })
        ));
    }

    #[test]
    fn mirrored_interface_matches_full() {
        let h = 1.0 / 32.0;
        let full = boxed(3.0, h);
        let n = (3.0 / h) as usize;
        let mut quarter = GridDomain::from_box([0.0, 0.0], h, n, n);
        quarter.omega = Mask::from_elem(quarter.shape(), true);
        quarter.extended = quarter.omega.clone();
        quarter.symmetry.mirror_x = true;
        quarter.symmetry.mirror_y = true;
        let f = |x: f64, y: f64| (2.0 - (x * x / 1.2 + y * y).sqrt()).max(0.0);
        let a = extract_interface(&full.field_from(f), &full, 1e-9, 0, &InterfaceOptions::default()).unwrap();
        let b = extract_interface(&quarter.field_from(f), &quarter, 1e-9, 0, &InterfaceOptions::default()).unwrap();
        assert!((a.total_length() - b.total_length()).abs() < 4.0 * h, "{} {}", a.total_length(), b.total_length());
        // curvature at the axis crossing point agrees
        let at = |s: &InterfaceSet| {
            let c = &s.curves[0];
            let k = (0..c.len()).min_by(|&i, &j| c.points[i][1].abs().total_cmp(&c.points[j][1].abs()).then(c.points[j][0].total_cmp(&c.points[i][0]))).unwrap();
            c.kappa[k]
        };
        assert!((at(&a) - at(&b)).abs() < 1e-3, "{} {}", at(&a), at(&b));
    }

    #[test]
    fn interface_csv_columns() {
        let (_, _, set) = cone_interface(1.0 / 16.0, 2.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("iface.csv");
        set.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "curve_id,x,y,nx,ny,kappa,u_nu");
        assert_eq!(lines.count(), set.vertex_count());
    }

    #[test]
    fn length_stability_examples() {
        let (_, _, a) = cone_interface(1.0 / 32.0, 2.0);
        let (_, _, b) = cone_interface(1.0 / 64.0, 2.0);
        let r = interface_length_stability(&a, &b, 0.05);
        assert!(r.pass && (r.fine - 4.0 * PI).abs() < 0.02, "{r:?}");
        // checkerboard at grid scale doubles its length under refinement
        let checker = |h: f64| {
            let gd = boxed(1.0, h);
            let u = Field::from_shape_fn(gd.shape(), |(iy, ix)| ((ix + iy) % 2) as f64);
            extract_interface(&u, &gd, 0.5, 0, &InterfaceOptions::default()).unwrap()
        };
        assert!(!interface_length_stability(&checker(1.0 / 16.0), &checker(1.0 / 32.0), 0.05).pass);
    }

    /// A wedge of opening `theta` with tip at the origin pointing along +x
    /// and the set at distance >= 1 from it, as distance-like fields.
    fn wedge_pair(h: f64, theta: f64) -> (GridDomain, Field, Field) {
        let gd = boxed(3.0, h);
        let half = theta / 2.0;
        // signed distance to the wedge {angle(x - tip) within pi - half of pi}
        let wedge_dist = move |x: f64, y: f64| {
            let phi = y.atan2(-x).abs();
            if phi <= half {
                // inside: distance to the sides
                -(x.hypot(y) * (half - phi).sin())
            } else if phi <= half + PI / 2.0 {
                x.hypot(y) * (phi - half).sin()
            } else {
                x.hypot(y)
            }
        };
        let u1 = gd.field_from(|x, y| (-wedge_dist(x, y)).max(0.0));
        let u2 = gd.field_from(|x, y| (wedge_dist(x, y) - 1.0).max(0.0));
        (gd, u1, u2)
    }

    #[test]
    fn wedge_has_one_singular_point() {
        let h = 1.0 / 64.0;
        let (gd, u1, u2) = wedge_pair(h, PI / 2.0);
        let opts = InterfaceOptions::default();
        let i1 = extract_interface(&u1, &gd, 1e-9, 0, &opts).unwrap();
        let i2 = extract_interface(&u2, &gd, 1e-9, 1, &opts).unwrap();
        let sp = detect_singular_points(&i1, &i2, &Norm::Euclidean, h, &SingularOptions::default());
        assert_eq!(sp.len(), 1, "{sp:?}");
        let s = &sp[0];
        assert!(s.location[0].hypot(s.location[1]) < 2.0 * h);
        assert!((s.theta - PI / 2.0).abs() <= 10f64.to_radians(), "{}", s.theta);
        assert!((s.partner_angle - s.theta).abs() <= 10f64.to_radians(), "{} {}", s.partner_angle, s.theta);
        assert!((s.distance - 1.0).abs() <= 2.0 * h);
    }

    #[test]
    fn parallel_lines_have_no_singular_points() {
        let h = 1.0 / 32.0;
        let gd = boxed(2.0, h);
        let u1 = gd.field_from(|x, _| (-0.5 - x).max(0.0));
        let u2 = gd.field_from(|x, _| (x - 0.5).max(0.0));
        let opts = InterfaceOptions::default();
        let i1 = extract_interface(&u1, &gd, 1e-9, 0, &opts).unwrap();
        let i2 = extract_interface(&u2, &gd, 1e-9, 1, &opts).unwrap();
        assert!(detect_singular_points(&i1, &i2, &Norm::Euclidean, h, &SingularOptions::default()).is_empty());
    }

    #[test]
    fn cone_exponents() {
        assert_eq!(cone_growth_exponent(PI).unwrap(), 0.0);
        assert!((cone_growth_exponent(PI / 2.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(cone_growth_exponent(0.0), Err(Error::ZeroAngle)));
    }

    #[test]
    fn wedge_harmonic_growth() {
        let gd = boxed(2.0, 1.0 / 128.0);
        for theta0 in [PI / 2.0, 2.0 * PI / 3.0, PI] {
            let alpha = cone_growth_exponent(theta0).unwrap();
            let u = gd.field_from(|x, y| {
                let phi = y.atan2(x);
                if phi >= 0.0 && phi <= theta0 {
                    x.hypot(y).powf(1.0 + alpha) * ((1.0 + alpha) * phi).sin()
                } else {
                    0.0
                }
            });
            let radii: Vec<f64> = (0..10).map(|k| 0.2 * 1.25f64.powi(k)).collect();
            let fit = fit_radial_growth(&u, &gd, [0.0, 0.0], theta0 / 2.0, &radii).unwrap();
            assert!((fit.slope - (1.0 + alpha)).abs() <= 0.05, "{theta0}: {}", fit.slope);
        }
    }

    #[test]
    fn fb_condition_on_rings() {
        // limit profiles of the radial problem with R = 2 on a full disk lattice
        let gd = boxed(6.5, 1.0 / 64.0);
        let u1 = gd.field_from(|x, y| {
            let r = x.hypot(y);
            if r < 2.0 { (2.0 / r).ln() / 2f64.ln() } else { 0.0 }
        });
        let u2 = gd.field_from(|x, y| {
            let r = x.hypot(y);
            if r > 3.0 { (r / 3.0).ln() / 2f64.ln() } else { 0.0 }
        });
        let opts = InterfaceOptions::default();
        let i1 = extract_interface(&u1, &gd, 1e-9, 0, &opts).unwrap();
        let i2 = extract_interface(&u2, &gd, 1e-9, 1, &opts).unwrap();
        let i1 = InterfaceSet { curves: i1.curves.into_iter().filter(|c| c.points[0][0].hypot(c.points[0][1]) > 1.5).collect(), ..i1 };
        let r = check_fb_condition(&i1, &i2, &Norm::Euclidean, gd.h, 0.1).unwrap();
        assert!((r.predicted - 1.5).abs() < 0.02, "{r:?}");
        assert!(r.pass, "measured {} predicted {}", r.measured, r.predicted);
        // near-focal curvature
        let mut bent = i1.clone();
        bent.curves[0].kappa[0] = 0.95;
        assert!(matches!(check_fb_condition(&bent, &i2, &Norm::Euclidean, gd.h, 0.1), Err(Error::CurvatureNearFocal { .. })));
    }

    #[test]
    fn area_ratio_examples() {
        for (radius, want) in [(2.0, 1.5), (4.0, 1.25)] {
            let (_, _, set) = cone_interface(1.0 / 32.0, radius);
            let c = &set.curves[0];
            let r = check_area_ratio(c, 10..c.len() / 4, 0.05).unwrap();
            assert!((r.measured - want).abs() <= 0.05 * want, "{r:?}");
            assert!(r.pass);
        }
        let gd = boxed(2.0, 1.0 / 32.0);
        let u = gd.field_from(|x, _| (0.3 - x).max(0.0));
        let set = extract_interface(&u, &gd, 1e-9, 0, &InterfaceOptions::default()).unwrap();
        let c = &set.curves[0];
        let r = check_area_ratio(c, 10..c.len() - 10, 0.02).unwrap();
        assert!((r.measured - 1.0).abs() <= 0.02 && r.pass, "{r:?}");
    }

    #[test]
    fn mass_balance_on_flat_pair() {
        let gd = boxed(3.0, 1.0 / 32.0);
        // identical kinks mirrored across x = 0
        let u1 = gd.field_from(|x, _| (-0.5 - x).max(0.0) + (-x - 0.5).max(0.0) * 0.0);
        let u2 = gd.field_from(|x, _| (x - 0.5).max(0.0));
        let i1 = extract_interface(&u1, &gd, 1e-9, 0, &InterfaceOptions::default()).unwrap();
        let (d, e) = transported_patches(&i1, &gd, 0.3, |p| p[1].abs() < 1.0).unwrap();
        let r = check_mass_balance(&u1, &u2, &d, &e, &gd, 0.05).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.mass1 > 0.0);
        let tiny = Mask::from_elem(gd.shape(), false);
        assert!(matches!(check_mass_balance(&u1, &u2, &tiny, &e, &gd, 0.05), Err(Error::PatchTooSmall { .. })));
    }

    #[test]
    fn laplacian_mass_is_the_boundary_flux() {
        // u = r^2/4 has Delta u = 1, so the mass is the patch area
        let gd = boxed(3.0, 1.0 / 32.0);
        let u = gd.field_from(|x, y| (x * x + y * y) / 4.0);
        let patch = gd.mask_from(|x, y| x.hypot(y) < 1.0);
        let area = patch.iter().filter(|&&b| b).count() as f64 * gd.h * gd.h;
        assert!((laplacian_mass(&u, &patch, &gd) - area).abs() < 1e-9);
    }

    #[test]
    fn decay_fit() {
        let gd = GridDomain::build(
            &DomainSpec { shape: DomainShape::Rectangle { width: 4.0, height: 4.0 }, h: 1.0 / 32.0, symmetric: false },
            &Norm::Euclidean,
        )
        .unwrap();
        let f = Field::zeros(gd.shape());
        let fields: Vec<(f64, Field)> = [0.2, 0.1, 0.05]
            .iter()
            .map(|&e: &f64| (e, gd.field_from(|_, _| (-0.3 / e).exp())))
            .collect();
        let samples: Vec<DecaySample> = fields.iter().map(|(e, u)| DecaySample { epsilon: *e, gd: &gd, u, f: &f }).collect();
        let probe = [2.0, 2.0];
        let fit = fit_decay(&samples, probe).unwrap();
        assert!((fit.slope + 0.3).abs() < 1e-9 && fit.r2 > 0.999);
        let strip = gd.strip();
        let fs = Field::from_shape_fn(gd.shape(), |ij| if strip[ij] { 1.0 } else { 0.0 });
        let bad: Vec<DecaySample> = samples.iter().map(|s| DecaySample { f: &fs, ..*s }).collect();
        let ((iy, ix), _) = strip.indexed_iter().find(|(_, &b)| b).unwrap();
        let p = gd.center(ix, iy);
        assert!(matches!(fit_decay(&bad, p), Err(Error::ProbeOutsideDecayRegion(_))));
        assert!(fit_decay(&samples[..2], probe).is_err());
    }

    #[test]
    fn gradient_bound_uses_held_out_stage() {
        let ok = vec![vec![(0.5, 1.0), (1.0, 0.9)], vec![(0.5, 1.05), (1.0, 0.8)]];
        assert!(check_gradient_bound(&ok, 0.1).unwrap().pass);
        let grows = vec![vec![(0.5, 1.0)], vec![(0.5, 1.2)]];
        assert!(!check_gradient_bound(&grows, 0.1).unwrap().pass);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn threshold_robust_on_kinked_profiles(slope in 0.2f64..3.0, r0 in 1.0f64..2.0, delta in 1e-4f64..1e-2) {
            let gd = boxed(3.0, 1.0 / 32.0);
            let u = gd.field_from(|x, y| slope * (r0 - x.hypot(y)).max(0.0));
            let a = extract_interface(&u, &gd, support_threshold(&u, &gd, 1e-12, delta), 0, &InterfaceOptions::default()).unwrap();
            let b = extract_interface(&u, &gd, support_threshold(&u, &gd, 1e-12, delta / 2.0), 0, &InterfaceOptions::default()).unwrap();
            let ra = a.curves[0].points.iter().map(|p| p[0].hypot(p[1])).sum::<f64>() / a.curves[0].len() as f64;
            let rb = b.curves[0].points.iter().map(|p| p[0].hypot(p[1])).sum::<f64>() / b.curves[0].len() as f64;
            proptest::prop_assert!((ra - rb).abs() <= 2.0 * gd.h);
        }

        #[test]
        fn separation_is_symmetric(ax in -2.0f64..-0.5, bx in 0.5f64..2.0, r in 0.1f64..0.4) {
            let gd = boxed(3.0, 1.0 / 16.0);
            let a = gd.mask_from(|x, y| (x - ax).hypot(y) < r);
            let b = gd.mask_from(|x, y| (x - bx).hypot(y) < r);
            let norm = Norm::Ellipse { a_x: 1.3, a_y: 1.0 };
            let ab = support_separation(&[a.clone(), b.clone()], &norm, &gd).unwrap();
            let ba = support_separation(&[b, a], &norm, &gd).unwrap();
            proptest::prop_assert_eq!(ab[0][1], ba[0][1]);
        }
    }
}
