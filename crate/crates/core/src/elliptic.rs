//! Screened Poisson problems `Delta v = c v` on a masked lattice with
//! Dirichlet values on the surrounding cells.
//!
//! The 5-point operator is assembled in cell units, `h^2 (-Delta + c)`, with
//! the Dirichlet cells eliminated, which keeps it symmetric positive
//! definite for `c >= 0`. Solved by preconditioned conjugate gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, GridDomain, Mask, Symmetry};

const NONE: u32 = u32::MAX;
/// Coarsest multigrid level is factorized densely below this size.
const COARSEST: usize = 400;
const SMOOTHING_SWEEPS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum Preconditioner {
    #[default]
    Jacobi,
    /// One symmetric V-cycle with red-black Gauss-Seidel smoothing.
    Multigrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct LinearSolverConfig {
    /// Stop when `|A v - b|_inf <= tol * |b|_inf` in cell units.
    pub tol: f64,
    pub max_iter: usize,
    pub preconditioner: Preconditioner,
}

impl Default for LinearSolverConfig {
    fn default() -> Self {
        LinearSolverConfig { tol: 1e-10, max_iter: 50_000, preconditioner: Preconditioner::Jacobi }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone)]
struct Level {
    nx: usize,
    ny: usize,
    h: f64,
    /// unknown -> cell
    cells: Vec<u32>,
    /// cell -> unknown
    index: Vec<u32>,
    nbr: Vec<[u32; 4]>,
    /// neighbours other than the cell itself, Dirichlet ones included
    ncount: Vec<f64>,
    red: Vec<u32>,
    black: Vec<u32>,
}

fn fold(i: i64, n: usize, mirror: bool) -> Option<usize> {
    let j = if i < 0 && mirror { -1 - i } else { i };
    (j >= 0 && (j as usize) < n).then_some(j as usize)
}

const DIRS: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];

impl Level {
    fn new(nx: usize, ny: usize, h: f64, sym: Symmetry, unknown: impl Fn(usize, usize) -> bool) -> Level {
        let mut index = vec![NONE; nx * ny];
        let mut cells = Vec::new();
        for iy in 0..ny {
            for ix in 0..nx {
                if unknown(ix, iy) {
                    index[iy * nx + ix] = cells.len() as u32;
                    cells.push((iy * nx + ix) as u32);
                }
            }
        }
        let mut nbr = Vec::with_capacity(cells.len());
        let mut ncount = Vec::with_capacity(cells.len());
        let mut red = Vec::new();
        let mut black = Vec::new();
        for (p, &cell) in cells.iter().enumerate() {
            let (ix, iy) = (cell as usize % nx, cell as usize / nx);
            let mut nb = [NONE; 4];
            let mut count = 0.0;
            for (k, &(dx, dy)) in DIRS.iter().enumerate() {
                match (fold(ix as i64 + dx, nx, sym.mirror_x), fold(iy as i64 + dy, ny, sym.mirror_y)) {
                    (Some(jx), Some(jy)) => {
                        if (jx, jy) == (ix, iy) {
                            continue;
                        }
                        count += 1.0;
                        nb[k] = index[jy * nx + jx];
                    }
                    _ => count += 1.0,
                }
            }
            nbr.push(nb);
            ncount.push(count);
            if (ix + iy) % 2 == 0 {
                red.push(p as u32);
            } else {
                black.push(p as u32);
            }
        }
        Level { nx, ny, h, cells, index, nbr, ncount, red, black }
    }

    fn n(&self) -> usize {
        self.cells.len()
    }

    fn matvec(&self, diag: &[f64], x: &[f64], y: &mut [f64]) {
        for p in 0..self.n() {
            let mut s = diag[p] * x[p];
            for &q in &self.nbr[p] {
                if q != NONE {
                    s -= x[q as usize];
                }
            }
            y[p] = s;
        }
    }

    fn gs_color(&self, color: &[u32], diag: &[f64], b: &[f64], x: &mut [f64]) {
        for &p in color {
            let p = p as usize;
            let mut s = b[p];
            for &q in &self.nbr[p] {
                if q != NONE {
                    s += x[q as usize];
                }
            }
            x[p] = s / diag[p];
        }
    }
}

/// Prolongation stencil of a fine unknown: up to four coarse unknowns.
fn prolong_stencil(fine: &Level, coarse: &Level, sym: Symmetry, p: usize) -> [(u32, f64); 4] {
    let cell = fine.cells[p] as usize;
    let (ix, iy) = (cell % fine.nx, cell / fine.nx);
    let (cx, cy) = ((ix / 2) as i64, (iy / 2) as i64);
    let dx = if ix % 2 == 0 { -1 } else { 1 };
    let dy = if iy % 2 == 0 { -1 } else { 1 };
    let at = |x: i64, y: i64| -> u32 {
        match (fold(x, coarse.nx, sym.mirror_x), fold(y, coarse.ny, sym.mirror_y)) {
            (Some(a), Some(b)) => coarse.index[b * coarse.nx + a],
            _ => NONE,
        }
    };
    [
        (at(cx, cy), 9.0 / 16.0),
        (at(cx + dx, cy), 3.0 / 16.0),
        (at(cx, cy + dy), 3.0 / 16.0),
        (at(cx + dx, cy + dy), 1.0 / 16.0),
    ]
}

/// Sparsity and hierarchy of the operator on a fixed unknown mask; reusable
/// across coefficient fields.
#[derive(Debug, Clone)]
pub struct ScreenedStructure {
    sym: Symmetry,
    levels: Vec<Level>,
    /// per level > 0, prolongation stencils of the finer level's unknowns
    prolong: Vec<Vec<[(u32, f64); 4]>>,
}

impl ScreenedStructure {
    pub fn new(gd: &GridDomain, unknown: &Mask, multigrid: bool) -> ScreenedStructure {
        let sym = gd.symmetry;
        let fine = Level::new(gd.nx, gd.ny, gd.h, sym, |ix, iy| unknown[[iy, ix]]);
        let mut levels = vec![fine];
        let mut prolong = Vec::new();
        while multigrid && levels.last().unwrap().n() > COARSEST && levels.len() < 24 {
            let f = levels.last().unwrap();
            if f.nx == 1 && f.ny == 1 {
                break;
            }
            let (cnx, cny) = (f.nx.div_ceil(2), f.ny.div_ceil(2));
            let coarse = Level::new(cnx, cny, 2.0 * f.h, sym, |cx, cy| {
                (0..2).any(|a| {
                    (0..2).any(|b| {
                        let (x, y) = (2 * cx + a, 2 * cy + b);
                        x < f.nx && y < f.ny && f.index[y * f.nx + x] != NONE
                    })
                })
            });
            let st = (0..f.n()).map(|p| prolong_stencil(f, &coarse, sym, p)).collect();
            prolong.push(st);
            levels.push(coarse);
        }
        ScreenedStructure { sym, levels, prolong }
    }

    pub fn unknowns(&self) -> usize {
        self.levels[0].n()
    }

    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    /// Solves `Delta v = c v` on the unknown cells with `v = bdry` on the
    /// other cells. Returns the full field (Dirichlet cells copied from
    /// `bdry`).
    pub fn solve(
        &self,
        c: &Field,
        bdry: &Field,
        cfg: &LinearSolverConfig,
        initial: Option<&Field>,
    ) -> Result<(Field, SolveStats)> {
        let fine = &self.levels[0];
        let n = fine.n();
        let h2 = fine.h * fine.h;
        let c_flat = c.as_slice().expect("standard layout");
        let b_flat = bdry.as_slice().expect("standard layout");
        let mut coeff = Vec::with_capacity(n);
        for &cell in &fine.cells {
            let v = c_flat[cell as usize];
            if !(v >= 0.0) {
                return Err(Error::NegativeCoefficient { cell: cell as usize, value: v });
            }
            coeff.push(v);
        }
        let mut out = bdry.clone();
        if n == 0 {
            return Ok((out, SolveStats::default()));
        }
        // right-hand side from the Dirichlet neighbours
        let mut rhs = vec![0.0; n];
        for (p, &cell) in fine.cells.iter().enumerate() {
            let (ix, iy) = (cell as usize % fine.nx, cell as usize / fine.nx);
            for (k, &(dx, dy)) in DIRS.iter().enumerate() {
                if fine.nbr[p][k] != NONE {
                    continue;
                }
                if let (Some(jx), Some(jy)) =
                    (fold(ix as i64 + dx, fine.nx, self.sym.mirror_x), fold(iy as i64 + dy, fine.ny, self.sym.mirror_y))
                {
                    if (jx, jy) != (ix, iy) {
                        rhs[p] += b_flat[jy * fine.nx + jx];
                    }
                }
            }
        }
        let diag: Vec<f64> = (0..n).map(|p| fine.ncount[p] + h2 * coeff[p]).collect();
        let bnorm = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut x: Vec<f64> = match initial {
            Some(init) => {
                let s = init.as_slice().expect("standard layout");
                fine.cells.iter().map(|&cell| s[cell as usize]).collect()
            }
            None => vec![0.0; n],
        };
        let stats = if bnorm == 0.0 {
            x.iter_mut().for_each(|v| *v = 0.0);
            SolveStats::default()
        } else {
            let pre = match cfg.preconditioner {
                Preconditioner::Jacobi => Precond::Jacobi(diag.iter().map(|d| 1.0 / d).collect()),
                Preconditioner::Multigrid if self.levels.len() > 1 => Precond::Multigrid(self.hierarchy(diag.clone(), &coeff)),
                Preconditioner::Multigrid => Precond::Dense(Cholesky::new(fine, &diag)),
            };
            pcg(fine, &diag, &rhs, &mut x, &pre, cfg.tol * bnorm, cfg.max_iter)?
        };
        // maximum principle: 0 <= v <= max bdry for nonnegative data
        let bmin = b_flat.iter().fold(f64::INFINITY, |m, &v| m.min(v));
        let bmax = b_flat.iter().fold(0.0f64, |m, &v| m.max(v));
        let o = out.as_slice_mut().expect("standard layout");
        for (p, &cell) in fine.cells.iter().enumerate() {
            o[cell as usize] = if bmin >= 0.0 { x[p].clamp(0.0, bmax) } else { x[p] };
        }
        Ok((out, stats))
    }

    fn hierarchy(&self, fine_diag: Vec<f64>, fine_coeff: &[f64]) -> Hierarchy<'_> {
        let mut diags = vec![fine_diag];
        let mut coeff = fine_coeff.to_vec();
        for l in 1..self.levels.len() {
            let (f, c) = (&self.levels[l - 1], &self.levels[l]);
            let mut sum = vec![0.0; c.n()];
            let mut cnt = vec![0.0; c.n()];
            for (p, &cell) in f.cells.iter().enumerate() {
                let (ix, iy) = (cell as usize % f.nx, cell as usize / f.nx);
                let q = c.index[(iy / 2) * c.nx + ix / 2] as usize;
                sum[q] += coeff[p];
                cnt[q] += 1.0;
            }
            coeff = sum.iter().zip(&cnt).map(|(s, k)| s / k).collect();
            let h2 = c.h * c.h;
            diags.push((0..c.n()).map(|q| c.ncount[q] + h2 * coeff[q]).collect());
        }
        let last = self.levels.len() - 1;
        let chol = Cholesky::new(&self.levels[last], &diags[last]);
        Hierarchy { structure: self, diags, coarsest: chol }
    }
}

struct Hierarchy<'a> {
    structure: &'a ScreenedStructure,
    diags: Vec<Vec<f64>>,
    coarsest: Cholesky,
}

impl Hierarchy<'_> {
    fn vcycle(&self, l: usize, b: &[f64], x: &mut [f64]) {
        let s = self.structure;
        let lev = &s.levels[l];
        if l + 1 == s.levels.len() {
            x.copy_from_slice(&self.coarsest.solve(b));
            return;
        }
        let diag = &self.diags[l];
        x.iter_mut().for_each(|v| *v = 0.0);
        for _ in 0..SMOOTHING_SWEEPS {
            lev.gs_color(&lev.red, diag, b, x);
            lev.gs_color(&lev.black, diag, b, x);
        }
        let mut r = vec![0.0; lev.n()];
        lev.matvec(diag, x, &mut r);
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri = bi - *ri;
        }
        let coarse = &s.levels[l + 1];
        let st = &s.prolong[l];
        let mut rc = vec![0.0; coarse.n()];
        for (p, stencil) in st.iter().enumerate() {
            for &(q, w) in stencil {
                if q != NONE {
                    rc[q as usize] += w * r[p];
                }
            }
        }
        let mut ec = vec![0.0; coarse.n()];
        self.vcycle(l + 1, &rc, &mut ec);
        for (p, stencil) in st.iter().enumerate() {
            for &(q, w) in stencil {
                if q != NONE {
                    x[p] += w * ec[q as usize];
                }
            }
        }
        for _ in 0..SMOOTHING_SWEEPS {
            lev.gs_color(&lev.black, diag, b, x);
            lev.gs_color(&lev.red, diag, b, x);
        }
    }
}

/// Dense Cholesky factor of a small level operator.
struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    fn new(lev: &Level, diag: &[f64]) -> Cholesky {
        let n = lev.n();
        let mut a = vec![0.0; n * n];
        for p in 0..n {
            a[p * n + p] = diag[p];
            for &q in &lev.nbr[p] {
                if q != NONE {
                    a[p * n + q as usize] -= 1.0;
                }
            }
        }
        for j in 0..n {
            let mut d = a[j * n + j];
            for k in 0..j {
                d -= a[j * n + k] * a[j * n + k];
            }
            let d = d.max(f64::MIN_POSITIVE).sqrt();
            a[j * n + j] = d;
            for i in j + 1..n {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= a[i * n + k] * a[j * n + k];
                }
                a[i * n + j] = s / d;
            }
        }
        Cholesky { n, l: a }
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        y
    }
}

enum Precond<'a> {
    Jacobi(Vec<f64>),
    Multigrid(Hierarchy<'a>),
    Dense(Cholesky),
}

impl Precond<'_> {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        match self {
            Precond::Jacobi(inv) => {
                for ((zi, ri), di) in z.iter_mut().zip(r).zip(inv) {
                    *zi = ri * di;
                }
            }
            Precond::Multigrid(hier) => hier.vcycle(0, r, z),
            Precond::Dense(ch) => z.copy_from_slice(&ch.solve(r)),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn pcg(lev: &Level, diag: &[f64], b: &[f64], x: &mut [f64], pre: &Precond, tol: f64, max_iter: usize) -> Result<SolveStats> {
    let n = b.len();
    let mut r = vec![0.0; n];
    lev.matvec(diag, x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut z = vec![0.0; n];
    let mut ap = vec![0.0; n];
    let mut res = max_abs(&r);
    if res <= tol {
        return Ok(SolveStats { iterations: 0, residual: res });
    }
    pre.apply(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 1..=max_iter {
        lev.matvec(diag, &p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::SolverDiverged { iterations: it, residual: res });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        res = max_abs(&r);
        if !res.is_finite() {
            return Err(Error::SolverDiverged { iterations: it, residual: res });
        }
        if res <= tol {
            return Ok(SolveStats { iterations: it, residual: res });
        }
        pre.apply(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::SolverDiverged { iterations: max_iter, residual: res })
}

/// One-shot solve on `unknown` with Dirichlet data `bdry` elsewhere.
pub fn solve_screened(
    gd: &GridDomain,
    unknown: &Mask,
    c: &Field,
    bdry: &Field,
    cfg: &LinearSolverConfig,
    initial: Option<&Field>,
) -> Result<(Field, SolveStats)> {
    let st = ScreenedStructure::new(gd, unknown, cfg.preconditioner == Preconditioner::Multigrid);
    st.solve(c, bdry, cfg, initial)
}

/// `h^2 (Delta v - c v)` at every unknown cell, in cell units, mirrored
/// neighbours folded and cells beyond the grid reading 0.
pub fn screened_residual(gd: &GridDomain, unknown: &Mask, c: &Field, v: &Field) -> Field {
    let h2 = gd.h * gd.h;
    let mut out = Field::zeros(gd.shape());
    for ((iy, ix), &m) in unknown.indexed_iter() {
        if !m {
            continue;
        }
        let mut lap = 0.0;
        for &(dx, dy) in &DIRS {
            match gd.resolve(ix as i64 + dx, iy as i64 + dy) {
                Some((jx, jy)) => lap += v[[jy, jx]] - v[[iy, ix]],
                None => lap -= v[[iy, ix]],
            }
        }
        out[[iy, ix]] = lap - h2 * c[[iy, ix]] * v[[iy, ix]];
    }
    out
}
