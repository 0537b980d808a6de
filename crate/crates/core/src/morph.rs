//! Row decomposition of balls and padded-row helpers shared by the ball
//! morphology and the fast paths of the interaction operator.

use ndarray::Array2;
use rayon::prelude::*;

use crate::grid::{GridDomain, Mask};
use crate::norm::Norm;

/// A convex symmetric ball as horizontal runs `(dy, lo..=hi)` in cell units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BallRows {
    pub rows: Vec<(i64, i64, i64)>,
    pub reach: i64,
}

impl BallRows {
    pub fn len(&self) -> usize {
        self.rows.iter().map(|&(_, lo, hi)| (hi - lo + 1) as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Offsets `d` with `rho(d) <= r` (closed) or `rho(d) < r` (open), `r` in
/// cell units.
pub fn ball_rows(norm: &Norm, r: f64, closed: bool) -> BallRows {
    let reach = r.ceil() as i64 + 1;
    let inside = |dx: i64, dy: i64| {
        let v = norm.eval(dx as f64, dy as f64);
        if closed {
            v <= r * (1.0 + 1e-12)
        } else {
            v < r
        }
    };
    let mut rows = Vec::new();
    let mut max_reach = 0;
    for dy in -reach..=reach {
        let xs: Vec<i64> = (-reach..=reach).filter(|&dx| inside(dx, dy)).collect();
        if let (Some(&lo), Some(&hi)) = (xs.first(), xs.last()) {
            debug_assert_eq!(xs.len() as i64, hi - lo + 1, "ball rows must be intervals");
            rows.push((dy, lo, hi));
            max_reach = max_reach.max(dy.abs()).max(lo.abs()).max(hi.abs());
        }
    }
    BallRows { rows, reach: max_reach }
}

/// Copy of `src` padded by `pad` cells on every side; padding reads through
/// the mirrors or takes `fill`.
pub fn pad<T: Copy + Send + Sync>(src: &Array2<T>, pad: usize, gd: &GridDomain, fill: T) -> Array2<T> {
    let (ny, nx) = src.dim();
    let p = pad as i64;
    Array2::from_shape_fn((ny + 2 * pad, nx + 2 * pad), |(py, px)| {
        match gd.resolve(px as i64 - p, py as i64 - p) {
            Some((ix, iy)) => src[[iy, ix]],
            None => fill,
        }
    })
}

/// `out(x) = OR over the ball of mask(x + d)`; cells beyond the grid (and
/// not mirrored) read `outside`.
pub fn dilate(mask: &Mask, ball: &BallRows, gd: &GridDomain, outside: bool) -> Mask {
    let (ny, nx) = mask.dim();
    let p = ball.reach.max(0) as usize;
    let padded = pad(mask, p, gd, outside);
    let pw = nx + 2 * p;
    // row prefix counts
    let prefix: Vec<Vec<u32>> = padded
        .outer_iter()
        .map(|row| {
            let mut acc = Vec::with_capacity(pw + 1);
            acc.push(0u32);
            let mut s = 0u32;
            for &b in row.iter() {
                s += b as u32;
                acc.push(s);
            }
            acc
        })
        .collect();
    let mut out = Mask::from_elem((ny, nx), false);
    out.as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(nx)
        .enumerate()
        .for_each(|(iy, row)| {
            for (ix, o) in row.iter_mut().enumerate() {
                *o = ball.rows.iter().any(|&(dy, lo, hi)| {
                    let pr = &prefix[(iy as i64 + p as i64 + dy) as usize];
                    let a = (ix as i64 + p as i64 + lo) as usize;
                    let b = (ix as i64 + p as i64 + hi) as usize + 1;
                    pr[b] > pr[a]
                });
            }
        });
    out
}
