//! The interaction operator `H`: weighted integral of `w^p` over the open
//! unit ball, or the supremum of `w` over it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, GridDomain, Mask, MIN_BALL_SPAN};
use crate::morph::{ball_rows, pad, BallRows};
use crate::norm::Norm;

/// Radial weight `phi(rho)` of the integral form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Kernel {
    Constant,
    /// `c (1 - rho)^q`
    Decay { c: f64, q: f64 },
}

impl Kernel {
    pub fn eval(&self, rho: f64) -> f64 {
        match *self {
            Kernel::Constant => 1.0,
            Kernel::Decay { c, q } => c * (1.0 - rho).max(0.0).powf(q),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum HForm {
    Integral { p: f64, kernel: Kernel },
    Sup,
}

impl Default for HForm {
    fn default() -> Self {
        HForm::Integral { p: 1.0, kernel: Kernel::Constant }
    }
}

impl HForm {
    /// Integrand exponent; 1 for the sup form.
    pub fn p(&self) -> f64 {
        match *self {
            HForm::Integral { p, .. } => p,
            HForm::Sup => 1.0,
        }
    }
}

/// Which evaluation path `apply_h` takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum HPath {
    /// Row-decomposed path when the form allows it.
    #[default]
    Auto,
    Direct,
    Fast,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BallStencil {
    pub form: HForm,
    pub h: f64,
    /// Offsets in cell units, row by row.
    pub offsets: Vec<(i64, i64)>,
    /// `h^2 phi(rho(d h))` for the integral form, 1 for the sup form.
    pub weights: Vec<f64>,
    pub rows: BallRows,
}

pub fn build_ball_stencil(norm: &Norm, h: f64, form: HForm) -> Result<BallStencil> {
    norm.validate()?;
    let (ex, ey) = norm.axis_extent();
    let span = ((2.0 * ex.min(ey) / h) + 1e-9).floor() as usize;
    if span < MIN_BALL_SPAN {
        return Err(Error::ResolutionTooCoarse { cells: span, needed: MIN_BALL_SPAN });
    }
    if let HForm::Integral { p, kernel } = form {
        if !(p >= 1.0) {
            return Err(Error::InvalidInput(format!("integrand exponent {p} < 1")));
        }
        if let Kernel::Decay { c, q } = kernel {
            if !(c > 0.0 && q >= 0.0) {
                return Err(Error::InvalidInput("kernel needs c > 0 and q >= 0".into()));
            }
        }
    }
    let rows = ball_rows(norm, 1.0 / h, false);
    let mut offsets = Vec::with_capacity(rows.len());
    let mut weights = Vec::with_capacity(rows.len());
    for &(dy, lo, hi) in &rows.rows {
        for dx in lo..=hi {
            offsets.push((dx, dy));
            weights.push(match form {
                HForm::Integral { kernel, .. } => h * h * kernel.eval(norm.eval(dx as f64 * h, dy as f64 * h)),
                HForm::Sup => 1.0,
            });
        }
    }
    Ok(BallStencil { form, h, offsets, weights, rows })
}

impl BallStencil {
    pub fn sum_weights(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn reach(&self) -> usize {
        self.rows.reach as usize
    }

    pub fn fast_path_available(&self) -> bool {
        matches!(self.form, HForm::Sup | HForm::Integral { kernel: Kernel::Constant, .. })
    }
}

/// `H(w)` at the target cells (0 elsewhere). `w` is read on the extended
/// mask; cells off it, or beyond the grid and not mirrored, read 0.
pub fn apply_h(w: &Field, st: &BallStencil, gd: &GridDomain, target: &Mask, path: HPath) -> Field {
    let fast = match path {
        HPath::Direct => false,
        HPath::Fast | HPath::Auto => st.fast_path_available(),
    };
    let p = st.form.p();
    let source = Field::from_shape_fn(gd.shape(), |ij| {
        if gd.extended[ij] {
            let v = w[ij].max(0.0);
            if p == 1.0 {
                v
            } else {
                v.powf(p)
            }
        } else {
            0.0
        }
    });
    let r = st.reach();
    let padded = pad(&source, r, gd, 0.0);
    let pw = gd.nx + 2 * r;
    let padded = padded.as_slice().expect("standard layout");
    let mut out = Field::zeros(gd.shape());
    let nx = gd.nx;
    out.as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(nx)
        .enumerate()
        .for_each(|(iy, row)| {
            let tmask = target.row(iy);
            if !tmask.iter().any(|&t| t) {
                return;
            }
            let prow = |dy: i64| {
                let y = (iy as i64 + r as i64 + dy) as usize;
                &padded[y * pw..(y + 1) * pw]
            };
            match (st.form, fast) {
                (HForm::Sup, false) => {
                    for (ix, o) in row.iter_mut().enumerate() {
                        if !tmask[ix] {
                            continue;
                        }
                        let mut m = 0.0f64;
                        for &(dy, lo, hi) in &st.rows.rows {
                            let src = prow(dy);
                            let a = (ix as i64 + r as i64 + lo) as usize;
                            let b = (ix as i64 + r as i64 + hi) as usize;
                            for &v in &src[a..=b] {
                                m = m.max(v);
                            }
                        }
                        *o = m;
                    }
                }
                (HForm::Sup, true) => {
                    let mut acc = vec![0.0f64; nx];
                    let mut g = vec![0.0f64; pw];
                    let mut hmax = vec![0.0f64; pw];
                    for &(dy, lo, hi) in &st.rows.rows {
                        let src = prow(dy);
                        let k = (hi - lo + 1) as usize;
                        block_prefix_max(src, k, &mut g, &mut hmax);
                        for (ix, a) in acc.iter_mut().enumerate() {
                            let s = (ix as i64 + r as i64 + lo) as usize;
                            let m = hmax[s].max(g[s + k - 1]);
                            *a = a.max(m);
                        }
                    }
                    for (ix, o) in row.iter_mut().enumerate() {
                        if tmask[ix] {
                            *o = acc[ix];
                        }
                    }
                }
                (HForm::Integral { .. }, false) => {
                    for (ix, o) in row.iter_mut().enumerate() {
                        if !tmask[ix] {
                            continue;
                        }
                        let mut s = 0.0;
                        let mut k = 0;
                        for &(dy, lo, hi) in &st.rows.rows {
                            let src = prow(dy);
                            let a = (ix as i64 + r as i64 + lo) as usize;
                            let b = (ix as i64 + r as i64 + hi) as usize;
                            for &v in &src[a..=b] {
                                s += st.weights[k] * v;
                                k += 1;
                            }
                        }
                        *o = s;
                    }
                }
                (HForm::Integral { .. }, true) => {
                    let w0 = st.h * st.h;
                    let mut acc = vec![0.0f64; nx];
                    let mut prefix = vec![0.0f64; pw + 1];
                    for &(dy, lo, hi) in &st.rows.rows {
                        let src = prow(dy);
                        let mut s = 0.0;
                        for (k, &v) in src.iter().enumerate() {
                            s += v;
                            prefix[k + 1] = s;
                        }
                        for (ix, a) in acc.iter_mut().enumerate() {
                            let lo_i = (ix as i64 + r as i64 + lo) as usize;
                            let hi_i = (ix as i64 + r as i64 + hi) as usize + 1;
                            *a += prefix[hi_i] - prefix[lo_i];
                        }
                    }
                    for (ix, o) in row.iter_mut().enumerate() {
                        if tmask[ix] {
                            // prefix differences can leave rounding noise below 0
                            *o = (w0 * acc[ix]).max(0.0);
                        }
                    }
                }
            }
        });
    out
}

/// Van Herk / Gil-Werman block maxima: `g` runs forward within blocks of
/// length `k`, `hmax` backward, so any window of length `k` starting at `s`
/// has maximum `max(hmax[s], g[s + k - 1])`.
fn block_prefix_max(src: &[f64], k: usize, g: &mut [f64], hmax: &mut [f64]) {
    let n = src.len();
    for (i, &v) in src.iter().enumerate() {
        g[i] = if i % k == 0 { v } else { g[i - 1].max(v) };
    }
    for i in (0..n).rev() {
        hmax[i] = if i + 1 == n || (i + 1) % k == 0 { src[i] } else { hmax[i + 1].max(src[i]) };
    }
}

/// Straight double loop over the target cells and every offset, through
/// `GridDomain::resolve`; the reference the other paths are tested against.
pub fn apply_h_reference(w: &Field, st: &BallStencil, gd: &GridDomain, target: &Mask) -> Field {
    let p = st.form.p();
    Field::from_shape_fn(gd.shape(), |(iy, ix)| {
        if !target[[iy, ix]] {
            return 0.0;
        }
        let mut acc = 0.0f64;
        for (k, &(dx, dy)) in st.offsets.iter().enumerate() {
            let v = match gd.resolve(ix as i64 + dx, iy as i64 + dy) {
                Some((jx, jy)) if gd.extended[[jy, jx]] => w[[jy, jx]].max(0.0),
                _ => 0.0,
            };
            acc = match st.form {
                HForm::Sup => acc.max(v),
                HForm::Integral { .. } => acc + st.weights[k] * if p == 1.0 { v } else { v.powf(p) },
            };
        }
        acc
    })
}
