//! Lattice domains covering `Omega` and its unit strip, boundary data and
//! harmonic majorants.

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::elliptic::{solve_screened, LinearSolverConfig};
use crate::error::{Error, Result};
use crate::norm::{boundary_cells, with_images, Norm};

pub type Field = Array2<f64>;
pub type Mask = Array2<bool>;

/// Unit ball must span at least this many cells along each axis.
pub const MIN_BALL_SPAN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainShape {
    /// `(0, width) x (0, height)`.
    Rectangle { width: f64, height: f64 },
    /// `inner < |x| < outer`.
    Annulus { inner: f64, outer: f64 },
    /// `(0, width) x (-height/2, height/2)`.
    Strip { width: f64, height: f64 },
    /// `|x| < radius`.
    Disk { radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub shape: DomainShape,
    pub h: f64,
    /// Store only the fundamental region under the preset's mirror symmetry.
    #[serde(default)]
    pub symmetric: bool,
}

/// Reflections across the coordinate axes. A mirrored axis starts at 0 and
/// the reflection plane is the low edge of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Symmetry {
    /// reflect `x -> -x`
    pub mirror_x: bool,
    /// reflect `y -> -y`
    pub mirror_y: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridDomain {
    pub origin: [f64; 2],
    pub h: f64,
    pub nx: usize,
    pub ny: usize,
    pub omega: Mask,
    pub extended: Mask,
    pub symmetry: Symmetry,
    pub shape: Option<DomainShape>,
}

impl GridDomain {
    /// Bare lattice with empty masks.
    pub fn from_box(origin: [f64; 2], h: f64, nx: usize, ny: usize) -> Self {
        GridDomain {
            origin,
            h,
            nx,
            ny,
            omega: Mask::from_elem((ny, nx), false),
            extended: Mask::from_elem((ny, nx), false),
            symmetry: Symmetry::default(),
            shape: None,
        }
    }

    pub fn build(spec: &DomainSpec, norm: &Norm) -> Result<Self> {
        norm.validate()?;
        let h = spec.h;
        if !(h > 0.0) {
            return Err(Error::InvalidInput("grid spacing must be positive".into()));
        }
        let (ex, ey) = norm.axis_extent();
        let span = ((2.0 * ex.min(ey) / h) + 1e-9).floor() as usize;
        if span < MIN_BALL_SPAN {
            return Err(Error::ResolutionTooCoarse { cells: span, needed: MIN_BALL_SPAN });
        }
        // strip width in cells along each axis, plus one guard cell
        let mx = (ex / h - 1e-9).ceil() as usize + 1;
        let my = (ey / h - 1e-9).ceil() as usize + 1;
        let cells = |len: f64| (len / h - 1e-9).ceil() as usize;
        let pos = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!("{what} must be positive")))
            }
        };
        let mut gd = match spec.shape {
            DomainShape::Rectangle { width, height } => {
                pos(width, "width")?;
                pos(height, "height")?;
                let mut gd = GridDomain::from_box(
                    [-(mx as f64) * h, -(my as f64) * h],
                    h,
                    cells(width) + 2 * mx,
                    cells(height) + 2 * my,
                );
                gd.omega = gd.mask_from(|x, y| x > 0.0 && x < width && y > 0.0 && y < height);
                gd.extended = gd.mask_from(|x, y| {
                    norm.eval((-x).max(x - width).max(0.0), (-y).max(y - height).max(0.0)) <= 1.0
                });
                gd
            }
            DomainShape::Strip { width, height } => {
                pos(width, "width")?;
                pos(height, "height")?;
                if height < 4.0 {
                    return Err(Error::GeometryTooThin(format!("strip height {height} < 4")));
                }
                let half = 0.5 * height;
                let sym = spec.symmetric;
                let (oy, ny) = if sym {
                    (0.0, cells(half) + my)
                } else {
                    (-(half + my as f64 * h), cells(height) + 2 * my)
                };
                let mut gd = GridDomain::from_box([-(mx as f64) * h, oy], h, cells(width) + 2 * mx, ny);
                gd.symmetry.mirror_y = sym;
                gd.omega = gd.mask_from(|x, y| x > 0.0 && x < width && y.abs() < half);
                gd.extended = gd.mask_from(|x, y| {
                    norm.eval((-x).max(x - width).max(0.0), (y.abs() - half).max(0.0)) <= 1.0
                });
                gd
            }
            DomainShape::Annulus { inner, outer } => {
                pos(inner, "inner radius")?;
                if outer <= inner {
                    return Err(Error::InvalidInput("annulus needs inner < outer".into()));
                }
                if outer - inner <= 2.0 {
                    return Err(Error::GeometryTooThin(format!("annulus width {} <= 2", outer - inner)));
                }
                let reach = outer + ex.max(ey);
                let mut gd = Self::centered_box(h, reach, spec.symmetric, spec.symmetric, mx.max(my));
                gd.omega = gd.mask_from(|x, y| {
                    let r = x.hypot(y);
                    r > inner && r < outer
                });
                gd.extended = gd.round_extension(norm, |x, y| {
                    let r = x.hypot(y);
                    ((inner - r).max(r - outer)).max(0.0)
                })?;
                gd
            }
            DomainShape::Disk { radius } => {
                pos(radius, "radius")?;
                let reach = radius + ex.max(ey);
                let mut gd = Self::centered_box(h, reach, false, spec.symmetric, mx.max(my));
                gd.omega = gd.mask_from(|x, y| x.hypot(y) < radius);
                gd.extended = gd.round_extension(norm, |x, y| (x.hypot(y) - radius).max(0.0))?;
                gd
            }
        };
        gd.shape = Some(spec.shape);
        for (e, o) in gd.extended.iter_mut().zip(gd.omega.iter()) {
            *e |= *o;
        }
        Ok(gd)
    }

    fn centered_box(h: f64, reach: f64, mirror_x: bool, mirror_y: bool, guard: usize) -> Self {
        let n_half = (reach / h - 1e-9).ceil() as usize + guard.min(2);
        let (ox, nx) = if mirror_x { (0.0, n_half) } else { (-(n_half as f64) * h, 2 * n_half) };
        let (oy, ny) = if mirror_y { (0.0, n_half) } else { (-(n_half as f64) * h, 2 * n_half) };
        let mut gd = GridDomain::from_box([ox, oy], h, nx, ny);
        gd.symmetry = Symmetry { mirror_x, mirror_y };
        gd
    }

    /// Strip of a round domain: exact for the Euclidean norm from the
    /// supplied Euclidean distance, otherwise a ball dilation of `Omega`.
    fn round_extension(&self, norm: &Norm, euclid_dist: impl Fn(f64, f64) -> f64) -> Result<Mask> {
        if norm.is_euclidean() {
            Ok(self.mask_from(|x, y| euclid_dist(x, y) <= 1.0))
        } else {
            crate::norm::dilate_by_ball(&self.omega, 1.0 + 0.5 * self.h, norm, self)
        }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.ny, self.nx)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn center(&self, ix: usize, iy: usize) -> [f64; 2] {
        [
            self.origin[0] + (ix as f64 + 0.5) * self.h,
            self.origin[1] + (iy as f64 + 0.5) * self.h,
        ]
    }

    /// Cell containing the point, if inside the stored box.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = ((x - self.origin[0]) / self.h).floor();
        let fy = ((y - self.origin[1]) / self.h).floor();
        if fx < 0.0 || fy < 0.0 || fx >= self.nx as f64 || fy >= self.ny as f64 {
            return None;
        }
        Some((fx as usize, fy as usize))
    }

    /// Cell storing the point after folding by the mirror symmetry.
    pub fn cell_of_folded(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let x = if self.symmetry.mirror_x { x.abs() } else { x };
        let y = if self.symmetry.mirror_y { y.abs() } else { y };
        self.cell_of(x, y)
    }

    /// Maps a possibly out-of-range index through the mirrors.
    #[inline]
    pub fn resolve(&self, ix: i64, iy: i64) -> Option<(usize, usize)> {
        let fold = |i: i64, n: usize, m: bool| -> Option<usize> {
            let j = if i < 0 && m { -1 - i } else { i };
            (j >= 0 && (j as usize) < n).then_some(j as usize)
        };
        Some((fold(ix, self.nx, self.symmetry.mirror_x)?, fold(iy, self.ny, self.symmetry.mirror_y)?))
    }

    /// The point together with its mirror images.
    pub fn images(&self, x: f64, y: f64) -> Vec<[f64; 2]> {
        let mut v = vec![[x, y]];
        if self.symmetry.mirror_x {
            v.push([-x, y]);
        }
        if self.symmetry.mirror_y {
            v.push([x, -y]);
        }
        if self.symmetry.mirror_x && self.symmetry.mirror_y {
            v.push([-x, -y]);
        }
        v
    }

    /// Number of copies of the stored region making up the full domain.
    pub fn multiplicity(&self) -> f64 {
        (if self.symmetry.mirror_x { 2.0 } else { 1.0 }) * (if self.symmetry.mirror_y { 2.0 } else { 1.0 })
    }

    pub fn mask_from(&self, f: impl Fn(f64, f64) -> bool) -> Mask {
        Mask::from_shape_fn((self.ny, self.nx), |(iy, ix)| {
            let [x, y] = self.center(ix, iy);
            f(x, y)
        })
    }

    pub fn field_from(&self, f: impl Fn(f64, f64) -> f64) -> Field {
        Field::from_shape_fn((self.ny, self.nx), |(iy, ix)| {
            let [x, y] = self.center(ix, iy);
            f(x, y)
        })
    }

    /// Strip cells: extended but not in `Omega`.
    pub fn strip(&self) -> Mask {
        Mask::from_shape_fn((self.ny, self.nx), |ij| self.extended[ij] && !self.omega[ij])
    }

    /// Bilinear interpolation of a cell-centred field at a point (folded by
    /// the mirrors); cells outside the grid read 0.
    pub fn interpolate(&self, field: &Field, x: f64, y: f64) -> f64 {
        let x = if self.symmetry.mirror_x { x.abs() } else { x };
        let y = if self.symmetry.mirror_y { y.abs() } else { y };
        let gx = (x - self.origin[0]) / self.h - 0.5;
        let gy = (y - self.origin[1]) / self.h - 0.5;
        let (x0, y0) = (gx.floor(), gy.floor());
        let (tx, ty) = (gx - x0, gy - y0);
        let read = |i: i64, j: i64| self.resolve(i, j).map_or(0.0, |(a, b)| field[[b, a]]);
        let (i, j) = (x0 as i64, y0 as i64);
        (1.0 - ty) * ((1.0 - tx) * read(i, j) + tx * read(i + 1, j))
            + ty * ((1.0 - tx) * read(i, j + 1) + tx * read(i + 1, j + 1))
    }

    /// Resamples a field from another lattice of the same domain.
    pub fn resample_from(&self, src: &GridDomain, field: &Field) -> Field {
        self.field_from(|x, y| src.interpolate(field, x, y))
    }

    /// Writes a mask as a binary PGM image, top row first.
    pub fn write_pgm(mask: &Mask, path: &Path) -> Result<()> {
        let (ny, nx) = mask.dim();
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "P5\n{nx} {ny}\n255\n")?;
        for iy in (0..ny).rev() {
            let row: Vec<u8> = (0..nx).map(|ix| if mask[[iy, ix]] { 255 } else { 0 }).collect();
            out.write_all(&row)?;
        }
        Ok(())
    }
}

/// Boundary densities on the strip, one field per population.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryData {
    pub f: Vec<Field>,
}

impl BoundaryData {
    pub fn k(&self) -> usize {
        self.f.len()
    }

    pub fn max_value(&self) -> f64 {
        self.f.iter().flat_map(|f| f.iter()).fold(0.0, |m, &v| m.max(v))
    }

    pub fn support(&self, i: usize) -> Mask {
        self.f[i].mapv(|v| v > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundaryPreset {
    /// Population 0 on the inner strip, population 1 on the outer one.
    Annulus { f_inner: f64, f_outer: f64 },
    /// Population 0 fills the left end, population 1 the right end; along
    /// the long sides both decay linearly towards a gap of width 1.
    Strip,
    /// `k` arcs of the disk boundary with value 1, consecutive arcs exactly
    /// at distance 1 on the circle.
    DiskArcs { k: usize },
    /// Rows `x,y,population,value`; each row sets the cell containing the
    /// point.
    Csv { path: String, k: usize },
}

pub fn build_boundary_data(gd: &GridDomain, preset: &BoundaryPreset) -> Result<BoundaryData> {
    let strip = gd.strip();
    let on_strip = |v: Field| -> Field {
        Field::from_shape_fn(gd.shape(), |ij| if strip[ij] { v[ij] } else { 0.0 })
    };
    let shape = gd.shape.ok_or_else(|| Error::InvalidInput("boundary preset needs a preset domain".into()));
    match preset {
        BoundaryPreset::Annulus { f_inner, f_outer } => {
            let DomainShape::Annulus { inner, .. } = shape? else {
                return Err(Error::InvalidInput("annulus data needs an annulus domain".into()));
            };
            let f0 = on_strip(gd.field_from(|x, y| if x.hypot(y) <= inner { *f_inner } else { 0.0 }));
            let f1 = on_strip(gd.field_from(|x, y| if x.hypot(y) > inner { *f_outer } else { 0.0 }));
            Ok(BoundaryData { f: vec![f0, f1] })
        }
        BoundaryPreset::Strip => {
            let DomainShape::Strip { width, .. } = shape? else {
                return Err(Error::InvalidInput("strip data needs a strip domain".into()));
            };
            if width <= 2.0 {
                return Err(Error::GeometryTooThin(format!("strip width {width} <= 2")));
            }
            let r = 0.5 * (width - 1.0);
            let f0 = on_strip(gd.field_from(|x, _| if x <= 0.0 { 1.0 } else { (1.0 - x / r).max(0.0) }));
            let f1 = on_strip(gd.field_from(|x, _| {
                if x >= width {
                    1.0
                } else {
                    ((x - r - 1.0) / (width - r - 1.0)).max(0.0)
                }
            }));
            Ok(BoundaryData { f: vec![f0, f1] })
        }
        BoundaryPreset::DiskArcs { k } => {
            let DomainShape::Disk { radius } = shape? else {
                return Err(Error::InvalidInput("arc data needs a disk domain".into()));
            };
            let k = *k;
            if k < 2 {
                return Err(Error::InvalidInput("need at least two arcs".into()));
            }
            if (gd.symmetry.mirror_x || gd.symmetry.mirror_y) && k != 2 {
                return Err(Error::InvalidInput(format!("{k} arcs are not mirror symmetric; use a full grid")));
            }
            if 2.0 * radius <= 1.0 {
                return Err(Error::GeometryTooThin(format!("disk radius {radius} too small for unit gaps")));
            }
            let gap = 2.0 * (0.5 / radius).asin();
            let sector = 2.0 * std::f64::consts::PI / k as f64;
            if sector <= gap {
                return Err(Error::GeometryTooThin(format!("{k} arcs do not fit on radius {radius}")));
            }
            let f = (0..k)
                .map(|i| {
                    let c = std::f64::consts::PI + i as f64 * sector;
                    on_strip(gd.field_from(|x, y| {
                        let d = angle_diff(y.atan2(x), c);
                        if d.abs() <= 0.5 * (sector - gap) {
                            1.0
                        } else {
                            0.0
                        }
                    }))
                })
                .collect();
            Ok(BoundaryData { f })
        }
        BoundaryPreset::Csv { path, k } => read_boundary_csv(gd, Path::new(path), *k),
    }
}

/// Signed difference of angles in `(-pi, pi]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let tau = 2.0 * std::f64::consts::PI;
    let mut d = (a - b) % tau;
    if d > std::f64::consts::PI {
        d -= tau;
    } else if d <= -std::f64::consts::PI {
        d += tau;
    }
    d
}

pub fn read_boundary_csv(gd: &GridDomain, path: &Path, k: usize) -> Result<BoundaryData> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut f = vec![Field::zeros(gd.shape()); k];
    let strip = gd.strip();
    for (n, line) in file.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (n == 0 && line.starts_with(|c: char| c.is_alphabetic())) {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::InvalidInput(format!("{}:{}: expected x,y,population,value", path.display(), n + 1));
        if parts.len() != 4 {
            return Err(bad());
        }
        let x: f64 = parts[0].parse().map_err(|_| bad())?;
        let y: f64 = parts[1].parse().map_err(|_| bad())?;
        let p: usize = parts[2].parse().map_err(|_| bad())?;
        let v: f64 = parts[3].parse().map_err(|_| bad())?;
        if p >= k {
            return Err(Error::InvalidInput(format!("{}:{}: population {p} >= {k}", path.display(), n + 1)));
        }
        let Some((ix, iy)) = gd.cell_of_folded(x, y) else {
            return Err(Error::InvalidInput(format!("{}:{}: point outside the grid", path.display(), n + 1)));
        };
        if !strip[[iy, ix]] {
            return Err(Error::InvalidInput(format!("{}:{}: point not on the boundary strip", path.display(), n + 1)));
        }
        f[p][[iy, ix]] = v;
    }
    Ok(BoundaryData { f })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationCheck {
    pub name: String,
    pub pass: bool,
    pub measured: f64,
    pub required: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct ValidationReport {
    pub checks: Vec<ValidationCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Density-condition parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct DensityCondition {
    pub c: f64,
    /// Radii in cells.
    pub radii_cells: [usize; 3],
}

impl Default for DensityCondition {
    fn default() -> Self {
        DensityCondition { c: 0.25, radii_cells: [2, 4, 8] }
    }
}

/// `d_rho` between two masks, by brute force over their boundary cells
/// (mirror images of the second included).
pub fn mask_distance(a: &Mask, b: &Mask, norm: &Norm, gd: &GridDomain) -> Result<f64> {
    let ca = boundary_cells(a, gd);
    let cb = boundary_cells(b, gd);
    if ca.is_empty() || cb.is_empty() {
        return Err(Error::EmptySet("distance between masks".into()));
    }
    let pb = with_images(&cb, gd);
    use rayon::prelude::*;
    Ok(ca
        .par_iter()
        .map(|&(ix, iy)| {
            let [x, y] = gd.center(ix, iy);
            pb.iter().map(|q| norm.eval(x - q[0], y - q[1])).fold(f64::INFINITY, f64::min)
        })
        .reduce(|| f64::INFINITY, f64::min))
}

pub fn validate_boundary_data(
    bd: &BoundaryData,
    gd: &GridDomain,
    norm: &Norm,
    density: &DensityCondition,
) -> Result<ValidationReport> {
    let mut report = ValidationReport::default();
    if bd.f.iter().any(|f| f.dim() != gd.shape()) {
        return Err(Error::InvalidInput("boundary data not dimensioned to the grid".into()));
    }
    let strip = gd.strip();
    for (i, f) in bd.f.iter().enumerate() {
        for ((iy, ix), &v) in f.indexed_iter() {
            if v < 0.0 || v.is_nan() {
                return Err(Error::NegativeData { population: i, ix, iy });
            }
        }
        if !f.iter().any(|&v| v > 0.0) {
            return Err(Error::EmptySupport(i));
        }
        let leak = f.indexed_iter().filter(|(ij, &v)| v > 0.0 && !strip[*ij]).count();
        report.checks.push(ValidationCheck {
            name: format!("support_on_strip[{i}]"),
            pass: leak == 0,
            measured: leak as f64,
            required: 0.0,
        });
    }
    let supports: Vec<Mask> = (0..bd.k()).map(|i| bd.support(i)).collect();
    for i in 0..bd.k() {
        for j in i + 1..bd.k() {
            let d = mask_distance(&supports[i], &supports[j], norm, gd)?;
            let required = 1.0 - gd.h;
            if d < required {
                return Err(Error::SeparationViolation { i, j, distance: d, required });
            }
            report.checks.push(ValidationCheck {
                name: format!("separation[{i},{j}]"),
                pass: true,
                measured: d,
                required,
            });
        }
    }
    for (i, supp) in supports.iter().enumerate() {
        let worst = density_margin(supp, gd, norm, density);
        report.checks.push(ValidationCheck {
            name: format!("density[{i}]"),
            pass: worst >= density.c,
            measured: worst,
            required: density.c,
        });
    }
    Ok(report)
}

/// Smallest fraction `|B_r(x) cap supp| / |B_r(x)|` over support cells next
/// to `Omega`.
fn density_margin(supp: &Mask, gd: &GridDomain, norm: &Norm, cond: &DensityCondition) -> f64 {
    let mut worst = f64::INFINITY;
    let balls: Vec<Vec<(i64, i64)>> = cond
        .radii_cells
        .iter()
        .map(|&r| {
            let r = r as i64;
            let mut v = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    if norm.eval(dx as f64, dy as f64) <= r as f64 {
                        v.push((dx, dy));
                    }
                }
            }
            v
        })
        .collect();
    for ((iy, ix), &s) in supp.indexed_iter() {
        if !s {
            continue;
        }
        let touches = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)]
            .iter()
            .any(|&(dx, dy)| gd.resolve(ix as i64 + dx, iy as i64 + dy).is_some_and(|(a, b)| gd.omega[[b, a]]));
        if !touches {
            continue;
        }
        for ball in &balls {
            let hit = ball
                .iter()
                .filter(|&&(dx, dy)| gd.resolve(ix as i64 + dx, iy as i64 + dy).is_some_and(|(a, b)| supp[[b, a]]))
                .count();
            worst = worst.min(hit as f64 / ball.len() as f64);
        }
    }
    worst
}

/// Discrete harmonic extension of `f` into `Omega`.
pub fn harmonic_majorant(f: &Field, gd: &GridDomain, lin: &LinearSolverConfig) -> Result<Field> {
    let c = Field::zeros(gd.shape());
    let (v, _) = solve_screened(gd, &gd.omega, &c, f, lin, None)?;
    Ok(v)
}
