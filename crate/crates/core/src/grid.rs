//! Density images on a regular pixel grid.
//!
//! Pixel `(row, col)` is cell-centered: it covers the rectangle
//! `[x0 + col*hx, x0 + (col+1)*hx] x [y0 + row*hy, y0 + (row+1)*hy]` of the
//! physical domain and its sample sits in the middle of that cell. Values are
//! mass per pixel, so the total mass is a plain sum.
//!
//! Two coordinate systems are used throughout the crate:
//! - *domain* coordinates, the physical rectangle (default `[0,1]^2`);
//! - *pixel* coordinates, where the center of pixel `(row, col)` is the point
//!   `(col, row)`. The solver works in pixel units.

use crate::error::{Error, Result};

/// Axis-aligned rectangle discretized by a grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Domain {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Default for Domain {
    fn default() -> Self {
        Domain::UNIT
    }
}

impl Domain {
    pub const UNIT: Domain = Domain {
        x0: 0.0,
        y0: 0.0,
        x1: 1.0,
        y1: 1.0,
    };

    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
            return Err(Error::invalid("domain bounds must be finite"));
        }
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::invalid("domain must have positive extent"));
        }
        Ok(Domain { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> [f64; 2] {
        [0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1)]
    }
}

/// Grid dimensions plus the domain they discretize.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridGeometry {
    pub width: usize,
    pub height: usize,
    pub domain: Domain,
}

impl GridGeometry {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        Self::with_domain(width, height, Domain::UNIT)
    }

    pub fn with_domain(width: usize, height: usize, domain: Domain) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("grid must have at least one pixel"));
        }
        Ok(GridGeometry {
            width,
            height,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Pixel spacing `(hx, hy)` in domain units.
    pub fn spacing(&self) -> (f64, f64) {
        (
            self.domain.width() / self.width as f64,
            self.domain.height() / self.height as f64,
        )
    }

    pub fn pixel_area(&self) -> f64 {
        let (hx, hy) = self.spacing();
        hx * hy
    }

    /// Domain coordinates of the center of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> [f64; 2] {
        self.pixel_to_domain([col as f64, row as f64])
    }

    pub fn pixel_to_domain(&self, p: [f64; 2]) -> [f64; 2] {
        let (hx, hy) = self.spacing();
        [
            self.domain.x0 + (p[0] + 0.5) * hx,
            self.domain.y0 + (p[1] + 0.5) * hy,
        ]
    }

    pub fn domain_to_pixel(&self, x: [f64; 2]) -> [f64; 2] {
        let (hx, hy) = self.spacing();
        [
            (x[0] - self.domain.x0) / hx - 0.5,
            (x[1] - self.domain.y0) / hy - 0.5,
        ]
    }

    /// Geometry of the grid subsampled by `factor` over the same domain.
    pub(crate) fn coarsened(&self, factor: usize) -> GridGeometry {
        GridGeometry {
            width: self.width / factor,
            height: self.height / factor,
            domain: self.domain,
        }
    }

    pub(crate) fn refined(&self, factor: usize) -> GridGeometry {
        GridGeometry {
            width: self.width * factor,
            height: self.height * factor,
            domain: self.domain,
        }
    }

    pub(crate) fn check_same(&self, other: &GridGeometry) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                got: other.dims(),
            });
        }
        Ok(())
    }
}

/// Non-negative mass density sampled on a regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    geometry: GridGeometry,
    values: Vec<f64>,
}

impl DensityGrid {
    /// Builds a grid over the unit square from row-major values.
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        Self::from_geometry(GridGeometry::new(width, height)?, values)
    }

    pub fn from_geometry(geometry: GridGeometry, values: Vec<f64>) -> Result<Self> {
        if values.len() != geometry.len() {
            return Err(Error::invalid(format!(
                "expected {} values for a {}x{} grid, got {}",
                geometry.len(),
                geometry.width,
                geometry.height,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!(
                "density values must be finite and non-negative, found {v}"
            )));
        }
        Ok(DensityGrid { geometry, values })
    }

    pub fn constant(geometry: GridGeometry, value: f64) -> Result<Self> {
        Self::from_geometry(geometry, vec![value; geometry.len()])
    }

    /// Samples `f(x, y)` (domain coordinates) at every pixel center.
    pub fn from_fn(geometry: GridGeometry, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(geometry.len());
        for row in 0..geometry.height {
            for col in 0..geometry.width {
                let [x, y] = geometry.pixel_center(row, col);
                values.push(f(x, y));
            }
        }
        Self::from_geometry(geometry, values)
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn width(&self) -> usize {
        self.geometry.width
    }

    pub fn height(&self) -> usize {
        self.geometry.height
    }

    pub fn dims(&self) -> (usize, usize) {
        self.geometry.dims()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.geometry.width + col]
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Density per unit domain area at pixel `idx` (row-major).
    pub fn areal_density(&self, idx: usize) -> f64 {
        self.values[idx] / self.geometry.pixel_area()
    }

    pub fn ensure_positive(&self) -> Result<()> {
        let min = self.min_value();
        if min > 0.0 {
            Ok(())
        } else {
            Err(Error::NonPositiveDensity(min))
        }
    }

    pub(crate) fn with_values(&self, values: Vec<f64>) -> DensityGrid {
        debug_assert_eq!(values.len(), self.values.len());
        DensityGrid {
            geometry: self.geometry,
            values,
        }
    }

    /// Rescales to `target_mass`, keeping every pixel at or above `floor`.
    ///
    /// The result is `floor + s * grid` with `s` chosen so the total equals
    /// `target_mass`. A grid that already has the target total and respects
    /// the floor is returned unchanged, which makes the operation idempotent.
    /// An all-zero grid with a positive floor becomes uniform.
    pub fn normalize_mass(&self, target_mass: f64, floor: f64) -> Result<DensityGrid> {
        if !(target_mass > 0.0 && target_mass.is_finite()) {
            return Err(Error::invalid("target mass must be positive and finite"));
        }
        if !(floor >= 0.0 && floor.is_finite()) {
            return Err(Error::invalid("floor must be non-negative and finite"));
        }
        let n = self.values.len() as f64;
        let remaining = target_mass - floor * n;
        if remaining < 0.0 {
            return Err(Error::invalid(format!(
                "floor {floor} over {n} pixels exceeds the target mass {target_mass}"
            )));
        }
        let sum = self.total_mass();
        if ((sum - target_mass) / target_mass).abs() <= 1e-12 && self.min_value() >= floor {
            return Ok(self.clone());
        }
        if sum <= 0.0 {
            if floor == 0.0 {
                return Err(Error::DegenerateDensity);
            }
            return Ok(self.with_values(vec![target_mass / n; self.values.len()]));
        }
        let scale = remaining / sum;
        Ok(self.with_values(self.values.iter().map(|v| floor + scale * v).collect()))
    }

    /// Bilinear interpolation at a point in domain coordinates; points
    /// outside the grid clamp to the nearest boundary pixel.
    pub fn bilinear_sample(&self, point: [f64; 2]) -> f64 {
        let p = self.geometry.domain_to_pixel(point);
        self.sample_px(p[0], p[1])
    }

    /// Bilinear interpolation in pixel coordinates.
    pub fn sample_px(&self, x: f64, y: f64) -> f64 {
        self.sample_px_with_gradient(x, y).0
    }

    /// Value of the bilinear interpolant together with its exact partial
    /// derivatives in pixel units. Along a clamped axis the derivative is 0.
    pub fn sample_px_with_gradient(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let w = self.geometry.width;
        let h = self.geometry.height;
        let (c0, tx, x_free) = cell(x, w);
        let (r0, ty, y_free) = cell(y, h);
        let c1 = (c0 + 1).min(w - 1);
        let r1 = (r0 + 1).min(h - 1);
        let v00 = self.values[r0 * w + c0];
        let v01 = self.values[r0 * w + c1];
        let v10 = self.values[r1 * w + c0];
        let v11 = self.values[r1 * w + c1];
        let top = (1.0 - tx) * v00 + tx * v01;
        let bottom = (1.0 - tx) * v10 + tx * v11;
        let value = (1.0 - ty) * top + ty * bottom;
        let dx = if x_free {
            (1.0 - ty) * (v01 - v00) + ty * (v11 - v10)
        } else {
            0.0
        };
        let dy = if y_free { bottom - top } else { 0.0 };
        (value, dx, dy)
    }

    /// Derivatives in domain units: central differences inside, one-sided
    /// differences on the border.
    pub fn finite_diff_gradient(&self) -> Result<VectorFieldGrid> {
        let (w, h) = self.dims();
        if w < 2 || h < 2 {
            return Err(Error::invalid("finite differences need at least a 2x2 grid"));
        }
        let (hx, hy) = self.geometry.spacing();
        let mut u = vec![0.0; w * h];
        let mut v = vec![0.0; w * h];
        for row in 0..h {
            for col in 0..w {
                let (cl, cr) = (col.saturating_sub(1), (col + 1).min(w - 1));
                let (ru, rd) = (row.saturating_sub(1), (row + 1).min(h - 1));
                u[row * w + col] =
                    (self.get(row, cr) - self.get(row, cl)) / ((cr - cl) as f64 * hx);
                v[row * w + col] =
                    (self.get(rd, col) - self.get(ru, col)) / ((rd - ru) as f64 * hy);
            }
        }
        VectorFieldGrid::new(self.geometry, u, v)
    }
}

/// Locates the interpolation cell along one axis: returns the left index,
/// the fractional offset and whether the coordinate lies inside the axis.
#[inline]
fn cell(x: f64, n: usize) -> (usize, f64, bool) {
    if n == 1 {
        return (0, 0.0, false);
    }
    let max = (n - 1) as f64;
    if x.is_nan() || x < 0.0 {
        (0, 0.0, false)
    } else if x > max {
        (n - 2, 1.0, false)
    } else {
        let i = (x.floor() as usize).min(n - 2);
        (i, x - i as f64, true)
    }
}

/// Two-component field (a map or a displacement) sampled at pixel centers,
/// in domain units.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorFieldGrid {
    geometry: GridGeometry,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl VectorFieldGrid {
    pub fn new(geometry: GridGeometry, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.len() != geometry.len() || v.len() != geometry.len() {
            return Err(Error::invalid(format!(
                "vector field components must have {} entries",
                geometry.len()
            )));
        }
        Ok(VectorFieldGrid { geometry, u, v })
    }

    pub fn zeros(geometry: GridGeometry) -> Self {
        VectorFieldGrid {
            geometry,
            u: vec![0.0; geometry.len()],
            v: vec![0.0; geometry.len()],
        }
    }

    pub fn from_fn(geometry: GridGeometry, f: impl Fn(f64, f64) -> [f64; 2]) -> Self {
        let mut field = Self::zeros(geometry);
        for row in 0..geometry.height {
            for col in 0..geometry.width {
                let [x, y] = geometry.pixel_center(row, col);
                let [a, b] = f(x, y);
                field.u[row * geometry.width + col] = a;
                field.v[row * geometry.width + col] = b;
            }
        }
        field
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn dims(&self) -> (usize, usize) {
        self.geometry.dims()
    }

    pub fn get(&self, row: usize, col: usize) -> [f64; 2] {
        let i = row * self.geometry.width + col;
        [self.u[i], self.v[i]]
    }

    /// Squared L2 norm with pixel-area quadrature weights.
    pub fn weighted_norm_sq(&self) -> f64 {
        let sum: f64 = self
            .u
            .iter()
            .zip(&self.v)
            .map(|(a, b)| a * a + b * b)
            .sum();
        sum * self.geometry.pixel_area()
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.is_finite())
    }
}

/// Five-tap smoothing kernel: the binomial `[1,4,6,4,1]/16` at unit sigma,
/// otherwise a normalized sampled Gaussian.
fn smoothing_kernel(sigma: f64) -> [f64; 5] {
    if (sigma - 1.0).abs() < 1e-12 {
        return [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    }
    let mut k = [0.0; 5];
    for (i, w) in k.iter_mut().enumerate() {
        let d = i as f64 - 2.0;
        *w = (-d * d / (2.0 * sigma * sigma)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    k
}

fn smooth_separable(values: &[f64], w: usize, h: usize, k: &[f64; 5]) -> Vec<f64> {
    let mut tmp = vec![0.0; w * h];
    for row in 0..h {
        for col in 0..w {
            let mut acc = 0.0;
            for (t, kw) in k.iter().enumerate() {
                let c = (col as isize + t as isize - 2).clamp(0, w as isize - 1) as usize;
                acc += kw * values[row * w + c];
            }
            tmp[row * w + col] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for row in 0..h {
        for col in 0..w {
            let mut acc = 0.0;
            for (t, kw) in k.iter().enumerate() {
                let r = (row as isize + t as isize - 2).clamp(0, h as isize - 1) as usize;
                acc += kw * tmp[r * w + col];
            }
            out[row * w + col] = acc;
        }
    }
    out
}

/// Gaussian pyramid, finest level first.
///
/// Each coarser level smooths the previous one and averages 2x2 blocks, so the
/// coarse pixel centers stay aligned with the shared domain. Every level is
/// rescaled to the input's total mass. Grid dimensions must be divisible by
/// `2^(levels-1)`.
pub fn gaussian_pyramid(
    grid: &DensityGrid,
    levels: usize,
    smooth_sigma: f64,
) -> Result<Vec<DensityGrid>> {
    if levels == 0 {
        return Err(Error::invalid("pyramid needs at least one level"));
    }
    if !(smooth_sigma > 0.0) {
        return Err(Error::invalid("smoothing sigma must be positive"));
    }
    let (w, h) = grid.dims();
    let factor = levels
        .checked_sub(1)
        .and_then(|e| 1usize.checked_shl(e as u32))
        .unwrap_or(usize::MAX);
    if factor > w || factor > h || w % factor != 0 || h % factor != 0 {
        return Err(Error::TooManyLevels {
            levels,
            width: w,
            height: h,
        });
    }
    let mass = grid.total_mass();
    let kernel = smoothing_kernel(smooth_sigma);
    let mut out = Vec::with_capacity(levels);
    out.push(grid.clone());
    for _ in 1..levels {
        let prev = out.last().expect("pyramid has a level");
        let (pw, ph) = prev.dims();
        let smoothed = smooth_separable(prev.values(), pw, ph, &kernel);
        let geom = prev.geometry().coarsened(2);
        let mut values = Vec::with_capacity(geom.len());
        for row in 0..geom.height {
            for col in 0..geom.width {
                let (r, c) = (2 * row, 2 * col);
                values.push(
                    0.25 * (smoothed[r * pw + c]
                        + smoothed[r * pw + c + 1]
                        + smoothed[(r + 1) * pw + c]
                        + smoothed[(r + 1) * pw + c + 1]),
                );
            }
        }
        let sum: f64 = values.iter().sum();
        if sum > 0.0 {
            let s = mass / sum;
            values.iter_mut().for_each(|v| *v *= s);
        }
        out.push(DensityGrid::from_geometry(geom, values)?);
    }
    Ok(out)
}
