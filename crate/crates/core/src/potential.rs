//! Gaussian-basis convex potentials and the transport maps they induce.
//!
//! A potential lives on the pixel grid of a density and is written in pixel
//! units:
//!
//! ```text
//! phi(x) = |x|^2 / 2 - sum_l sum_p c_l(p) rho_l(x - p)
//! f(x)   = grad phi(x) = x - sum_l sum_p c_l(p) grad rho_l(x - p)
//! ```
//!
//! where `rho_l` is the isotropic 2-D Gaussian of width `sigma_l` pixels and
//! `p` runs over pixel centers. Several layers (one per optimization scale)
//! may share a grid; their contributions add. Each basis function is cut off
//! outside `|dx|, |dy| <= 4 sigma`.

use crate::error::{Error, Result};
use crate::grid::{DensityGrid, GridGeometry, VectorFieldGrid};

/// Number of standard deviations kept on each side of a basis function.
pub const TRUNCATION_SIGMAS: f64 = 4.0;

/// The Gaussian and its partial derivatives at one offset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BasisDerivatives {
    pub rho: f64,
    pub rho_x: f64,
    pub rho_y: f64,
    pub rho_xx: f64,
    pub rho_xy: f64,
    pub rho_yy: f64,
}

/// Analytic values of `rho(x, y) = exp(-(x^2+y^2) / (2 sigma^2)) / (2 pi sigma^2)`
/// and its first and second partials at `offset`.
pub fn basis_derivatives(sigma: f64, offset: [f64; 2]) -> BasisDerivatives {
    let [x, y] = offset;
    let s2 = sigma * sigma;
    let rho = (-(x * x + y * y) / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2);
    BasisDerivatives {
        rho,
        rho_x: -x / s2 * rho,
        rho_y: -y / s2 * rho,
        rho_xx: (x * x / s2 - 1.0) / s2 * rho,
        rho_xy: x * y / (s2 * s2) * rho,
        rho_yy: (y * y / s2 - 1.0) / s2 * rho,
    }
}

/// Truncation radius in whole pixels.
pub(crate) fn kernel_radius(sigma: f64) -> usize {
    (TRUNCATION_SIGMAS * sigma).floor() as usize
}

/// Sampled 1-D factors of the separable basis: `rho(x, y) = g(x) g(y)`.
pub(crate) struct Kernel1d {
    pub radius: usize,
    pub g: Vec<f64>,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
}

impl Kernel1d {
    pub fn new(sigma: f64) -> Kernel1d {
        Self::shifted(sigma, 0.0)
    }

    /// Factors sampled at `t + shift` for integer offsets `|t| <= radius`.
    pub fn shifted(sigma: f64, shift: f64) -> Kernel1d {
        let radius = kernel_radius(sigma);
        let s2 = sigma * sigma;
        let norm = 1.0 / (2.0 * std::f64::consts::PI * s2).sqrt();
        let mut g = Vec::with_capacity(2 * radius + 1);
        let mut g1 = Vec::with_capacity(2 * radius + 1);
        let mut g2 = Vec::with_capacity(2 * radius + 1);
        for k in 0..=2 * radius {
            let t = k as f64 - radius as f64 + shift;
            let v = norm * (-t * t / (2.0 * s2)).exp();
            g.push(v);
            g1.push(-t / s2 * v);
            g2.push((t * t / s2 - 1.0) / s2 * v);
        }
        Kernel1d { radius, g, g1, g2 }
    }
}

/// `out[i] = sum_d input[i - d] * k[d]` along rows (x).
fn conv_x(input: &[f64], w: usize, h: usize, k: &[f64], radius: usize, out: &mut [f64]) {
    let r = radius as isize;
    for row in 0..h {
        let src = &input[row * w..(row + 1) * w];
        let dst = &mut out[row * w..(row + 1) * w];
        for (i, o) in dst.iter_mut().enumerate() {
            let i = i as isize;
            let lo = (i - (w as isize - 1)).max(-r);
            let hi = i.min(r);
            let mut acc = 0.0;
            for d in lo..=hi {
                acc += src[(i - d) as usize] * k[(d + r) as usize];
            }
            *o = acc;
        }
    }
}

/// `out[i] = sum_d input[i - d] * k[d]` along columns (y).
fn conv_y(input: &[f64], w: usize, h: usize, k: &[f64], radius: usize, out: &mut [f64]) {
    let r = radius as isize;
    out.iter_mut().for_each(|o| *o = 0.0);
    for row in 0..h as isize {
        let dst = &mut out[row as usize * w..(row as usize + 1) * w];
        let lo = (row - (h as isize - 1)).max(-r);
        let hi = row.min(r);
        for d in lo..=hi {
            let kw = k[(d + r) as usize];
            let src_row = (row - d) as usize;
            let src = &input[src_row * w..(src_row + 1) * w];
            for (o, s) in dst.iter_mut().zip(src) {
                *o += kw * s;
            }
        }
    }
}

/// `out[p] = sum_d input[p + d] * k[d]` along rows (x): the adjoint of `conv_x`.
fn corr_x(input: &[f64], w: usize, h: usize, k: &[f64], radius: usize, out: &mut [f64]) {
    let r = radius as isize;
    for row in 0..h {
        let src = &input[row * w..(row + 1) * w];
        let dst = &mut out[row * w..(row + 1) * w];
        for (p, o) in dst.iter_mut().enumerate() {
            let p = p as isize;
            let lo = (-p).max(-r);
            let hi = (w as isize - 1 - p).min(r);
            let mut acc = 0.0;
            for d in lo..=hi {
                acc += src[(p + d) as usize] * k[(d + r) as usize];
            }
            *o = acc;
        }
    }
}

/// Column-wise adjoint of `conv_y`, accumulated into `out`.
fn corr_y_add(input: &[f64], w: usize, h: usize, k: &[f64], radius: usize, out: &mut [f64]) {
    let r = radius as isize;
    for row in 0..h as isize {
        let dst = &mut out[row as usize * w..(row as usize + 1) * w];
        let lo = (-row).max(-r);
        let hi = (h as isize - 1 - row).min(r);
        for d in lo..=hi {
            let kw = k[(d + r) as usize];
            let src_row = (row + d) as usize;
            let src = &input[src_row * w..(src_row + 1) * w];
            for (o, s) in dst.iter_mut().zip(src) {
                *o += kw * s;
            }
        }
    }
}

/// First and second derivatives of `sum_p c(p) rho(x - p)` at every pixel
/// center, in pixel units.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BasisSums {
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub hxx: Vec<f64>,
    pub hxy: Vec<f64>,
    pub hyy: Vec<f64>,
}

impl BasisSums {
    pub fn zeros(n: usize) -> BasisSums {
        BasisSums {
            dx: vec![0.0; n],
            dy: vec![0.0; n],
            hxx: vec![0.0; n],
            hxy: vec![0.0; n],
            hyy: vec![0.0; n],
        }
    }

    /// Sums for one coefficient grid.
    pub fn from_coeffs(geometry: &GridGeometry, kernel: &Kernel1d, coeffs: &[f64]) -> BasisSums {
        let (w, h) = geometry.dims();
        let n = w * h;
        let r = kernel.radius;
        let mut a0 = vec![0.0; n];
        let mut a1 = vec![0.0; n];
        let mut a2 = vec![0.0; n];
        conv_y(coeffs, w, h, &kernel.g, r, &mut a0);
        conv_y(coeffs, w, h, &kernel.g1, r, &mut a1);
        conv_y(coeffs, w, h, &kernel.g2, r, &mut a2);
        let mut s = BasisSums::zeros(n);
        conv_x(&a0, w, h, &kernel.g1, r, &mut s.dx);
        conv_x(&a1, w, h, &kernel.g, r, &mut s.dy);
        conv_x(&a0, w, h, &kernel.g2, r, &mut s.hxx);
        conv_x(&a1, w, h, &kernel.g1, r, &mut s.hxy);
        conv_x(&a2, w, h, &kernel.g, r, &mut s.hyy);
        s
    }

    pub fn add_assign(&mut self, other: &BasisSums) {
        for (a, b) in [
            (&mut self.dx, &other.dx),
            (&mut self.dy, &other.dy),
            (&mut self.hxx, &other.hxx),
            (&mut self.hxy, &other.hxy),
            (&mut self.hyy, &other.hyy),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn sum(a: &BasisSums, b: &BasisSums) -> BasisSums {
        let mut out = a.clone();
        out.add_assign(b);
        out
    }
}

/// Adjoint of the map model: for weight fields `l_*` returns, at every
/// coefficient site `p`,
/// `sum_x l_xy rho_xy(x-p) + l_xx rho_xx(x-p) + l_yy rho_yy(x-p) + l_x rho_x(x-p) + l_y rho_y(x-p)`.
pub(crate) fn correlate_derivatives(
    geometry: &GridGeometry,
    kernel: &Kernel1d,
    l_xy: &[f64],
    l_xx: &[f64],
    l_yy: &[f64],
    l_x: &[f64],
    l_y: &[f64],
) -> Vec<f64> {
    let (w, h) = geometry.dims();
    let n = w * h;
    let r = kernel.radius;
    let mut tmp = vec![0.0; n];
    let mut by_g = vec![0.0; n];
    let mut by_g1 = vec![0.0; n];
    let mut by_g2 = vec![0.0; n];
    // group the x passes by the y factor they share
    corr_x(l_xx, w, h, &kernel.g2, r, &mut by_g);
    corr_x(l_x, w, h, &kernel.g1, r, &mut tmp);
    by_g.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
    corr_x(l_xy, w, h, &kernel.g1, r, &mut by_g1);
    corr_x(l_y, w, h, &kernel.g, r, &mut tmp);
    by_g1.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
    corr_x(l_yy, w, h, &kernel.g, r, &mut by_g2);
    let mut out = vec![0.0; n];
    corr_y_add(&by_g, w, h, &kernel.g, r, &mut out);
    corr_y_add(&by_g1, w, h, &kernel.g1, r, &mut out);
    corr_y_add(&by_g2, w, h, &kernel.g2, r, &mut out);
    out
}

/// One set of coefficients with a common basis width.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisLayer {
    /// Basis standard deviation in pixels of the owning grid.
    pub sigma: f64,
    /// Row-major coefficients, one per pixel, in squared pixel units.
    pub coeffs: Vec<f64>,
}

/// Parametric potential over a pixel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialField {
    geometry: GridGeometry,
    layers: Vec<BasisLayer>,
}

impl PotentialField {
    /// Potential with all coefficients zero, i.e. the identity map.
    pub fn zeros(geometry: GridGeometry, sigma: f64) -> Result<Self> {
        Self::new(geometry, sigma, vec![0.0; geometry.len()])
    }

    pub fn new(geometry: GridGeometry, sigma: f64, coeffs: Vec<f64>) -> Result<Self> {
        Self::from_layers(geometry, vec![BasisLayer { sigma, coeffs }])
    }

    pub fn from_layers(geometry: GridGeometry, layers: Vec<BasisLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("a potential needs at least one basis layer"));
        }
        for layer in &layers {
            validate_layer(&geometry, layer)?;
        }
        Ok(PotentialField { geometry, layers })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn layers(&self) -> &[BasisLayer] {
        &self.layers
    }

    /// Width of the most recently added (finest) layer.
    pub fn sigma(&self) -> f64 {
        self.active().sigma
    }

    /// Coefficients of the most recently added layer.
    pub fn coeffs(&self) -> &[f64] {
        &self.active().coeffs
    }

    pub(crate) fn active(&self) -> &BasisLayer {
        self.layers.last().expect("potential has a layer")
    }

    pub(crate) fn active_mut(&mut self) -> &mut BasisLayer {
        self.layers.last_mut().expect("potential has a layer")
    }

    /// Appends a zero layer of width `sigma`.
    pub fn push_layer(&mut self, sigma: f64) -> Result<()> {
        let layer = BasisLayer {
            sigma,
            coeffs: vec![0.0; self.geometry.len()],
        };
        validate_layer(&self.geometry, &layer)?;
        self.layers.push(layer);
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.layers.iter().all(|l| l.coeffs.iter().all(|c| *c == 0.0))
    }

    /// `phi(x)` at a point in pixel coordinates.
    pub fn eval_potential(&self, x: [f64; 2]) -> f64 {
        let mut sum = 0.0;
        self.visit_sites(x, |c, b| sum += c * b.rho);
        0.5 * (x[0] * x[0] + x[1] * x[1]) - sum
    }

    /// `f(x)` at a point in pixel coordinates, by direct summation.
    pub fn map_at(&self, x: [f64; 2]) -> [f64; 2] {
        let d = self.displacement_at(x);
        [x[0] + d[0], x[1] + d[1]]
    }

    /// `f(x) - x` in pixel units, by direct summation.
    pub fn displacement_at(&self, x: [f64; 2]) -> [f64; 2] {
        let (mut dx, mut dy) = (0.0, 0.0);
        self.visit_sites(x, |c, b| {
            dx -= c * b.rho_x;
            dy -= c * b.rho_y;
        });
        [dx, dy]
    }

    fn visit_sites(&self, x: [f64; 2], mut visit: impl FnMut(f64, &BasisDerivatives)) {
        let (w, h) = self.geometry.dims();
        for layer in &self.layers {
            // same site set as the grid kernels at pixel centers, and locally
            // constant within half a pixel of them
            let reach = kernel_radius(layer.sigma) as f64 + 0.5;
            let c_lo = (x[0] - reach).ceil().max(0.0);
            let c_hi = (x[0] + reach).floor().min(w as f64 - 1.0);
            let r_lo = (x[1] - reach).ceil().max(0.0);
            let r_hi = (x[1] + reach).floor().min(h as f64 - 1.0);
            if !(c_lo.is_finite() && r_lo.is_finite()) {
                continue;
            }
            if c_lo > c_hi || r_lo > r_hi {
                continue;
            }
            for row in r_lo as usize..=r_hi as usize {
                for col in c_lo as usize..=c_hi as usize {
                    let c = layer.coeffs[row * w + col];
                    if c != 0.0 {
                        let b = basis_derivatives(
                            layer.sigma,
                            [x[0] - col as f64, x[1] - row as f64],
                        );
                        visit(c, &b);
                    }
                }
            }
        }
    }

    /// Basis sums of every layer at the pixel centers.
    pub(crate) fn basis_sums(&self) -> BasisSums {
        let mut total = BasisSums::zeros(self.geometry.len());
        for layer in &self.layers {
            if layer.coeffs.iter().all(|c| *c == 0.0) {
                continue;
            }
            let k = Kernel1d::new(layer.sigma);
            total.add_assign(&BasisSums::from_coeffs(&self.geometry, &k, &layer.coeffs));
        }
        total
    }

    /// Image of every pixel center under the map, in pixel coordinates and
    /// row-major order. The objective is smooth in the coefficients as long
    /// as none of these crosses an integer coordinate.
    pub fn mapped_pixels(&self) -> Vec<[f64; 2]> {
        let s = self.basis_sums();
        let w = self.geometry.width;
        (0..self.geometry.len())
            .map(|i| [(i % w) as f64 - s.dx[i], (i / w) as f64 - s.dy[i]])
            .collect()
    }

    /// `phi(x) - |x|^2/2` at every pixel center (pixel units): the compact
    /// feature used for classification.
    pub fn perturbation_grid(&self) -> Vec<f64> {
        let (w, h) = self.geometry.dims();
        let mut total = vec![0.0; w * h];
        let mut tmp = vec![0.0; w * h];
        let mut out = vec![0.0; w * h];
        for layer in &self.layers {
            let k = Kernel1d::new(layer.sigma);
            conv_y(&layer.coeffs, w, h, &k.g, k.radius, &mut tmp);
            conv_x(&tmp, w, h, &k.g, k.radius, &mut out);
            total.iter_mut().zip(&out).for_each(|(t, o)| *t -= o);
        }
        total
    }

    /// Displacement `f(x) - x` in pixel units at every pixel center moved by
    /// `shift` (less than half a pixel per axis).
    pub(crate) fn displacement_grid_shifted(&self, shift: [f64; 2]) -> (Vec<f64>, Vec<f64>) {
        let (w, h) = self.geometry.dims();
        let mut du = vec![0.0; w * h];
        let mut dv = vec![0.0; w * h];
        let mut tmp = vec![0.0; w * h];
        let mut out = vec![0.0; w * h];
        for layer in &self.layers {
            let kx = Kernel1d::shifted(layer.sigma, shift[0]);
            let ky = Kernel1d::shifted(layer.sigma, shift[1]);
            let r = kx.radius;
            conv_y(&layer.coeffs, w, h, &ky.g, r, &mut tmp);
            conv_x(&tmp, w, h, &kx.g1, r, &mut out);
            du.iter_mut().zip(&out).for_each(|(d, o)| *d -= o);
            conv_y(&layer.coeffs, w, h, &ky.g1, r, &mut tmp);
            conv_x(&tmp, w, h, &kx.g, r, &mut out);
            dv.iter_mut().zip(&out).for_each(|(d, o)| *d -= o);
        }
        (du, dv)
    }

    /// The transport map at every pixel center, in domain coordinates.
    pub fn transport_map(&self) -> VectorFieldGrid {
        let sums = self.basis_sums();
        map_from_sums(&self.geometry, &sums)
    }

    /// The displacement `f(x) - x` at every pixel center, in domain units.
    pub fn displacement_field(&self) -> VectorFieldGrid {
        let sums = self.basis_sums();
        let (hx, hy) = self.geometry.spacing();
        VectorFieldGrid::new(
            self.geometry,
            sums.dx.iter().map(|d| -d * hx).collect(),
            sums.dy.iter().map(|d| -d * hy).collect(),
        )
        .expect("sums match geometry")
    }

    pub fn jacobian(&self) -> JacobianGrid {
        JacobianGrid::from_sums(&self.basis_sums())
    }

    /// `D(x) I1(f(x))` at every pixel center.
    pub fn pushforward(&self, i1: &DensityGrid) -> Result<Pushforward> {
        self.geometry.check_same(i1.geometry())?;
        i1.ensure_positive()?;
        let sums = self.basis_sums();
        let jac = JacobianGrid::from_sums(&sums);
        let (w, _) = self.geometry.dims();
        let values = jac
            .det
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                d * i1.sample_px(x - sums.dx[i], y - sums.dy[i])
            })
            .collect();
        Ok(Pushforward::new(self.geometry, values, &jac.det))
    }

    /// Re-expresses the potential on a grid `factor` times finer over the
    /// same domain.
    ///
    /// Each layer keeps its physical width (sigma is multiplied by `factor`)
    /// and every coarse coefficient is spread over the fine sites within one
    /// coarse pixel, with weights that preserve its low-order moments. Units are rescaled so displacements
    /// agree in domain coordinates.
    pub fn upsample(&self, factor: usize) -> Result<PotentialField> {
        if factor < 2 {
            return Err(Error::invalid("upsampling factor must be at least 2"));
        }
        let fine = self.geometry.refined(factor);
        let layers = self
            .layers
            .iter()
            .map(|l| BasisLayer {
                sigma: l.sigma * factor as f64,
                coeffs: upsample_coeffs(&self.geometry, &l.coeffs, factor),
            })
            .collect();
        PotentialField::from_layers(fine, layers)
    }
}

fn validate_layer(geometry: &GridGeometry, layer: &BasisLayer) -> Result<()> {
    if !(layer.sigma > 0.0 && layer.sigma.is_finite()) {
        return Err(Error::invalid("basis sigma must be positive and finite"));
    }
    if layer.coeffs.len() != geometry.len() {
        return Err(Error::invalid(format!(
            "expected {} coefficients, got {}",
            geometry.len(),
            layer.coeffs.len()
        )));
    }
    if layer.coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("potential coefficient".into()));
    }
    Ok(())
}

pub(crate) fn map_from_sums(geometry: &GridGeometry, sums: &BasisSums) -> VectorFieldGrid {
    let (w, _) = geometry.dims();
    let n = geometry.len();
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        let p = [(i % w) as f64 - sums.dx[i], (i / w) as f64 - sums.dy[i]];
        let d = geometry.pixel_to_domain(p);
        u.push(d[0]);
        v.push(d[1]);
    }
    VectorFieldGrid::new(*geometry, u, v).expect("sums match geometry")
}

/// Per-axis spreading weights from each coarse site to the fine sites within
/// one coarse pixel of it. The weights are the minimum-norm solution that
/// preserves the zeroth, first and second moments of the site (the third
/// follows from symmetry away from the border).
fn spread_weights(coarse_n: usize, factor: usize) -> Vec<Vec<(usize, f64)>> {
    let fine_n = coarse_n * factor;
    let f = factor as f64;
    (0..coarse_n)
        .map(|p| {
            let sites: Vec<(usize, f64)> = (0..fine_n)
                .filter_map(|q| {
                    let t = (q as f64 + 0.5) / f - 0.5 - p as f64;
                    (t.abs() < 1.0).then_some((q, t))
                })
                .collect();
            // w = V^T (V V^T)^-1 e0 with V rows t^0, t^1, t^2
            let mut gram = nalgebra::Matrix3::<f64>::zeros();
            for &(_, t) in &sites {
                let v = nalgebra::Vector3::new(1.0, t, t * t);
                gram += v * v.transpose();
            }
            let lambda = gram
                .lu()
                .solve(&nalgebra::Vector3::new(1.0, 0.0, 0.0))
                .expect("at least three distinct fine sites per coarse site");
            sites
                .into_iter()
                .map(|(q, t)| (q, lambda[0] + lambda[1] * t + lambda[2] * t * t))
                .collect()
        })
        .collect()
}

fn upsample_coeffs(coarse: &GridGeometry, coeffs: &[f64], factor: usize) -> Vec<f64> {
    let (w, h) = coarse.dims();
    let fw = w * factor;
    let wx = spread_weights(w, factor);
    let wy = spread_weights(h, factor);
    // potential values scale by factor^2 and rho by 1/factor^2
    let scale = (factor as f64).powi(4);
    let mut out = vec![0.0; fw * h * factor];
    for row in 0..h {
        for col in 0..w {
            let c = coeffs[row * w + col];
            if c == 0.0 {
                continue;
            }
            for &(qy, ky) in &wy[row] {
                for &(qx, kx) in &wx[col] {
                    out[qy * fw + qx] += scale * c * ky * kx;
                }
            }
        }
    }
    out
}

/// Per-pixel Jacobian of the transport map, in pixel units.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianGrid {
    pub fx: Vec<f64>,
    pub fy: Vec<f64>,
    pub gx: Vec<f64>,
    pub gy: Vec<f64>,
    pub det: Vec<f64>,
}

impl JacobianGrid {
    pub(crate) fn from_sums(s: &BasisSums) -> JacobianGrid {
        let n = s.dx.len();
        let mut j = JacobianGrid {
            fx: Vec::with_capacity(n),
            fy: Vec::with_capacity(n),
            gx: Vec::with_capacity(n),
            gy: Vec::with_capacity(n),
            det: Vec::with_capacity(n),
        };
        for i in 0..n {
            let fx = 1.0 - s.hxx[i];
            let fy = -s.hxy[i];
            let gx = -s.hxy[i];
            let gy = 1.0 - s.hyy[i];
            j.fx.push(fx);
            j.fy.push(fy);
            j.gx.push(gx);
            j.gy.push(gy);
            j.det.push(fx * gy - fy * gx);
        }
        j
    }

    pub fn min_det(&self) -> f64 {
        self.det.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Result of pushing a density back through a map: `D(x) I1(f(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pushforward {
    pub geometry: GridGeometry,
    pub values: Vec<f64>,
    /// Number of pixels where the Jacobian determinant is not positive.
    pub folds: usize,
    pub min_det: f64,
}

impl Pushforward {
    pub fn new(geometry: GridGeometry, values: Vec<f64>, det: &[f64]) -> Pushforward {
        Pushforward {
            geometry,
            values,
            folds: det.iter().filter(|d| **d <= 0.0).count(),
            min_det: det.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    pub fn fold_detected(&self) -> bool {
        self.folds > 0
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn to_density(&self) -> Result<DensityGrid> {
        if self.fold_detected() {
            return Err(Error::NonInvertible(self.min_det));
        }
        DensityGrid::from_geometry(self.geometry, self.values.clone())
    }
}

/// `det(x) I1(map(x))` for an arbitrary map given in domain coordinates.
pub fn pushforward_map(
    map: &VectorFieldGrid,
    det: &[f64],
    i1: &DensityGrid,
) -> Result<Pushforward> {
    map.geometry().check_same(i1.geometry())?;
    if det.len() != i1.values().len() {
        return Err(Error::invalid("determinant grid does not match the density"));
    }
    let values = (0..det.len())
        .map(|i| det[i] * i1.bilinear_sample([map.u[i], map.v[i]]))
        .collect();
    Ok(Pushforward::new(*map.geometry(), values, det))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn geo(w: usize, h: usize) -> GridGeometry {
        GridGeometry::new(w, h).unwrap()
    }

    fn random_field(w: usize, h: usize, sigma: f64, amp: f64, seed: u64) -> PotentialField {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let c = (0..w * h).map(|_| rng.random_range(-amp..amp)).collect();
        PotentialField::new(geo(w, h), sigma, c).unwrap()
    }

    /// Untruncated double sum over every site.
    fn brute_potential(p: &PotentialField, x: [f64; 2]) -> f64 {
        let (w, _) = p.geometry().dims();
        let mut s = 0.0;
        for layer in p.layers() {
            for (i, c) in layer.coeffs.iter().enumerate() {
                let off = [x[0] - (i % w) as f64, x[1] - (i / w) as f64];
                s += c * basis_derivatives(layer.sigma, off).rho;
            }
        }
        0.5 * (x[0] * x[0] + x[1] * x[1]) - s
    }

    #[test]
    fn basis_center_and_symmetry() {
        let b = basis_derivatives(1.5, [0.0, 0.0]);
        assert_relative_eq!(b.rho, 1.0 / (2.0 * std::f64::consts::PI * 2.25));
        assert_eq!((b.rho_x, b.rho_y, b.rho_xy), (0.0, 0.0, 0.0));
        let a = basis_derivatives(1.5, [0.4, -0.9]);
        let m = basis_derivatives(1.5, [-0.4, -0.9]);
        assert_relative_eq!(a.rho_x, -m.rho_x);
        assert!(a.rho > 0.0 && a.rho < b.rho);
    }

    #[test]
    fn basis_derivatives_match_finite_differences() {
        for sigma in [0.8, 1.0, 3.0] {
            let x = [0.7 * sigma, -1.3 * sigma];
            let b = basis_derivatives(sigma, x);
            let rho = |p: [f64; 2]| basis_derivatives(sigma, p).rho;
            let h = 1e-4 * sigma;
            let d = |dx: f64, dy: f64| rho([x[0] + dx, x[1] + dy]);
            let nx = (d(h, 0.0) - d(-h, 0.0)) / (2.0 * h);
            let ny = (d(0.0, h) - d(0.0, -h)) / (2.0 * h);
            let nxx = (d(h, 0.0) - 2.0 * b.rho + d(-h, 0.0)) / (h * h);
            let nyy = (d(0.0, h) - 2.0 * b.rho + d(0.0, -h)) / (h * h);
            let nxy = (d(h, h) - d(h, -h) - d(-h, h) + d(-h, -h)) / (4.0 * h * h);
            assert_relative_eq!(b.rho_x, nx, max_relative = 1e-6);
            assert_relative_eq!(b.rho_y, ny, max_relative = 1e-6);
            assert_relative_eq!(b.rho_xx, nxx, max_relative = 1e-6);
            assert_relative_eq!(b.rho_yy, nyy, max_relative = 1e-6);
            assert_relative_eq!(b.rho_xy, nxy, max_relative = 1e-6);
        }
    }

    #[test]
    fn zero_potential_is_identity() {
        let p = PotentialField::zeros(geo(6, 5), 1.0).unwrap();
        assert_eq!(p.eval_potential([2.0, 3.0]), 6.5);
        let map = p.transport_map();
        let g = p.geometry();
        for row in 0..5 {
            for col in 0..6 {
                let c = g.pixel_center(row, col);
                let m = map.get(row, col);
                assert_relative_eq!(m[0], c[0], epsilon = 1e-15);
                assert_relative_eq!(m[1], c[1], epsilon = 1e-15);
            }
        }
        let j = p.jacobian();
        assert!(j.fx.iter().chain(&j.gy).chain(&j.det).all(|v| *v == 1.0));
        assert!(j.fy.iter().chain(&j.gx).all(|v| *v == 0.0));
    }

    #[test]
    fn single_coefficient_terms() {
        let g = geo(9, 9);
        let mut c = vec![0.0; 81];
        c[4 * 9 + 4] = 2.5;
        let p = PotentialField::new(g, 1.2, c).unwrap();
        let rho0 = basis_derivatives(1.2, [0.0, 0.0]).rho;
        assert_relative_eq!(p.eval_potential([4.0, 4.0]), 16.0 - 2.5 * rho0);
        let disp = p.displacement_field();
        let (hx, _) = g.spacing();
        for (row, col) in [(4, 6), (2, 5), (7, 1)] {
            let b = basis_derivatives(1.2, [col as f64 - 4.0, row as f64 - 4.0]);
            let [u, v] = disp.get(row, col);
            assert_relative_eq!(u, -2.5 * b.rho_x * hx, max_relative = 1e-12, epsilon = 1e-300);
            assert_relative_eq!(v, -2.5 * b.rho_y * hx, max_relative = 1e-12, epsilon = 1e-300);
        }
    }

    #[test]
    fn truncated_sum_matches_brute_force() {
        let p = random_field(20, 16, 1.5, 0.05, 3);
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for row in 0..16 {
            for col in 0..20 {
                let x = [col as f64 + 0.3, row as f64 - 0.2];
                worst = worst.max((p.eval_potential(x) - brute_potential(&p, x)).abs());
                scale = scale.max(brute_potential(&p, x).abs());
            }
        }
        assert!(worst / scale < 1e-8, "relative error {}", worst / scale);
    }

    #[test]
    fn map_is_gradient_of_potential() {
        let p = random_field(12, 12, 1.0, 0.3, 11);
        let map = p.transport_map();
        let g = *p.geometry();
        let (hx, hy) = g.spacing();
        let h = 1e-5;
        for row in 0..12 {
            for col in 0..12 {
                let x = [col as f64, row as f64];
                let gx = (p.eval_potential([x[0] + h, x[1]]) - p.eval_potential([x[0] - h, x[1]]))
                    / (2.0 * h);
                let gy = (p.eval_potential([x[0], x[1] + h]) - p.eval_potential([x[0], x[1] - h]))
                    / (2.0 * h);
                let expected = g.pixel_to_domain([gx, gy]);
                let m = map.get(row, col);
                assert!((m[0] - expected[0]).abs() / hx < 1e-5);
                assert!((m[1] - expected[1]).abs() / hy < 1e-5);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_difference_of_map() {
        let p = random_field(10, 10, 1.3, 0.4, 5);
        let j = p.jacobian();
        let h = 1e-5;
        for row in 1..9 {
            for col in 1..9 {
                let x = [col as f64, row as f64];
                let a = p.map_at([x[0] + h, x[1]]);
                let b = p.map_at([x[0] - h, x[1]]);
                let c = p.map_at([x[0], x[1] + h]);
                let d = p.map_at([x[0], x[1] - h]);
                let fx = (a[0] - b[0]) / (2.0 * h);
                let gx = (a[1] - b[1]) / (2.0 * h);
                let fy = (c[0] - d[0]) / (2.0 * h);
                let gy = (c[1] - d[1]) / (2.0 * h);
                let i = row * 10 + col;
                assert!((j.det[i] - (fx * gy - fy * gx)).abs() < 1e-4);
                assert_eq!(j.fy[i], j.gx[i]);
            }
        }
    }

    #[test]
    fn pushforward_identity_and_dilation() {
        let g = geo(8, 8);
        let i1 = DensityGrid::from_fn(g, |x, y| 1.0 + x + 2.0 * y * y).unwrap();
        let p = PotentialField::zeros(g, 1.0).unwrap();
        let pf = p.pushforward(&i1).unwrap();
        assert_eq!(pf.values, i1.values());
        assert!(!pf.fold_detected());

        let uniform = DensityGrid::constant(g, 3.0).unwrap();
        let a = 0.8;
        let map = VectorFieldGrid::from_fn(g, |x, y| [0.5 + a * (x - 0.5), 0.5 + a * (y - 0.5)]);
        let pf = pushforward_map(&map, &vec![a * a; 64], &uniform).unwrap();
        for v in &pf.values {
            assert_relative_eq!(*v, a * a * 3.0, max_relative = 1e-14);
        }
    }

    #[test]
    fn pushforward_conserves_mass_for_smooth_potential() {
        let g = geo(32, 32);
        let i1 = DensityGrid::from_fn(g, |x, y| {
            0.2 + (-((x - 0.5).powi(2) + (y - 0.45).powi(2)) / 0.02).exp()
        })
        .unwrap();
        // smooth bump well inside the domain
        let mut c = vec![0.0; 1024];
        for row in 0..32 {
            for col in 0..32 {
                let r2 = ((col as f64 - 15.5).powi(2) + (row as f64 - 15.5).powi(2)) / 16.0;
                c[row * 32 + col] = 0.3 * (-r2).exp();
            }
        }
        let p = PotentialField::new(g, 2.0, c).unwrap();
        let pf = p.pushforward(&i1).unwrap();
        assert!(!pf.fold_detected());
        assert_relative_eq!(pf.total_mass(), i1.total_mass(), max_relative = 1e-2);
    }

    #[test]
    fn pushforward_reports_folds() {
        let g = geo(9, 9);
        let mut c = vec![0.0; 81];
        c[40] = -40.0;
        let p = PotentialField::new(g, 1.0, c).unwrap();
        let i1 = DensityGrid::constant(g, 1.0).unwrap();
        let pf = p.pushforward(&i1).unwrap();
        assert!(pf.fold_detected());
        assert!(pf.to_density().is_err());
    }

    #[test]
    fn upsample_zero_and_bookkeeping() {
        let p = PotentialField::zeros(geo(16, 16), 1.5).unwrap();
        let f = p.upsample(2).unwrap();
        assert_eq!(f.geometry().dims(), (32, 32));
        assert_eq!(f.sigma(), 3.0);
        assert!(f.is_identity());
        assert!(p.upsample(1).is_err());
    }

    #[test]
    fn upsample_reproduces_single_bump_displacement() {
        let g = geo(16, 16);
        let mut c = vec![0.0; 256];
        c[7 * 16 + 8] = 3.0;
        let coarse = PotentialField::new(g, 1.0, c).unwrap();
        for factor in [2, 3] {
            let fine = coarse.upsample(factor).unwrap();
            let cd = coarse.displacement_field();
            let fd = fine.displacement_field();
            let fw = 16 * factor;
            let mut worst: f64 = 0.0;
            // coarse and fine sample points coincide for odd factors; for
            // even ones compare the continuous maps at the coarse centers
            for row in 0..16 {
                for col in 0..16 {
                    let x_dom = g.pixel_center(row, col);
                    let xf = fine.geometry().domain_to_pixel(x_dom);
                    let d = fine.displacement_at(xf);
                    let (hx, hy) = fine.geometry().spacing();
                    let [u, v] = cd.get(row, col);
                    worst = worst.max((d[0] * hx - u).abs()).max((d[1] * hy - v).abs());
                }
            }
            assert!(worst < 1e-3, "factor {factor}: {worst}");
            assert_eq!(fd.dims(), (fw, fw));
        }
    }

    #[test]
    fn perturbation_grid_matches_direct_evaluation() {
        let p = random_field(10, 8, 1.0, 0.5, 9);
        let grid = p.perturbation_grid();
        for row in 0..8 {
            for col in 0..10 {
                let x = [col as f64, row as f64];
                let direct = p.eval_potential(x) - 0.5 * (x[0] * x[0] + x[1] * x[1]);
                assert_relative_eq!(grid[row * 10 + col], direct, epsilon = 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn mixed_partials_symmetric(seed in any::<u64>(), sigma in 0.5f64..3.0) {
            let p = random_field(8, 7, sigma, 1.0, seed);
            let j = p.jacobian();
            prop_assert_eq!(&j.fy, &j.gx);
            for i in 0..j.det.len() {
                prop_assert_eq!(j.det[i], j.fx[i] * j.gy[i] - j.fy[i] * j.gx[i]);
            }
        }

        #[test]
        fn shifted_grid_matches_pointwise(seed in any::<u64>(), sx in -0.4f64..0.4, sy in -0.4f64..0.4) {
            let p = random_field(7, 8, 1.3, 1.0, seed);
            let (du, dv) = p.displacement_grid_shifted([sx, sy]);
            for row in 0..8 {
                for col in 0..7 {
                    let d = p.displacement_at([col as f64 + sx, row as f64 + sy]);
                    prop_assert!((du[row * 7 + col] - d[0]).abs() < 1e-12);
                    prop_assert!((dv[row * 7 + col] - d[1]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn grid_map_matches_pointwise_map(seed in any::<u64>(), sigma in 0.5f64..3.0) {
            let p = random_field(9, 6, sigma, 1.0, seed);
            let map = p.transport_map();
            for row in 0..6 {
                for col in 0..9 {
                    let m = p.map_at([col as f64, row as f64]);
                    let d = p.geometry().pixel_to_domain(m);
                    let got = map.get(row, col);
                    prop_assert!((got[0] - d[0]).abs() < 1e-12 && (got[1] - d[1]).abs() < 1e-12);
                }
            }
        }
    }
}
