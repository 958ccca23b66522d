//! Linear optimal transport embedding relative to a fixed reference.
//!
//! A density `I` is embedded as `(f(x) - x) sqrt(I0(x))`, where `f` carries
//! the reference `I0` onto `I`. Displacements are in domain units and `I0`
//! enters as an areal density (pixel mass over pixel area), so the squared
//! Euclidean norm of an embedding is the transport cost
//! `sum |f(x) - x|^2 I0(x)` with `I0(x)` as pixel mass.

use crate::error::{Error, Result};
use crate::grid::{DensityGrid, VectorFieldGrid};
use crate::potential::PotentialField;
use crate::solver::{solve_multiscale, SolveReport, SolverConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct LotEmbedding {
    pub hat: VectorFieldGrid,
    pub reference: DensityGrid,
    /// The solved potential; `None` for embeddings produced by field
    /// arithmetic.
    pub potential: Option<PotentialField>,
}

impl LotEmbedding {
    /// The embedding of the reference itself.
    pub fn zero(reference: &DensityGrid) -> LotEmbedding {
        LotEmbedding {
            hat: VectorFieldGrid::zeros(*reference.geometry()),
            reference: reference.clone(),
            potential: None,
        }
    }

    /// The embedding induced by a potential.
    pub fn from_potential(p: PotentialField, reference: &DensityGrid) -> Result<LotEmbedding> {
        p.geometry().check_same(reference.geometry())?;
        let disp = p.displacement_field();
        let root = sqrt_areal(reference);
        let hat = VectorFieldGrid::new(
            *reference.geometry(),
            disp.u.iter().zip(&root).map(|(d, r)| d * r).collect(),
            disp.v.iter().zip(&root).map(|(d, r)| d * r).collect(),
        )?;
        Ok(LotEmbedding {
            hat,
            reference: reference.clone(),
            potential: Some(p),
        })
    }

    /// The map `f(x) = x + hat / sqrt(I0)` at every pixel center, in domain
    /// coordinates.
    pub fn transport_map(&self) -> Result<VectorFieldGrid> {
        let g = *self.reference.geometry();
        let root = sqrt_areal(&self.reference);
        if root.iter().any(|r| *r <= 0.0) {
            return Err(Error::NonPositiveDensity(self.reference.min_value()));
        }
        let (w, _) = g.dims();
        let centers: Vec<[f64; 2]> = (0..g.len()).map(|i| g.pixel_center(i / w, i % w)).collect();
        VectorFieldGrid::new(
            g,
            (0..g.len()).map(|i| centers[i][0] + self.hat.u[i] / root[i]).collect(),
            (0..g.len()).map(|i| centers[i][1] + self.hat.v[i] / root[i]).collect(),
        )
    }

    fn derived(&self, u: Vec<f64>, v: Vec<f64>) -> LotEmbedding {
        LotEmbedding {
            hat: VectorFieldGrid::new(*self.reference.geometry(), u, v)
                .expect("derived field matches the reference"),
            reference: self.reference.clone(),
            potential: None,
        }
    }
}

/// `sqrt` of the reference as an areal density, per pixel.
fn sqrt_areal(reference: &DensityGrid) -> Vec<f64> {
    let area = reference.geometry().pixel_area();
    reference.values().iter().map(|m| (m / area).sqrt()).collect()
}

/// Embeds `i` relative to `i0` by solving for the map that carries `i0`
/// onto `i`.
pub fn forward_lot(i: &DensityGrid, i0: &DensityGrid, cfg: &SolverConfig) -> Result<LotEmbedding> {
    forward_lot_with_report(i, i0, cfg).map(|(e, _)| e)
}

pub fn forward_lot_with_report(
    i: &DensityGrid,
    i0: &DensityGrid,
    cfg: &SolverConfig,
) -> Result<(LotEmbedding, SolveReport)> {
    let (p, report) = solve_multiscale(i0, i, cfg)?;
    Ok((LotEmbedding::from_potential(p, i0)?, report))
}

/// Reconstructs the embedded density by moving each reference pixel's mass
/// to `f(x)` and splatting it bilinearly onto the grid. Mass landing outside
/// the grid is clamped to the border, so total mass is conserved.
pub fn inverse_lot(emb: &LotEmbedding) -> Result<DensityGrid> {
    let map = emb.transport_map()?;
    let min_det = match &emb.potential {
        Some(p) => p.jacobian().min_det(),
        None => min_grid_jacobian_det(&map),
    };
    if min_det <= 0.0 {
        return Err(Error::NonInvertible(min_det));
    }
    let g = *emb.reference.geometry();
    let (w, h) = g.dims();
    let mut out = vec![0.0; g.len()];
    for (i, m) in emb.reference.values().iter().enumerate() {
        let [px, py] = g.domain_to_pixel([map.u[i], map.v[i]]);
        let px = px.clamp(0.0, (w - 1) as f64);
        let py = py.clamp(0.0, (h - 1) as f64);
        let (c0, r0) = (px.floor() as usize, py.floor() as usize);
        let (c1, r1) = ((c0 + 1).min(w - 1), (r0 + 1).min(h - 1));
        let (tx, ty) = (px - c0 as f64, py - r0 as f64);
        out[r0 * w + c0] += m * (1.0 - tx) * (1.0 - ty);
        out[r0 * w + c1] += m * tx * (1.0 - ty);
        out[r1 * w + c0] += m * (1.0 - tx) * ty;
        out[r1 * w + c1] += m * tx * ty;
    }
    DensityGrid::from_geometry(g, out)
}

/// Smallest Jacobian determinant of a sampled map, from central
/// differences inside and one-sided differences at the border.
fn min_grid_jacobian_det(map: &VectorFieldGrid) -> f64 {
    let (w, h) = map.dims();
    let (hx, hy) = map.geometry().spacing();
    let d = |f: &[f64], lo: usize, hi: usize, span: f64| (f[hi] - f[lo]) / span;
    let mut min = f64::INFINITY;
    for row in 0..h {
        for col in 0..w {
            let (cl, cr) = (col.saturating_sub(1), (col + 1).min(w - 1));
            let (ru, rd) = (row.saturating_sub(1), (row + 1).min(h - 1));
            let (sx, sy) = ((cr - cl) as f64 * hx, (rd - ru) as f64 * hy);
            // a single row or column has no extent along that axis
            let (ux, vx) = if cr > cl {
                (d(&map.u, row * w + cl, row * w + cr, sx), d(&map.v, row * w + cl, row * w + cr, sx))
            } else {
                (1.0, 0.0)
            };
            let (uy, vy) = if rd > ru {
                (d(&map.u, ru * w + col, rd * w + col, sy), d(&map.v, ru * w + col, rd * w + col, sy))
            } else {
                (0.0, 1.0)
            };
            min = min.min(ux * vy - uy * vx);
        }
    }
    min
}

/// `sqrt(sum |a - b|^2 * pixel_area)`.
pub fn lot_distance(a: &LotEmbedding, b: &LotEmbedding) -> Result<f64> {
    if a.reference != b.reference {
        return Err(Error::ReferenceMismatch);
    }
    let area = a.reference.geometry().pixel_area();
    let sum: f64 = (0..a.hat.u.len())
        .map(|i| {
            let du = a.hat.u[i] - b.hat.u[i];
            let dv = a.hat.v[i] - b.hat.v[i];
            du * du + dv * dv
        })
        .sum();
    Ok((sum * area).sqrt())
}

/// Embedding of the density translated by `mu` (domain units).
pub fn predict_translation(emb: &LotEmbedding, mu: [f64; 2]) -> LotEmbedding {
    let root = sqrt_areal(&emb.reference);
    emb.derived(
        emb.hat.u.iter().zip(&root).map(|(h, r)| h + mu[0] * r).collect(),
        emb.hat.v.iter().zip(&root).map(|(h, r)| h + mu[1] * r).collect(),
    )
}

/// Embedding of `s^2 I(s x)`: the density contracted by `s` towards the
/// domain origin.
pub fn predict_scaling(emb: &LotEmbedding, s: f64) -> Result<LotEmbedding> {
    predict_scaling_about(emb, s, [0.0, 0.0])
}

/// Embedding of `s^2 I(c + s (x - c))`: the density contracted by `s`
/// towards `center`.
pub fn predict_scaling_about(emb: &LotEmbedding, s: f64, center: [f64; 2]) -> Result<LotEmbedding> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::invalid("scale factor must be positive"));
    }
    let g = *emb.reference.geometry();
    let (w, _) = g.dims();
    let root = sqrt_areal(&emb.reference);
    let mut u = Vec::with_capacity(g.len());
    let mut v = Vec::with_capacity(g.len());
    for i in 0..g.len() {
        let [x, y] = g.pixel_center(i / w, i % w);
        u.push((emb.hat.u[i] - (x - center[0]) * (s - 1.0) * root[i]) / s);
        v.push((emb.hat.v[i] - (y - center[1]) * (s - 1.0) * root[i]) / s);
    }
    Ok(emb.derived(u, v))
}

/// Embedding of `D_g I(g(x))` given the inverse map `g_inverse` in domain
/// coordinates. `g` must be the gradient of a convex function; the Jacobian
/// of `g_inverse` is checked for positivity at every point it is evaluated.
pub fn predict_composition(
    emb: &LotEmbedding,
    g_inverse: impl Fn([f64; 2]) -> [f64; 2],
) -> Result<LotEmbedding> {
    let map = emb.transport_map()?;
    let g = *emb.reference.geometry();
    let (w, _) = g.dims();
    let root = sqrt_areal(&emb.reference);
    let step = 1e-6 * g.domain.width().max(g.domain.height());
    let mut u = Vec::with_capacity(g.len());
    let mut v = Vec::with_capacity(g.len());
    for i in 0..g.len() {
        let y = [map.u[i], map.v[i]];
        let gy = g_inverse(y);
        let xp = g_inverse([y[0] + step, y[1]]);
        let xm = g_inverse([y[0] - step, y[1]]);
        let yp = g_inverse([y[0], y[1] + step]);
        let ym = g_inverse([y[0], y[1] - step]);
        let det = ((xp[0] - xm[0]) * (yp[1] - ym[1]) - (yp[0] - ym[0]) * (xp[1] - xm[1]))
            / (4.0 * step * step);
        if !(gy[0].is_finite() && gy[1].is_finite() && det.is_finite()) {
            return Err(Error::NonFinite("composed map".into()));
        }
        if det <= 0.0 {
            return Err(Error::NonInvertible(det));
        }
        let [x0, y0] = g.pixel_center(i / w, i % w);
        u.push((gy[0] - x0) * root[i]);
        v.push((gy[1] - y0) * root[i]);
    }
    Ok(emb.derived(u, v))
}
