//! Quality measures for a computed transport map.

use crate::error::{Error, Result};
use crate::grid::{DensityGrid, VectorFieldGrid};
use crate::potential::PotentialField;

/// Step, in pixels, of the central differences taken on the continuous map.
pub const CURL_STEP_PX: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    /// Residual energy of the warped image relative to the unwarped one.
    pub relative_mse: f64,
    /// Mean squared displacement weighted by the reference, domain units.
    pub mass_transported: f64,
    /// Mean absolute curl of the map.
    pub mean_abs_curl: f64,
}

impl MetricsReport {
    pub fn compute(p: &PotentialField, i0: &DensityGrid, i1: &DensityGrid) -> Result<Self> {
        Ok(MetricsReport {
            relative_mse: relative_mse(p, i0, i1)?,
            mass_transported: mass_transported(p, i0)?,
            mean_abs_curl: map_mean_abs_curl(p),
        })
    }

    pub fn csv_header() -> &'static str {
        "pair_id,relative_mse,mass_transported,mean_abs_curl"
    }

    pub fn csv_row(&self, pair_id: &str) -> String {
        format!(
            "{pair_id},{},{},{}",
            self.relative_mse, self.mass_transported, self.mean_abs_curl
        )
    }
}

/// `sum (D I1(f) - I0)^2 / sum (I1 - I0)^2` over pixel centers.
pub fn relative_mse(p: &PotentialField, i0: &DensityGrid, i1: &DensityGrid) -> Result<f64> {
    p.geometry().check_same(i0.geometry())?;
    p.geometry().check_same(i1.geometry())?;
    let denom: f64 = i1
        .values()
        .iter()
        .zip(i0.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if denom == 0.0 {
        return Err(Error::IdenticalInputs);
    }
    let warped = p.pushforward(i1)?;
    let num: f64 = warped
        .values
        .iter()
        .zip(i0.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(num / denom)
}

/// `sum |f(x) - x|^2 I0(x) / sum I0(x)` with displacements in domain units.
pub fn mass_transported(p: &PotentialField, i0: &DensityGrid) -> Result<f64> {
    p.geometry().check_same(i0.geometry())?;
    let disp = p.displacement_field();
    Ok(displacement_cost(&disp, i0) / i0.total_mass())
}

pub(crate) fn displacement_cost(disp: &VectorFieldGrid, i0: &DensityGrid) -> f64 {
    disp.u
        .iter()
        .zip(&disp.v)
        .zip(i0.values())
        .map(|((u, v), m)| (u * u + v * v) * m)
        .sum()
}

/// Mean of `|dv/dx - du/dy|` over interior pixels, with central differences
/// in domain units. Border rows and columns are excluded.
pub fn mean_abs_curl(field: &VectorFieldGrid) -> f64 {
    let (w, h) = field.dims();
    if w < 3 || h < 3 {
        return 0.0;
    }
    let (hx, hy) = field.geometry().spacing();
    let mut sum = 0.0;
    for row in 1..h - 1 {
        for col in 1..w - 1 {
            let dv_dx = (field.v[row * w + col + 1] - field.v[row * w + col - 1]) / (2.0 * hx);
            let du_dy = (field.u[(row + 1) * w + col] - field.u[(row - 1) * w + col]) / (2.0 * hy);
            sum += (dv_dx - du_dy).abs();
        }
    }
    sum / ((w - 2) * (h - 2)) as f64
}

/// Mean absolute curl of the continuous map `f`, from central differences of
/// `f` with step [`CURL_STEP_PX`] at every pixel center.
///
/// Sampled grid differences of an exact gradient carry an `O(h^2 / sigma^2)`
/// stencil error that dominates for narrow bases, so the map itself is
/// differenced instead.
pub fn map_mean_abs_curl(p: &PotentialField) -> f64 {
    let g = p.geometry();
    let (w, h) = g.dims();
    let (hx, hy) = g.spacing();
    let s = CURL_STEP_PX;
    let (_, gp) = p.displacement_grid_shifted([s, 0.0]);
    let (_, gm) = p.displacement_grid_shifted([-s, 0.0]);
    let (fp, _) = p.displacement_grid_shifted([0.0, s]);
    let (fm, _) = p.displacement_grid_shifted([0.0, -s]);
    let mut sum = 0.0;
    for i in 0..w * h {
        // pixel-unit derivatives converted to domain units
        let dg_dx = (gp[i] - gm[i]) / (2.0 * s) * hy / hx;
        let df_dy = (fp[i] - fm[i]) / (2.0 * s) * hx / hy;
        sum += (dg_dx - df_dy).abs();
    }
    sum / (w * h) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridGeometry;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn blob(g: GridGeometry, cx: f64, cy: f64) -> DensityGrid {
        DensityGrid::from_fn(g, |x, y| {
            0.1 + (-((x - cx).powi(2) + (y - cy).powi(2)) / 0.02).exp()
        })
        .unwrap()
    }

    #[test]
    fn identity_map_metrics() {
        let g = GridGeometry::new(16, 16).unwrap();
        let i0 = blob(g, 0.5, 0.5);
        let i1 = blob(g, 0.55, 0.45).normalize_mass(i0.total_mass(), 0.0).unwrap();
        let p = PotentialField::zeros(g, 1.0).unwrap();
        assert_eq!(relative_mse(&p, &i0, &i1).unwrap(), 1.0);
        assert_eq!(mass_transported(&p, &i0).unwrap(), 0.0);
        assert_eq!(map_mean_abs_curl(&p), 0.0);
        assert!(matches!(
            relative_mse(&p, &i0, &i0),
            Err(Error::IdenticalInputs)
        ));
    }

    #[test]
    fn perfect_match_has_zero_relative_mse() {
        // I1 = I0 pulled back through an exact map: use the pushforward itself
        let g = GridGeometry::new(16, 16).unwrap();
        let i1 = blob(g, 0.5, 0.5);
        let mut c = vec![0.0; 256];
        c[8 * 16 + 8] = 0.5;
        let p = PotentialField::new(g, 2.0, c).unwrap();
        let i0 = p.pushforward(&i1).unwrap().to_density().unwrap();
        assert_relative_eq!(relative_mse(&p, &i0, &i1).unwrap(), 0.0, epsilon = 1e-30);
    }

    #[test]
    fn rigid_shift_mass_transported() {
        let g = GridGeometry::new(10, 10).unwrap();
        let i0 = DensityGrid::constant(g, 2.0).unwrap();
        let d = [0.03, -0.04];
        let disp = VectorFieldGrid::from_fn(g, |_, _| d);
        let cost = displacement_cost(&disp, &i0) / i0.total_mass();
        assert_relative_eq!(cost, 0.0025, max_relative = 1e-12);
    }

    #[test]
    fn rotational_field_curl() {
        let g = GridGeometry::new(33, 33).unwrap();
        let rot = VectorFieldGrid::from_fn(g, |x, y| [-y, x]);
        assert_relative_eq!(mean_abs_curl(&rot), 2.0, max_relative = 1e-10);
    }

    #[test]
    fn mirrored_field_has_same_mean_abs_curl() {
        let g = GridGeometry::new(12, 9).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
        let u: Vec<f64> = (0..108).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..108).map(|_| rng.random_range(-1.0..1.0)).collect();
        let field = VectorFieldGrid::new(g, u.clone(), v.clone()).unwrap();
        // reflect x -> -x: u changes sign and columns reverse
        let mut mu = vec![0.0; 108];
        let mut mv = vec![0.0; 108];
        for row in 0..9 {
            for col in 0..12 {
                mu[row * 12 + col] = -u[row * 12 + 11 - col];
                mv[row * 12 + col] = v[row * 12 + 11 - col];
            }
        }
        let mirrored = VectorFieldGrid::new(g, mu, mv).unwrap();
        assert_relative_eq!(mean_abs_curl(&field), mean_abs_curl(&mirrored), max_relative = 1e-12);
    }

    #[test]
    fn discrete_gradient_field_is_curl_free() {
        let g = GridGeometry::new(20, 20).unwrap();
        let pot = DensityGrid::from_fn(g, |x, y| 3.0 + (5.0 * x).sin() * (3.0 * y).cos()).unwrap();
        let grad = pot.finite_diff_gradient().unwrap();
        assert!(mean_abs_curl(&grad) < 1e-6);
    }

    #[test]
    fn potential_maps_are_curl_free() {
        let g = GridGeometry::new(24, 24).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
        let c = (0..576).map(|_| rng.random_range(-2.0..2.0)).collect();
        let p = PotentialField::new(g, 1.0, c).unwrap();
        assert!(map_mean_abs_curl(&p) < 1e-6);
    }

    #[test]
    fn metrics_invariant_under_transpose() {
        let g = GridGeometry::new(14, 14).unwrap();
        let i0 = blob(g, 0.45, 0.55);
        let i1 = blob(g, 0.6, 0.4);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(8);
        let c: Vec<f64> = (0..196).map(|_| rng.random_range(-0.2..0.2)).collect();
        let t = |v: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; 196];
            for r in 0..14 {
                for col in 0..14 {
                    out[col * 14 + r] = v[r * 14 + col];
                }
            }
            out
        };
        let p = PotentialField::new(g, 1.5, c.clone()).unwrap();
        let pt = PotentialField::new(g, 1.5, t(&c)).unwrap();
        let i0t = DensityGrid::new(14, 14, t(i0.values())).unwrap();
        let i1t = DensityGrid::new(14, 14, t(i1.values())).unwrap();
        let a = MetricsReport::compute(&p, &i0, &i1).unwrap();
        let b = MetricsReport::compute(&pt, &i0t, &i1t).unwrap();
        assert_relative_eq!(a.relative_mse, b.relative_mse, max_relative = 1e-10);
        assert_relative_eq!(a.mass_transported, b.mass_transported, max_relative = 1e-10);
        assert!((a.mean_abs_curl - b.mean_abs_curl).abs() < 1e-9);
    }
}
