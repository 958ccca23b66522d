//! Analytic gradient against central finite differences on random pairs.

use lot_core::{analytic_gradient, objective_terms, DensityGrid, GridGeometry, PotentialField};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    pub size: usize,
    pub sigma: f64,
    pub index: usize,
    pub analytic: f64,
    pub finite_difference: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
    pub max_relative_error: f64,
    /// Coefficients skipped because their stencil crossed a kink.
    pub redrawn: usize,
}

impl GradcheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_relative_error <= tol
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("size,sigma,index,analytic,finite_difference,relative_error\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.size, r.sigma, r.index, r.analytic, r.finite_difference, r.relative_error
            ));
        }
        out
    }
}

/// Positive random densities of equal mass, and small random coefficients
/// that keep the map fold-free.
fn random_instance(n: usize, sigma: f64, rng: &mut Xoshiro256PlusPlus) -> CliResult<(DensityGrid, DensityGrid, PotentialField)> {
    let g = GridGeometry::new(n, n)?;
    let a: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.5..1.5)).collect();
    let b: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.5..1.5)).collect();
    let i0 = DensityGrid::from_geometry(g, a)?;
    let i1 = DensityGrid::from_geometry(g, b)?.normalize_mass(i0.total_mass(), 0.0)?;
    let c: Vec<f64> = (0..n * n).map(|_| rng.random_range(-0.05..0.05)).collect();
    Ok((i0, i1, PotentialField::new(g, sigma, c)?))
}

/// True when some pixel's image lands in a different interpolation cell on
/// the two sides of the stencil, where the objective has a kink.
fn straddles(a: &PotentialField, b: &PotentialField) -> bool {
    a.mapped_pixels()
        .iter()
        .zip(b.mapped_pixels())
        .any(|(p, q)| p[0].floor() != q[0].floor() || p[1].floor() != q[1].floor())
}

/// Compares `coeffs_per_case` randomly chosen gradient entries for every
/// `(size, sigma)` combination.
///
/// The step is `step * sigma^2` in coefficient units, which moves the map by
/// a comparable amount for every width. Central differences are summed pixel
/// by pixel so untouched pixels cancel exactly. A coefficient whose stencil
/// straddles an interpolation kink is redrawn. The relative error divides by
/// the larger of the two values, floored at 1e-3 of the largest gradient
/// entry so that near-zero entries do not dominate.
pub fn run_gradcheck(
    sizes: &[usize],
    sigmas: &[f64],
    coeffs_per_case: usize,
    step: f64,
    seed: u64,
) -> CliResult<GradcheckReport> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut redrawn = 0;
    for &n in sizes {
        for &sigma in sigmas {
            let (i0, i1, p) = random_instance(n, sigma, &mut rng)?;
            let grad = analytic_gradient(&p, &i0, &i1)?;
            let gmax = grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let g = *p.geometry();
            let h = step * sigma * sigma;
            let shifted = |k: usize, delta: f64| -> CliResult<PotentialField> {
                let mut c = p.coeffs().to_vec();
                c[k] += delta;
                Ok(PotentialField::new(g, sigma, c)?)
            };
            let mut kept = 0;
            let mut draws = 0;
            while kept < coeffs_per_case {
                draws += 1;
                if draws > 100 * coeffs_per_case {
                    return Err(CliError::bad("every finite-difference stencil crosses an interpolation kink; use a smaller step"));
                }
                let k = rng.random_range(0..n * n);
                let (plus, minus) = (shifted(k, h)?, shifted(k, -h)?);
                if straddles(&plus, &minus) {
                    redrawn += 1;
                    continue;
                }
                let (tp, tm) = (objective_terms(&plus, &i0, &i1)?, objective_terms(&minus, &i0, &i1)?);
                let diff: f64 = tp.iter().zip(&tm).map(|(a, b)| a - b).sum();
                let fd = diff / (2.0 * h);
                let denom = grad[k].abs().max(fd.abs()).max(1e-3 * gmax);
                let relative_error = if denom > 0.0 { (grad[k] - fd).abs() / denom } else { 0.0 };
                rows.push(GradcheckRow {
                    size: n,
                    sigma,
                    index: k,
                    analytic: grad[k],
                    finite_difference: fd,
                    relative_error,
                });
                kept += 1;
            }
        }
    }
    let max_relative_error = rows.iter().fold(0.0f64, |a, r| a.max(r.relative_error));
    Ok(GradcheckReport {
        rows,
        max_relative_error,
        redrawn,
    })
}
