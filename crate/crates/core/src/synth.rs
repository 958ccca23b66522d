//! Synthetic densities: classes of images made of `k` separated Gaussian
//! peaks, and reference densities.
//!
//! Randomness comes from `Xoshiro256PlusPlus` seeded through SplitMix64
//! (`SeedableRng::seed_from_u64`). Uniform coordinates are drawn with
//! `Rng::random::<f64>()`, i.e. the top 53 bits of a 64-bit output scaled by
//! `2^-53`, so a dataset is reproducible from its seed in any language.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::grid::{DensityGrid, GridGeometry};

/// Rejection-sampling budget per image.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// Minimum distance between peak centers, in peak widths.
pub const PEAK_SEPARATION: f64 = 4.0;

/// Minimum distance from a peak center to the image border, in peak widths.
pub const BORDER_MARGIN: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Image side in pixels.
    pub size: usize,
    /// Peak width in pixels.
    pub peak_sigma: f64,
    pub target_mass: f64,
    /// Constant added to every pixel before normalization, relative to the
    /// unit peak amplitude.
    pub floor: f64,
}

impl SynthConfig {
    /// Peak width scales with the image: 5 px at 128 px.
    pub fn for_size(size: usize) -> SynthConfig {
        SynthConfig {
            size,
            peak_sigma: 5.0 * size as f64 / 128.0,
            target_mass: 1.0,
            floor: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMeta {
    pub class: usize,
    pub index: usize,
    /// Seed of the class stream that produced the image.
    pub seed: u64,
    /// Peak centers as `(x, y)` pixel coordinates.
    pub centers: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct LabeledDataset {
    pub grids: Vec<DensityGrid>,
    pub labels: Vec<usize>,
    pub meta: Vec<ImageMeta>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    pub fn extend(&mut self, other: LabeledDataset) {
        self.grids.extend(other.grids);
        self.labels.extend(other.labels);
        self.meta.extend(other.meta);
    }
}

/// `n_images` images of `k_peaks` unit-amplitude peaks each, labeled
/// `k_peaks - 1`.
pub fn gen_gaussian_class(
    k_peaks: usize,
    n_images: usize,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(1..=3).contains(&k_peaks) {
        return Err(Error::invalid("peak count must be 1, 2 or 3"));
    }
    if n_images == 0 {
        return Err(Error::invalid("at least one image is required"));
    }
    if !(cfg.peak_sigma > 0.0) || !(cfg.target_mass > 0.0) || !(cfg.floor >= 0.0) {
        return Err(Error::invalid("peak_sigma and target_mass must be positive, floor non-negative"));
    }
    if cfg.size as f64 <= 8.0 * cfg.peak_sigma * k_peaks as f64 {
        return Err(Error::invalid(format!(
            "{k_peaks} peaks of width {} do not fit in {} pixels",
            cfg.peak_sigma, cfg.size
        )));
    }
    let geometry = GridGeometry::new(cfg.size, cfg.size)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut out = LabeledDataset::default();
    for index in 0..n_images {
        let centers = place_peaks(&mut rng, k_peaks, cfg)?;
        let grid = render_peaks(geometry, &centers, cfg)?;
        out.grids.push(grid);
        out.labels.push(k_peaks - 1);
        out.meta.push(ImageMeta {
            class: k_peaks - 1,
            index,
            seed,
            centers,
        });
    }
    Ok(out)
}

fn place_peaks(rng: &mut Xoshiro256PlusPlus, k: usize, cfg: &SynthConfig) -> Result<Vec<[f64; 2]>> {
    // pixel centers run from 0 to size - 1; the image edge is half a pixel out
    let lo = BORDER_MARGIN * cfg.peak_sigma - 0.5;
    let hi = cfg.size as f64 - 0.5 - BORDER_MARGIN * cfg.peak_sigma;
    let min_dist = PEAK_SEPARATION * cfg.peak_sigma;
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let centers: Vec<[f64; 2]> = (0..k)
            .map(|_| {
                let x = lo + (hi - lo) * rng.random::<f64>();
                let y = lo + (hi - lo) * rng.random::<f64>();
                [x, y]
            })
            .collect();
        let separated = centers.iter().enumerate().all(|(i, a)| {
            centers[i + 1..]
                .iter()
                .all(|b| (a[0] - b[0]).hypot(a[1] - b[1]) >= min_dist)
        });
        if separated {
            return Ok(centers);
        }
    }
    Err(Error::ConstraintsUnsatisfiable(MAX_PLACEMENT_ATTEMPTS))
}

fn render_peaks(geometry: GridGeometry, centers: &[[f64; 2]], cfg: &SynthConfig) -> Result<DensityGrid> {
    let (w, h) = geometry.dims();
    let two_s2 = 2.0 * cfg.peak_sigma * cfg.peak_sigma;
    let mut values = vec![cfg.floor; w * h];
    for row in 0..h {
        for col in 0..w {
            for c in centers {
                let (dx, dy) = (col as f64 - c[0], row as f64 - c[1]);
                values[row * w + col] += (-(dx * dx + dy * dy) / two_s2).exp();
            }
        }
    }
    DensityGrid::from_geometry(geometry, values)?.normalize_mass(cfg.target_mass, 0.0)
}

/// Constant density of total mass `target_mass`.
pub fn reference_uniform(size: usize, target_mass: f64) -> Result<DensityGrid> {
    if !(target_mass > 0.0) {
        return Err(Error::invalid("target mass must be positive"));
    }
    let g = GridGeometry::new(size, size)?;
    DensityGrid::constant(g, target_mass / g.len() as f64)
}

/// Centered isotropic Gaussian of width `ref_sigma` pixels plus `floor`
/// (relative to the unit peak), normalized to `target_mass`.
pub fn reference_gaussian(size: usize, ref_sigma: f64, target_mass: f64, floor: f64) -> Result<DensityGrid> {
    if !(ref_sigma > 0.0) || !(target_mass > 0.0) || !(floor >= 0.0) {
        return Err(Error::invalid("ref_sigma and target_mass must be positive, floor non-negative"));
    }
    let g = GridGeometry::new(size, size)?;
    let c = (size as f64 - 1.0) / 2.0;
    let two_s2 = 2.0 * ref_sigma * ref_sigma;
    let values = (0..g.len())
        .map(|i| {
            let (dx, dy) = ((i % size) as f64 - c, (i / size) as f64 - c);
            floor + (-(dx * dx + dy * dy) / two_s2).exp()
        })
        .collect();
    DensityGrid::from_geometry(g, values)?.normalize_mass(target_mass, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Connected regions above half the image maximum.
    fn bright_components(g: &DensityGrid) -> usize {
        let (w, h) = g.dims();
        let thr = 0.5 * g.max_value();
        let mut seen = vec![false; w * h];
        let mut count = 0;
        for start in 0..w * h {
            if seen[start] || g.values()[start] <= thr {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (r, c) = ((i / w) as isize, (i % w) as isize);
                for (dr, dc) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if !seen[j] && g.values()[j] > thr {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        count
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::for_size(32);
        let a = gen_gaussian_class(1, 1, &cfg, 42).unwrap();
        let b = gen_gaussian_class(1, 1, &cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = gen_gaussian_class(1, 1, &cfg, 43).unwrap();
        assert_ne!(a.grids[0], c.grids[0]);
    }

    #[test]
    fn peaks_respect_spacing_and_margin() {
        let cfg = SynthConfig::for_size(64);
        let ds = gen_gaussian_class(3, 50, &cfg, 7).unwrap();
        let s = cfg.peak_sigma;
        for m in &ds.meta {
            assert_eq!(m.centers.len(), 3);
            for (i, a) in m.centers.iter().enumerate() {
                for v in a {
                    assert!(*v >= 3.0 * s - 0.5 && *v <= 63.5 - 3.0 * s);
                }
                for b in &m.centers[i + 1..] {
                    assert!((a[0] - b[0]).hypot(a[1] - b[1]) >= 4.0 * s);
                }
            }
        }
        for g in &ds.grids {
            assert_relative_eq!(g.total_mass(), cfg.target_mass, max_relative = 1e-12);
            assert!(g.min_value() > 0.0);
        }
    }

    #[test]
    fn classes_have_distinct_peak_counts() {
        let cfg = SynthConfig::for_size(64);
        for k in 1..=3 {
            let ds = gen_gaussian_class(k, 10, &cfg, 100 + k as u64).unwrap();
            assert!(ds.labels.iter().all(|l| *l == k - 1));
            for g in &ds.grids {
                assert_eq!(bright_components(g), k);
            }
        }
    }

    #[test]
    fn crowded_configurations_fail() {
        let mut cfg = SynthConfig::for_size(64);
        cfg.peak_sigma = 3.0;
        assert!(gen_gaussian_class(3, 1, &cfg, 1).is_err());
        assert!(gen_gaussian_class(4, 1, &SynthConfig::for_size(64), 1).is_err());
        // the size guard rejects most crowding; the sampler itself gives up
        // when the spacing rule cannot be met
        let cramped = SynthConfig {
            size: 12,
            peak_sigma: 1.5,
            target_mass: 1.0,
            floor: 0.0,
        };
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        assert!(matches!(
            place_peaks(&mut rng, 3, &cramped),
            Err(Error::ConstraintsUnsatisfiable(MAX_PLACEMENT_ATTEMPTS))
        ));
    }

    #[test]
    fn uniform_reference() {
        let r = reference_uniform(4, 16.0).unwrap();
        assert!(r.values().iter().all(|v| *v == 1.0));
        let r = reference_uniform(7, 3.0).unwrap();
        assert_eq!(r.min_value(), r.max_value());
        assert_relative_eq!(r.total_mass(), 3.0, max_relative = 1e-12);
        let again = r.normalize_mass(3.0, 0.0).unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn gaussian_reference_shape() {
        let r = reference_gaussian(9, 2.0, 1.0, 0.0).unwrap();
        let c = r.get(4, 4);
        assert_eq!(c, r.max_value());
        for row in 0..9 {
            for col in 0..9 {
                // quarter turn: (row, col) -> (col, 8 - row)
                assert_relative_eq!(r.get(row, col), r.get(col, 8 - row), max_relative = 1e-12);
            }
        }
        let even = reference_gaussian(8, 2.0, 1.0, 0.0).unwrap();
        let m = even.max_value();
        for (row, col) in [(3, 3), (3, 4), (4, 3), (4, 4)] {
            assert_eq!(even.get(row, col), m);
        }
    }

    #[test]
    fn wide_gaussian_reference_approaches_uniform() {
        let u = reference_uniform(16, 1.0).unwrap();
        let mut last = f64::INFINITY;
        for s in [10.0, 100.0, 1000.0, 10000.0] {
            let g = reference_gaussian(16, s, 1.0, 0.0).unwrap();
            let gap = g
                .values()
                .iter()
                .zip(u.values())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(gap < last);
            last = gap;
        }
        assert!(last < 1e-8);
    }
}
