//! Implementations of the `lot` subcommands.
//!
//! Each command writes its outputs atomically into `cfg.out` together with
//! the resolved configuration, and returns a small summary for the caller.

use std::fs;
use std::path::{Path, PathBuf};

use lot_core::io::{
    density_from_lgrd, density_to_lgrd, field_from_lgrd, field_to_lgrd, potential_from_lgrd,
    potential_to_lgrd, write_atomic, RawGrid,
};
use lot_core::{
    crossval_many, gen_gaussian_class, inverse_lot, plda_fit, solve_multiscale, CvResult,
    DensityGrid, Error, FeatureKind, FeatureMatrix, FoldPlan, LabeledDataset, LotEmbedding,
    MetricsReport, Pca, PotentialField,
};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, CONFIG_SNAPSHOT};
use crate::error::{CliError, CliResult};
use crate::gradcheck::{run_gradcheck, GradcheckReport};

pub const MANIFEST: &str = "manifest.csv";
pub const RESULTS: &str = "results.csv";

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
    let path = dir.join(name);
    write_atomic(&path, bytes)?;
    Ok(path)
}

/// Creates the output directory and writes the resolved configuration.
pub fn prepare_out(cfg: &RunConfig) -> CliResult<PathBuf> {
    fs::create_dir_all(&cfg.out)
        .map_err(|e| CliError::bad(format!("cannot create {}: {e}", cfg.out.display())))?;
    write_file(&cfg.out, CONFIG_SNAPSHOT, cfg.to_text().as_bytes())?;
    Ok(cfg.out.clone())
}

fn write_potential(dir: &Path, stem: &str, p: &PotentialField) -> CliResult<()> {
    let (raw, meta) = potential_to_lgrd(p);
    write_file(dir, &format!("{stem}.lgrd"), &raw.to_bytes())?;
    write_file(dir, &format!("{stem}.meta"), meta.as_bytes())?;
    Ok(())
}

/// Reads a potential from `path` and the `.meta` sidecar beside it.
pub fn read_potential(path: &Path) -> CliResult<PotentialField> {
    let raw = RawGrid::from_bytes(&fs::read(path)?)?;
    let meta = fs::read_to_string(path.with_extension("meta"))
        .map_err(|e| CliError::bad(format!("potential sidecar for {}: {e}", path.display())))?;
    Ok(potential_from_lgrd(&raw, &meta)?)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".into())
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarpOutcome {
    pub metrics: MetricsReport,
    pub converged: bool,
}

/// Solves for the map carrying `target` onto `source` and writes the
/// potential, the warped source `D I1(f)`, metrics and the objective trace.
pub fn cmd_warp(cfg: &RunConfig, source: &Path, target: &Path) -> CliResult<WarpOutcome> {
    let i1 = cfg.read_image(source)?;
    let i0 = cfg.read_image(target)?;
    if i0.dims() != i1.dims() {
        return Err(CliError::bad(format!(
            "source is {:?} but target is {:?}",
            i1.dims(),
            i0.dims()
        )));
    }
    if i0.values() == i1.values() {
        return Err(Error::IdenticalInputs.into());
    }
    let out = prepare_out(cfg)?;
    let (p, report) = solve_multiscale(&i0, &i1, &cfg.solver())?;
    let metrics = report
        .final_metrics
        .ok_or_else(|| CliError::from(Error::IdenticalInputs))?;
    let warped = p.pushforward(&i1)?;
    let (w, h) = i0.dims();
    write_potential(&out, "potential", &p)?;
    write_file(&out, "warped.lgrd", &RawGrid::from_planes(w, h, &[&warped.values])?.to_bytes())?;
    let pair = format!("{}_to_{}", stem(source), stem(target));
    let csv = format!("{}\n{}\n", MetricsReport::csv_header(), metrics.csv_row(&pair));
    write_file(&out, "metrics.csv", csv.as_bytes())?;
    write_file(&out, "trace.csv", report.trace_csv().as_bytes())?;
    write_file(&out, "report.txt", report.summary().as_bytes())?;
    Ok(WarpOutcome {
        metrics,
        converged: report.converged,
    })
}

/// Embeds `input` relative to the configured reference. Writes the
/// embedding (two channels), the potential and the reference used.
pub fn cmd_lot(cfg: &RunConfig, input: &Path) -> CliResult<LotEmbedding> {
    let i = cfg.read_image(input)?;
    let reference = cfg.reference_density(i.width())?;
    if reference.dims() != i.dims() {
        return Err(CliError::bad("input and reference sizes differ"));
    }
    let out = prepare_out(cfg)?;
    let (p, report) = solve_multiscale(&reference, &i, &cfg.solver())?;
    let emb = LotEmbedding::from_potential(p, &reference)?;
    write_file(&out, "embedding.lgrd", &field_to_lgrd(&emb.hat).to_bytes())?;
    write_potential(&out, "potential", emb.potential.as_ref().expect("solved embedding"))?;
    write_file(&out, "reference.lgrd", &density_to_lgrd(&reference).to_bytes())?;
    write_file(&out, "trace.csv", report.trace_csv().as_bytes())?;
    write_file(&out, "report.txt", report.summary().as_bytes())?;
    Ok(emb)
}

/// Reconstructs a density from an embedding and the configured reference.
/// With a potential, its analytic Jacobian guards against folds.
pub fn cmd_invert(cfg: &RunConfig, embedding: &Path, potential: Option<&Path>) -> CliResult<DensityGrid> {
    let raw = RawGrid::from_bytes(&fs::read(embedding)?)?;
    if raw.channels != 2 {
        return Err(CliError::bad("an embedding has two channels"));
    }
    let reference = cfg.reference_density(raw.width)?;
    let hat = field_from_lgrd(&raw, *reference.geometry())?;
    let potential = potential.map(read_potential).transpose()?;
    let emb = LotEmbedding {
        hat,
        reference,
        potential,
    };
    let out = prepare_out(cfg)?;
    let rec = inverse_lot(&emb)?;
    write_file(&out, "reconstructed.lgrd", &density_to_lgrd(&rec).to_bytes())?;
    Ok(rec)
}

/// Computes metrics of a stored potential for a source/target pair.
pub fn cmd_metrics(cfg: &RunConfig, source: &Path, target: &Path, potential: &Path) -> CliResult<MetricsReport> {
    let i1 = cfg.read_image(source)?;
    let i0 = cfg.read_image(target)?;
    let p = read_potential(potential)?;
    let m = MetricsReport::compute(&p, &i0, &i1)?;
    let out = prepare_out(cfg)?;
    let pair = format!("{}_to_{}", stem(source), stem(target));
    let csv = format!("{}\n{}\n", MetricsReport::csv_header(), m.csv_row(&pair));
    write_file(&out, "metrics.csv", csv.as_bytes())?;
    Ok(m)
}

/// Stream seed of one class, decorrelated across classes and base seeds.
pub fn class_seed(seed: u64, k_peaks: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (k_peaks as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Generates the synthetic classes under `cfg.out` as
/// `class_<k>/img_<i>.lgrd` plus a manifest.
pub fn cmd_gen_gaussians(cfg: &RunConfig) -> CliResult<LabeledDataset> {
    let synth = cfg.synth();
    let parts: Vec<LabeledDataset> = cfg
        .classes
        .par_iter()
        .enumerate()
        .map(|(label, &k)| {
            let mut ds = gen_gaussian_class(k, cfg.n_per_class, &synth, class_seed(cfg.seed, k))?;
            ds.labels.iter_mut().for_each(|l| *l = label);
            Ok(ds)
        })
        .collect::<CliResult<_>>()?;
    let out = prepare_out(cfg)?;
    let mut manifest = String::from("path,label,peaks,seed,centers\n");
    let mut all = LabeledDataset::default();
    for ds in parts {
        for ((grid, label), meta) in ds.grids.iter().zip(&ds.labels).zip(&ds.meta) {
            let peaks = meta.centers.len();
            let rel = format!("class_{peaks}/img_{}.lgrd", meta.index);
            write_file(&out, &rel, &density_to_lgrd(grid).to_bytes())?;
            let centers: Vec<String> = meta.centers.iter().map(|c| format!("{} {}", c[0], c[1])).collect();
            manifest.push_str(&format!(
                "{rel},{label},{peaks},{},{}\n",
                meta.seed,
                centers.join(";")
            ));
        }
        all.extend(ds);
    }
    write_file(&out, MANIFEST, manifest.as_bytes())?;
    Ok(all)
}

/// Images and labels listed in a dataset manifest.
pub fn read_dataset(dir: &Path) -> CliResult<(Vec<String>, Vec<DensityGrid>, Vec<usize>)> {
    let text = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| CliError::bad(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.starts_with("path,label") => {}
        _ => return Err(CliError::bad("manifest must start with a `path,label` header")),
    }
    let (mut paths, mut grids, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let mut cols = line.split(',');
        let (Some(path), Some(label)) = (cols.next(), cols.next()) else {
            return Err(CliError::bad(format!("bad manifest row `{line}`")));
        };
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| CliError::bad(format!("bad label in `{line}`")))?;
        let raw = RawGrid::from_bytes(&fs::read(dir.join(path))?)?;
        grids.push(density_from_lgrd(&raw)?);
        labels.push(label);
        paths.push(path.to_string());
    }
    if grids.is_empty() {
        return Err(CliError::bad("manifest lists no images"));
    }
    Ok((paths, grids, labels))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Cache file stem for one solve: a hash of the image, the reference and
/// the solver settings.
pub fn cache_key(image: &DensityGrid, reference: &DensityGrid, solver_text: &str) -> String {
    let mut h = Sha256::new();
    h.update(density_to_lgrd(image).to_bytes());
    h.update(density_to_lgrd(reference).to_bytes());
    h.update(solver_text.as_bytes());
    hex(&h.finalize())
}

/// Potential of every image against `reference`, reusing cached solves.
/// Returns the potentials and how many were read from the cache.
pub fn solve_all(
    cfg: &RunConfig,
    images: &[DensityGrid],
    reference: &DensityGrid,
    cache_dir: &Path,
) -> CliResult<(Vec<PotentialField>, usize)> {
    let solver = cfg.solver();
    let solver_text = cfg.solver_text();
    let results: Vec<(PotentialField, bool)> = images
        .par_iter()
        .map(|img| -> CliResult<(PotentialField, bool)> {
            let img = img.normalize_mass(reference.total_mass(), 0.0)?;
            let key = cache_key(&img, reference, &solver_text);
            let path = cache_dir.join(format!("{key}.lgrd"));
            if cfg.cache && path.exists() {
                if let Ok(p) = read_potential(&path) {
                    return Ok((p, true));
                }
            }
            let (p, _) = solve_multiscale(reference, &img, &solver)?;
            if cfg.cache {
                write_potential(cache_dir, &key, &p)?;
            }
            Ok((p, false))
        })
        .collect::<CliResult<_>>()?;
    let cached = results.iter().filter(|r| r.1).count();
    Ok((results.into_iter().map(|r| r.0).collect(), cached))
}

/// The classification feature of a solved potential: the perturbation of
/// the potential away from the identity, sampled at every pixel center.
pub fn potential_features(p: &PotentialField) -> Vec<f64> {
    p.perturbation_grid()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifyOutcome {
    pub results: Vec<(FeatureKind, CvResult)>,
    pub solved: usize,
    pub cached: usize,
}

impl ClassifyOutcome {
    pub fn mean(&self, kind: FeatureKind, classifier: &str) -> Option<f64> {
        self.results
            .iter()
            .find(|(k, r)| *k == kind && r.classifier == classifier)
            .map(|(_, r)| r.mean)
    }

    /// Failed accuracy thresholds, empty when all hold.
    pub fn gate_failures(&self, cfg: &RunConfig) -> Vec<String> {
        let mut fails = Vec::new();
        for (kind, r) in &self.results {
            match kind {
                FeatureKind::Potential if r.mean < cfg.gate_potential_min => fails.push(format!(
                    "potential/{} accuracy {:.3} < {}",
                    r.classifier, r.mean, cfg.gate_potential_min
                )),
                FeatureKind::Image if r.mean > cfg.gate_image_max => fails.push(format!(
                    "image/{} accuracy {:.3} > {}",
                    r.classifier, r.mean, cfg.gate_image_max
                )),
                _ => {}
            }
        }
        if let (Some(p), Some(i)) = (
            self.mean(FeatureKind::Potential, "plda"),
            self.mean(FeatureKind::Image, "plda"),
        ) {
            if p < i + cfg.gate_plda_margin {
                fails.push(format!(
                    "potential plda {p:.3} does not exceed image plda {i:.3} by {}",
                    cfg.gate_plda_margin
                ));
            }
        }
        fails
    }
}

/// Two-dimensional PLDA projection of all samples, for scatter plots.
fn plda_scatter(x: &FeatureMatrix, cfg: &RunConfig) -> CliResult<String> {
    let mut z = x.clone();
    if let Some(k) = cfg.pca_components {
        let k = k.min(x.n_samples).min(x.n_features);
        z = Pca::fit(x, k)?.transform(x);
    }
    let plda = plda_fit(&z, cfg.plda_alpha)?;
    let mut out = String::from("label,component_1,component_2\n");
    for i in 0..z.n_samples {
        let p = plda.project(z.row(i));
        let c2 = p.get(1).copied().unwrap_or(0.0);
        out.push_str(&format!("{},{},{}\n", z.labels[i], p[0], c2));
    }
    Ok(out)
}

/// Solves every dataset image against the reference (with caching), then
/// cross-validates each classifier on image and potential features.
pub fn cmd_classify(cfg: &RunConfig, dataset: &Path) -> CliResult<ClassifyOutcome> {
    let (paths, images, labels) = read_dataset(dataset)?;
    let size = images[0].width();
    if images.iter().any(|g| g.dims() != (size, size)) {
        return Err(CliError::bad("dataset images must be square and share one size"));
    }
    let reference = cfg.reference_density(size)?;
    let out = prepare_out(cfg)?;
    let cache_dir = out.join("cache");
    fs::create_dir_all(&cache_dir)?;
    let (potentials, cached) = solve_all(cfg, &images, &reference, &cache_dir)?;

    let mut solves = format!("path,{}\n", &MetricsReport::csv_header()["pair_id,".len()..]);
    for (path, (img, p)) in paths.iter().zip(images.iter().zip(&potentials)) {
        let img = img.normalize_mass(reference.total_mass(), 0.0)?;
        let row = match MetricsReport::compute(p, &reference, &img) {
            Ok(m) => m.csv_row(path),
            Err(Error::IdenticalInputs) => format!("{path},,0,0"),
            Err(e) => return Err(e.into()),
        };
        solves.push_str(&row);
        solves.push('\n');
    }
    write_file(&out, "solves.csv", solves.as_bytes())?;

    let plan = FoldPlan::stratified(&labels, cfg.folds, cfg.seed)?;
    let classifiers = cfg.classifiers();
    let pre = cfg.preprocess();
    let name = dataset
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let mut csv = String::from("dataset,feature_kind,classifier,mean_acc,std_acc\n");
    let mut results = Vec::new();
    for kind in [FeatureKind::Image, FeatureKind::Potential] {
        let rows: Vec<Vec<f64>> = match kind {
            FeatureKind::Image => images.iter().map(|g| g.values().to_vec()).collect(),
            FeatureKind::Potential => potentials.iter().map(potential_features).collect(),
        };
        let x = FeatureMatrix::new(rows, labels.clone(), kind)?;
        write_file(&out, &format!("plda_scatter_{}.csv", kind.as_str()), plda_scatter(&x, cfg)?.as_bytes())?;
        for r in crossval_many(&x, &classifiers, &plan, &pre)? {
            csv.push_str(&format!("{name},{},{},{},{}\n", kind.as_str(), r.classifier, r.mean, r.std));
            results.push((kind, r));
        }
    }
    write_file(&out, RESULTS, csv.as_bytes())?;
    let outcome = ClassifyOutcome {
        results,
        solved: images.len() - cached,
        cached,
    };
    if cfg.gate {
        let fails = outcome.gate_failures(cfg);
        if !fails.is_empty() {
            return Err(CliError::GateFailed(fails.join("; ")));
        }
    }
    Ok(outcome)
}

/// Runs the gradient check and writes every compared entry.
pub fn cmd_gradcheck(cfg: &RunConfig) -> CliResult<GradcheckReport> {
    let report = run_gradcheck(
        &cfg.gradcheck_sizes,
        &cfg.gradcheck_sigmas,
        cfg.gradcheck_coeffs,
        cfg.gradcheck_step,
        cfg.seed,
    )?;
    let out = prepare_out(cfg)?;
    write_file(&out, "gradcheck.csv", report.to_csv().as_bytes())?;
    if !report.passed(cfg.gradcheck_tol) {
        return Err(CliError::GateFailed(format!(
            "gradient check failed: max relative error {:e} > {:e}",
            report.max_relative_error, cfg.gradcheck_tol
        )));
    }
    Ok(report)
}
