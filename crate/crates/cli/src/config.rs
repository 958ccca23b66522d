//! `key=value` run configuration with flag overrides.
//!
//! Every key has a default. A config file and the command line may override
//! any of them; unknown keys are rejected. The resolved configuration is
//! written next to every output so a run can be repeated exactly.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lot_core::{
    io::parse_key_values, reference_gaussian, reference_uniform, ClassifierKind, DensityGrid,
    Preprocess, SolverConfig, SynthConfig,
};

use crate::error::{CliError, CliResult};

/// File name of the resolved configuration inside an output directory.
pub const CONFIG_SNAPSHOT: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub enum ReferenceSpec {
    Uniform,
    /// Centered Gaussian of width `ref_sigma` pixels.
    Gaussian,
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,

    pub levels: usize,
    pub sigma: Vec<f64>,
    pub eta: Vec<f64>,
    pub max_iters: usize,
    pub max_iters_per_scale: Option<Vec<usize>>,
    pub grad_tol: Option<f64>,
    pub objective_rel_tol: f64,
    pub window: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub max_backoffs: usize,
    pub smooth_sigma: f64,

    pub target_mass: f64,
    /// Floor for images read from disk, as a fraction of the mean pixel mass.
    pub input_floor: f64,

    pub size: usize,
    pub n_per_class: usize,
    pub classes: Vec<usize>,
    /// Peak width in pixels; `None` scales with `size`.
    pub peak_sigma: Option<f64>,
    /// Synthetic image floor relative to the unit peak amplitude.
    pub floor: f64,

    pub reference: ReferenceSpec,
    pub ref_sigma: f64,
    pub ref_floor: f64,

    pub folds: usize,
    /// `None` skips the projection; `Some(usize::MAX)` keeps every component.
    pub pca_components: Option<usize>,
    pub rescale: bool,
    pub plda_alpha: f64,
    pub logreg_l2: f64,
    pub logreg_iters: usize,
    pub logreg_eta: f64,
    pub svm_lambda: f64,
    pub svm_epochs: usize,
    pub cache: bool,
    /// Enforce the accuracy thresholds below after classification.
    pub gate: bool,
    pub gate_potential_min: f64,
    pub gate_image_max: f64,
    pub gate_plda_margin: f64,

    pub gradcheck_sizes: Vec<usize>,
    pub gradcheck_sigmas: Vec<f64>,
    pub gradcheck_coeffs: usize,
    pub gradcheck_step: f64,
    pub gradcheck_tol: f64,

    explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let solver = SolverConfig::table1_multi_scale();
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            workers: 0,
            levels: solver.levels,
            sigma: solver.sigma_per_scale.clone(),
            eta: solver.eta_per_scale.clone(),
            max_iters: solver.max_iters,
            max_iters_per_scale: None,
            grad_tol: solver.grad_tol,
            objective_rel_tol: solver.objective_rel_tol,
            window: solver.window,
            beta1: solver.beta1,
            beta2: solver.beta2,
            eps_adam: solver.eps_adam,
            max_backoffs: solver.max_backoffs,
            smooth_sigma: solver.smooth_sigma,
            target_mass: 1.0,
            input_floor: 1e-3,
            size: 64,
            n_per_class: 200,
            classes: vec![1, 2, 3],
            peak_sigma: None,
            floor: 1e-3,
            reference: ReferenceSpec::Uniform,
            ref_sigma: 16.0,
            ref_floor: 1e-2,
            folds: 10,
            pca_components: Some(usize::MAX),
            rescale: true,
            plda_alpha: 1.0,
            logreg_l2: 1e-4,
            logreg_iters: 2000,
            logreg_eta: 0.01,
            svm_lambda: 1e-4,
            svm_epochs: 50,
            cache: true,
            gate: false,
            gate_potential_min: 0.80,
            gate_image_max: 0.50,
            gate_plda_margin: 0.30,
            gradcheck_sizes: vec![16, 32],
            gradcheck_sigmas: vec![1.0, 2.0, 4.0],
            gradcheck_coeffs: 20,
            gradcheck_step: 1e-6,
            gradcheck_tol: 1e-4,
            explicit: BTreeSet::new(),
        }
    }
}

/// Every accepted key, in snapshot order.
pub const KEYS: &[&str] = &[
    "seed",
    "out",
    "workers",
    "levels",
    "sigma",
    "eta",
    "max_iters",
    "max_iters_per_scale",
    "grad_tol",
    "objective_rel_tol",
    "window",
    "beta1",
    "beta2",
    "eps_adam",
    "max_backoffs",
    "smooth_sigma",
    "target_mass",
    "input_floor",
    "size",
    "n_per_class",
    "classes",
    "peak_sigma",
    "floor",
    "reference",
    "ref_sigma",
    "ref_floor",
    "folds",
    "pca_components",
    "rescale",
    "plda_alpha",
    "logreg_l2",
    "logreg_iters",
    "logreg_eta",
    "svm_lambda",
    "svm_epochs",
    "cache",
    "gate",
    "gate_potential_min",
    "gate_image_max",
    "gate_plda_margin",
    "gradcheck_sizes",
    "gradcheck_sigmas",
    "gradcheck_coeffs",
    "gradcheck_step",
    "gradcheck_tol",
];

fn scalar<T: FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::bad(format!("config key `{key}`: cannot parse `{value}`")))
}

fn list<T: FromStr>(key: &str, value: &str) -> CliResult<Vec<T>> {
    let items: Vec<T> = value
        .split(',')
        .map(|v| scalar(key, v))
        .collect::<CliResult<_>>()?;
    if items.is_empty() {
        return Err(CliError::bad(format!("config key `{key}` needs at least one value")));
    }
    Ok(items)
}

fn boolean(key: &str, value: &str) -> CliResult<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(CliError::bad(format!("config key `{key}`: expected true or false, got `{other}`"))),
    }
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Defaults, then the optional file, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::bad(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.finish()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> CliResult<()> {
        let kv = parse_key_values(text)?;
        for (k, v) in &kv {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = scalar(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "workers" => self.workers = scalar(key, v)?,
            "levels" => self.levels = scalar(key, v)?,
            "sigma" => self.sigma = list(key, v)?,
            "eta" => self.eta = list(key, v)?,
            "max_iters" => self.max_iters = scalar(key, v)?,
            "max_iters_per_scale" => {
                self.max_iters_per_scale = if v == "none" { None } else { Some(list(key, v)?) }
            }
            "grad_tol" => self.grad_tol = if v == "auto" { None } else { Some(scalar(key, v)?) },
            "objective_rel_tol" => self.objective_rel_tol = scalar(key, v)?,
            "window" => self.window = scalar(key, v)?,
            "beta1" => self.beta1 = scalar(key, v)?,
            "beta2" => self.beta2 = scalar(key, v)?,
            "eps_adam" => self.eps_adam = scalar(key, v)?,
            "max_backoffs" => self.max_backoffs = scalar(key, v)?,
            "smooth_sigma" => self.smooth_sigma = scalar(key, v)?,
            "target_mass" => self.target_mass = scalar(key, v)?,
            "input_floor" => self.input_floor = scalar(key, v)?,
            "size" => self.size = scalar(key, v)?,
            "n_per_class" => self.n_per_class = scalar(key, v)?,
            "classes" => self.classes = list(key, v)?,
            "peak_sigma" => self.peak_sigma = if v == "auto" { None } else { Some(scalar(key, v)?) },
            "floor" => self.floor = scalar(key, v)?,
            "reference" => {
                self.reference = match v {
                    "uniform" => ReferenceSpec::Uniform,
                    "gaussian" => ReferenceSpec::Gaussian,
                    path => ReferenceSpec::File(PathBuf::from(path)),
                }
            }
            "ref_sigma" => self.ref_sigma = scalar(key, v)?,
            "ref_floor" => self.ref_floor = scalar(key, v)?,
            "folds" => self.folds = scalar(key, v)?,
            "pca_components" => {
                self.pca_components = match v {
                    "none" => None,
                    "max" => Some(usize::MAX),
                    n => Some(scalar(key, n)?),
                }
            }
            "rescale" => self.rescale = boolean(key, v)?,
            "plda_alpha" => self.plda_alpha = scalar(key, v)?,
            "logreg_l2" => self.logreg_l2 = scalar(key, v)?,
            "logreg_iters" => self.logreg_iters = scalar(key, v)?,
            "logreg_eta" => self.logreg_eta = scalar(key, v)?,
            "svm_lambda" => self.svm_lambda = scalar(key, v)?,
            "svm_epochs" => self.svm_epochs = scalar(key, v)?,
            "cache" => self.cache = boolean(key, v)?,
            "gate" => self.gate = boolean(key, v)?,
            "gate_potential_min" => self.gate_potential_min = scalar(key, v)?,
            "gate_image_max" => self.gate_image_max = scalar(key, v)?,
            "gate_plda_margin" => self.gate_plda_margin = scalar(key, v)?,
            "gradcheck_sizes" => self.gradcheck_sizes = list(key, v)?,
            "gradcheck_sigmas" => self.gradcheck_sigmas = list(key, v)?,
            "gradcheck_coeffs" => self.gradcheck_coeffs = scalar(key, v)?,
            "gradcheck_step" => self.gradcheck_step = scalar(key, v)?,
            "gradcheck_tol" => self.gradcheck_tol = scalar(key, v)?,
            other => return Err(CliError::bad(format!("unknown config key `{other}`"))),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Reconciles the level count with the per-scale lists and validates.
    ///
    /// When `levels` differs from the length of a list that was left at its
    /// default, the finest entries of that list are kept, so `levels=1`
    /// alone gives the finest default scale.
    fn finish(&mut self) -> CliResult<()> {
        for (key, len) in [("sigma", self.sigma.len()), ("eta", self.eta.len())] {
            if len != self.levels && !self.explicit.contains(key) && self.levels <= len && self.levels > 0 {
                let drop = len - self.levels;
                match key {
                    "sigma" => {
                        self.sigma.drain(..drop);
                    }
                    _ => {
                        self.eta.drain(..drop);
                    }
                }
            }
        }
        self.solver().validate()?;
        if self.classes.iter().any(|k| !(1..=3).contains(k)) || self.classes.is_empty() {
            return Err(CliError::bad("classes must be peak counts in 1..=3"));
        }
        if self.folds < 2 {
            return Err(CliError::bad("folds must be at least 2"));
        }
        if self.gradcheck_coeffs == 0 || !(self.gradcheck_step > 0.0) {
            return Err(CliError::bad("gradcheck needs coefficients and a positive step"));
        }
        if !(self.target_mass > 0.0) || !(self.input_floor >= 0.0) || !(self.input_floor < 1.0) {
            return Err(CliError::bad("target_mass must be positive and input_floor in [0, 1)"));
        }
        Ok(())
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            sigma_per_scale: self.sigma.clone(),
            eta_per_scale: self.eta.clone(),
            levels: self.levels,
            max_iters: self.max_iters,
            max_iters_per_scale: self.max_iters_per_scale.clone(),
            grad_tol: self.grad_tol,
            objective_rel_tol: self.objective_rel_tol,
            window: self.window,
            beta1: self.beta1,
            beta2: self.beta2,
            eps_adam: self.eps_adam,
            max_backoffs: self.max_backoffs,
            smooth_sigma: self.smooth_sigma,
        }
    }

    pub fn synth(&self) -> SynthConfig {
        let mut s = SynthConfig::for_size(self.size);
        if let Some(p) = self.peak_sigma {
            s.peak_sigma = p;
        }
        s.target_mass = self.target_mass;
        s.floor = self.floor;
        s
    }

    /// The reference density for images of `size` pixels a side.
    pub fn reference_density(&self, size: usize) -> CliResult<DensityGrid> {
        Ok(match &self.reference {
            ReferenceSpec::Uniform => reference_uniform(size, self.target_mass)?,
            ReferenceSpec::Gaussian => {
                reference_gaussian(size, self.ref_sigma, self.target_mass, self.ref_floor)?
            }
            ReferenceSpec::File(path) => self.read_image(path)?,
        })
    }

    /// Reads an image and normalizes it to the target mass with the input
    /// floor.
    pub fn read_image(&self, path: &Path) -> CliResult<DensityGrid> {
        let raw = lot_core::io::read_density(path)
            .map_err(|e| CliError::bad(format!("{}: {e}", path.display())))?;
        let floor = self.input_floor * self.target_mass / raw.values().len() as f64;
        Ok(raw.normalize_mass(self.target_mass, floor)?)
    }

    pub fn classifiers(&self) -> Vec<ClassifierKind> {
        vec![
            ClassifierKind::LinSvm {
                lambda: self.svm_lambda,
                epochs: self.svm_epochs,
                seed: self.seed,
            },
            ClassifierKind::LogReg {
                l2: self.logreg_l2,
                iters: self.logreg_iters,
                eta: self.logreg_eta,
            },
            ClassifierKind::Plda { alpha: self.plda_alpha },
        ]
    }

    pub fn preprocess(&self) -> Preprocess {
        Preprocess {
            pca_components: self.pca_components,
            rescale: self.rescale,
        }
    }

    pub fn value(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "out" => self.out.display().to_string(),
            "workers" => self.workers.to_string(),
            "levels" => self.levels.to_string(),
            "sigma" => join(&self.sigma),
            "eta" => join(&self.eta),
            "max_iters" => self.max_iters.to_string(),
            "max_iters_per_scale" => self
                .max_iters_per_scale
                .as_ref()
                .map_or("none".into(), |m| join(m)),
            "grad_tol" => self.grad_tol.map_or("auto".into(), |t| t.to_string()),
            "objective_rel_tol" => self.objective_rel_tol.to_string(),
            "window" => self.window.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "eps_adam" => self.eps_adam.to_string(),
            "max_backoffs" => self.max_backoffs.to_string(),
            "smooth_sigma" => self.smooth_sigma.to_string(),
            "target_mass" => self.target_mass.to_string(),
            "input_floor" => self.input_floor.to_string(),
            "size" => self.size.to_string(),
            "n_per_class" => self.n_per_class.to_string(),
            "classes" => join(&self.classes),
            "peak_sigma" => self.peak_sigma.map_or("auto".into(), |p| p.to_string()),
            "floor" => self.floor.to_string(),
            "reference" => match &self.reference {
                ReferenceSpec::Uniform => "uniform".into(),
                ReferenceSpec::Gaussian => "gaussian".into(),
                ReferenceSpec::File(p) => p.display().to_string(),
            },
            "ref_sigma" => self.ref_sigma.to_string(),
            "ref_floor" => self.ref_floor.to_string(),
            "folds" => self.folds.to_string(),
            "pca_components" => match self.pca_components {
                None => "none".into(),
                Some(usize::MAX) => "max".into(),
                Some(n) => n.to_string(),
            },
            "rescale" => self.rescale.to_string(),
            "plda_alpha" => self.plda_alpha.to_string(),
            "logreg_l2" => self.logreg_l2.to_string(),
            "logreg_iters" => self.logreg_iters.to_string(),
            "logreg_eta" => self.logreg_eta.to_string(),
            "svm_lambda" => self.svm_lambda.to_string(),
            "svm_epochs" => self.svm_epochs.to_string(),
            "cache" => self.cache.to_string(),
            "gate" => self.gate.to_string(),
            "gate_potential_min" => self.gate_potential_min.to_string(),
            "gate_image_max" => self.gate_image_max.to_string(),
            "gate_plda_margin" => self.gate_plda_margin.to_string(),
            "gradcheck_sizes" => join(&self.gradcheck_sizes),
            "gradcheck_sigmas" => join(&self.gradcheck_sigmas),
            "gradcheck_coeffs" => self.gradcheck_coeffs.to_string(),
            "gradcheck_step" => self.gradcheck_step.to_string(),
            "gradcheck_tol" => self.gradcheck_tol.to_string(),
            other => unreachable!("no config key `{other}`"),
        }
    }

    /// Every key with its resolved value, one per line.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k}={}\n", self.value(k))).collect()
    }

    /// The solver keys only, used to key cached solves.
    pub fn solver_text(&self) -> String {
        let s = self.solver();
        format!(
            "sigma={}\neta={}\nlevels={}\nmax_iters={}\nmax_iters_per_scale={}\ngrad_tol={}\nobjective_rel_tol={}\nwindow={}\nbeta1={}\nbeta2={}\neps_adam={}\nmax_backoffs={}\nsmooth_sigma={}\n",
            join(&s.sigma_per_scale),
            join(&s.eta_per_scale),
            s.levels,
            s.max_iters,
            s.max_iters_per_scale.as_ref().map_or("none".into(), |m| join(m)),
            s.grad_tol.map_or("auto".into(), |t| t.to_string()),
            s.objective_rel_tol,
            s.window,
            s.beta1,
            s.beta2,
            s.eps_adam,
            s.max_backoffs,
            s.smooth_sigma,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_are_the_three_scale_schedule() {
        let cfg = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(cfg.sigma, vec![12.0, 4.0, 1.0]);
        assert_eq!(cfg.eta, vec![1.0, 0.1, 0.01]);
        assert_eq!(cfg.levels, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::resolve(None, &kv(&[("sigmas", "1")])).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("sigmas"));
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_text("seed=1\nbogus=2\n").is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = RunConfig::resolve(
            None,
            &kv(&[
                ("levels", "2"),
                ("sigma", "4,1"),
                ("eta", "0.1,0.01"),
                ("max_iters_per_scale", "10,20"),
                ("pca_components", "50"),
                ("reference", "gaussian"),
                ("grad_tol", "1e-9"),
            ]),
        )
        .unwrap();
        let mut again = RunConfig::default();
        again.apply_text(&cfg.to_text()).unwrap();
        again.finish().unwrap();
        assert_eq!(again.to_text(), cfg.to_text());
        assert_eq!(again.solver(), cfg.solver());
    }

    #[test]
    fn level_count_trims_default_lists_to_the_finest_scales() {
        let cfg = RunConfig::resolve(None, &kv(&[("levels", "1")])).unwrap();
        assert_eq!(cfg.sigma, vec![1.0]);
        assert_eq!(cfg.eta, vec![0.01]);
        let err = RunConfig::resolve(None, &kv(&[("levels", "2"), ("sigma", "4,2,1")])).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn later_overrides_win() {
        let cfg = RunConfig::resolve(None, &kv(&[("seed", "3"), ("seed", "9")])).unwrap();
        assert_eq!(cfg.seed, 9);
    }
}
