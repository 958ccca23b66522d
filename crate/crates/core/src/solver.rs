//! Fitting a potential so that its map carries `I1` onto `I0`.
//!
//! The discretized objective is
//!
//! ```text
//! psi(c) = 1/2 sum_x (D(x) I1(f(x)) - I0(x))^2
//! ```
//!
//! with `f` and its Jacobian determinant `D` given by the potential model.
//! Its gradient with respect to the coefficients is assembled from six
//! per-pixel weight fields correlated with the basis derivatives, so one
//! gradient costs a handful of separable passes. Coefficients are updated
//! with Adam; a step that would fold the map (`D <= 0` anywhere) is halved
//! until it does not.

use crate::error::{Error, Result};
use crate::grid::{gaussian_pyramid, DensityGrid, GridGeometry};
use crate::metrics::MetricsReport;
use crate::potential::{correlate_derivatives, BasisLayer, BasisSums, Kernel1d, PotentialField};

/// Relative tolerance for the equal-mass precondition.
pub const MASS_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    /// Basis width per scale, coarsest first, in pixels of the finest grid.
    pub sigma_per_scale: Vec<f64>,
    /// Adam learning rate per scale, coarsest first.
    pub eta_per_scale: Vec<f64>,
    pub levels: usize,
    /// Iteration cap per scale.
    pub max_iters: usize,
    /// Per-scale caps, coarsest first, overriding `max_iters`.
    pub max_iters_per_scale: Option<Vec<usize>>,
    /// Stop when the largest gradient entry falls below this. `None` uses
    /// `1e-7 * mass / pixels` of the reference at each scale.
    pub grad_tol: Option<f64>,
    /// Stop when the best objective improved by less than this fraction over
    /// the last `window` iterations.
    pub objective_rel_tol: f64,
    pub window: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    /// Halvings tried before a folding step is rejected.
    pub max_backoffs: usize,
    /// Smoothing width of the Gaussian pyramid, in pixels.
    pub smooth_sigma: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig::single_scale(1.0, 0.01)
    }
}

impl SolverConfig {
    pub fn single_scale(sigma: f64, eta: f64) -> SolverConfig {
        SolverConfig {
            sigma_per_scale: vec![sigma],
            eta_per_scale: vec![eta],
            levels: 1,
            max_iters: 2000,
            max_iters_per_scale: None,
            grad_tol: None,
            objective_rel_tol: 1e-9,
            window: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            max_backoffs: 20,
            smooth_sigma: 1.0,
        }
    }

    pub fn multi_scale(sigmas: Vec<f64>, etas: Vec<f64>) -> SolverConfig {
        SolverConfig {
            levels: sigmas.len(),
            sigma_per_scale: sigmas,
            eta_per_scale: etas,
            ..SolverConfig::single_scale(1.0, 0.01)
        }
    }

    /// Three scales with widths `{12, 4, 1}` and rates `{1, 0.1, 0.01}`.
    pub fn table1_multi_scale() -> SolverConfig {
        SolverConfig::multi_scale(vec![12.0, 4.0, 1.0], vec![1.0, 0.1, 0.01])
    }

    /// Iteration cap of scale `scale` (0 = coarsest).
    pub fn iteration_cap(&self, scale: usize) -> usize {
        self.max_iters_per_scale
            .as_ref()
            .and_then(|m| m.get(scale).copied())
            .unwrap_or(self.max_iters)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::invalid("levels must be at least 1"));
        }
        if self.sigma_per_scale.len() != self.levels || self.eta_per_scale.len() != self.levels {
            return Err(Error::invalid(format!(
                "expected {} sigma and eta values, got {} and {}",
                self.levels,
                self.sigma_per_scale.len(),
                self.eta_per_scale.len()
            )));
        }
        if self
            .max_iters_per_scale
            .as_ref()
            .is_some_and(|m| m.len() != self.levels)
        {
            return Err(Error::invalid("max_iters_per_scale needs one entry per level"));
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !self.sigma_per_scale.iter().chain(&self.eta_per_scale).all(|v| positive(*v)) {
            return Err(Error::invalid("sigma and eta values must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("beta1 and beta2 must lie in [0, 1)"));
        }
        if !positive(self.eps_adam) || !positive(self.smooth_sigma) {
            return Err(Error::invalid("eps_adam and smooth_sigma must be positive"));
        }
        if self.grad_tol.is_some_and(|t| !(t >= 0.0)) || !(self.objective_rel_tol >= 0.0) {
            return Err(Error::invalid("tolerances must be non-negative"));
        }
        if self.window == 0 {
            return Err(Error::invalid("window must be at least 1"));
        }
        Ok(())
    }
}

/// Adam moment estimates for one coefficient grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> AdamState {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Advances the moments with `grad` and returns the new state together
    /// with the additive coefficient update `-eta * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&self, grad: &[f64], eta: f64, cfg: &SolverConfig) -> (AdamState, Vec<f64>) {
        assert_eq!(grad.len(), self.m.len(), "gradient shape mismatch");
        let t = self.t + 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        let mut next = AdamState {
            m: Vec::with_capacity(grad.len()),
            v: Vec::with_capacity(grad.len()),
            t,
        };
        let mut update = Vec::with_capacity(grad.len());
        for ((g, m), v) in grad.iter().zip(&self.m).zip(&self.v) {
            let m = b1 * m + (1.0 - b1) * g;
            let v = b2 * v + (1.0 - b2) * g * g;
            update.push(-eta * (m / c1) / ((v / c2).sqrt() + cfg.eps_adam));
            next.m.push(m);
            next.v.push(v);
        }
        (next, update)
    }
}

/// A pair of densities prepared for fitting, plus the fixed contribution of
/// any earlier layers.
struct Problem<'a> {
    geometry: GridGeometry,
    i0: &'a DensityGrid,
    i1: &'a DensityGrid,
    kernel: Kernel1d,
    background: Option<BasisSums>,
}

/// Everything computed at one coefficient vector.
struct Evaluation {
    sums: BasisSums,
    det: Vec<f64>,
    warped: Vec<f64>,
    i1_dx: Vec<f64>,
    i1_dy: Vec<f64>,
    residual: Vec<f64>,
    psi: f64,
    folds: usize,
}

impl<'a> Problem<'a> {
    fn new(p: &PotentialField, i0: &'a DensityGrid, i1: &'a DensityGrid) -> Result<Self> {
        check_pair(i0, i1)?;
        p.geometry().check_same(i0.geometry())?;
        let background = if p.layers().len() > 1 {
            let fixed = PotentialField::from_layers(
                *p.geometry(),
                p.layers()[..p.layers().len() - 1].to_vec(),
            )?;
            Some(fixed.basis_sums())
        } else {
            None
        };
        Ok(Problem {
            geometry: *p.geometry(),
            i0,
            i1,
            kernel: Kernel1d::new(p.sigma()),
            background,
        })
    }

    fn evaluate(&self, coeffs: &[f64]) -> Evaluation {
        let active = BasisSums::from_coeffs(&self.geometry, &self.kernel, coeffs);
        let sums = match &self.background {
            Some(b) => BasisSums::sum(b, &active),
            None => active,
        };
        let (w, _) = self.geometry.dims();
        let n = self.geometry.len();
        let mut e = Evaluation {
            det: Vec::with_capacity(n),
            warped: Vec::with_capacity(n),
            i1_dx: Vec::with_capacity(n),
            i1_dy: Vec::with_capacity(n),
            residual: Vec::with_capacity(n),
            psi: 0.0,
            folds: 0,
            sums,
        };
        let i0 = self.i0.values();
        for i in 0..n {
            let s = &e.sums;
            let fx = 1.0 - s.hxx[i];
            let gy = 1.0 - s.hyy[i];
            let det = fx * gy - s.hxy[i] * s.hxy[i];
            let (x, y) = ((i % w) as f64 - s.dx[i], (i / w) as f64 - s.dy[i]);
            let (val, dx, dy) = self.i1.sample_px_with_gradient(x, y);
            let r = det * val - i0[i];
            if det <= 0.0 {
                e.folds += 1;
            }
            e.psi += 0.5 * r * r;
            e.det.push(det);
            e.warped.push(val);
            e.i1_dx.push(dx);
            e.i1_dy.push(dy);
            e.residual.push(r);
        }
        e
    }

    /// Gradient of psi with respect to the active coefficients.
    fn gradient(&self, e: &Evaluation) -> Vec<f64> {
        let n = self.geometry.len();
        let mut l_xy = Vec::with_capacity(n);
        let mut l_xx = Vec::with_capacity(n);
        let mut l_yy = Vec::with_capacity(n);
        let mut l_x = Vec::with_capacity(n);
        let mut l_y = Vec::with_capacity(n);
        for i in 0..n {
            let s = &e.sums;
            let (fx, fy, gx, gy) = (1.0 - s.hxx[i], -s.hxy[i], -s.hxy[i], 1.0 - s.hyy[i]);
            let ri = e.residual[i] * e.warped[i];
            let rd = e.residual[i] * e.det[i];
            // dD/dc = -gy rho_xx - fx rho_yy + (gx + fy) rho_xy
            l_xy.push(ri * (gx + fy));
            l_xx.push(-ri * gy);
            l_yy.push(-ri * fx);
            // dI1(f)/dc = -I1_x rho_x - I1_y rho_y
            l_x.push(-rd * e.i1_dx[i]);
            l_y.push(-rd * e.i1_dy[i]);
        }
        correlate_derivatives(&self.geometry, &self.kernel, &l_xy, &l_xx, &l_yy, &l_x, &l_y)
    }
}

fn check_pair(i0: &DensityGrid, i1: &DensityGrid) -> Result<()> {
    i0.geometry().check_same(i1.geometry())?;
    i0.ensure_positive()?;
    i1.ensure_positive()?;
    let (a, b) = (i0.total_mass(), i1.total_mass());
    if (a - b).abs() > MASS_TOLERANCE * a.max(b) {
        return Err(Error::UnequalMass { a, b });
    }
    Ok(())
}

/// `psi` for the given potential.
pub fn objective(p: &PotentialField, i0: &DensityGrid, i1: &DensityGrid) -> Result<f64> {
    let problem = Problem::new(p, i0, i1)?;
    Ok(problem.evaluate(p.coeffs()).psi)
}

/// Per-pixel terms `1/2 r^2` whose sum is `psi`. Differencing these term by
/// term avoids the rounding of the full sum.
pub fn objective_terms(p: &PotentialField, i0: &DensityGrid, i1: &DensityGrid) -> Result<Vec<f64>> {
    let problem = Problem::new(p, i0, i1)?;
    Ok(problem.evaluate(p.coeffs()).residual.iter().map(|r| 0.5 * r * r).collect())
}

/// Gradient of `psi` with respect to the coefficients of the most recent
/// layer of `p`; earlier layers are held fixed.
pub fn analytic_gradient(
    p: &PotentialField,
    i0: &DensityGrid,
    i1: &DensityGrid,
) -> Result<Vec<f64>> {
    let problem = Problem::new(p, i0, i1)?;
    let e = problem.evaluate(p.coeffs());
    Ok(problem.gradient(&e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub scale: usize,
    pub iteration: usize,
    pub objective: f64,
    pub backoffs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleRecord {
    /// Pyramid level, 0 being the finest.
    pub level: usize,
    pub width: usize,
    pub height: usize,
    /// Basis width in pixels of this level.
    pub sigma: f64,
    pub eta: f64,
    pub iterations: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    /// Total step halvings caused by folds.
    pub backoffs: usize,
    /// Steps abandoned after every halving still folded.
    pub rejected_steps: usize,
    /// Factor applied to an inherited map that folded on this grid, 1 if none.
    pub init_scale: f64,
    /// Smallest Jacobian determinant of the returned iterate.
    pub final_min_det: f64,
    pub stop: StopReason,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    GradientTolerance,
    ObjectiveStalled,
    MaxIterations,
    BackoffExhausted,
}

impl StopReason {
    pub fn converged(self) -> bool {
        matches!(self, StopReason::GradientTolerance | StopReason::ObjectiveStalled)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::GradientTolerance => "gradient_tolerance",
            StopReason::ObjectiveStalled => "objective_stalled",
            StopReason::MaxIterations => "max_iterations",
            StopReason::BackoffExhausted => "backoff_exhausted",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    pub objective_trace: Vec<TraceEntry>,
    pub per_scale: Vec<ScaleRecord>,
    /// `None` when the inputs are identical and relative MSE is undefined.
    pub final_metrics: Option<MetricsReport>,
    pub converged: bool,
    pub stop: StopReason,
}

impl SolveReport {
    /// `iteration,scale,objective,backoffs` rows.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,scale,objective,backoffs\n");
        for e in &self.objective_trace {
            out.push_str(&format!("{},{},{},{}\n", e.iteration, e.scale, e.objective, e.backoffs));
        }
        out
    }

    /// `key=value` summary block.
    pub fn summary(&self) -> String {
        let mut lines = vec![
            format!("converged={}", self.converged),
            format!("stop={}", self.stop.as_str()),
            format!("scales={}", self.per_scale.len()),
            format!("iterations={}", self.objective_trace.len()),
        ];
        if let Some(last) = self.per_scale.last() {
            lines.push(format!("final_objective={}", last.final_objective));
        }
        if let Some(m) = &self.final_metrics {
            lines.push(format!("relative_mse={}", m.relative_mse));
            lines.push(format!("mass_transported={}", m.mass_transported));
            lines.push(format!("mean_abs_curl={}", m.mean_abs_curl));
        }
        for (i, s) in self.per_scale.iter().enumerate() {
            lines.push(format!(
                "scale.{i}=level:{} size:{}x{} sigma:{} eta:{} iterations:{} objective:{} backoffs:{} rejected:{} init_scale:{} min_det:{} stop:{}",
                s.level,
                s.width,
                s.height,
                s.sigma,
                s.eta,
                s.iterations,
                s.final_objective,
                s.backoffs,
                s.rejected_steps,
                s.init_scale,
                s.final_min_det,
                s.stop.as_str()
            ));
        }
        lines.join("\n") + "\n"
    }
}

/// Runs Adam on a fresh layer of width `sigma` on top of `init` (or on the
/// identity map) and returns the best iterate found.
pub fn solve_single_scale(
    i0: &DensityGrid,
    i1: &DensityGrid,
    sigma: f64,
    eta: f64,
    cfg: &SolverConfig,
    init: Option<&PotentialField>,
) -> Result<(PotentialField, SolveReport)> {
    let cap = if cfg.levels == 1 {
        cfg.iteration_cap(0)
    } else {
        cfg.max_iters
    };
    let (p, record, trace) = fit_layer(i0, i1, sigma, eta, cfg, cap, init, 0, 0)?;
    let stop = record.stop;
    let final_metrics = final_metrics(&p, i0, i1)?;
    Ok((
        p,
        SolveReport {
            objective_trace: trace,
            per_scale: vec![record],
            final_metrics,
            converged: stop.converged(),
            stop,
        },
    ))
}

fn final_metrics(
    p: &PotentialField,
    i0: &DensityGrid,
    i1: &DensityGrid,
) -> Result<Option<MetricsReport>> {
    match MetricsReport::compute(p, i0, i1) {
        Ok(m) => Ok(Some(m)),
        Err(Error::IdenticalInputs) => Ok(None),
        Err(e) => Err(e),
    }
}

#[allow(clippy::too_many_arguments)]
fn fit_layer(
    i0: &DensityGrid,
    i1: &DensityGrid,
    sigma: f64,
    eta: f64,
    cfg: &SolverConfig,
    max_iters: usize,
    init: Option<&PotentialField>,
    scale: usize,
    level: usize,
) -> Result<(PotentialField, ScaleRecord, Vec<TraceEntry>)> {
    cfg.validate()?;
    if !(sigma > 0.0 && eta > 0.0) {
        return Err(Error::invalid("sigma and eta must be positive"));
    }
    let mut init_scale = 1.0;
    let mut p = match init {
        Some(init) => {
            init.geometry().check_same(i0.geometry())?;
            let mut p = init.clone();
            // an inherited map may fold once resampled onto a finer grid
            init_scale = fold_free_scale(&p);
            if init_scale < 1.0 {
                let layers: Vec<BasisLayer> = p
                    .layers()
                    .iter()
                    .map(|l| BasisLayer {
                        sigma: l.sigma,
                        coeffs: l.coeffs.iter().map(|c| init_scale * c).collect(),
                    })
                    .collect();
                p = PotentialField::from_layers(*i0.geometry(), layers)?;
            }
            p.push_layer(sigma)?;
            p
        }
        None => PotentialField::zeros(*i0.geometry(), sigma)?,
    };
    let problem = Problem::new(&p, i0, i1)?;
    let grad_tol = cfg
        .grad_tol
        .unwrap_or(1e-7 * i0.total_mass() / i0.values().len() as f64);

    let mut coeffs = p.coeffs().to_vec();
    let mut current = problem.evaluate(&coeffs);
    check_finite(current.psi)?;
    let initial_objective = current.psi;
    let mut best = (current.psi, coeffs.clone());
    let mut best_so_far = Vec::with_capacity(max_iters + 1);
    let mut trace = Vec::with_capacity(max_iters + 1);
    let mut adam = AdamState::new(coeffs.len());
    let mut backoffs_total = 0;
    let mut rejected = 0;
    let mut iterations = 0;
    let mut stop = StopReason::MaxIterations;
    let mut step_backoffs = 0;
    let mut restarted = false;

    loop {
        trace.push(TraceEntry {
            scale,
            iteration: iterations,
            objective: current.psi,
            backoffs: step_backoffs,
        });
        best_so_far.push(best.0);
        let grad = problem.gradient(&current);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged("non-finite gradient".into()));
        }
        let gmax = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if gmax < grad_tol {
            stop = StopReason::GradientTolerance;
            break;
        }
        let t = best_so_far.len() - 1;
        if t >= cfg.window {
            let then = best_so_far[t - cfg.window];
            if then <= 0.0 || (then - best.0) <= cfg.objective_rel_tol * then {
                stop = StopReason::ObjectiveStalled;
                break;
            }
        }
        if iterations >= max_iters {
            break;
        }

        let (next_adam, update) = adam.step(&grad, eta, cfg);
        let mut accepted = None;
        let mut factor = 1.0;
        for halvings in 0..=cfg.max_backoffs {
            let trial: Vec<f64> = coeffs.iter().zip(&update).map(|(c, u)| c + factor * u).collect();
            let e = problem.evaluate(&trial);
            if e.folds == 0 {
                accepted = Some((trial, e, halvings));
                break;
            }
            factor *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some((trial, e, halvings)) => {
                check_finite(e.psi)?;
                adam = next_adam;
                coeffs = trial;
                current = e;
                step_backoffs = halvings;
                backoffs_total += halvings;
                restarted = false;
                if current.psi < best.0 {
                    best = (current.psi, coeffs.clone());
                }
            }
            None => {
                rejected += 1;
                backoffs_total += cfg.max_backoffs;
                step_backoffs = cfg.max_backoffs;
                // the rejected gradient never reaches the moments; a retry
                // from the same state would repeat the step, so restart the
                // optimizer once before giving up
                if restarted {
                    stop = StopReason::BackoffExhausted;
                    break;
                }
                adam = AdamState::new(coeffs.len());
                restarted = true;
            }
        }
    }

    let final_min_det = problem
        .evaluate(&best.1)
        .det
        .iter()
        .fold(f64::INFINITY, |a, d| a.min(*d));
    p.active_mut().coeffs = best.1;
    let record = ScaleRecord {
        level,
        width: i0.width(),
        height: i0.height(),
        sigma,
        eta,
        iterations,
        initial_objective,
        final_objective: best.0,
        backoffs: backoffs_total,
        rejected_steps: rejected,
        init_scale,
        final_min_det,
        stop,
    };
    Ok((p, record, trace))
}

/// Share of the potential that keeps the map fold-free at every pixel
/// center, with a safety margin. The Hessian of the perturbation scales
/// linearly, so `det(I - tH) = 1 - t tr H + t^2 det H` has a closed-form
/// first root per pixel.
fn fold_free_scale(p: &PotentialField) -> f64 {
    const MARGIN: f64 = 0.9;
    let j = p.jacobian();
    let mut limit = f64::INFINITY;
    for i in 0..j.det.len() {
        let (hxx, hyy, hxy) = (1.0 - j.fx[i], 1.0 - j.gy[i], -j.fy[i]);
        let tr = hxx + hyy;
        let det = hxx * hyy - hxy * hxy;
        let root = if det.abs() < 1e-300 {
            if tr > 0.0 { 1.0 / tr } else { f64::INFINITY }
        } else {
            let disc = tr * tr - 4.0 * det;
            if disc < 0.0 {
                f64::INFINITY
            } else {
                let sq = disc.sqrt();
                // roots of det t^2 - tr t + 1, smallest positive one
                [(tr - sq) / (2.0 * det), (tr + sq) / (2.0 * det)]
                    .into_iter()
                    .filter(|r| *r > 0.0)
                    .fold(f64::INFINITY, f64::min)
            }
        };
        limit = limit.min(root);
    }
    if limit > 1.0 {
        1.0
    } else {
        MARGIN * limit
    }
}

fn check_finite(psi: f64) -> Result<()> {
    if psi.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("objective became {psi}")))
    }
}

/// Coarse-to-fine fit over Gaussian pyramids of both densities. Each scale
/// adds a layer on top of the upsampled result of the coarser ones, so the
/// final potential is the sum of the per-scale potentials.
pub fn solve_multiscale(
    i0: &DensityGrid,
    i1: &DensityGrid,
    cfg: &SolverConfig,
) -> Result<(PotentialField, SolveReport)> {
    cfg.validate()?;
    check_pair(i0, i1)?;
    let pyr0 = gaussian_pyramid(i0, cfg.levels, cfg.smooth_sigma)?;
    let pyr1 = gaussian_pyramid(i1, cfg.levels, cfg.smooth_sigma)?;
    let mut potential: Option<PotentialField> = None;
    let mut trace = Vec::new();
    let mut per_scale = Vec::with_capacity(cfg.levels);
    for scale in 0..cfg.levels {
        let level = cfg.levels - 1 - scale;
        let factor = (1usize << level) as f64;
        let init = match potential.take() {
            Some(p) => Some(p.upsample(2)?),
            None => None,
        };
        let (p, record, t) = fit_layer(
            &pyr0[level],
            &pyr1[level],
            cfg.sigma_per_scale[scale] / factor,
            cfg.eta_per_scale[scale],
            cfg,
            cfg.iteration_cap(scale),
            init.as_ref(),
            scale,
            level,
        )?;
        trace.extend(t);
        per_scale.push(record);
        potential = Some(p);
    }
    let p = potential.expect("at least one scale");
    let stop = per_scale.last().expect("at least one scale").stop;
    let final_metrics = final_metrics(&p, i0, i1)?;
    Ok((
        p,
        SolveReport {
            objective_trace: trace,
            per_scale,
            final_metrics,
            converged: stop.converged(),
            stop,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn random_pair(n: usize, seed: u64) -> (DensityGrid, DensityGrid) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let g = GridGeometry::new(n, n).unwrap();
        let a = (0..n * n).map(|_| rng.random_range(0.5..1.5)).collect();
        let b = (0..n * n).map(|_| rng.random_range(0.5..1.5)).collect();
        let i0 = DensityGrid::from_geometry(g, a).unwrap();
        let i1 = DensityGrid::from_geometry(g, b)
            .unwrap()
            .normalize_mass(i0.total_mass(), 0.0)
            .unwrap();
        (i0, i1)
    }

    fn blob(n: usize, cx: f64, cy: f64, s: f64) -> DensityGrid {
        let g = GridGeometry::new(n, n).unwrap();
        DensityGrid::from_fn(g, |x, y| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp())
            .unwrap()
            .normalize_mass(1e6, 0.1)
            .unwrap()
    }

    /// Objective recomputed from the public map, Jacobian and sampler only.
    fn straight_line_objective(p: &PotentialField, i0: &DensityGrid, i1: &DensityGrid) -> f64 {
        let map = p.transport_map();
        let jac = p.jacobian();
        (0..i0.values().len())
            .map(|i| {
                let r = jac.det[i] * i1.bilinear_sample([map.u[i], map.v[i]]) - i0.values()[i];
                0.5 * r * r
            })
            .sum()
    }

    #[test]
    fn objective_at_identity() {
        let (i0, i1) = random_pair(8, 1);
        let p = PotentialField::zeros(*i0.geometry(), 1.0).unwrap();
        assert_eq!(objective(&p, &i0, &i0).unwrap(), 0.0);
        let expected: f64 = i1
            .values()
            .iter()
            .zip(i0.values())
            .map(|(a, b)| 0.5 * (a - b) * (a - b))
            .sum();
        assert_relative_eq!(objective(&p, &i0, &i1).unwrap(), expected, max_relative = 1e-14);
    }

    #[test]
    fn objective_matches_straight_line_evaluation() {
        let (i0, i1) = random_pair(12, 2);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let c = (0..144).map(|_| rng.random_range(-0.1..0.1)).collect();
        let p = PotentialField::new(*i0.geometry(), 1.0, c).unwrap();
        assert_relative_eq!(
            objective(&p, &i0, &i1).unwrap(),
            straight_line_objective(&p, &i0, &i1),
            max_relative = 1e-12
        );
    }

    #[test]
    fn unequal_mass_is_rejected() {
        let (i0, _) = random_pair(6, 4);
        let heavier = i0.normalize_mass(i0.total_mass() * 1.01, 0.0).unwrap();
        let p = PotentialField::zeros(*i0.geometry(), 1.0).unwrap();
        assert!(matches!(
            objective(&p, &i0, &heavier),
            Err(Error::UnequalMass { .. })
        ));
    }

    #[test]
    fn gradient_vanishes_at_solution() {
        let (i0, _) = random_pair(10, 5);
        let p = PotentialField::zeros(*i0.geometry(), 1.0).unwrap();
        let g = analytic_gradient(&p, &i0, &i0).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (n, sigma, seed) in [(10, 1.0, 7), (12, 2.0, 8), (16, 4.0, 9)] {
            let (i0, i1) = random_pair(n, seed);
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed + 100);
            let c: Vec<f64> = (0..n * n).map(|_| rng.random_range(-0.05..0.05)).collect();
            let p = PotentialField::new(*i0.geometry(), sigma, c.clone()).unwrap();
            let g = analytic_gradient(&p, &i0, &i1).unwrap();
            let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let h = 1e-6;
            for _ in 0..10 {
                let k = rng.random_range(0..n * n);
                let mut cp = c.clone();
                cp[k] += h;
                let mut cm = c.clone();
                cm[k] -= h;
                let fp = objective(&PotentialField::new(*i0.geometry(), sigma, cp).unwrap(), &i0, &i1)
                    .unwrap();
                let fm = objective(&PotentialField::new(*i0.geometry(), sigma, cm).unwrap(), &i0, &i1)
                    .unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let denom = g[k].abs().max(fd.abs()).max(1e-3 * gmax);
                assert!(
                    (g[k] - fd).abs() / denom < 1e-4,
                    "n={n} sigma={sigma} k={k}: {} vs {fd}",
                    g[k]
                );
            }
        }
    }

    #[test]
    fn gradient_is_local_to_mismatch() {
        let n = 24;
        let g = GridGeometry::new(n, n).unwrap();
        let i0 = DensityGrid::constant(g, 1.0).unwrap();
        let mut v = vec![1.0; n * n];
        v[12 * n + 12] = 1.5;
        v[12 * n + 13] = 0.5;
        let i1 = DensityGrid::from_geometry(g, v).unwrap();
        let sigma = 1.5;
        let p = PotentialField::zeros(g, sigma).unwrap();
        let grad = analytic_gradient(&p, &i0, &i1).unwrap();
        let reach = (4.0 * sigma).floor() as isize + 1;
        for row in 0..n as isize {
            for col in 0..n as isize {
                if (row - 12).abs() > reach + 1 || (col - 12).abs() > reach + 2 {
                    assert_eq!(grad[(row * n as isize + col) as usize], 0.0);
                }
            }
        }
        assert!(grad.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let cfg = SolverConfig::default();
        let s = AdamState::new(3);
        let (next, upd) = s.step(&[2.0, -0.5, 0.0], 0.01, &cfg);
        assert_eq!(next.t, 1);
        assert_relative_eq!(upd[0], -0.01, max_relative = 1e-8);
        assert_relative_eq!(upd[1], 0.01, max_relative = 1e-7);
        assert_eq!(upd[2], 0.0);
    }

    #[test]
    fn adam_zero_gradient_decays() {
        let cfg = SolverConfig::default();
        let (mut s, _) = AdamState::new(1).step(&[1.0], 0.1, &cfg);
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            let (n, u) = s.step(&[0.0], 0.1, &cfg);
            assert!(u[0].abs() <= last);
            last = u[0].abs();
            s = n;
        }
        assert!(last < 1e-3);
        assert!(s.v[0] >= 0.0);
    }

    #[test]
    fn adam_constant_gradient_update_tends_to_eta() {
        // with a constant gradient g, m_hat = g and v_hat = g^2 exactly, so
        // the update is eta * |g| / (|g| + eps) at every step
        let cfg = SolverConfig::default();
        let g = 3e-3;
        let expected = 0.05 * g / (g + cfg.eps_adam);
        let mut s = AdamState::new(1);
        for t in 1..=500 {
            let (n, u) = s.step(&[g], 0.05, &cfg);
            assert_relative_eq!(-u[0], expected, max_relative = 1e-9);
            assert_eq!(n.t, t);
            s = n;
        }
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::table1_multi_scale().validate().is_ok());
        let mut c = SolverConfig::table1_multi_scale();
        c.eta_per_scale.pop();
        assert!(c.validate().is_err());
        let mut c = SolverConfig::default();
        c.beta1 = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn identical_inputs_stop_immediately() {
        let i0 = blob(16, 0.5, 0.5, 0.15);
        let (p, report) =
            solve_single_scale(&i0, &i0, 1.0, 0.01, &SolverConfig::default(), None).unwrap();
        assert!(p.is_identity());
        assert_eq!(report.stop, StopReason::GradientTolerance);
        assert!(report.final_metrics.is_none());
        assert_eq!(report.per_scale[0].final_objective, 0.0);
    }

    #[test]
    fn translated_blob_single_scale() {
        let i0 = blob(32, 0.5, 0.5, 0.12);
        let i1 = blob(32, 0.53, 0.48, 0.12);
        let mut cfg = SolverConfig::default();
        cfg.max_iters = 500;
        let (p, report) = solve_single_scale(&i0, &i1, 2.0, 0.05, &cfg, None).unwrap();
        let m = report.final_metrics.unwrap();
        assert!(m.relative_mse < 0.05, "relative mse {}", m.relative_mse);
        assert!(m.mean_abs_curl <= 1e-6);
        assert!(p.jacobian().min_det() > 0.0);
        let mut best = f64::INFINITY;
        for e in &report.objective_trace {
            best = best.min(e.objective);
        }
        assert_eq!(best, report.per_scale[0].final_objective);
    }

    #[test]
    fn one_level_multiscale_equals_single_scale() {
        let i0 = blob(16, 0.5, 0.5, 0.15);
        let i1 = blob(16, 0.55, 0.5, 0.15);
        let mut cfg = SolverConfig::single_scale(1.5, 0.05);
        cfg.max_iters = 40;
        let a = solve_single_scale(&i0, &i1, 1.5, 0.05, &cfg, None).unwrap();
        let b = solve_multiscale(&i0, &i1, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
}
