//! Linear classifiers and stratified cross-validation.
//!
//! Every classifier reduces to a [`LinearModel`]: centered features, one
//! weight row and bias per class, argmax decision with ties going to the
//! lowest class index.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::solver::{AdamState, SolverConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Image,
    Potential,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Image => "image",
            FeatureKind::Potential => "potential",
        }
    }
}

/// Row-major samples with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub n_samples: usize,
    pub n_features: usize,
    pub data: Vec<f64>,
    pub labels: Vec<usize>,
    pub kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<usize>, kind: FeatureKind) -> Result<Self> {
        let n_samples = rows.len();
        if n_samples == 0 || n_samples != labels.len() {
            return Err(Error::invalid("need one label per sample and at least one sample"));
        }
        let n_features = rows[0].len();
        if n_features == 0 || rows.iter().any(|r| r.len() != n_features) {
            return Err(Error::invalid("all samples must have the same non-zero length"));
        }
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature value".into()));
        }
        Ok(FeatureMatrix {
            n_samples,
            n_features,
            data,
            labels,
            kind,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Samples `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.n_features);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            n_samples: idx.len(),
            n_features: self.n_features,
            data,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            kind: self.kind,
        }
    }

    fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_samples, self.n_features, &self.data)
    }

    fn with_data(&self, n_features: usize, data: Vec<f64>) -> FeatureMatrix {
        FeatureMatrix {
            n_samples: self.n_samples,
            n_features,
            data,
            labels: self.labels.clone(),
            kind: self.kind,
        }
    }

    fn column_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.n_features];
        for i in 0..self.n_samples {
            mean.iter_mut().zip(self.row(i)).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= self.n_samples as f64);
        mean
    }
}

/// Centered linear decision rule `argmax_c w_c . (x - mean) + b_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub mean: Vec<f64>,
    /// One row per class.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearModel {
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| {
                b + w
                    .iter()
                    .zip(x.iter().zip(&self.mean))
                    .map(|(wi, (xi, mi))| wi * (xi - mi))
                    .sum::<f64>()
            })
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.scores(x))
    }

    pub fn predict_all(&self, x: &FeatureMatrix) -> Vec<usize> {
        (0..x.n_samples).map(|i| self.predict(x.row(i))).collect()
    }

    pub fn accuracy(&self, x: &FeatureMatrix) -> f64 {
        let hits = (0..x.n_samples)
            .filter(|&i| self.predict(x.row(i)) == x.labels[i])
            .count();
        hits as f64 / x.n_samples as f64
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in v.iter().enumerate() {
        if *s > v[best] {
            best = i;
        }
    }
    best
}

/// Principal directions of a training set.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `n_components x n_features`, orthonormal rows; rows beyond the
    /// numerical rank of the data are zero.
    pub components: DMatrix<f64>,
    /// Singular values of the centered data, descending.
    pub singular_values: Vec<f64>,
}

impl Pca {
    pub fn fit(x: &FeatureMatrix, n_components: usize) -> Result<Pca> {
        if n_components == 0 || n_components > x.n_samples.min(x.n_features) {
            return Err(Error::invalid(format!(
                "n_components must lie in 1..={}",
                x.n_samples.min(x.n_features)
            )));
        }
        let mean = x.column_mean();
        let mut c = x.to_matrix();
        for mut row in c.row_iter_mut() {
            row.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
        }
        // eigen-decompose whichever of the Gram and covariance matrices is smaller
        let gram = x.n_samples <= x.n_features;
        let small = if gram { &c * c.transpose() } else { c.transpose() * &c };
        let eig = SymmetricEigen::new(small);
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let top = eig.eigenvalues[order[0]].max(0.0);
        let tol = top * 1e-12 * x.n_samples.max(x.n_features) as f64;
        let singular_values: Vec<f64> = order
            .iter()
            .map(|&k| {
                let l = eig.eigenvalues[k];
                if l > tol {
                    l.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let mut components = DMatrix::zeros(n_components, x.n_features);
        for (row, &k) in order.iter().take(n_components).enumerate() {
            let l = eig.eigenvalues[k];
            if l <= tol {
                continue;
            }
            let dir: DVector<f64> = if gram {
                c.transpose() * eig.eigenvectors.column(k) / l.sqrt()
            } else {
                eig.eigenvectors.column(k).into_owned()
            };
            components.set_row(row, &dir.transpose());
        }
        Ok(Pca {
            mean,
            components,
            singular_values,
        })
    }

    pub fn transform(&self, x: &FeatureMatrix) -> FeatureMatrix {
        let k = self.components.nrows();
        let mut data = Vec::with_capacity(x.n_samples * k);
        for i in 0..x.n_samples {
            let centered: Vec<f64> = x.row(i).iter().zip(&self.mean).map(|(v, m)| v - m).collect();
            for r in 0..k {
                data.push(self.components.row(r).iter().zip(&centered).map(|(a, b)| a * b).sum());
            }
        }
        x.with_data(k, data)
    }

    /// Maps projected samples back to feature space.
    pub fn reconstruct(&self, z: &FeatureMatrix) -> FeatureMatrix {
        let d = self.mean.len();
        let mut data = Vec::with_capacity(z.n_samples * d);
        for i in 0..z.n_samples {
            let mut row = self.mean.clone();
            for (r, coef) in z.row(i).iter().enumerate() {
                row.iter_mut()
                    .zip(self.components.row(r).iter())
                    .for_each(|(v, c)| *v += coef * c);
            }
            data.extend(row);
        }
        z.with_data(d, data)
    }
}

pub fn pca_fit_transform(x: &FeatureMatrix, n_components: usize) -> Result<(Pca, FeatureMatrix)> {
    let pca = Pca::fit(x, n_components)?;
    let z = pca.transform(x);
    Ok((pca, z))
}

fn class_counts(x: &FeatureMatrix) -> Vec<usize> {
    let mut counts = vec![0; x.n_classes()];
    x.labels.iter().for_each(|l| counts[*l] += 1);
    counts
}

/// Fisher discriminant with ridge-regularized within-class scatter.
#[derive(Clone, Debug, PartialEq)]
pub struct Plda {
    /// `n_features x (n_classes - 1)` discriminant directions.
    pub projection: DMatrix<f64>,
    /// Class means in the projected space, relative to the global mean.
    pub class_means: Vec<Vec<f64>>,
    pub model: LinearModel,
}

impl Plda {
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let centered =
            DVector::from_iterator(x.len(), x.iter().zip(&self.model.mean).map(|(v, m)| v - m));
        (self.projection.transpose() * centered).iter().copied().collect()
    }
}

/// Within-class scatter `S_w + alpha * mean(diag S_w) * I`, discriminant
/// directions from the generalized eigenproblem with the between-class
/// scatter, and a nearest-class-mean rule in the projected space.
pub fn plda_fit(x: &FeatureMatrix, alpha: f64) -> Result<Plda> {
    let counts = class_counts(x);
    if counts.len() < 2 || counts.iter().any(|c| *c < 2) {
        return Err(Error::invalid("PLDA needs at least two classes with two samples each"));
    }
    if !(alpha >= 0.0) {
        return Err(Error::invalid("alpha must be non-negative"));
    }
    let (n, d, nc) = (x.n_samples, x.n_features, counts.len());
    let mean = x.column_mean();
    let mut means = vec![vec![0.0; d]; nc];
    for i in 0..n {
        let m = &mut means[x.labels[i]];
        m.iter_mut().zip(x.row(i)).for_each(|(a, v)| *a += v);
    }
    for (m, c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|a| *a /= *c as f64);
    }
    let within = DMatrix::from_fn(n, d, |i, j| x.row(i)[j] - means[x.labels[i]][j]);
    let mut sw = within.transpose() * &within;
    let between = DMatrix::from_fn(nc, d, |c, j| (counts[c] as f64).sqrt() * (means[c][j] - mean[j]));
    let sb = between.transpose() * &between;
    let ridge = alpha * sw.diagonal().mean();
    for j in 0..d {
        sw[(j, j)] += ridge;
    }
    let chol = sw.cholesky().ok_or(Error::SingularScatter)?;
    let l = chol.l();
    let a = l.solve_lower_triangular(&sb).ok_or(Error::SingularScatter)?;
    let m = l
        .solve_lower_triangular(&a.transpose())
        .ok_or(Error::SingularScatter)?;
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&p, &q| eig.eigenvalues[q].total_cmp(&eig.eigenvalues[p]));
    let k = (nc - 1).min(d);
    let mut u = DMatrix::zeros(d, k);
    for (col, &idx) in order.iter().take(k).enumerate() {
        u.set_column(col, &eig.eigenvectors.column(idx));
    }
    let projection = l
        .transpose()
        .solve_upper_triangular(&u)
        .ok_or(Error::SingularScatter)?;
    if projection.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularScatter);
    }
    let class_means: Vec<Vec<f64>> = means
        .iter()
        .map(|m| {
            let c = DVector::from_iterator(d, m.iter().zip(&mean).map(|(a, b)| a - b));
            (projection.transpose() * c).iter().copied().collect()
        })
        .collect();
    // |z - m_c|^2 = |z|^2 - 2 m_c.z + |m_c|^2, and |z|^2 is shared
    let weights = class_means
        .iter()
        .map(|mc| {
            let v = DVector::from_column_slice(mc);
            (&projection * v * 2.0).iter().copied().collect()
        })
        .collect();
    let bias = class_means
        .iter()
        .map(|mc| -mc.iter().map(|v| v * v).sum::<f64>())
        .collect();
    Ok(Plda {
        projection,
        class_means,
        model: LinearModel {
            mean,
            weights,
            bias,
        },
    })
}

/// Mean softmax cross-entropy plus `l2/2 |W|^2`, and its gradient with
/// respect to `[W row-major, b]`, for centered features.
pub fn logreg_loss_and_grad(
    x: &FeatureMatrix,
    mean: &[f64],
    n_classes: usize,
    l2: f64,
    params: &[f64],
) -> (f64, Vec<f64>) {
    let d = x.n_features;
    let (w, b) = params.split_at(n_classes * d);
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let mut centered = vec![0.0; d];
    let mut scores = vec![0.0; n_classes];
    for i in 0..x.n_samples {
        centered
            .iter_mut()
            .zip(x.row(i).iter().zip(mean))
            .for_each(|(c, (v, m))| *c = v - m);
        for c in 0..n_classes {
            scores[c] = b[c] + w[c * d..(c + 1) * d].iter().zip(&centered).map(|(a, v)| a * v).sum::<f64>();
        }
        let top = scores.iter().fold(f64::NEG_INFINITY, |a, s| a.max(*s));
        let z: f64 = scores.iter().map(|s| (s - top).exp()).sum();
        let y = x.labels[i];
        loss += z.ln() + top - scores[y];
        for c in 0..n_classes {
            let p = (scores[c] - top).exp() / z - if c == y { 1.0 } else { 0.0 };
            grad[c * d..(c + 1) * d]
                .iter_mut()
                .zip(&centered)
                .for_each(|(g, v)| *g += p * v);
            grad[n_classes * d + c] += p;
        }
    }
    let n = x.n_samples as f64;
    loss /= n;
    grad.iter_mut().for_each(|g| *g /= n);
    loss += 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
    grad[..n_classes * d]
        .iter_mut()
        .zip(w)
        .for_each(|(g, v)| *g += l2 * v);
    (loss, grad)
}

/// Multinomial logistic regression by full-batch Adam from zero weights.
pub fn logreg_fit(x: &FeatureMatrix, l2: f64, iters: usize, eta: f64) -> Result<LinearModel> {
    let nc = x.n_classes();
    let d = x.n_features;
    let mean = x.column_mean();
    let mut params = vec![0.0; nc * d + nc];
    let adam_cfg = SolverConfig::default();
    let mut adam = AdamState::new(params.len());
    for _ in 0..iters {
        let (loss, grad) = logreg_loss_and_grad(x, &mean, nc, l2, &params);
        if !loss.is_finite() {
            return Err(Error::Diverged("logistic loss is not finite".into()));
        }
        let (next, update) = adam.step(&grad, eta, &adam_cfg);
        adam = next;
        params.iter_mut().zip(&update).for_each(|(p, u)| *p += u);
    }
    let (w, b) = params.split_at(nc * d);
    Ok(LinearModel {
        mean,
        weights: w.chunks(d).map(|r| r.to_vec()).collect(),
        bias: b.to_vec(),
    })
}

/// Linear SVM fit with its per-epoch objective.
#[derive(Clone, Debug, PartialEq)]
pub struct SvmFit {
    pub model: LinearModel,
    /// Per class, the regularized hinge objective of the averaged iterate at
    /// the end of each epoch.
    pub epoch_objective: Vec<Vec<f64>>,
}

/// One-vs-rest hinge loss with `lambda/2 |w|^2`, trained by shuffled
/// subgradient steps of size `1/(lambda t)` on the weights and `1/t` on the
/// unregularized bias. The returned model is the average of all iterates.
/// Sample order is drawn from `seed` and shared by all classes.
pub fn linsvm_fit(x: &FeatureMatrix, lambda: f64, epochs: usize, seed: u64) -> Result<SvmFit> {
    if !(lambda > 0.0) {
        return Err(Error::invalid("lambda must be positive"));
    }
    let nc = x.n_classes();
    let d = x.n_features;
    let mean = x.column_mean();
    let centered: Vec<f64> = (0..x.n_samples)
        .flat_map(|i| x.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect::<Vec<_>>())
        .collect();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let orders: Vec<Vec<usize>> = (0..epochs)
        .map(|_| {
            let mut o: Vec<usize> = (0..x.n_samples).collect();
            o.shuffle(&mut rng);
            o
        })
        .collect();
    let mut weights = vec![vec![0.0; d]; nc];
    let mut bias = vec![0.0; nc];
    let mut epoch_objective = vec![Vec::with_capacity(epochs); nc];
    for c in 0..nc {
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        let (w_sum, b_sum) = (&mut weights[c], &mut bias[c]);
        let mut t = 0usize;
        for order in &orders {
            for &i in order {
                t += 1;
                let xi = &centered[i * d..(i + 1) * d];
                let y = if x.labels[i] == c { 1.0 } else { -1.0 };
                let margin = y * (b + w.iter().zip(xi).map(|(a, v)| a * v).sum::<f64>());
                let eta = 1.0 / (lambda * t as f64);
                let shrink = 1.0 - 1.0 / t as f64;
                w.iter_mut().for_each(|a| *a *= shrink);
                if margin < 1.0 {
                    w.iter_mut().zip(xi).for_each(|(a, v)| *a += eta * y * v);
                    b += y / t as f64;
                }
                w_sum.iter_mut().zip(&w).for_each(|(s, a)| *s += a);
                *b_sum += b;
            }
            let scale = 1.0 / t as f64;
            let avg_w: Vec<f64> = w_sum.iter().map(|s| s * scale).collect();
            let avg_b = *b_sum * scale;
            let hinge: f64 = (0..x.n_samples)
                .map(|i| {
                    let y = if x.labels[i] == c { 1.0 } else { -1.0 };
                    let xi = &centered[i * d..(i + 1) * d];
                    let score = avg_b + avg_w.iter().zip(xi).map(|(a, v)| a * v).sum::<f64>();
                    (1.0 - y * score).max(0.0)
                })
                .sum();
            let norm_sq: f64 = avg_w.iter().map(|a| a * a).sum();
            let objective = 0.5 * lambda * norm_sq + hinge / x.n_samples as f64;
            if !objective.is_finite() {
                return Err(Error::Diverged("hinge objective is not finite".into()));
            }
            epoch_objective[c].push(objective);
        }
        if t > 0 {
            w_sum.iter_mut().for_each(|s| *s /= t as f64);
            *b_sum /= t as f64;
        }
    }
    Ok(SvmFit {
        model: LinearModel {
            mean,
            weights,
            bias,
        },
        epoch_objective,
    })
}

/// Per-sample fold indices.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    /// Shuffles each class with `seed` and deals its samples round-robin,
    /// continuing the rotation across classes so fold sizes stay balanced.
    pub fn stratified(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
        if k < 2 || k > labels.len() {
            return Err(Error::invalid(format!("cannot split {} samples into {k} folds", labels.len())));
        }
        let nc = labels.iter().max().map_or(0, |m| m + 1);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut assignments = vec![0; labels.len()];
        let mut next = 0;
        for c in 0..nc {
            let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            members.shuffle(&mut rng);
            for i in members {
                assignments[i] = next % k;
                next += 1;
            }
        }
        Ok(FoldPlan { k, assignments, seed })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClassifierKind {
    Plda { alpha: f64 },
    LogReg { l2: f64, iters: usize, eta: f64 },
    LinSvm { lambda: f64, epochs: usize, seed: u64 },
    /// Always predicts the most frequent training class.
    Majority,
}

impl ClassifierKind {
    pub fn name(&self) -> &'static str {
        match self {
            ClassifierKind::Plda { .. } => "plda",
            ClassifierKind::LogReg { .. } => "logreg",
            ClassifierKind::LinSvm { .. } => "svm",
            ClassifierKind::Majority => "majority",
        }
    }

    pub fn fit(&self, x: &FeatureMatrix) -> Result<LinearModel> {
        match *self {
            ClassifierKind::Plda { alpha } => plda_fit(x, alpha).map(|p| p.model),
            ClassifierKind::LogReg { l2, iters, eta } => logreg_fit(x, l2, iters, eta),
            ClassifierKind::LinSvm {
                lambda,
                epochs,
                seed,
            } => linsvm_fit(x, lambda, epochs, seed).map(|f| f.model),
            ClassifierKind::Majority => {
                let counts = class_counts(x);
                let top = argmax(&counts.iter().map(|c| *c as f64).collect::<Vec<_>>());
                let mut bias = vec![0.0; counts.len()];
                bias[top] = 1.0;
                Ok(LinearModel {
                    mean: vec![0.0; x.n_features],
                    weights: vec![vec![0.0; x.n_features]; counts.len()],
                    bias,
                })
            }
        }
    }
}

/// Per-fold preprocessing fitted on the training part only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preprocess {
    /// Project onto this many principal components, capped by the training
    /// set size and feature count. `None` keeps the raw features.
    pub pca_components: Option<usize>,
    /// Divide features by the root mean squared norm of the centered
    /// training rows.
    pub rescale: bool,
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            pca_components: Some(usize::MAX),
            rescale: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvResult {
    pub classifier: &'static str,
    pub mean: f64,
    /// Population standard deviation over folds.
    pub std: f64,
    pub fold_accuracies: Vec<f64>,
}

/// Accuracy of one classifier under the fold plan.
pub fn crossval_accuracy(
    x: &FeatureMatrix,
    classifier: &ClassifierKind,
    plan: &FoldPlan,
    pre: &Preprocess,
) -> Result<CvResult> {
    Ok(crossval_many(x, std::slice::from_ref(classifier), plan, pre)?.remove(0))
}

/// Accuracies of several classifiers sharing each fold's preprocessing.
/// Folds run in parallel; results do not depend on the thread count.
pub fn crossval_many(
    x: &FeatureMatrix,
    classifiers: &[ClassifierKind],
    plan: &FoldPlan,
    pre: &Preprocess,
) -> Result<Vec<CvResult>> {
    if plan.assignments.len() != x.n_samples || plan.assignments.iter().any(|f| *f >= plan.k) {
        return Err(Error::invalid("fold plan does not cover the samples"));
    }
    let nc = x.n_classes();
    let per_fold: Vec<Vec<f64>> = (0..plan.k)
        .into_par_iter()
        .map(|fold| -> Result<Vec<f64>> {
            let train: Vec<usize> = (0..x.n_samples).filter(|&i| plan.assignments[i] != fold).collect();
            let test: Vec<usize> = (0..x.n_samples).filter(|&i| plan.assignments[i] == fold).collect();
            let (mut tr, mut te) = (x.select(&train), x.select(&test));
            let present = class_counts(&tr);
            if let Some(class) = (0..nc).find(|&c| present.get(c).copied().unwrap_or(0) == 0) {
                return Err(Error::StratificationViolated { fold, class });
            }
            if let Some(k) = pre.pca_components {
                let k = k.min(tr.n_samples).min(tr.n_features);
                let pca = Pca::fit(&tr, k)?;
                tr = pca.transform(&tr);
                te = pca.transform(&te);
            }
            if pre.rescale {
                let mean = tr.column_mean();
                let ms: f64 = (0..tr.n_samples)
                    .map(|i| tr.row(i).iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>())
                    .sum::<f64>()
                    / tr.n_samples as f64;
                if ms > 0.0 {
                    let s = 1.0 / ms.sqrt();
                    tr.data.iter_mut().for_each(|v| *v *= s);
                    te.data.iter_mut().for_each(|v| *v *= s);
                }
            }
            classifiers
                .iter()
                .map(|c| Ok(c.fit(&tr)?.accuracy(&te)))
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(classifiers
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let accs: Vec<f64> = per_fold.iter().map(|f| f[j]).collect();
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64;
            CvResult {
                classifier: c.name(),
                mean,
                std: var.sqrt(),
                fold_accuracies: accs,
            }
        })
        .collect())
}
