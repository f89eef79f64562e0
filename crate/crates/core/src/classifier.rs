//! Linear SVM and cross-validated sketch-and-solve runs.
//!
//! The solver is dual coordinate descent for the L2-regularized hinge loss
//! in averaged form,
//!
//! ```text
//! min_w  1/2 |w|^2 + (C / n) sum_i max(0, 1 - y_i w^T [x_i; 1])
//! ```
//!
//! so duplicating every sample leaves the optimum unchanged. The bias is the
//! weight on an appended constant feature (and is regularized with the rest).
//! Multi-class problems are solved one-vs-rest.
//!
//! [`cross_validate`] runs the full protocol for one sketcher: per fold, the
//! sketch is fitted on the training rows only, `C` (and the L1 radius for
//! ESCK) is picked on an inner 80/20 split of those rows, and the held-out
//! rows are sketched with the fitted transform.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::esck::{esck_fit, inductive_transform_instrumented, BatchSize, EsckConfig, EsckError, EsckFit};
use crate::io::{BenchReport, Dataset, IoError, MinMaxScaler};
use crate::l1ball::{ProjectionError, ProjectionParams};
use crate::matrix::{CsrMatrix, DenseMatrix, Matrix, MatrixError};
use crate::rng::{self, Stream};
use crate::sketchers::{
    fit_achlioptas, fit_countsketch, fit_gaussian, fit_srht, fit_srht_topr, Method, SketchError, SketchModel,
};

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("C must be positive and finite, got {0}")]
    InvalidC(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid cross-validation plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Sketch(#[from] SketchError),
    #[error(transparent)]
    Esck(#[from] EsckError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Io(#[from] IoError),
}

pub type Result<T> = std::result::Result<T, ClassifierError>;

/// One weight row and bias per class; prediction is the argmax score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl LinearModel {
    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| ClassifierError::Io(e.into()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: LinearModel = serde_json::from_str(s).map_err(|e| ClassifierError::Io(e.into()))?;
        if model.bias.len() != model.classes() {
            return Err(ClassifierError::Dimension(format!(
                "{} biases for {} classes",
                model.bias.len(),
                model.classes()
            )));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub c: f64,
    /// Relative duality gap at which training stops.
    pub tolerance: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl SvmParams {
    pub fn new(c: f64, seed: u64) -> Self {
        Self {
            c,
            tolerance: 1e-3,
            max_epochs: 1000,
            seed,
        }
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn with_max_epochs(mut self, epochs: usize) -> Self {
        self.max_epochs = epochs;
        self
    }
}

pub fn train_linear_svm(features: &Matrix, labels: &[usize], c: f64, seed: u64) -> Result<LinearModel> {
    train_linear_svm_with(features, labels, &SvmParams::new(c, seed))
}

pub fn train_linear_svm_with(features: &Matrix, labels: &[usize], params: &SvmParams) -> Result<LinearModel> {
    let n = features.rows();
    if labels.len() != n {
        return Err(ClassifierError::Dimension(format!(
            "{} labels for {n} rows",
            labels.len()
        )));
    }
    if n < 2 {
        return Err(ClassifierError::TooFewSamples(n));
    }
    if !(params.c > 0.0 && params.c.is_finite()) {
        return Err(ClassifierError::InvalidC(params.c));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(ClassifierError::SingleClass);
    }
    // matrices reject non-finite entries at construction
    let rows = features.to_sparse().to_csr();
    let upper = params.c / n as f64;
    let dim = rows.cols();

    let mut weights = DenseMatrix::zeros(classes, dim).as_slice().to_vec();
    let mut bias = vec![0.0; classes];
    if classes == 2 {
        let y: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
        let mut rng = rng::indexed_stream(params.seed, Stream::Svm, 1);
        let (w, b) = solve_binary(&rows, &y, upper, params, &mut rng);
        for j in 0..dim {
            weights[j] = -w[j];
            weights[dim + j] = w[j];
        }
        bias = vec![-b, b];
    } else {
        let solved: Vec<(Vec<f64>, f64)> = (0..classes)
            .into_par_iter()
            .map(|k| {
                let y: Vec<f64> = labels.iter().map(|&l| if l == k { 1.0 } else { -1.0 }).collect();
                let mut rng = rng::indexed_stream(params.seed, Stream::Svm, k as u64);
                solve_binary(&rows, &y, upper, params, &mut rng)
            })
            .collect();
        for (k, (w, b)) in solved.into_iter().enumerate() {
            weights[k * dim..(k + 1) * dim].copy_from_slice(&w);
            bias[k] = b;
        }
    }
    Ok(LinearModel {
        weights: DenseMatrix::from_vec(classes, dim, weights)?,
        bias,
    })
}

/// Dual coordinate descent on one binary problem with box `[0, upper]`.
/// Returns `(w, b)`.
fn solve_binary<R: rand::Rng>(
    rows: &CsrMatrix,
    y: &[f64],
    upper: f64,
    params: &SvmParams,
    rng: &mut R,
) -> (Vec<f64>, f64) {
    let n = rows.rows();
    let mut w = vec![0.0; rows.cols()];
    let mut b = 0.0;
    let mut alpha = vec![0.0; n];
    let q_diag: Vec<f64> = (0..n).map(|i| rows.row(i).sq_norm() + 1.0).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let margin = |w: &[f64], b: f64, i: usize| -> f64 { rows.row(i).iter().map(|(j, v)| w[j] * v).sum::<f64>() + b };

    for _ in 0..params.max_epochs {
        order.shuffle(rng);
        for &i in &order {
            let g = y[i] * margin(&w, b, i) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == upper {
                g.max(0.0)
            } else {
                g
            };
            if pg.abs() <= 1e-15 {
                continue;
            }
            let next = (alpha[i] - g / q_diag[i]).clamp(0.0, upper);
            let delta = (next - alpha[i]) * y[i];
            alpha[i] = next;
            for (j, v) in rows.row(i).iter() {
                w[j] += delta * v;
            }
            b += delta;
        }
        let half_sq = 0.5 * (w.iter().map(|v| v * v).sum::<f64>() + b * b);
        let hinge: f64 = (0..n).map(|i| (1.0 - y[i] * margin(&w, b, i)).max(0.0)).sum();
        let primal = half_sq + upper * hinge;
        let dual = alpha.iter().sum::<f64>() - half_sq;
        if primal - dual <= params.tolerance * primal.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    (w, b)
}

/// Class scores of one sparse row; adds the multiply-adds performed to `work`.
fn scores(model: &LinearModel, indices: &[usize], values: &[f64], work: &mut u64) -> Vec<f64> {
    (0..model.classes())
        .map(|k| {
            let w = model.weights.row(k);
            *work += indices.len() as u64;
            model.bias[k] + indices.iter().zip(values).map(|(&j, v)| w[j] * v).sum::<f64>()
        })
        .collect()
}

fn argmax(scores: &[f64]) -> usize {
    (0..scores.len()).fold(0, |best, k| if scores[k] > scores[best] { k } else { best })
}

pub fn predict(model: &LinearModel, features: &Matrix) -> Result<Vec<usize>> {
    predict_counted(model, features).map(|(labels, _)| labels)
}

/// As [`predict`], also returning the number of weight-times-feature
/// products evaluated, which is `sum over rows of nnz(row) * classes`.
pub fn predict_counted(model: &LinearModel, features: &Matrix) -> Result<(Vec<usize>, u64)> {
    if features.cols() != model.dim() {
        return Err(ClassifierError::Dimension(format!(
            "model expects {} features, got {}",
            model.dim(),
            features.cols()
        )));
    }
    let mut work = 0;
    let labels = match features {
        Matrix::Dense(m) => {
            let idx: Vec<usize> = (0..m.cols()).collect();
            (0..m.rows())
                .map(|i| argmax(&scores(model, &idx, m.row(i), &mut work)))
                .collect()
        }
        Matrix::Sparse(m) => {
            let csr = m.to_csr();
            (0..csr.rows())
                .map(|i| {
                    let row = csr.row(i);
                    argmax(&scores(model, row.indices, row.values, &mut work))
                })
                .collect()
        }
    };
    Ok((labels, work))
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvPlan {
    pub folds: usize,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for CvPlan {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            stratified: true,
        }
    }
}

/// Held-out indices of every fold, each sorted ascending. Samples are
/// shuffled (within each class when stratified) and dealt round-robin, so
/// fold sizes differ by at most one.
pub fn fold_partition(labels: &[usize], plan: &CvPlan) -> Result<Vec<Vec<usize>>> {
    if plan.folds < 2 || plan.folds > labels.len() {
        return Err(ClassifierError::InvalidPlan(format!(
            "{} folds for {} samples",
            plan.folds,
            labels.len()
        )));
    }
    let mut rng = rng::stream(plan.seed, Stream::Folds);
    let groups: Vec<Vec<usize>> = if plan.stratified {
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut by_class = vec![Vec::new(); classes];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    } else {
        vec![(0..labels.len()).collect()]
    };
    let mut folds = vec![Vec::new(); plan.folds];
    let mut next = 0;
    for mut group in groups {
        group.shuffle(&mut rng);
        for i in group {
            folds[next % plan.folds].push(i);
            next += 1;
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// Complement of `held_out` in `0..n`, ascending.
fn complement(n: usize, held_out: &[usize]) -> Vec<usize> {
    let mut mask = vec![true; n];
    held_out.iter().for_each(|&i| mask[i] = false);
    (0..n).filter(|&i| mask[i]).collect()
}

/// Which sketch to fit inside each fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SketcherSpec {
    /// No sketch; the classifier sees the raw features.
    Identity,
    Random {
        method: Method,
        r: usize,
        seed: u64,
    },
    /// `lambdas` is the L1-radius grid; empty means use the config's radius.
    Esck {
        config: EsckConfig,
        lambdas: Vec<f64>,
    },
}

impl SketcherSpec {
    pub fn name(&self) -> String {
        match self {
            SketcherSpec::Identity => "identity".into(),
            SketcherSpec::Random { method, .. } => method.name().into(),
            SketcherSpec::Esck { config, .. } => match config.batch_size {
                BatchSize::Full => "esck_full".into(),
                BatchSize::Columns(_) => "esck_minibatch".into(),
            },
        }
    }

    pub fn output_dim(&self, d: usize) -> usize {
        match self {
            SketcherSpec::Identity => d,
            SketcherSpec::Random { r, .. } => *r,
            SketcherSpec::Esck { config, .. } => config.r,
        }
    }

    fn radii(&self) -> Vec<Option<f64>> {
        match self {
            SketcherSpec::Esck { lambdas, .. } if !lambdas.is_empty() => lambdas.iter().map(|&l| Some(l)).collect(),
            _ => vec![None],
        }
    }

    /// Fits the sketch on `train` and returns the fitted transform together
    /// with the sketched training rows.
    pub fn fit(&self, train: &Matrix, lambda: Option<f64>) -> Result<(FittedSketch, Matrix)> {
        match self {
            SketcherSpec::Identity => Ok((FittedSketch::Identity, train.clone())),
            SketcherSpec::Random { method, r, seed } => {
                let d = train.cols();
                let model = match method {
                    Method::Gaussian => fit_gaussian(d, *r, *seed)?,
                    Method::Achlioptas => fit_achlioptas(d, *r, *seed)?,
                    Method::CountSketch => fit_countsketch(d, *r, *seed)?,
                    Method::Srht => fit_srht(d, *r, *seed)?,
                    Method::SrhtTopr => fit_srht_topr(d, *r, *seed, train)?,
                    Method::Esck => {
                        return Err(ClassifierError::InvalidPlan(
                            "use SketcherSpec::Esck for the learned sketch".into(),
                        ))
                    }
                };
                let sketched = model.apply(train)?;
                Ok((FittedSketch::Model(Box::new(model)), sketched))
            }
            SketcherSpec::Esck { config, .. } => {
                let mut config = config.clone();
                if let Some(lambda) = lambda {
                    config.projection = ProjectionParams::new(lambda, config.projection.epsilon())?
                        .with_max_bisection_iters(config.projection.max_bisection_iters());
                }
                let fit = esck_fit_any(train, &config)?;
                let sketched = Matrix::Sparse(fit.sketched.clone());
                Ok((FittedSketch::Esck(Box::new(fit)), sketched))
            }
        }
    }
}

fn esck_fit_any(x: &Matrix, config: &EsckConfig) -> Result<EsckFit> {
    Ok(match config.batch_size {
        BatchSize::Full => esck_fit(x, config)?,
        BatchSize::Columns(_) => crate::esck::esck_fit_minibatch(x, config)?,
    })
}

/// A sketch fitted on training rows, applied to new rows.
#[derive(Debug, Clone)]
pub enum FittedSketch {
    Identity,
    Model(Box<SketchModel>),
    Esck(Box<EsckFit>),
}

impl FittedSketch {
    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        self.transform_instrumented(x).map(|(m, _)| m)
    }

    /// Also returns the number of input nonzeros visited (for hashed and
    /// clustered sketches; other sketches report 0).
    pub fn transform_instrumented(&self, x: &Matrix) -> Result<(Matrix, u64)> {
        match self {
            FittedSketch::Identity => Ok((x.clone(), 0)),
            FittedSketch::Model(m) => Ok(m.apply_instrumented(x)?),
            FittedSketch::Esck(fit) => Ok(inductive_transform_instrumented(
                x,
                &fit.signs,
                &fit.membership,
                &fit.scaling,
            )?),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    /// Min-max scale features to `[-1, 1]`, fitted on each training fold.
    pub minmax_scale: bool,
    /// Timed repeats of transform + predict on the held-out fold.
    pub predict_repeats: usize,
    pub svm_tolerance: f64,
    pub svm_max_epochs: usize,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            minmax_scale: false,
            predict_repeats: 5,
            svm_tolerance: 1e-3,
            svm_max_epochs: 1000,
        }
    }
}

/// The C grid `{1e-5, 1e-4, ..., 1e5}`.
pub fn default_c_grid() -> Vec<f64> {
    (-5..=5).map(|e| 10f64.powi(e)).collect()
}

struct Selected {
    lambda: Option<f64>,
    c: f64,
}

fn svm_params(c: f64, plan: &CvPlan, options: &CvOptions) -> SvmParams {
    SvmParams::new(c, plan.seed)
        .with_tolerance(options.svm_tolerance)
        .with_max_epochs(options.svm_max_epochs)
}

/// Picks `(lambda, C)` by accuracy on a stratified 20% holdout of `train`.
/// Ties keep the earlier grid point.
fn select_hyperparameters(
    train: &Dataset,
    spec: &SketcherSpec,
    c_grid: &[f64],
    plan: &CvPlan,
    options: &CvOptions,
) -> Result<Selected> {
    let radii = spec.radii();
    if radii.len() == 1 && c_grid.len() == 1 {
        return Ok(Selected {
            lambda: radii[0],
            c: c_grid[0],
        });
    }
    let inner = CvPlan {
        folds: 5,
        seed: plan.seed.wrapping_add(1),
        stratified: plan.stratified,
    };
    let holdout = fold_partition(&train.labels, &inner)?.swap_remove(0);
    let fit_rows = complement(train.n(), &holdout);
    let (fit_part, hold_part) = (train.select(&fit_rows)?, train.select(&holdout)?);

    let mut best: Option<(f64, Selected)> = None;
    for lambda in radii {
        let (fitted, sketched) = spec.fit(&Matrix::Sparse(fit_part.features.clone()), lambda)?;
        let hold_features = fitted.transform(&Matrix::Sparse(hold_part.features.clone()))?;
        for &c in c_grid {
            let model = train_linear_svm_with(&sketched, &fit_part.labels, &svm_params(c, plan, options))?;
            let acc = accuracy(&predict(&model, &hold_features)?, &hold_part.labels);
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, Selected { lambda, c }));
            }
        }
    }
    Ok(best.expect("grids are nonempty").1)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// K-fold sketch-and-solve evaluation of one sketcher.
pub fn cross_validate(
    ds: &Dataset,
    spec: &SketcherSpec,
    c_grid: &[f64],
    plan: &CvPlan,
    options: &CvOptions,
) -> Result<BenchReport> {
    if c_grid.is_empty() {
        return Err(ClassifierError::InvalidPlan("empty C grid".into()));
    }
    if let Some(&c) = c_grid.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
        return Err(ClassifierError::InvalidC(c));
    }
    let folds = fold_partition(&ds.labels, plan)?;
    let mut accuracies = Vec::with_capacity(folds.len());
    let mut sparsities = Vec::with_capacity(folds.len());
    let mut embed_ms = Vec::with_capacity(folds.len());
    let mut predict_us = Vec::with_capacity(folds.len());
    let mut chosen_c = Vec::new();
    let mut chosen_lambda = Vec::new();

    for test_rows in &folds {
        let train_rows = complement(ds.n(), test_rows);
        let (mut train, mut test) = (ds.select(&train_rows)?, ds.select(test_rows)?);
        if options.minmax_scale {
            let scaler = MinMaxScaler::fit(&train.features);
            train.features = scaler.transform(&train.features)?;
            test.features = scaler.transform(&test.features)?;
        }
        let selected = select_hyperparameters(&train, spec, c_grid, plan, options)?;

        let start = Instant::now();
        let (fitted, train_sketch) = spec.fit(&Matrix::Sparse(train.features.clone()), selected.lambda)?;
        embed_ms.push(start.elapsed().as_secs_f64() * 1e3);
        sparsities.push(train_sketch.sparsity_rate()?);

        let model = train_linear_svm_with(&train_sketch, &train.labels, &svm_params(selected.c, plan, options))?;
        let test_x = Matrix::Sparse(test.features.clone());
        let mut predicted = Vec::new();
        let mut times = Vec::with_capacity(options.predict_repeats.max(1));
        for _ in 0..options.predict_repeats.max(1) {
            let start = Instant::now();
            predicted = predict(&model, &fitted.transform(&test_x)?)?;
            times.push(start.elapsed().as_secs_f64() * 1e6 / test.n().max(1) as f64);
        }
        predict_us.push(median(times));
        accuracies.push(accuracy(&predicted, &test.labels));
        chosen_c.push(format!("{}", selected.c));
        if let Some(l) = selected.lambda {
            chosen_lambda.push(format!("{l}"));
        }
    }

    let (accuracy_mean, accuracy_std) = mean_std(&accuracies);
    let mut hyperparameters = BTreeMap::new();
    hyperparameters.insert("c".to_string(), chosen_c.join(";"));
    if !chosen_lambda.is_empty() {
        hyperparameters.insert("lambda".to_string(), chosen_lambda.join(";"));
    }
    hyperparameters.insert("folds".to_string(), plan.folds.to_string());
    Ok(BenchReport {
        dataset: ds.source.clone(),
        method: spec.name(),
        r: spec.output_dim(ds.d()),
        accuracy_mean,
        accuracy_std,
        sketch_sparsity_rate: mean_std(&sparsities).0,
        embed_time_ms: mean_std(&embed_ms).0,
        predict_time_per_sample_us: mean_std(&predict_us).0,
        hyperparameters,
        fold_accuracies: accuracies,
    })
}
