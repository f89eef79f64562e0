//! Experiment drivers behind the `sketch`, `bench` and `sweep` commands.
//!
//! An [`ExperimentConfig`] is a flat TOML document; every output file echoes
//! the resolved config so a run can be repeated from its results alone.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{
    cross_validate, default_c_grid, mean_std, ClassifierError, CvOptions, CvPlan, FittedSketch, SketcherSpec,
};
use crate::esck::{BatchSize, EsckConfig, LearningRate};
use crate::io::{
    parse_libsvm, write_libsvm, write_report_with_config, write_sweep, BenchReport, Dataset, IoError, ReportFormat,
    SweepPoint,
};
use crate::l1ball::ProjectionParams;
use crate::matrix::Matrix;
use crate::sketchers::{Method, SketchModel};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("config file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

impl ExperimentError {
    /// Process exit code for a run that failed as a whole.
    pub fn exit_code(&self) -> i32 {
        1
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Sketcher names accepted in configs and on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Identity,
    Gaussian,
    Achlioptas,
    Countsketch,
    Srht,
    SrhtTopr,
    EsckFull,
    EsckMinibatch,
}

impl MethodName {
    pub const ALL: [MethodName; 8] = [
        MethodName::Identity,
        MethodName::Gaussian,
        MethodName::Achlioptas,
        MethodName::Countsketch,
        MethodName::Srht,
        MethodName::SrhtTopr,
        MethodName::EsckFull,
        MethodName::EsckMinibatch,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MethodName::Identity => "identity",
            MethodName::Gaussian => "gaussian",
            MethodName::Achlioptas => "achlioptas",
            MethodName::Countsketch => "countsketch",
            MethodName::Srht => "srht",
            MethodName::SrhtTopr => "srht_topr",
            MethodName::EsckFull => "esck_full",
            MethodName::EsckMinibatch => "esck_minibatch",
        }
    }

    pub fn is_esck(&self) -> bool {
        matches!(self, MethodName::EsckFull | MethodName::EsckMinibatch)
    }
}

impl fmt::Display for MethodName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodName {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self> {
        MethodName::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = MethodName::ALL.iter().map(MethodName::as_str).collect();
            ExperimentError::Config(format!("unknown method `{s}`, expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    R,
    Lambda,
}

impl FromStr for SweepAxis {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r" => Ok(SweepAxis::R),
            "lambda" => Ok(SweepAxis::Lambda),
            other => Err(ExperimentError::Config(format!("unknown sweep axis `{other}`"))),
        }
    }
}

/// Mini-batch size used when none is configured (capped at `d`).
pub const DEFAULT_BATCH_SIZE: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: PathBuf,
    /// Number of features; defaults to the largest index in the file.
    pub dim: Option<usize>,
    pub methods: Vec<MethodName>,
    pub r: Vec<usize>,
    pub seeds: Vec<u64>,
    pub iters: usize,
    /// Constant ESCK step size; unset means the cluster-mean step.
    pub learning_rate: Option<f64>,
    /// L1 radius grid for ESCK, selected per fold.
    pub lambda: Vec<f64>,
    pub epsilon: f64,
    pub batch_size: Option<usize>,
    pub c_grid: Vec<f64>,
    pub folds: usize,
    pub stratified: bool,
    /// Min-max scale features to `[-1, 1]` per training fold.
    pub scale: bool,
    pub out: PathBuf,
    pub format: ReportFormat,
    pub axis: SweepAxis,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::new(),
            dim: None,
            methods: vec![MethodName::Countsketch, MethodName::EsckFull],
            r: vec![64],
            seeds: vec![0],
            iters: 20,
            learning_rate: None,
            lambda: vec![10.0, 20.0, 30.0, 40.0],
            epsilon: 0.1,
            batch_size: None,
            c_grid: default_c_grid(),
            folds: 5,
            stratified: true,
            scale: false,
            out: PathBuf::new(),
            format: ReportFormat::Csv,
            axis: SweepAxis::R,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| IoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ExperimentError::Config(m.to_string()));
        if self.data.as_os_str().is_empty() {
            return fail("no input data given");
        }
        if self.out.as_os_str().is_empty() {
            return fail("no output path given");
        }
        if self.methods.is_empty() {
            return fail("method list is empty");
        }
        if self.r.is_empty() || self.r.contains(&0) {
            return fail("r list must be nonempty and positive");
        }
        if self.seeds.is_empty() {
            return fail("seed list is empty");
        }
        if self.iters == 0 {
            return fail("iters must be at least 1");
        }
        if let Some(eta) = self.learning_rate {
            if !(eta > 0.0 && eta.is_finite()) {
                return fail("learning rate must be positive");
            }
        }
        if self.lambda.is_empty() || self.lambda.iter().any(|l| !(*l > 0.0)) {
            return fail("lambda list must be nonempty and positive");
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return fail("epsilon must be finite and non-negative");
        }
        if self.batch_size == Some(0) {
            return fail("batch size must be positive");
        }
        if self.c_grid.is_empty() || self.c_grid.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return fail("C grid must be nonempty and positive");
        }
        if self.folds < 2 {
            return fail("need at least 2 folds");
        }
        Ok(())
    }

    fn esck_config(&self, method: MethodName, r: usize, seed: u64, d: usize, lambda: f64) -> Result<EsckConfig> {
        let projection =
            ProjectionParams::new(lambda, self.epsilon).map_err(|e| ExperimentError::Config(e.to_string()))?;
        let batch = match method {
            MethodName::EsckMinibatch => BatchSize::Columns(self.batch_size.unwrap_or(DEFAULT_BATCH_SIZE).min(d)),
            _ => BatchSize::Full,
        };
        let rate = self
            .learning_rate
            .map_or(LearningRate::ClusterMean, LearningRate::Constant);
        Ok(EsckConfig::new(r)
            .with_seed(seed)
            .with_iters(self.iters)
            .with_projection(projection)
            .with_batch_size(batch)
            .with_learning_rate(rate))
    }

    /// The sketcher for one grid cell; `lambdas` is the ESCK radius grid.
    pub fn sketcher(&self, method: MethodName, r: usize, seed: u64, d: usize, lambdas: &[f64]) -> Result<SketcherSpec> {
        let random = |method| SketcherSpec::Random { method, r, seed };
        Ok(match method {
            MethodName::Identity => SketcherSpec::Identity,
            MethodName::Gaussian => random(Method::Gaussian),
            MethodName::Achlioptas => random(Method::Achlioptas),
            MethodName::Countsketch => random(Method::CountSketch),
            MethodName::Srht => random(Method::Srht),
            MethodName::SrhtTopr => random(Method::SrhtTopr),
            MethodName::EsckFull | MethodName::EsckMinibatch => SketcherSpec::Esck {
                config: self.esck_config(method, r, seed, d, lambdas[0])?,
                lambdas: lambdas.to_vec(),
            },
        })
    }

    fn options(&self) -> CvOptions {
        CvOptions {
            minmax_scale: self.scale,
            ..CvOptions::default()
        }
    }

    fn plan(&self, seed: u64) -> CvPlan {
        CvPlan {
            folds: self.folds,
            seed,
            stratified: self.stratified,
        }
    }

    fn load(&self) -> Result<Dataset> {
        Ok(parse_libsvm(&self.data, self.dim)?)
    }
}

/// A grid cell that failed; the rest of the run continues.
#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub method: MethodName,
    pub r: usize,
    pub seed: u64,
    pub x: Option<f64>,
    pub error: String,
}

impl fmt::Display for CellFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "method={} r={} seed={}", self.method, self.r, self.seed)?;
        if let Some(x) = self.x {
            write!(f, " x={x}")?;
        }
        write!(f, ": {}", self.error)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOutcome {
    pub reports: Vec<BenchReport>,
    pub failures: Vec<CellFailure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub points: Vec<SweepPoint>,
    pub failures: Vec<CellFailure>,
}

/// Exit status for a finished run: 0, or 2 when some cells failed.
pub fn outcome_exit_code(failures: &[CellFailure]) -> i32 {
    if failures.is_empty() {
        0
    } else {
        2
    }
}

/// Path of the failure log written next to `out`.
pub fn errors_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".errors.txt");
    PathBuf::from(name)
}

/// Path of the JSON sidecar written next to a sketched matrix.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

fn write_failures(out: &Path, failures: &[CellFailure]) -> Result<()> {
    let path = errors_path(out);
    if failures.is_empty() {
        if path.exists() {
            fs::remove_file(&path).map_err(|source| IoError::Io {
                path: path.clone(),
                source,
            })?;
        }
        return Ok(());
    }
    let text: String = failures.iter().map(|f| format!("{f}\n")).collect();
    fs::write(&path, text).map_err(|source| IoError::Io { path, source })?;
    Ok(())
}

/// Pools per-seed reports of one `(method, r)` cell: accuracy statistics are
/// taken over all seeds and folds, the other columns are means.
pub fn aggregate_reports(reports: &[BenchReport], seeds: &[u64]) -> Option<BenchReport> {
    let first = reports.first()?;
    let folds: Vec<f64> = reports.iter().flat_map(|r| r.fold_accuracies.iter().copied()).collect();
    let (accuracy_mean, accuracy_std) = mean_std(&folds);
    let mean_of = |f: fn(&BenchReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>()).0;
    let mut hyperparameters: BTreeMap<String, String> = BTreeMap::new();
    for report in reports {
        for (k, v) in &report.hyperparameters {
            hyperparameters
                .entry(k.clone())
                .and_modify(|acc| {
                    if k != "folds" {
                        acc.push('|');
                        acc.push_str(v);
                    }
                })
                .or_insert_with(|| v.clone());
        }
    }
    let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
    hyperparameters.insert("seeds".to_string(), seeds.join(";"));
    Some(BenchReport {
        dataset: first.dataset.clone(),
        method: first.method.clone(),
        r: first.r,
        accuracy_mean,
        accuracy_std,
        sketch_sparsity_rate: mean_of(|r| r.sketch_sparsity_rate),
        embed_time_ms: mean_of(|r| r.embed_time_ms),
        predict_time_per_sample_us: mean_of(|r| r.predict_time_per_sample_us),
        hyperparameters,
        fold_accuracies: folds,
    })
}

type CellResult = (usize, u64, std::result::Result<BenchReport, CellFailure>);

struct Cell {
    method: MethodName,
    r: usize,
    lambdas: Vec<f64>,
    x: Option<f64>,
}

/// Runs every cell over all seeds; one aggregated report per cell with at
/// least one successful seed.
fn run_cells(config: &ExperimentConfig, ds: &Dataset, cells: &[Cell]) -> Vec<CellResult> {
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| config.seeds.iter().map(move |&s| (c, s)))
        .collect();
    jobs.par_iter()
        .map(|&(c, seed)| {
            let cell = &cells[c];
            let run = || -> Result<BenchReport> {
                let spec = config.sketcher(cell.method, cell.r, seed, ds.d(), &cell.lambdas)?;
                Ok(cross_validate(
                    ds,
                    &spec,
                    &config.c_grid,
                    &config.plan(seed),
                    &config.options(),
                )?)
            };
            let result = run().map_err(|e| CellFailure {
                method: cell.method,
                r: cell.r,
                seed,
                x: cell.x,
                error: e.to_string(),
            });
            (c, seed, result)
        })
        .collect()
}

fn collect_cells(cells: &[Cell], results: Vec<CellResult>) -> (Vec<Option<BenchReport>>, Vec<CellFailure>) {
    let mut per_cell: Vec<Vec<BenchReport>> = vec![Vec::new(); cells.len()];
    let mut ok_seeds: Vec<Vec<u64>> = vec![Vec::new(); cells.len()];
    let mut failures = Vec::new();
    for (c, seed, result) in results {
        match result {
            Ok(report) => {
                per_cell[c].push(report);
                ok_seeds[c].push(seed);
            }
            Err(failure) => failures.push(failure),
        }
    }
    let reports = per_cell
        .iter()
        .zip(&ok_seeds)
        .map(|(reports, seeds)| aggregate_reports(reports, seeds))
        .collect();
    (reports, failures)
}

/// Cross-validates every `(method, r)` over all seeds and writes the report.
pub fn cmd_bench(config: &ExperimentConfig) -> Result<BenchOutcome> {
    config.validate()?;
    let ds = config.load()?;
    let cells: Vec<Cell> = config
        .methods
        .iter()
        .flat_map(|&method| {
            config.r.iter().map(move |&r| Cell {
                method,
                r,
                lambdas: config.lambda.clone(),
                x: None,
            })
        })
        .collect();
    let results = run_cells(config, &ds, &cells);
    let (reports, failures) = collect_cells(&cells, results);
    let reports: Vec<BenchReport> = reports.into_iter().flatten().collect();
    write_report_with_config(&reports, config.format, &config.out, Some(&config.to_toml_string()))?;
    write_failures(&config.out, &failures)?;
    Ok(BenchOutcome { reports, failures })
}

/// Accuracy and sparsity as a function of `r` or of the ESCK L1 radius.
/// On the radius axis non-ESCK methods are repeated at every point as
/// reference lines, and exactly one `r` must be configured.
pub fn cmd_sweep(config: &ExperimentConfig) -> Result<SweepOutcome> {
    config.validate()?;
    if config.axis == SweepAxis::Lambda && config.r.len() != 1 {
        return Err(ExperimentError::Config(format!(
            "a lambda sweep needs exactly one r, got {}",
            config.r.len()
        )));
    }
    let ds = config.load()?;
    let cells: Vec<Cell> = match config.axis {
        SweepAxis::R => config
            .r
            .iter()
            .flat_map(|&r| {
                config.methods.iter().map(move |&method| Cell {
                    method,
                    r,
                    lambdas: config.lambda.clone(),
                    x: Some(r as f64),
                })
            })
            .collect(),
        SweepAxis::Lambda => config
            .lambda
            .iter()
            .flat_map(|&lambda| {
                config.methods.iter().map(move |&method| Cell {
                    method,
                    r: config.r[0],
                    lambdas: vec![lambda],
                    x: Some(lambda),
                })
            })
            .collect(),
    };
    let results = run_cells(config, &ds, &cells);
    let (reports, failures) = collect_cells(&cells, results);
    let points: Vec<SweepPoint> = cells
        .iter()
        .zip(reports)
        .filter_map(|(cell, report)| {
            report.map(|r| SweepPoint {
                x: cell.x.expect("sweep cells carry x"),
                method: r.method,
                accuracy_mean: r.accuracy_mean,
                accuracy_std: r.accuracy_std,
                sparsity: r.sketch_sparsity_rate,
            })
        })
        .collect();
    write_sweep(&points, config.format, &config.out, Some(&config.to_toml_string()))?;
    write_failures(&config.out, &failures)?;
    Ok(SweepOutcome { points, failures })
}

/// Contents of the JSON file written next to a sketched matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchSidecar {
    pub method: MethodName,
    pub r: usize,
    pub seed: u64,
    pub rows: usize,
    pub sparsity_rate: f64,
    pub embed_time_ms: f64,
    pub config: String,
    pub model: SketchModel,
}

/// Sketches the whole dataset with the first configured method, `r` and
/// seed (and the first radius for ESCK). Writes the sketched rows in LIBSVM
/// format to `out` and a [`SketchSidecar`] to `out` + `.json`.
pub fn cmd_sketch(config: &ExperimentConfig) -> Result<SketchSidecar> {
    config.validate()?;
    let ds = config.load()?;
    let (method, r, seed) = (config.methods[0], config.r[0], config.seeds[0]);
    if method == MethodName::Identity {
        return Err(ExperimentError::Config("`identity` is not a sketching method".into()));
    }
    let spec = config.sketcher(method, r, seed, ds.d(), &config.lambda[..1])?;
    let start = Instant::now();
    let (fitted, sketched) = spec.fit(
        &Matrix::Sparse(ds.features.clone()),
        method.is_esck().then(|| config.lambda[0]),
    )?;
    let embed_time_ms = start.elapsed().as_secs_f64() * 1e3;
    let model = match fitted {
        FittedSketch::Model(m) => *m,
        FittedSketch::Esck(fit) => fit.to_model(seed),
        FittedSketch::Identity => unreachable!("identity rejected above"),
    };
    let sketched = sketched.to_sparse();
    write_libsvm(&config.out, &sketched, &ds.raw_labels())?;
    let sidecar = SketchSidecar {
        method,
        r,
        seed,
        rows: sketched.rows(),
        sparsity_rate: sketched.sparsity_rate().map_err(IoError::from)?,
        embed_time_ms,
        config: config.to_toml_string(),
        model,
    };
    let path = sidecar_path(&config.out);
    let json = serde_json::to_string_pretty(&sidecar).map_err(IoError::from)?;
    fs::write(&path, json).map_err(|source| IoError::Io { path, source })?;
    Ok(sidecar)
}
