//! LIBSVM datasets, min-max scaling and benchmark report files.
//!
//! LIBSVM lines look like `label idx:val idx:val ...` with 1-based, strictly
//! increasing indices. Labels are remapped to `0..class_count` in the order
//! they first appear; the raw values are kept in
//! [`Dataset::original_labels`] so a dataset can be written back unchanged.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{CsrMatrix, MatrixError, RealVector, SparseMatrix};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}:{line}: {message}")]
    Parse {
        origin: String,
        line: usize,
        message: String,
    },
    #[error("degenerate shape: {0}")]
    DegenerateShape(String),
    #[error("unknown report format `{0}` (expected csv or json)")]
    UnknownFormat(String),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, IoError>;

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    None,
    MinmaxPm1,
}

/// Feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// `n x d`, one row per sample.
    pub features: SparseMatrix,
    /// Values in `0..class_count`.
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub source: String,
    pub scaling: Scaling,
    /// Raw label value of each class index.
    pub original_labels: Vec<f64>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn d(&self) -> usize {
        self.features.cols()
    }

    /// The samples at `rows`, in that order. Class indices are kept as is.
    pub fn select(&self, rows: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            features: self.features.select_rows(rows)?,
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            source: self.source.clone(),
            scaling: self.scaling,
            original_labels: self.original_labels.clone(),
        })
    }

    /// Raw label value of every sample.
    pub fn raw_labels(&self) -> Vec<f64> {
        self.labels.iter().map(|&k| self.original_labels[k]).collect()
    }

    pub fn to_libsvm_string(&self) -> String {
        format_libsvm(&self.features, &self.raw_labels())
    }
}

/// Reads a LIBSVM file. `dim` fixes the number of features; by default it is
/// the largest index in the file.
pub fn parse_libsvm(path: impl AsRef<Path>, dim: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = read_file(path)?;
    parse_libsvm_str(&text, dim, &path.display().to_string())
}

/// As [`parse_libsvm`] on in-memory text; `origin` names the source in errors.
pub fn parse_libsvm_str(text: &str, dim: Option<usize>, origin: &str) -> Result<Dataset> {
    let err = |line: usize, message: String| IoError::Parse {
        origin: origin.to_string(),
        line,
        message,
    };
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut original_labels: Vec<f64> = Vec::new();
    let mut max_index = 0usize;

    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let label_token = tokens.next().expect("line is not blank");
        let label: f64 = label_token
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| err(line_no, format!("invalid label `{label_token}`")))?;
        let class = match original_labels.iter().position(|&l| l == label) {
            Some(c) => c,
            None => {
                original_labels.push(label);
                original_labels.len() - 1
            }
        };

        let mut indices = Vec::new();
        let mut values = Vec::new();
        let mut previous = 0usize;
        for token in tokens {
            let (idx, val) = token
                .split_once(':')
                .ok_or_else(|| err(line_no, format!("expected idx:val, got `{token}`")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| err(line_no, format!("invalid index `{idx}`")))?;
            if idx == 0 {
                return Err(err(line_no, "indices are 1-based, got 0".into()));
            }
            if idx <= previous {
                return Err(err(
                    line_no,
                    format!("indices must increase strictly, got {idx} after {previous}"),
                ));
            }
            if let Some(d) = dim {
                if idx > d {
                    return Err(err(line_no, format!("index {idx} exceeds dimension {d}")));
                }
            }
            let val: f64 = val
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| err(line_no, format!("invalid value `{val}`")))?;
            previous = idx;
            if val != 0.0 {
                indices.push(idx - 1);
                values.push(val);
            }
        }
        max_index = max_index.max(previous);
        rows.push((indices, values));
        labels.push(class);
    }

    let d = dim.unwrap_or(max_index);
    if rows.is_empty() || d == 0 {
        return Err(IoError::DegenerateShape(format!(
            "{origin} has {} rows and {d} features",
            rows.len()
        )));
    }
    let features = CsrMatrix::from_rows(d, rows)?.to_csc();
    Ok(Dataset {
        features,
        labels,
        class_count: original_labels.len(),
        source: origin.to_string(),
        scaling: Scaling::None,
        original_labels,
    })
}

/// LIBSVM text for `features` with one raw label per row. Values use Rust's
/// shortest round-trip formatting, so parsing the text back is lossless.
pub fn format_libsvm(features: &SparseMatrix, labels: &[f64]) -> String {
    let csr = features.to_csr();
    let mut out = String::new();
    for (i, label) in labels.iter().enumerate().take(csr.rows()) {
        write!(out, "{label}").unwrap();
        for (j, v) in csr.row(i).iter() {
            write!(out, " {}:{v}", j + 1).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_libsvm(path: impl AsRef<Path>, features: &SparseMatrix, labels: &[f64]) -> Result<()> {
    if labels.len() != features.rows() {
        return Err(IoError::Matrix(MatrixError::ShapeMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            features.rows()
        ))));
    }
    write_file(path.as_ref(), format_libsvm(features, labels).as_bytes())
}

/// Per-feature affine map onto `[-1, 1]`, fitted on one split and applied to
/// others. Constant features map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    min: Vec<f64>,
    max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(x: &SparseMatrix) -> Self {
        let (mut min, mut max) = (Vec::with_capacity(x.cols()), Vec::with_capacity(x.cols()));
        for j in 0..x.cols() {
            let col = x.column(j);
            let implicit_zero = col.nnz() < x.rows();
            let start = if implicit_zero { 0.0 } else { col.values[0] };
            let (lo, hi) = col
                .values
                .iter()
                .fold((start, start), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            min.push(lo);
            max.push(hi);
        }
        Self { min, max }
    }

    fn map(&self, j: usize, v: f64) -> f64 {
        let (lo, hi) = (self.min[j], self.max[j]);
        if hi > lo {
            2.0 * (v - lo) / (hi - lo) - 1.0
        } else {
            0.0
        }
    }

    pub fn transform(&self, x: &SparseMatrix) -> Result<SparseMatrix> {
        if x.cols() != self.min.len() {
            return Err(IoError::Matrix(MatrixError::ShapeMismatch(format!(
                "scaler fitted on {} features, input has {}",
                self.min.len(),
                x.cols()
            ))));
        }
        let columns: Vec<RealVector> = (0..x.cols())
            .map(|j| {
                let zero = self.map(j, 0.0);
                let mut dense = vec![zero; x.rows()];
                for (i, v) in x.column(j).iter() {
                    dense[i] = self.map(j, v);
                }
                RealVector::compact(dense, 0.0)
            })
            .collect();
        Ok(SparseMatrix::from_columns(x.rows(), &columns)?)
    }
}

/// Fits min-max scaling on `ds` itself and applies it. A dataset that is
/// already scaled is returned unchanged.
pub fn minmax_scale_pm1(ds: &Dataset) -> Dataset {
    if ds.scaling == Scaling::MinmaxPm1 {
        return ds.clone();
    }
    let scaler = MinMaxScaler::fit(&ds.features);
    Dataset {
        features: scaler
            .transform(&ds.features)
            .expect("scaler was fitted on these features"),
        scaling: Scaling::MinmaxPm1,
        ..ds.clone()
    }
}

/// One `(dataset, method, r)` benchmark cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub dataset: String,
    pub method: String,
    pub r: usize,
    pub accuracy_mean: f64,
    /// Population standard deviation over `fold_accuracies`.
    pub accuracy_std: f64,
    pub sketch_sparsity_rate: f64,
    pub embed_time_ms: f64,
    pub predict_time_per_sample_us: f64,
    pub hyperparameters: BTreeMap<String, String>,
    pub fold_accuracies: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = IoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(IoError::UnknownFormat(other.to_string())),
        }
    }
}

pub const REPORT_CSV_HEADER: [&str; 8] = [
    "dataset",
    "method",
    "r",
    "acc_mean",
    "acc_std",
    "sparsity",
    "embed_ms",
    "predict_us",
];

fn fixed4(v: f64) -> String {
    format!("{v:.4}")
}

fn comment_preamble(config: Option<&str>) -> String {
    config
        .map(|c| c.lines().map(|l| format!("# {l}\n")).collect())
        .unwrap_or_default()
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| IoError::Csv(e.into_error().into()))
}

#[derive(Serialize, Deserialize)]
struct WithConfig<T> {
    config: String,
    #[serde(alias = "points")]
    reports: Vec<T>,
}

fn json_bytes<T: Serialize>(items: &[T], config: Option<&str>) -> Result<Vec<u8>> {
    let mut text = match config {
        Some(c) => serde_json::to_string_pretty(&WithConfig {
            config: c.to_string(),
            reports: items.iter().collect(),
        })?,
        None => serde_json::to_string_pretty(items)?,
    };
    text.push('\n');
    Ok(text.into_bytes())
}

/// Writes reports as CSV (fixed header, 4 decimals) or pretty JSON.
pub fn write_report(reports: &[BenchReport], format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    write_report_with_config(reports, format, path, None)
}

/// As [`write_report`], echoing `config` into the file: as `# ` comment lines
/// before the CSV header, or as a `config` field next to `reports` in JSON.
pub fn write_report_with_config(
    reports: &[BenchReport],
    format: ReportFormat,
    path: impl AsRef<Path>,
    config: Option<&str>,
) -> Result<()> {
    let bytes = match format {
        ReportFormat::Csv => {
            let rows = reports.iter().map(|r| {
                vec![
                    r.dataset.clone(),
                    r.method.clone(),
                    r.r.to_string(),
                    fixed4(r.accuracy_mean),
                    fixed4(r.accuracy_std),
                    fixed4(r.sketch_sparsity_rate),
                    fixed4(r.embed_time_ms),
                    fixed4(r.predict_time_per_sample_us),
                ]
            });
            let mut out = comment_preamble(config).into_bytes();
            out.extend(csv_bytes(&REPORT_CSV_HEADER, rows)?);
            out
        }
        ReportFormat::Json => json_bytes(reports, config)?,
    };
    write_file(path.as_ref(), &bytes)
}

fn read_json_items<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = read_file(path)?;
    if let Ok(items) = serde_json::from_str::<Vec<T>>(&text) {
        return Ok(items);
    }
    Ok(serde_json::from_str::<WithConfig<T>>(&text)?.reports)
}

/// Reads a JSON report written by [`write_report`], with or without config.
pub fn read_report_json(path: impl AsRef<Path>) -> Result<Vec<BenchReport>> {
    read_json_items(path.as_ref())
}

/// One point of an `r` or `lambda` sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub x: f64,
    pub method: String,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub sparsity: f64,
}

pub const SWEEP_CSV_HEADER: [&str; 5] = ["x", "method", "acc_mean", "acc_std", "sparsity"];

pub fn write_sweep(
    points: &[SweepPoint],
    format: ReportFormat,
    path: impl AsRef<Path>,
    config: Option<&str>,
) -> Result<()> {
    let bytes = match format {
        ReportFormat::Csv => {
            let rows = points.iter().map(|p| {
                vec![
                    format!("{}", p.x),
                    p.method.clone(),
                    fixed4(p.accuracy_mean),
                    fixed4(p.accuracy_std),
                    fixed4(p.sparsity),
                ]
            });
            let mut out = comment_preamble(config).into_bytes();
            out.extend(csv_bytes(&SWEEP_CSV_HEADER, rows)?);
            out
        }
        ReportFormat::Json => json_bytes(points, config)?,
    };
    write_file(path.as_ref(), &bytes)
}

pub fn read_sweep_json(path: impl AsRef<Path>) -> Result<Vec<SweepPoint>> {
    read_json_items(path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(name: &str) -> BenchReport {
        BenchReport {
            dataset: name.into(),
            method: "countsketch".into(),
            r: 16,
            accuracy_mean: 0.912345,
            accuracy_std: 0.01,
            sketch_sparsity_rate: 0.5,
            embed_time_ms: 1.23456,
            predict_time_per_sample_us: 0.1,
            hyperparameters: BTreeMap::from([("c".to_string(), "1".to_string())]),
            fold_accuracies: vec![0.9, 0.924690],
        }
    }

    #[test]
    fn single_row_with_forced_dimension() {
        let ds = parse_libsvm_str("1 3:2.5\n", Some(4), "toy").unwrap();
        assert_eq!(ds.features.to_dense().row(0), &[0.0, 0.0, 2.5, 0.0]);
        assert_eq!(ds.labels, vec![0]);
        assert_eq!(ds.class_count, 1);
    }

    #[test]
    fn two_classes_identity() {
        let ds = parse_libsvm_str("+1 1:1\n-1 2:1\n", None, "toy").unwrap();
        assert_eq!(ds.features.to_dense(), SparseMatrix::identity(2).to_dense());
        assert_eq!(ds.labels, vec![0, 1]);
        assert_eq!(ds.original_labels, vec![1.0, -1.0]);
    }

    #[test]
    fn explicit_zeros_dropped_and_comments_skipped() {
        let ds = parse_libsvm_str("# header\n\n3 1:0 2:4\n", None, "toy").unwrap();
        assert_eq!(ds.features.nnz(), 1);
        assert_eq!(ds.d(), 2);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        for (text, line) in [
            ("1 1:1\n1 2:x\n", 2),
            ("1 2:1 1:1\n", 1),
            ("1 1:1\n\nabc 1:1\n", 3),
            ("1 0:1\n", 1),
            ("1 1 2\n", 1),
        ] {
            match parse_libsvm_str(text, None, "f.svm") {
                Err(IoError::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("expected parse error for {text:?}, got {other:?}"),
            }
        }
        let e = parse_libsvm_str("1 5:1\n", Some(4), "f").unwrap_err();
        assert!(e.to_string().contains("exceeds dimension"));
    }

    #[test]
    fn empty_input_is_degenerate() {
        let e = parse_libsvm_str("", None, "empty").unwrap_err();
        assert!(e.to_string().contains("degenerate shape"));
        let e = parse_libsvm_str("# only a comment\n", None, "c").unwrap_err();
        assert!(e.to_string().contains("degenerate shape"));
    }

    #[test]
    fn minmax_examples() {
        let col = |vals: &[f64]| {
            let rows: Vec<(Vec<usize>, Vec<f64>)> = vals
                .iter()
                .map(|&v| if v == 0.0 { (vec![], vec![]) } else { (vec![0], vec![v]) })
                .collect();
            let features = CsrMatrix::from_rows(1, rows).unwrap().to_csc();
            let ds = Dataset {
                labels: vec![0; vals.len()],
                class_count: 1,
                source: "t".into(),
                scaling: Scaling::None,
                original_labels: vec![1.0],
                features,
            };
            minmax_scale_pm1(&ds).features.to_dense().column(0)
        };
        assert_eq!(col(&[0.0, 5.0, 10.0]), vec![-1.0, 0.0, 1.0]);
        assert_eq!(col(&[7.0, 7.0, 7.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(col(&[-2.0, 0.0, 2.0]), vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn empty_report_csv_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_report(&[], ReportFormat::Csv, &p).unwrap();
        assert_eq!(
            fs::read_to_string(&p).unwrap(),
            "dataset,method,r,acc_mean,acc_std,sparsity,embed_ms,predict_us\n"
        );
    }

    #[test]
    fn one_report_csv_uses_four_decimals() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_report(&[report("toy")], ReportFormat::Csv, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1], "toy,countsketch,16,0.9123,0.0100,0.5000,1.2346,0.1000");
    }

    #[test]
    fn json_round_trip_with_and_without_config() {
        let dir = tempfile::tempdir().unwrap();
        let reports = vec![report("a"), report("b")];
        let p = dir.path().join("r.json");
        write_report(&reports, ReportFormat::Json, &p).unwrap();
        assert_eq!(read_report_json(&p).unwrap(), reports);
        write_report_with_config(&reports, ReportFormat::Json, &p, Some("r = [16]")).unwrap();
        assert_eq!(read_report_json(&p).unwrap(), reports);
        assert!(fs::read_to_string(&p).unwrap().contains("r = [16]"));
    }

    #[test]
    fn csv_config_echo_is_commented() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_report_with_config(&[], ReportFormat::Csv, &p, Some("a = 1\nb = 2")).unwrap();
        assert_eq!(
            fs::read_to_string(&p).unwrap(),
            "# a = 1\n# b = 2\ndataset,method,r,acc_mean,acc_std,sparsity,embed_ms,predict_us\n"
        );
    }

    #[test]
    fn unwritable_path_errors() {
        let e = write_report(&[], ReportFormat::Csv, "/nonexistent-dir/x/r.csv").unwrap_err();
        assert!(matches!(e, IoError::Io { .. }));
    }

    #[test]
    fn format_parsing() {
        assert_eq!("csv".parse::<ReportFormat>().unwrap(), ReportFormat::Csv);
        assert!("xml".parse::<ReportFormat>().is_err());
    }
}
