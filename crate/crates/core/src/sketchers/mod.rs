//! Sketching transforms `X (n x d) -> X R (n x r)`.
//!
//! Each `fit_*` function is a pure function of its arguments; the random
//! draws come from the per-method stream described in [`crate::rng`]. A fitted
//! [`SketchModel`] is immutable and serializes to a self-describing JSON blob.
//!
//! | method       | payload                                   | apply cost            |
//! |--------------|-------------------------------------------|-----------------------|
//! | `gaussian`   | dense `R`, entries `N(0, 1/d)`            | `O(nnz(X) r)`         |
//! | `achlioptas` | dense `R`, entries `sqrt(3/d) {+1,0,-1}`  | `O(nnz(X) r)`         |
//! | `countsketch`| signs `D`, bucket map `h`                 | `O(nnz(X))`           |
//! | `srht`       | signs, padded dim, sampled coordinates    | `O(n d' log d')`      |
//! | `srht_topr`  | as `srht`, coordinates chosen by energy   | `O(n d' log d')`      |
//! | `esck`       | signs, learned membership, scaling        | `O(nnz(X))`           |

pub mod hadamard;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{multiply, DenseMatrix, Matrix, MatrixError, SignDiagonal, SparseMatrix};
use crate::rng::{self, Stream, STREAM_VERSION};
use hadamard::fwht_in_place;

#[derive(Debug, Error)]
pub enum SketchError {
    #[error("sketch dimension r={r} must satisfy 0 < r < d={d}")]
    InvalidDimensions { d: usize, r: usize },
    #[error("input has {got} columns but the sketch expects d={expected}")]
    InputDimension { expected: usize, got: usize },
    #[error("training matrix is empty")]
    EmptyTraining,
    #[error("invalid sketch model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error("sketch model serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SketchError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gaussian,
    Achlioptas,
    CountSketch,
    Srht,
    SrhtTopr,
    Esck,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Gaussian => "gaussian",
            Method::Achlioptas => "achlioptas",
            Method::CountSketch => "countsketch",
            Method::Srht => "srht",
            Method::SrhtTopr => "srht_topr",
            Method::Esck => "esck",
        }
    }
}

/// Method-specific fitted state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    /// Explicit `d x r` projection matrix.
    Dense { projection: DenseMatrix },
    /// `R = D Phi` (optionally times a per-bucket scale), applied by streaming
    /// nonzeros: `out[i, h(j)] += sign_j * scale[h(j)] * x[i, j]`.
    Hashed {
        signs: SignDiagonal,
        buckets: Vec<usize>,
        bucket_scale: Option<Vec<f64>>,
    },
    /// `R = scale * D H P` on rows zero-padded to `padded_dim`.
    Hadamard {
        signs: SignDiagonal,
        padded_dim: usize,
        selected: Vec<usize>,
        scale: f64,
    },
    /// Learned membership with scaling `S`, plus the training-set centers.
    Clustered {
        signs: SignDiagonal,
        assignment: Vec<usize>,
        scaling: Vec<f64>,
        centers: SparseMatrix,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchModel {
    pub method: Method,
    pub d: usize,
    pub r: usize,
    pub seed: u64,
    pub stream_version: u32,
    pub payload: Payload,
}

fn check_dims(d: usize, r: usize) -> Result<()> {
    if r == 0 || r >= d {
        return Err(SketchError::InvalidDimensions { d, r });
    }
    Ok(())
}

/// Dense `R` with i.i.d. `N(0, 1/d)` entries.
pub fn fit_gaussian(d: usize, r: usize, seed: u64) -> Result<SketchModel> {
    check_dims(d, r)?;
    let mut rng = rng::stream(seed, Stream::Gaussian);
    let std = (1.0 / d as f64).sqrt();
    let values = (0..d * r).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    Ok(SketchModel {
        method: Method::Gaussian,
        d,
        r,
        seed,
        stream_version: STREAM_VERSION,
        payload: Payload::Dense {
            projection: DenseMatrix::from_vec(d, r, values)?,
        },
    })
}

/// Dense `R` with entries `sqrt(3/d) * s`, `s` in {+1, 0, -1} with
/// probabilities 1/6, 2/3, 1/6.
pub fn fit_achlioptas(d: usize, r: usize, seed: u64) -> Result<SketchModel> {
    check_dims(d, r)?;
    let mut rng = rng::stream(seed, Stream::Achlioptas);
    let scale = (3.0 / d as f64).sqrt();
    let values = (0..d * r)
        .map(|_| {
            let u: f64 = rng.random();
            if u < 1.0 / 6.0 {
                scale
            } else if u < 1.0 / 3.0 {
                -scale
            } else {
                0.0
            }
        })
        .collect();
    Ok(SketchModel {
        method: Method::Achlioptas,
        d,
        r,
        seed,
        stream_version: STREAM_VERSION,
        payload: Payload::Dense {
            projection: DenseMatrix::from_vec(d, r, values)?,
        },
    })
}

/// Count-sketch `R = D Phi`: all `d` signs are drawn first, then the `d`
/// bucket indices.
pub fn fit_countsketch(d: usize, r: usize, seed: u64) -> Result<SketchModel> {
    check_dims(d, r)?;
    let mut rng = rng::stream(seed, Stream::CountSketch);
    let signs = SignDiagonal::random(d, &mut rng);
    let buckets = (0..d).map(|_| rng.random_range(0..r)).collect();
    Ok(SketchModel {
        method: Method::CountSketch,
        d,
        r,
        seed,
        stream_version: STREAM_VERSION,
        payload: Payload::Hashed {
            signs,
            buckets,
            bucket_scale: None,
        },
    })
}

/// Subsampled randomized Hadamard transform with uniform coordinate sampling.
pub fn fit_srht(d: usize, r: usize, seed: u64) -> Result<SketchModel> {
    check_dims(d, r)?;
    let mut rng = rng::stream(seed, Stream::Srht);
    let signs = SignDiagonal::random(d, &mut rng);
    let padded_dim = d.next_power_of_two();
    let mut selected = rand::seq::index::sample(&mut rng, padded_dim, r).into_vec();
    selected.sort_unstable();
    Ok(SketchModel {
        method: Method::Srht,
        d,
        r,
        seed,
        stream_version: STREAM_VERSION,
        payload: Payload::Hadamard {
            signs,
            padded_dim,
            selected,
            scale: 1.0 / (r as f64).sqrt(),
        },
    })
}

/// SRHT variant that keeps the `r` transformed coordinates carrying the most
/// energy (sum of squares over the rows of `X D H`) on the training matrix.
/// Ties go to the lower coordinate index.
pub fn fit_srht_topr(d: usize, r: usize, seed: u64, x_train: &Matrix) -> Result<SketchModel> {
    check_dims(d, r)?;
    if x_train.rows() == 0 {
        return Err(SketchError::EmptyTraining);
    }
    if x_train.cols() != d {
        return Err(SketchError::InputDimension {
            expected: d,
            got: x_train.cols(),
        });
    }
    let mut rng = rng::stream(seed, Stream::SrhtTopr);
    let signs = SignDiagonal::random(d, &mut rng);
    let padded_dim = d.next_power_of_two();
    let rows = RowSource::new(x_train);
    let energy = (0..x_train.rows())
        .into_par_iter()
        .fold(
            || (vec![0.0; padded_dim], vec![0.0; padded_dim]),
            |(mut acc, mut buf), i| {
                rows.rotate_row(i, &signs, &mut buf);
                for (a, y) in acc.iter_mut().zip(&buf) {
                    *a += y * y;
                }
                (acc, buf)
            },
        )
        .map(|(acc, _)| acc)
        .reduce(
            || vec![0.0; padded_dim],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );
    let selected = top_r_coordinates(&energy, r);
    Ok(SketchModel {
        method: Method::SrhtTopr,
        d,
        r,
        seed,
        stream_version: STREAM_VERSION,
        payload: Payload::Hadamard {
            signs,
            padded_dim,
            selected,
            scale: 1.0 / (r as f64).sqrt(),
        },
    })
}

/// Indices of the `r` largest entries (ties to the lower index), ascending.
pub(crate) fn top_r_coordinates(energy: &[f64], r: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..energy.len()).collect();
    order.sort_by(|&a, &b| energy[b].total_cmp(&energy[a]).then(a.cmp(&b)));
    let mut chosen = order[..r].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Row access over either layout, used by the row-wise kernels.
enum RowSource<'a> {
    Dense(&'a DenseMatrix),
    Sparse(crate::matrix::CsrMatrix),
}

impl<'a> RowSource<'a> {
    fn new(x: &'a Matrix) -> Self {
        match x {
            Matrix::Dense(m) => RowSource::Dense(m),
            Matrix::Sparse(m) => RowSource::Sparse(m.to_csr()),
        }
    }

    /// Writes `H D x_i` (zero padded) into `buf`.
    fn rotate_row(&self, i: usize, signs: &SignDiagonal, buf: &mut [f64]) {
        buf.iter_mut().for_each(|v| *v = 0.0);
        match self {
            RowSource::Dense(m) => {
                for (j, &v) in m.row(i).iter().enumerate() {
                    buf[j] = signs.sign(j) * v;
                }
            }
            RowSource::Sparse(m) => {
                for (j, v) in m.row(i).iter() {
                    buf[j] = signs.sign(j) * v;
                }
            }
        }
        fwht_in_place(buf);
    }
}

/// Streams the nonzeros of `x` through the map `j -> (bucket[j], coef[j])`.
/// Returns the sketch and the number of stored entries visited.
pub(crate) fn hash_sketch(x: &Matrix, buckets: &[usize], coefficients: &[f64], r: usize) -> (Matrix, u64) {
    let n = x.rows();
    let mut visits = 0u64;
    match x {
        Matrix::Sparse(m) => {
            // group input columns by bucket, keeping increasing j inside a bucket
            let mut starts = vec![0usize; r + 1];
            for &b in buckets {
                starts[b + 1] += 1;
            }
            for k in 0..r {
                starts[k + 1] += starts[k];
            }
            let mut fill = starts.clone();
            let mut grouped = vec![0usize; buckets.len()];
            for (j, &b) in buckets.iter().enumerate() {
                grouped[fill[b]] = j;
                fill[b] += 1;
            }
            let mut acc = vec![0.0; n];
            let mut seen = vec![false; n];
            let mut touched = Vec::new();
            let mut col_ptr = Vec::with_capacity(r + 1);
            let mut row_idx = Vec::new();
            let mut values = Vec::new();
            col_ptr.push(0);
            for k in 0..r {
                for &j in &grouped[starts[k]..starts[k + 1]] {
                    let coef = coefficients[j];
                    for (i, v) in m.column(j).iter() {
                        visits += 1;
                        if !seen[i] {
                            seen[i] = true;
                            touched.push(i);
                        }
                        acc[i] += coef * v;
                    }
                }
                touched.sort_unstable();
                for &i in &touched {
                    if acc[i] != 0.0 {
                        row_idx.push(i);
                        values.push(acc[i]);
                    }
                    acc[i] = 0.0;
                    seen[i] = false;
                }
                touched.clear();
                col_ptr.push(row_idx.len());
            }
            let out = SparseMatrix::from_csc_unchecked(n, r, col_ptr, row_idx, values);
            (Matrix::Sparse(out), visits)
        }
        Matrix::Dense(m) => {
            let mut out = vec![0.0; n * r];
            for i in 0..n {
                let orow = &mut out[i * r..(i + 1) * r];
                for (j, &v) in m.row(i).iter().enumerate() {
                    if v != 0.0 {
                        visits += 1;
                        orow[buckets[j]] += coefficients[j] * v;
                    }
                }
            }
            (Matrix::Dense(DenseMatrix::from_vec_unchecked(n, r, out)), visits)
        }
    }
}

/// Per-column coefficients `sign_j * scale[bucket_j]`.
pub(crate) fn hash_coefficients(signs: &SignDiagonal, buckets: &[usize], scale: Option<&[f64]>) -> Vec<f64> {
    buckets
        .iter()
        .enumerate()
        .map(|(j, &b)| signs.sign(j) * scale.map_or(1.0, |s| s[b]))
        .collect()
}

impl SketchModel {
    /// Count-sketch only: scale bucket `k` by `1/sqrt(|bucket k|)`, i.e. use
    /// `D Phi S^{1/2}` instead of `D Phi`. Empty buckets get scale 0.
    pub fn with_bucket_normalization(mut self) -> Result<Self> {
        let r = self.r;
        match &mut self.payload {
            Payload::Hashed {
                buckets, bucket_scale, ..
            } if self.method == Method::CountSketch => {
                let mut sizes = vec![0usize; r];
                for &b in buckets.iter() {
                    sizes[b] += 1;
                }
                *bucket_scale = Some(
                    sizes
                        .iter()
                        .map(|&s| if s == 0 { 0.0 } else { 1.0 / (s as f64).sqrt() })
                        .collect(),
                );
                Ok(self)
            }
            _ => Err(SketchError::InvalidModel(
                "bucket normalization applies to count-sketch only".into(),
            )),
        }
    }

    /// `X R`. Count-sketch and ESCK stream nonzeros and keep sparse input
    /// sparse; dense projections go through [`multiply`].
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        self.apply_instrumented(x).map(|(m, _)| m)
    }

    /// As [`apply`](Self::apply), also returning the number of stored input
    /// entries the kernel visited (only meaningful for hashed sketches; other
    /// methods report `nnz(X)`).
    pub fn apply_instrumented(&self, x: &Matrix) -> Result<(Matrix, u64)> {
        if x.cols() != self.d {
            return Err(SketchError::InputDimension {
                expected: self.d,
                got: x.cols(),
            });
        }
        match &self.payload {
            Payload::Dense { projection } => {
                let out = multiply(x, &Matrix::Dense(projection.clone()))?;
                Ok((out, x.nnz() as u64))
            }
            Payload::Hashed {
                signs,
                buckets,
                bucket_scale,
            } => {
                let coef = hash_coefficients(signs, buckets, bucket_scale.as_deref());
                Ok(hash_sketch(x, buckets, &coef, self.r))
            }
            Payload::Clustered {
                signs,
                assignment,
                scaling,
                ..
            } => {
                let coef = hash_coefficients(signs, assignment, Some(scaling));
                Ok(hash_sketch(x, assignment, &coef, self.r))
            }
            Payload::Hadamard {
                signs,
                padded_dim,
                selected,
                scale,
            } => {
                let rows = RowSource::new(x);
                let r = self.r;
                let mut out = vec![0.0; x.rows() * r];
                out.par_chunks_mut(r.max(1)).enumerate().for_each_init(
                    || vec![0.0; *padded_dim],
                    |buf, (i, orow)| {
                        rows.rotate_row(i, signs, buf);
                        for (o, &k) in orow.iter_mut().zip(selected) {
                            *o = scale * buf[k];
                        }
                    },
                );
                let out = DenseMatrix::from_vec(x.rows(), r, out)?;
                Ok((Matrix::Dense(out), x.nnz() as u64))
            }
        }
    }

    /// `R` as an explicit matrix. Intended for tests and small problems.
    pub fn materialize(&self) -> Result<Matrix> {
        Ok(match &self.payload {
            Payload::Dense { projection } => Matrix::Dense(projection.clone()),
            Payload::Hashed {
                signs,
                buckets,
                bucket_scale,
            } => {
                let coef = hash_coefficients(signs, buckets, bucket_scale.as_deref());
                let trips: Vec<_> = (0..self.d).map(|j| (j, buckets[j], coef[j])).collect();
                Matrix::Sparse(SparseMatrix::from_triplets(self.d, self.r, &trips)?)
            }
            Payload::Clustered {
                signs,
                assignment,
                scaling,
                ..
            } => {
                let coef = hash_coefficients(signs, assignment, Some(scaling));
                let trips: Vec<_> = (0..self.d).map(|j| (j, assignment[j], coef[j])).collect();
                Matrix::Sparse(SparseMatrix::from_triplets(self.d, self.r, &trips)?)
            }
            Payload::Hadamard { .. } => {
                // R = rows of the transform applied to the identity
                let id = Matrix::Sparse(SparseMatrix::identity(self.d));
                self.apply(&id)?
            }
        })
    }

    /// Checks the structural invariants of a (possibly deserialized) model.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SketchError::InvalidModel(msg));
        if self.method != Method::Esck {
            check_dims(self.d, self.r)?;
        } else if self.r == 0 || self.r > self.d {
            return Err(SketchError::InvalidDimensions { d: self.d, r: self.r });
        }
        match (&self.payload, self.method) {
            (Payload::Dense { projection }, Method::Gaussian | Method::Achlioptas) => {
                if projection.rows() != self.d || projection.cols() != self.r {
                    return bad("projection shape does not match (d, r)".into());
                }
            }
            (
                Payload::Hashed {
                    signs,
                    buckets,
                    bucket_scale,
                },
                Method::CountSketch,
            ) => {
                if signs.dim() != self.d || buckets.len() != self.d {
                    return bad("sign/bucket length does not match d".into());
                }
                if buckets.iter().any(|&b| b >= self.r) {
                    return bad("bucket index out of range".into());
                }
                if let Some(s) = bucket_scale {
                    if s.len() != self.r || s.iter().any(|v| !v.is_finite()) {
                        return bad("bucket scale malformed".into());
                    }
                }
            }
            (
                Payload::Hadamard {
                    signs,
                    padded_dim,
                    selected,
                    scale,
                },
                Method::Srht | Method::SrhtTopr,
            ) => {
                if signs.dim() != self.d || *padded_dim != self.d.next_power_of_two() || selected.len() != self.r {
                    return bad("hadamard payload dimensions inconsistent".into());
                }
                if selected.windows(2).any(|w| w[0] >= w[1]) || selected.iter().any(|&k| k >= *padded_dim) {
                    return bad("selected coordinates must be increasing and in range".into());
                }
                if !scale.is_finite() {
                    return bad("scale not finite".into());
                }
            }
            (
                Payload::Clustered {
                    signs,
                    assignment,
                    scaling,
                    centers,
                },
                Method::Esck,
            ) => {
                if signs.dim() != self.d || assignment.len() != self.d || scaling.len() != self.r {
                    return bad("clustered payload dimensions inconsistent".into());
                }
                if assignment.iter().any(|&a| a >= self.r) {
                    return bad("cluster index out of range".into());
                }
                if scaling.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return bad("scaling entries must be finite and non-negative".into());
                }
                if centers.cols() != self.r {
                    return bad("center count does not match r".into());
                }
            }
            _ => return bad(format!("payload does not match method {:?}", self.method)),
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: SketchModel = serde_json::from_str(s)?;
        model.validate()?;
        Ok(model)
    }
}
