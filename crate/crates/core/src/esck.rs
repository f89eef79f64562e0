//! Learned count-sketch: k-means on the columns of `M = X D` by gradient
//! descent, with every center projected onto an L1 ball after each step.
//!
//! With a sign diagonal `D`, a membership `Phi` (each of the `d` columns in
//! exactly one of `r` clusters) and `S = diag(1 / |cluster j|)`,
//!
//! ```text
//! |X - X D Phi S Phi^T D^T|_F^2  ==  sum_i |M(:, i) - c_a(i)|^2
//! ```
//!
//! when every `c_j` is the mean of its cluster, `M Phi S`. The left side is
//! the count-sketch reconstruction error ([`reconstruction_error`]), the right
//! side the k-means objective ([`kmeans_objective`]). Fitting therefore picks
//! `Phi` by clustering instead of at random.
//!
//! [`esck_fit`] runs, for `t` iterations: assign every column to its nearest
//! center, take one gradient step per center, then shrink each center with
//! [`epsilon_l1_project_in_place`]. It returns the centers
//! `[c_1 ... c_r]` as the `n x r` sketch of the training rows together with
//! `Phi` and `D`; new rows are mapped with [`inductive_transform`],
//! `X_new D Phi S`, in `O(nnz(X_new))`.

use std::borrow::Cow;
use std::collections::HashSet;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::l1ball::{epsilon_l1_project_in_place, ProjectionParams};
use crate::matrix::{
    lane_sq_distance, multiply, scale_sparse_columns, DenseMatrix, Matrix, MatrixError, RealVector, SignDiagonal,
    SparseMatrix, SparseVector,
};
use crate::rng::{self, Stream, STREAM_VERSION};
use crate::sketchers::{hash_coefficients, hash_sketch, Method, Payload, SketchModel};

/// Density below which a center is stored sparse.
pub const CENTER_DENSITY_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EsckError {
    #[error("sketch dimension r={r} must satisfy 0 < r < d={d}")]
    InvalidDimensions { d: usize, r: usize },
    #[error("need {r} distinct columns to seed the centers, found {found}")]
    InsufficientDistinctColumns { found: usize, r: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

pub type Result<T> = std::result::Result<T, EsckError>;

/// Step size rule for the center update `c_j <- c_j - eta_j * grad_j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LearningRate {
    /// `eta_j = 1 / (2 max(1, |cluster j|))`: the step lands on the cluster
    /// mean, i.e. one Lloyd update before projection.
    ClusterMean,
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchSize {
    Full,
    Columns(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmptyClusterPolicy {
    /// Move the column farthest from its own center into the empty cluster
    /// and put the center on it.
    ReseedFarthest,
    /// Leave the cluster empty with a zero center.
    DropToZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsckConfig {
    pub r: usize,
    pub iters: usize,
    pub learning_rate: LearningRate,
    pub projection: ProjectionParams,
    pub batch_size: BatchSize,
    pub seed: u64,
    pub empty_cluster_policy: EmptyClusterPolicy,
    /// Stop once the relative objective change drops below this value.
    pub early_stop: Option<f64>,
}

impl EsckConfig {
    /// Defaults: 20 iterations, cluster-mean steps, `lambda = 10`,
    /// `epsilon = 0.1`, full batch, farthest-column reseeding.
    pub fn new(r: usize) -> Self {
        Self {
            r,
            iters: 20,
            learning_rate: LearningRate::ClusterMean,
            projection: ProjectionParams::new(10.0, 0.1).expect("valid defaults"),
            batch_size: BatchSize::Full,
            seed: 0,
            empty_cluster_policy: EmptyClusterPolicy::ReseedFarthest,
            early_stop: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_iters(mut self, iters: usize) -> Self {
        self.iters = iters;
        self
    }

    pub fn with_projection(mut self, projection: ProjectionParams) -> Self {
        self.projection = projection;
        self
    }

    pub fn with_batch_size(mut self, batch: BatchSize) -> Self {
        self.batch_size = batch;
        self
    }

    pub fn with_learning_rate(mut self, rate: LearningRate) -> Self {
        self.learning_rate = rate;
        self
    }

    pub fn with_empty_cluster_policy(mut self, policy: EmptyClusterPolicy) -> Self {
        self.empty_cluster_policy = policy;
        self
    }

    pub fn with_early_stop(mut self, tol: Option<f64>) -> Self {
        self.early_stop = tol;
        self
    }

    fn validate(&self, d: usize) -> Result<()> {
        if self.r == 0 || self.r >= d {
            return Err(EsckError::InvalidDimensions { d, r: self.r });
        }
        if self.iters == 0 {
            return Err(EsckError::InvalidConfig("iters must be at least 1".into()));
        }
        if let LearningRate::Constant(eta) = self.learning_rate {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(EsckError::InvalidConfig(format!(
                    "learning rate must be positive, got {eta}"
                )));
            }
        }
        if let BatchSize::Columns(b) = self.batch_size {
            if b == 0 || b > d {
                return Err(EsckError::InvalidConfig(format!("batch size {b} must be in 1..={d}")));
            }
        }
        Ok(())
    }
}

/// Cluster membership `Phi` stored as a column-to-cluster index array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Membership {
    assignment: Vec<usize>,
    clusters: usize,
}

impl Membership {
    pub fn new(assignment: Vec<usize>, clusters: usize) -> Result<Self> {
        if let Some(&bad) = assignment.iter().find(|&&a| a >= clusters) {
            return Err(EsckError::Shape(format!(
                "cluster index {bad} out of range for {clusters} clusters"
            )));
        }
        Ok(Self { assignment, clusters })
    }

    /// Number of assigned columns `d`.
    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn cluster_of(&self, column: usize) -> usize {
        self.assignment[column]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.clusters];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }

    /// Column indices of each cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.clusters];
        for (i, &a) in self.assignment.iter().enumerate() {
            out[a].push(i);
        }
        out
    }

    /// `Phi` as an explicit `d x r` 0/1 matrix.
    pub fn to_matrix(&self) -> SparseMatrix {
        let trips: Vec<_> = self.assignment.iter().enumerate().map(|(i, &a)| (i, a, 1.0)).collect();
        SparseMatrix::from_triplets(self.len(), self.clusters, &trips).expect("membership indices are in range")
    }
}

/// Diagonal `S` with `S_jj = 1 / |cluster j|`, or 0 for an empty cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingDiagonal {
    values: Vec<f64>,
}

impl ScalingDiagonal {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

pub fn scaling_from_phi(phi: &Membership) -> ScalingDiagonal {
    ScalingDiagonal {
        values: phi
            .cluster_sizes()
            .into_iter()
            .map(|s| if s == 0 { 0.0 } else { 1.0 / s as f64 })
            .collect(),
    }
}

/// Membership plus one center (length `n`) per cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub membership: Membership,
    pub centers: Vec<RealVector>,
}

impl ClusterState {
    fn check(&self, m: &SparseMatrix) -> Result<()> {
        if self.membership.len() != m.cols() {
            return Err(EsckError::Shape(format!(
                "membership covers {} columns, matrix has {}",
                self.membership.len(),
                m.cols()
            )));
        }
        check_centers(m, &self.centers)?;
        if self.centers.len() != self.membership.clusters() {
            return Err(EsckError::Shape(format!(
                "{} centers for {} clusters",
                self.centers.len(),
                self.membership.clusters()
            )));
        }
        Ok(())
    }
}

fn check_centers(m: &SparseMatrix, centers: &[RealVector]) -> Result<()> {
    if let Some(c) = centers.iter().find(|c| c.len() != m.rows()) {
        return Err(EsckError::Shape(format!(
            "center of length {} for {} rows",
            c.len(),
            m.rows()
        )));
    }
    Ok(())
}

/// `sum_i |M(:, i) - c_a(i)|^2`.
pub fn kmeans_objective(m: &SparseMatrix, state: &ClusterState) -> Result<f64> {
    state.check(m)?;
    let norms: Vec<f64> = state.centers.iter().map(RealVector::sq_norm).collect();
    let per_column: Vec<f64> = (0..m.cols())
        .into_par_iter()
        .map(|i| {
            let a = state.membership.cluster_of(i);
            lane_sq_distance(m.column(i), &state.centers[a], norms[a])
        })
        .collect();
    // fixed summation order keeps the result independent of thread count
    Ok(per_column.iter().sum())
}

/// Exact cluster means `M Phi S`, one per cluster (zero for empty clusters).
pub fn cluster_means(m: &SparseMatrix, phi: &Membership) -> Result<Vec<RealVector>> {
    if phi.len() != m.cols() {
        return Err(EsckError::Shape(format!(
            "membership covers {} columns, matrix has {}",
            phi.len(),
            m.cols()
        )));
    }
    Ok(phi
        .members()
        .par_iter()
        .map(|cols| {
            let mut sum = column_sum(m, cols);
            if !cols.is_empty() {
                let inv = 1.0 / cols.len() as f64;
                sum.iter_mut().for_each(|v| *v *= inv);
            }
            RealVector::compact(sum, CENTER_DENSITY_THRESHOLD)
        })
        .collect())
}

fn column_sum(m: &SparseMatrix, cols: &[usize]) -> Vec<f64> {
    let mut sum = vec![0.0; m.rows()];
    for &i in cols {
        for (row, v) in m.column(i).iter() {
            sum[row] += v;
        }
    }
    sum
}

/// `|X - X D Phi S Phi^T D^T|_F^2`, evaluated through explicit products:
/// first the `n x r` means `X (D Phi S)`, then back to `n x d` with
/// `(D Phi)^T`. The `d x d` matrix is never formed.
pub fn reconstruction_error(x: &Matrix, d_signs: &SignDiagonal, phi: &Membership) -> Result<f64> {
    let d = x.cols();
    if d_signs.dim() != d || phi.len() != d {
        return Err(EsckError::Shape(format!(
            "X has {d} columns, D has {}, Phi has {}",
            d_signs.dim(),
            phi.len()
        )));
    }
    let scaling = scaling_from_phi(phi);
    let signed_phi = |scale: Option<&[f64]>| {
        let trips: Vec<_> = (0..d)
            .map(|j| {
                let a = phi.cluster_of(j);
                (j, a, d_signs.sign(j) * scale.map_or(1.0, |s| s[a]))
            })
            .collect();
        SparseMatrix::from_triplets(d, phi.clusters(), &trips)
    };
    let dphis = Matrix::Sparse(signed_phi(Some(scaling.values()))?);
    let dphi_t = Matrix::Sparse(signed_phi(None)?.transpose());
    let means = multiply(x, &dphis)?;
    let reconstructed = multiply(&means, &dphi_t)?;
    let (x, rec) = (x.to_dense(), reconstructed.to_dense());
    Ok(x.as_slice()
        .iter()
        .zip(rec.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Total center entries up to which assignment runs on dense copies of the
/// centers, where each distance costs `O(nnz(column))`.
const DENSE_ASSIGN_LIMIT: usize = 1 << 24;

fn assignment_view(centers: &[RealVector]) -> Cow<'_, [RealVector]> {
    let total: usize = centers.iter().map(RealVector::len).sum();
    if total <= DENSE_ASSIGN_LIMIT && centers.iter().any(|c| matches!(c, RealVector::Sparse(_))) {
        Cow::Owned(centers.iter().map(|c| RealVector::Dense(c.to_dense())).collect())
    } else {
        Cow::Borrowed(centers)
    }
}

/// Nearest center for every column; ties go to the lowest cluster index.
pub fn assign_columns(m: &SparseMatrix, centers: &[RealVector]) -> Result<Membership> {
    if centers.is_empty() {
        return Err(EsckError::InvalidConfig("no centers".into()));
    }
    check_centers(m, centers)?;
    let centers = assignment_view(centers);
    let norms: Vec<f64> = centers.iter().map(RealVector::sq_norm).collect();
    let assignment = (0..m.cols())
        .into_par_iter()
        .map(|i| nearest(m, i, &centers, &norms).0)
        .collect();
    Membership::new(assignment, centers.len())
}

fn nearest(m: &SparseMatrix, i: usize, centers: &[RealVector], norms: &[f64]) -> (usize, f64) {
    let col = m.column(i);
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let dist = lane_sq_distance(col, c, norms[j]);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best
}

/// Gradient of the k-means objective with respect to center `j`:
/// `-2 sum_{i in cluster j} (M(:, i) - c_j)`. Zero for an empty cluster.
pub fn gradient_wrt_center(m: &SparseMatrix, phi: &Membership, centers: &[RealVector], j: usize) -> Result<Vec<f64>> {
    if j >= centers.len() || j >= phi.clusters() {
        return Err(EsckError::Shape(format!("cluster {j} out of range")));
    }
    check_centers(m, centers)?;
    let members: Vec<usize> = (0..phi.len()).filter(|&i| phi.cluster_of(i) == j).collect();
    Ok(batch_gradient(m, &members, &centers[j], 1.0))
}

/// `-2 scale sum_{i in members} (M(:, i) - c)`.
fn batch_gradient(m: &SparseMatrix, members: &[usize], c: &RealVector, scale: f64) -> Vec<f64> {
    let sum = column_sum(m, members);
    let k = members.len() as f64;
    let c = c.to_dense();
    sum.iter().zip(&c).map(|(s, ci)| -2.0 * scale * (s - k * ci)).collect()
}

fn step_size(rate: LearningRate, effective_count: f64) -> f64 {
    match rate {
        LearningRate::ClusterMean => 1.0 / (2.0 * effective_count.max(1.0)),
        LearningRate::Constant(eta) => eta,
    }
}

/// One gradient step on every center, using all columns of each cluster.
/// Centers are returned dense; no projection is applied.
pub fn gd_step(state: &ClusterState, m: &SparseMatrix, rate: LearningRate) -> Result<ClusterState> {
    state.check(m)?;
    let members = state.membership.members();
    let centers = update_centers(m, &members, &state.centers, 1.0, rate)
        .into_iter()
        .map(RealVector::Dense)
        .collect();
    Ok(ClusterState {
        membership: state.membership.clone(),
        centers,
    })
}

fn update_centers(
    m: &SparseMatrix,
    members: &[Vec<usize>],
    centers: &[RealVector],
    scale: f64,
    rate: LearningRate,
) -> Vec<Vec<f64>> {
    members
        .par_iter()
        .zip(centers.par_iter())
        .map(|(cols, c)| {
            let grad = batch_gradient(m, cols, c, scale);
            let eta = step_size(rate, scale * cols.len() as f64);
            let mut next = c.to_dense();
            for (v, g) in next.iter_mut().zip(&grad) {
                *v -= eta * g;
            }
            next
        })
        .collect()
}

fn project_center(mut c: Vec<f64>, params: &ProjectionParams) -> RealVector {
    if !params.is_disabled() {
        epsilon_l1_project_in_place(&mut c, params);
    }
    RealVector::compact(c, CENTER_DENSITY_THRESHOLD)
}

/// The sign diagonal [`esck_fit`] uses for `seed`: the first `d` draws of
/// the ESCK random stream.
pub fn esck_signs(seed: u64, d: usize) -> SignDiagonal {
    SignDiagonal::random(d, &mut rng::stream(seed, Stream::Esck))
}

/// Per-iteration record of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    /// Objective of the assignment made at the start of the iteration
    /// against the incoming centers.
    pub assigned_objective: f64,
    /// Objective of that assignment against the updated, projected centers.
    pub objective: f64,
    pub max_center_l1: f64,
    pub center_nnz: usize,
}

/// Output of [`esck_fit`] / [`esck_fit_minibatch`].
#[derive(Debug, Clone, PartialEq)]
pub struct EsckFit {
    /// `[c_1 ... c_r]`, the `n x r` sketch of the training rows.
    pub sketched: SparseMatrix,
    pub membership: Membership,
    pub signs: SignDiagonal,
    pub scaling: ScalingDiagonal,
    pub centers: Vec<RealVector>,
    /// Objective of the first assignment against the initial centers.
    pub initial_objective: f64,
    /// Objective of the returned membership against the returned centers.
    pub final_objective: f64,
    pub history: Vec<IterationStats>,
}

impl EsckFit {
    /// `X_new D Phi S` with the learned `D` and `Phi`.
    pub fn transform(&self, x_new: &Matrix) -> Result<Matrix> {
        inductive_transform(x_new, &self.signs, &self.membership, &self.scaling)
    }

    pub fn final_state(&self) -> ClusterState {
        ClusterState {
            membership: self.membership.clone(),
            centers: self.centers.clone(),
        }
    }

    /// Packs the fit into a serializable [`SketchModel`].
    pub fn to_model(&self, seed: u64) -> SketchModel {
        SketchModel {
            method: Method::Esck,
            d: self.membership.len(),
            r: self.membership.clusters(),
            seed,
            stream_version: STREAM_VERSION,
            payload: Payload::Clustered {
                signs: self.signs.clone(),
                assignment: self.membership.assignment().to_vec(),
                scaling: self.scaling.values().to_vec(),
                centers: self.sketched.clone(),
            },
        }
    }
}

/// Full-batch fit. Runs `config.iters` rounds of assign / gradient step /
/// projection starting from `r` distinct random columns of `M = X D`.
pub fn esck_fit(x: &Matrix, config: &EsckConfig) -> Result<EsckFit> {
    esck_fit_with_observer(x, config, |_, _| {})
}

/// Mini-batch fit: each round assigns a uniformly sampled set of
/// `batch_size` columns (without replacement) and steps each center with its
/// batch gradient scaled by `d / batch_size`. A final pass assigns every
/// column to produce the returned membership.
pub fn esck_fit_minibatch(x: &Matrix, config: &EsckConfig) -> Result<EsckFit> {
    let config = match config.batch_size {
        BatchSize::Full => config.clone().with_batch_size(BatchSize::Columns(x.cols())),
        BatchSize::Columns(_) => config.clone(),
    };
    esck_fit_with_observer(x, &config, |_, _| {})
}

/// As [`esck_fit`] / [`esck_fit_minibatch`] (chosen by `config.batch_size`),
/// calling `observer(iteration, state)` after every round.
pub fn esck_fit_with_observer(
    x: &Matrix,
    config: &EsckConfig,
    mut observer: impl FnMut(usize, &ClusterState),
) -> Result<EsckFit> {
    let d = x.cols();
    config.validate(d)?;
    let mut rng = rng::stream(config.seed, Stream::Esck);
    let signs = SignDiagonal::random(d, &mut rng);
    let m = scale_sparse_columns(&x.to_sparse(), &signs);
    let mut centers = initial_centers(&m, config.r, &mut rng)?;

    let batch = match config.batch_size {
        BatchSize::Columns(b) if b < d => Some(b),
        _ => None,
    };
    let scale = batch.map_or(1.0, |b| d as f64 / b as f64);

    let mut membership = assign_columns(&m, &centers)?;
    let initial_objective = objective_of(&m, &membership, &centers);
    let mut history = Vec::with_capacity(config.iters);
    let mut previous: Option<f64> = None;

    for iter in 0..config.iters {
        let members = match batch {
            None => {
                if iter > 0 {
                    membership = assign_columns(&m, &centers)?;
                }
                if config.empty_cluster_policy == EmptyClusterPolicy::ReseedFarthest {
                    reseed_empty_clusters(&m, &mut membership, &mut centers);
                }
                membership.members()
            }
            Some(b) => {
                let mut cols = sample(&mut rng, d, b).into_vec();
                cols.sort_unstable();
                let view = assignment_view(&centers);
                let norms: Vec<f64> = view.iter().map(RealVector::sq_norm).collect();
                let picks: Vec<usize> = cols.par_iter().map(|&i| nearest(&m, i, &view, &norms).0).collect();
                let mut assignment = membership.assignment().to_vec();
                let mut members = vec![Vec::new(); config.r];
                for (&i, &a) in cols.iter().zip(&picks) {
                    assignment[i] = a;
                    members[a].push(i);
                }
                membership = Membership::new(assignment, config.r)?;
                members
            }
        };
        let assigned_objective = objective_of(&m, &membership, &centers);
        let stepped = update_centers(&m, &members, &centers, scale, config.learning_rate);
        centers = stepped
            .into_par_iter()
            .zip(members.par_iter())
            .map(|(c, cols)| {
                if cols.is_empty() && batch.is_none() && config.empty_cluster_policy == EmptyClusterPolicy::DropToZero {
                    RealVector::Sparse(SparseVector::from_dense(&vec![0.0; c.len()]))
                } else {
                    project_center(c, &config.projection)
                }
            })
            .collect();
        let objective = objective_of(&m, &membership, &centers);
        history.push(IterationStats {
            assigned_objective,
            objective,
            max_center_l1: centers.iter().map(RealVector::l1_norm).fold(0.0, f64::max),
            center_nnz: centers.iter().map(RealVector::nnz).sum(),
        });
        observer(
            iter,
            &ClusterState {
                membership: membership.clone(),
                centers: centers.clone(),
            },
        );
        if let (Some(tol), Some(prev)) = (config.early_stop, previous) {
            if (prev - objective).abs() <= tol * prev.abs().max(f64::MIN_POSITIVE) {
                break;
            }
        }
        previous = Some(objective);
    }

    if batch.is_some() {
        membership = assign_columns(&m, &centers)?;
        match config.empty_cluster_policy {
            EmptyClusterPolicy::ReseedFarthest => reseed_empty_clusters(&m, &mut membership, &mut centers),
            EmptyClusterPolicy::DropToZero => {
                for (c, size) in centers.iter_mut().zip(membership.cluster_sizes()) {
                    if size == 0 {
                        *c = RealVector::Sparse(SparseVector::from_dense(&vec![0.0; m.rows()]));
                    }
                }
            }
        }
    }

    let final_objective = objective_of(&m, &membership, &centers);
    let sketched = SparseMatrix::from_columns(m.rows(), &centers)?;
    Ok(EsckFit {
        sketched,
        scaling: scaling_from_phi(&membership),
        membership,
        signs,
        centers,
        initial_objective,
        final_objective,
        history,
    })
}

fn objective_of(m: &SparseMatrix, membership: &Membership, centers: &[RealVector]) -> f64 {
    let norms: Vec<f64> = centers.iter().map(RealVector::sq_norm).collect();
    let per_column: Vec<f64> = (0..m.cols())
        .into_par_iter()
        .map(|i| {
            let a = membership.cluster_of(i);
            lane_sq_distance(m.column(i), &centers[a], norms[a])
        })
        .collect();
    per_column.iter().sum()
}

/// `r` distinct columns of `m`, visited in a random order; at most `d`
/// columns are examined.
fn initial_centers<R: rand::Rng + ?Sized>(m: &SparseMatrix, r: usize, rng: &mut R) -> Result<Vec<RealVector>> {
    let d = m.cols();
    let mut seen: HashSet<Vec<(usize, u64)>> = HashSet::with_capacity(r);
    let mut centers = Vec::with_capacity(r);
    for i in sample(rng, d, d) {
        let col = m.column(i);
        let key: Vec<(usize, u64)> = col.iter().map(|(row, v)| (row, v.to_bits())).collect();
        if seen.insert(key) {
            centers.push(RealVector::Sparse(
                SparseVector::new(m.rows(), col.indices.to_vec(), col.values.to_vec())
                    .expect("matrix columns are valid sparse vectors"),
            ));
            if centers.len() == r {
                return Ok(centers);
            }
        }
    }
    Err(EsckError::InsufficientDistinctColumns {
        found: centers.len(),
        r,
    })
}

/// For each empty cluster, moves the column farthest from its own center
/// (taken from a cluster with at least two members) into it and puts the
/// center on that column.
fn reseed_empty_clusters(m: &SparseMatrix, membership: &mut Membership, centers: &mut [RealVector]) {
    let mut sizes = membership.cluster_sizes();
    if !sizes.contains(&0) {
        return;
    }
    let norms: Vec<f64> = centers.iter().map(RealVector::sq_norm).collect();
    let mut by_distance: Vec<(usize, f64)> = (0..m.cols())
        .map(|i| {
            let a = membership.cluster_of(i);
            (i, lane_sq_distance(m.column(i), &centers[a], norms[a]))
        })
        .collect();
    by_distance.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut candidates = by_distance.into_iter();
    for j in 0..sizes.len() {
        if sizes[j] != 0 {
            continue;
        }
        let Some((i, _)) = candidates.find(|&(i, _)| sizes[membership.cluster_of(i)] >= 2) else {
            return;
        };
        sizes[membership.assignment[i]] -= 1;
        sizes[j] += 1;
        membership.assignment[i] = j;
        let col = m.column(i);
        centers[j] = RealVector::Sparse(
            SparseVector::new(m.rows(), col.indices.to_vec(), col.values.to_vec())
                .expect("matrix columns are valid sparse vectors"),
        );
    }
}

/// `X_new D Phi S`, streaming the nonzeros of `x_new`:
/// `out[i, a(j)] += sign_j * S_a(j) * x[i, j]`.
pub fn inductive_transform(
    x_new: &Matrix,
    d_signs: &SignDiagonal,
    phi: &Membership,
    scaling: &ScalingDiagonal,
) -> Result<Matrix> {
    inductive_transform_instrumented(x_new, d_signs, phi, scaling).map(|(m, _)| m)
}

/// As [`inductive_transform`], also returning how many stored entries of
/// `x_new` were visited.
pub fn inductive_transform_instrumented(
    x_new: &Matrix,
    d_signs: &SignDiagonal,
    phi: &Membership,
    scaling: &ScalingDiagonal,
) -> Result<(Matrix, u64)> {
    let d = x_new.cols();
    if d_signs.dim() != d || phi.len() != d || scaling.dim() != phi.clusters() {
        return Err(EsckError::Shape(format!(
            "X_new has {d} columns, D has {}, Phi has {} rows and {} clusters, S has {}",
            d_signs.dim(),
            phi.len(),
            phi.clusters(),
            scaling.dim()
        )));
    }
    let coef = hash_coefficients(d_signs, phi.assignment(), Some(scaling.values()));
    Ok(hash_sketch(x_new, phi.assignment(), &coef, phi.clusters()))
}

/// Dense copy of the centers as an `n x r` matrix.
pub fn centers_matrix(n: usize, centers: &[RealVector]) -> Result<DenseMatrix> {
    Ok(SparseMatrix::from_columns(n, centers)?.to_dense())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sparse(rng: &mut ChaCha8Rng, rows: usize, cols: usize, density: f64) -> SparseMatrix {
        let mut trips = Vec::new();
        for i in 0..rows {
            for j in 0..cols {
                if rng.random::<f64>() < density {
                    trips.push((i, j, rng.random_range(-2.0..2.0)));
                }
            }
        }
        SparseMatrix::from_triplets(rows, cols, &trips).unwrap()
    }

    fn random_membership(rng: &mut ChaCha8Rng, d: usize, r: usize) -> Membership {
        Membership::new((0..d).map(|_| rng.random_range(0..r)).collect(), r).unwrap()
    }

    fn dense_centers(rng: &mut ChaCha8Rng, n: usize, r: usize) -> Vec<RealVector> {
        (0..r)
            .map(|_| RealVector::Dense((0..n).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect()
    }

    #[test]
    fn scaling_examples() {
        let phi = Membership::new(vec![0, 0, 1, 0], 2).unwrap();
        assert_eq!(scaling_from_phi(&phi).values(), &[1.0 / 3.0, 1.0]);
        let own = Membership::new((0..5).collect(), 5).unwrap();
        assert_eq!(scaling_from_phi(&own).values(), &[1.0; 5]);
        let with_empty = Membership::new(vec![0, 0], 2).unwrap();
        assert_eq!(scaling_from_phi(&with_empty).values(), &[0.5, 0.0]);
    }

    #[test]
    fn phi_t_phi_s_is_identity_on_nonempty_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let phi = random_membership(&mut rng, 30, 6);
            let s = scaling_from_phi(&phi);
            let p = Matrix::Sparse(phi.to_matrix());
            let ptp = multiply(&Matrix::Sparse(phi.to_matrix().transpose()), &p)
                .unwrap()
                .to_dense();
            let sizes = phi.cluster_sizes();
            for i in 0..6 {
                for j in 0..6 {
                    let got = ptp.get(i, j) * s.values()[j];
                    let want = if i == j && sizes[i] > 0 { 1.0 } else { 0.0 };
                    assert!((got - want).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn objective_examples() {
        let m = SparseMatrix::from_triplets(1, 2, &[(0, 1, 2.0)]).unwrap();
        let state = ClusterState {
            membership: Membership::new(vec![0, 0], 1).unwrap(),
            centers: vec![RealVector::Dense(vec![1.0])],
        };
        assert_eq!(kmeans_objective(&m, &state).unwrap(), 2.0);
        let exact = ClusterState {
            membership: Membership::new(vec![0, 1], 2).unwrap(),
            centers: vec![RealVector::Dense(vec![0.0]), RealVector::Dense(vec![2.0])],
        };
        assert_eq!(kmeans_objective(&m, &exact).unwrap(), 0.0);
    }

    #[test]
    fn objective_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let m = random_sparse(&mut rng, 7, 15, 0.4);
            let phi = random_membership(&mut rng, 15, 4);
            let centers = dense_centers(&mut rng, 7, 4);
            let md = m.to_dense();
            let mut want = 0.0;
            for i in 0..15 {
                let c = centers[phi.cluster_of(i)].to_dense();
                for row in 0..7 {
                    want += (md.get(row, i) - c[row]).powi(2);
                }
            }
            let got = kmeans_objective(
                &m,
                &ClusterState {
                    membership: phi,
                    centers,
                },
            )
            .unwrap();
            assert!((got - want).abs() <= 1e-10 * want.max(1.0));
        }
    }

    #[test]
    fn reconstruction_error_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::Sparse(random_sparse(&mut rng, 5, 6, 0.5));
        let signs = SignDiagonal::random(6, &mut rng);
        let own = Membership::new((0..6).collect(), 6).unwrap();
        assert!(reconstruction_error(&x, &signs, &own).unwrap() < 1e-24);
        let zero = Matrix::Sparse(SparseMatrix::zeros(5, 6));
        let phi = random_membership(&mut rng, 6, 2);
        assert_eq!(reconstruction_error(&zero, &signs, &phi).unwrap(), 0.0);
    }

    #[test]
    fn assignment_examples() {
        let m = SparseMatrix::from_triplets(2, 4, &[(0, 0, 1.0), (0, 1, 0.9), (1, 2, 5.0), (0, 3, 1.1)]).unwrap();
        let centers = vec![RealVector::Dense(vec![1.0, 0.0]), RealVector::Dense(vec![0.0, 5.0])];
        let phi = assign_columns(&m, &centers).unwrap();
        assert_eq!(phi.assignment(), &[0, 0, 1, 0]);
        let single = assign_columns(&m, &centers[..1]).unwrap();
        assert_eq!(single.assignment(), &[0; 4]);
        // exact tie goes to the lower index
        let tie = vec![RealVector::Dense(vec![0.0, 1.0]), RealVector::Dense(vec![0.0, -1.0])];
        let zero_col = SparseMatrix::zeros(2, 1);
        assert_eq!(assign_columns(&zero_col, &tie).unwrap().assignment(), &[0]);
    }

    #[test]
    fn assignment_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let m = random_sparse(&mut rng, 9, 25, 0.3);
            let centers = dense_centers(&mut rng, 9, 5);
            let phi = assign_columns(&m, &centers).unwrap();
            let md = m.to_dense();
            for i in 0..25 {
                let dists: Vec<f64> = centers
                    .iter()
                    .map(|c| {
                        let c = c.to_dense();
                        (0..9).map(|row| (md.get(row, i) - c[row]).powi(2)).sum()
                    })
                    .collect();
                let best = (0..5).fold(0, |b, j| if dists[j] < dists[b] { j } else { b });
                assert_eq!(phi.cluster_of(i), best);
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_the_mean_and_for_empty_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_sparse(&mut rng, 6, 12, 0.5);
        let phi = Membership::new((0..12).map(|i| i % 2).collect(), 3).unwrap();
        let means = cluster_means(&m, &phi).unwrap();
        for j in 0..2 {
            let g = gradient_wrt_center(&m, &phi, &means, j).unwrap();
            assert!(g.iter().all(|v| v.abs() < 1e-12));
        }
        let g = gradient_wrt_center(&m, &phi, &means, 2).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cluster_mean_step_is_a_lloyd_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_sparse(&mut rng, 8, 20, 0.4);
        let phi = random_membership(&mut rng, 20, 4);
        let state = ClusterState {
            membership: phi.clone(),
            centers: dense_centers(&mut rng, 8, 4),
        };
        let stepped = gd_step(&state, &m, LearningRate::ClusterMean).unwrap();
        let lloyd = ClusterState {
            membership: phi.clone(),
            centers: cluster_means(&m, &phi).unwrap(),
        };
        let sizes = phi.cluster_sizes();
        for j in 0..4 {
            if sizes[j] == 0 {
                continue;
            }
            for (a, b) in stepped.centers[j].to_dense().iter().zip(lloyd.centers[j].to_dense()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        if sizes.iter().all(|&s| s > 0) {
            let a = kmeans_objective(&m, &stepped).unwrap();
            let b = kmeans_objective(&m, &lloyd).unwrap();
            assert!((a - b).abs() <= 1e-10 * b.max(1.0));
        }
    }

    #[test]
    fn zero_and_small_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_sparse(&mut rng, 8, 20, 0.4);
        let state = ClusterState {
            membership: random_membership(&mut rng, 20, 3),
            centers: dense_centers(&mut rng, 8, 3),
        };
        let same = gd_step(&state, &m, LearningRate::Constant(0.0)).unwrap();
        for (a, b) in same.centers.iter().zip(&state.centers) {
            assert_eq!(a.to_dense(), b.to_dense());
        }
        let before = kmeans_objective(&m, &state).unwrap();
        let after = kmeans_objective(&m, &gd_step(&state, &m, LearningRate::Constant(1e-3)).unwrap()).unwrap();
        assert!(after <= before);
    }

    #[test]
    fn config_validation() {
        let x = Matrix::Sparse(SparseMatrix::identity(6));
        assert!(matches!(
            esck_fit(&x, &EsckConfig::new(6)),
            Err(EsckError::InvalidDimensions { .. })
        ));
        assert!(esck_fit(&x, &EsckConfig::new(2).with_iters(0)).is_err());
        assert!(esck_fit(&x, &EsckConfig::new(2).with_learning_rate(LearningRate::Constant(-1.0))).is_err());
        assert!(esck_fit(&x, &EsckConfig::new(2).with_batch_size(BatchSize::Columns(7))).is_err());
    }

    #[test]
    fn too_few_distinct_columns() {
        // four identical columns
        let x = SparseMatrix::from_triplets(2, 4, &[(0, 0, 1.0), (0, 1, 1.0), (0, 2, 1.0), (0, 3, 1.0)]).unwrap();
        // D may flip some columns, giving at most two distinct patterns
        let err = esck_fit(&Matrix::Sparse(x), &EsckConfig::new(3)).unwrap_err();
        assert!(matches!(err, EsckError::InsufficientDistinctColumns { r: 3, .. }));
    }

    #[test]
    fn signs_follow_the_documented_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Matrix::Sparse(random_sparse(&mut rng, 10, 30, 0.3));
        let fit = esck_fit(&x, &EsckConfig::new(4).with_seed(99)).unwrap();
        assert_eq!(fit.signs, esck_signs(99, 30));
    }

    #[test]
    fn inductive_transform_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let phi = random_membership(&mut rng, 10, 3);
        let s = scaling_from_phi(&phi);
        let signs = SignDiagonal::random(10, &mut rng);
        let zero = Matrix::Sparse(SparseMatrix::zeros(4, 10));
        assert_eq!(inductive_transform(&zero, &signs, &phi, &s).unwrap().nnz(), 0);

        let x = Matrix::Sparse(random_sparse(&mut rng, 4, 10, 0.5));
        let own = Membership::new((0..10).collect(), 10).unwrap();
        let out = inductive_transform(&x, &SignDiagonal::ones(10), &own, &scaling_from_phi(&own)).unwrap();
        assert_eq!(out.to_dense(), x.to_dense());

        assert!(inductive_transform(&x, &SignDiagonal::ones(9), &phi, &s).is_err());
    }

    #[test]
    fn inductive_transform_matches_materialized_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let x = random_sparse(&mut rng, 6, 15, 0.3);
            let phi = random_membership(&mut rng, 15, 4);
            let s = scaling_from_phi(&phi);
            let signs = SignDiagonal::random(15, &mut rng);
            let (out, visits) = inductive_transform_instrumented(&Matrix::Sparse(x.clone()), &signs, &phi, &s).unwrap();
            assert_eq!(visits, x.nnz() as u64);
            // dense oracle: X * D * Phi * S entry by entry
            let xd = x.to_dense();
            for i in 0..6 {
                for k in 0..4 {
                    let want: f64 = (0..15)
                        .filter(|&j| phi.cluster_of(j) == k)
                        .map(|j| xd.get(i, j) * signs.sign(j) * s.values()[k])
                        .sum();
                    assert!((out.get(i, k) - want).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn model_round_trip_applies_inductive_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Matrix::Sparse(random_sparse(&mut rng, 12, 40, 0.2));
        let fit = esck_fit(&x, &EsckConfig::new(5).with_seed(3)).unwrap();
        let model = SketchModel::from_json(&fit.to_model(3).to_json().unwrap()).unwrap();
        let x_new = Matrix::Sparse(random_sparse(&mut rng, 3, 40, 0.3));
        assert_eq!(model.apply(&x_new).unwrap(), fit.transform(&x_new).unwrap());
    }

    #[test]
    fn drop_to_zero_policy_keeps_empty_centers_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Matrix::Sparse(random_sparse(&mut rng, 10, 40, 0.3));
        let config = EsckConfig::new(12)
            .with_seed(1)
            .with_empty_cluster_policy(EmptyClusterPolicy::DropToZero);
        let fit = esck_fit_with_observer(&x, &config, |_, state| {
            for (c, size) in state.centers.iter().zip(state.membership.cluster_sizes()) {
                if size == 0 {
                    assert_eq!(c.nnz(), 0);
                }
            }
        })
        .unwrap();
        assert_eq!(fit.membership.len(), 40);
    }
}
