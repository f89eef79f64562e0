//! Seeded synthetic data with planted structure.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::io::{Dataset, Scaling};
use crate::matrix::{CsrMatrix, SparseMatrix};
use crate::rng::{self, Stream};

/// `n x d` matrix whose columns fall into `clusters` groups: every column of
/// group `k` is a jittered copy of a sparse prototype `p_k` (support density
/// `density`), `x_ij = p_k[i] (1 + jitter z_ij)`. Returns the matrix and the
/// group of every column.
pub fn planted_column_clusters(
    n: usize,
    d: usize,
    clusters: usize,
    density: f64,
    jitter: f64,
    seed: u64,
) -> (SparseMatrix, Vec<usize>) {
    let mut rng = rng::stream(seed, Stream::Synthetic);
    let support = ((density * n as f64).round() as usize).clamp(1, n);
    let prototypes: Vec<Vec<(usize, f64)>> = (0..clusters)
        .map(|_| {
            let mut rows = sample(&mut rng, n, support).into_vec();
            rows.sort_unstable();
            rows.into_iter()
                .map(|i| {
                    (
                        i,
                        rng.random_range(0.5..2.0) * if rng.random::<bool>() { 1.0 } else { -1.0 },
                    )
                })
                .collect()
        })
        .collect();
    let groups: Vec<usize> = (0..d).map(|_| rng.random_range(0..clusters)).collect();
    let mut trips = Vec::with_capacity(d * support);
    for (j, &k) in groups.iter().enumerate() {
        for &(i, v) in &prototypes[k] {
            let z: f64 = rng.sample(StandardNormal);
            trips.push((i, j, v * (1.0 + jitter * z)));
        }
    }
    let x = SparseMatrix::from_triplets(n, d, &trips).expect("indices in range");
    (x, groups)
}

/// Sparse two-class problem: a few informative columns carry the label,
/// the rest are grouped noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoClassSpec {
    pub n: usize,
    pub d: usize,
    /// Number of label-carrying columns.
    pub informative: usize,
    /// Probability that an informative entry is stored.
    pub informative_density: f64,
    /// Mean shift `+-signal` of informative entries between the classes.
    pub signal: f64,
    /// Noise columns share one latent factor per group.
    pub noise_groups: usize,
    pub noise_density: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl TwoClassSpec {
    /// `n = 500`, `d = 2000`, 64 informative columns.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            n: 500,
            d: 2000,
            informative: 64,
            informative_density: 0.3,
            signal: 0.5,
            noise_groups: 32,
            noise_density: 0.05,
            noise_scale: 1.0,
            seed,
        }
    }
}

/// Labels alternate between the classes. Informative column `j` has a random
/// orientation `s_j` and entries `s_j (signal y_i + z)`; a noise column in
/// group `g` has entries `noise_scale (f_ig + z / 2)` with a per-row group
/// factor `f_ig`. Entries are stored with the given densities.
pub fn two_class(spec: &TwoClassSpec) -> Dataset {
    let mut rng = rng::stream(spec.seed, Stream::Synthetic);
    let informative = spec.informative.min(spec.d);
    let mut roles = vec![None; spec.d];
    for (k, j) in sample(&mut rng, spec.d, informative).into_iter().enumerate() {
        roles[j] = Some(k);
    }
    let orientation: Vec<f64> = (0..informative)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let group: Vec<usize> = (0..spec.d)
        .map(|_| rng.random_range(0..spec.noise_groups.max(1)))
        .collect();

    let mut rows = Vec::with_capacity(spec.n);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let label = i % 2;
        let y = if label == 1 { 1.0 } else { -1.0 };
        let factors: Vec<f64> = (0..spec.noise_groups.max(1))
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let (mut idx, mut val) = (Vec::new(), Vec::new());
        for j in 0..spec.d {
            let v = match roles[j] {
                Some(k) if rng.random::<f64>() < spec.informative_density => {
                    let z: f64 = rng.sample(StandardNormal);
                    orientation[k] * (spec.signal * y + z)
                }
                None if rng.random::<f64>() < spec.noise_density => {
                    let z: f64 = rng.sample(StandardNormal);
                    spec.noise_scale * (factors[group[j]] + 0.5 * z)
                }
                _ => continue,
            };
            idx.push(j);
            val.push(v);
        }
        rows.push((idx, val));
        labels.push(label);
    }
    Dataset {
        features: CsrMatrix::from_rows(spec.d, rows).expect("indices in range").to_csc(),
        labels,
        class_count: 2,
        source: format!("two_class_seed{}", spec.seed),
        scaling: Scaling::None,
        original_labels: vec![-1.0, 1.0],
    }
}

/// `n x d` matrix with exactly `nnz_per_row` standard-normal entries per row
/// at uniformly random columns.
pub fn fixed_nnz_rows(n: usize, d: usize, nnz_per_row: usize, seed: u64) -> SparseMatrix {
    let mut rng = rng::stream(seed, Stream::Synthetic);
    let k = nnz_per_row.min(d);
    let rows = (0..n)
        .map(|_| {
            let mut idx = sample(&mut rng, d, k).into_vec();
            idx.sort_unstable();
            // a standard normal draw is never exactly zero in practice; shift
            // away from zero anyway so the row keeps exactly k entries
            let val = idx
                .iter()
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    if z == 0.0 {
                        1.0
                    } else {
                        z
                    }
                })
                .collect();
            (idx, val)
        })
        .collect();
    CsrMatrix::from_rows(d, rows).expect("indices in range").to_csc()
}
