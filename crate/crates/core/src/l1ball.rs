//! Projection onto the L1 ball.
//!
//! [`epsilon_l1_project`] finds a soft-threshold `theta` by bisection and
//! accepts any result whose L1 norm lands in `[lambda, lambda * (1 + eps)]`.
//! It never sorts, which keeps it linear in the vector length per bisection
//! step. [`exact_l1_project`] is the sort-based exact projection; it serves as
//! the fallback when bisection does not land and as a reference in tests.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectionError {
    #[error("L1 radius must be positive, got {0}")]
    InvalidRadius(f64),
    #[error("tolerance must be finite and non-negative, got {0}")]
    InvalidTolerance(f64),
}

/// Absolute tolerance on `r(theta) - lambda` used when `epsilon == 0`.
pub const ZERO_EPSILON_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProjectionParams {
    lambda: f64,
    epsilon: f64,
    max_bisection_iters: usize,
}

impl ProjectionParams {
    /// `lambda` may be `f64::INFINITY`, which disables projection.
    pub fn new(lambda: f64, epsilon: f64) -> Result<Self, ProjectionError> {
        if lambda.is_nan() || lambda <= 0.0 {
            return Err(ProjectionError::InvalidRadius(lambda));
        }
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(ProjectionError::InvalidTolerance(epsilon));
        }
        Ok(Self {
            lambda,
            epsilon,
            max_bisection_iters: 100,
        })
    }

    /// A ball of infinite radius: every vector is left unchanged.
    pub fn disabled() -> Self {
        Self {
            lambda: f64::INFINITY,
            epsilon: 0.0,
            max_bisection_iters: 100,
        }
    }

    pub fn with_max_bisection_iters(mut self, iters: usize) -> Self {
        self.max_bisection_iters = iters;
        self
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn max_bisection_iters(&self) -> usize {
        self.max_bisection_iters
    }

    pub fn is_disabled(&self) -> bool {
        self.lambda.is_infinite()
    }
}

/// How a projection call ended.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProjectionOutcome {
    /// The input was already inside the accepted band.
    Unchanged,
    /// Soft-thresholded at `theta` found by bisection.
    Bisection { theta: f64, iterations: usize },
    /// Bisection ran out of iterations; the exact projection was used.
    ExactFallback { theta: f64 },
}

fn residual_mass(c: &[f64], theta: f64) -> f64 {
    c.iter().map(|v| (v.abs() - theta).max(0.0)).sum()
}

fn soft_threshold(c: &mut [f64], theta: f64) {
    for v in c.iter_mut() {
        let shrunk = (v.abs() - theta).max(0.0);
        *v = if shrunk > 0.0 { shrunk.copysign(*v) } else { 0.0 };
    }
}

/// Epsilon-approximate projection of `c` onto `{v : |v|_1 <= lambda}`.
///
/// The input must be finite.
pub fn epsilon_l1_project(c: &[f64], params: &ProjectionParams) -> Vec<f64> {
    let mut out = c.to_vec();
    epsilon_l1_project_in_place(&mut out, params);
    out
}

/// In-place form of [`epsilon_l1_project`]. Only the stored values of a sparse
/// vector need to be passed, since zeros do not change `r(theta)`.
pub fn epsilon_l1_project_in_place(c: &mut [f64], params: &ProjectionParams) -> ProjectionOutcome {
    debug_assert!(c.iter().all(|v| v.is_finite()));
    let lambda = params.lambda;
    let upper_band = lambda * (1.0 + params.epsilon);
    let mut mass: f64 = c.iter().map(|v| v.abs()).sum();
    if mass <= upper_band {
        return ProjectionOutcome::Unchanged;
    }
    let in_band = |r: f64| {
        if params.epsilon == 0.0 {
            (r - lambda).abs() <= ZERO_EPSILON_TOLERANCE
        } else {
            r >= lambda && r <= upper_band
        }
    };

    let mut lo = 0.0;
    let mut hi = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut theta = 0.0;
    let mut iterations = 0;
    while !in_band(mass) {
        if iterations == params.max_bisection_iters {
            let theta = exact_threshold(c, lambda);
            soft_threshold(c, theta);
            return ProjectionOutcome::ExactFallback { theta };
        }
        theta = 0.5 * (lo + hi);
        mass = residual_mass(c, theta);
        if mass < lambda {
            hi = theta;
        } else {
            lo = theta;
        }
        iterations += 1;
    }
    soft_threshold(c, theta);
    ProjectionOutcome::Bisection { theta, iterations }
}

/// Threshold of the exact projection, assuming `|c|_1 > lambda`.
fn exact_threshold(c: &[f64], lambda: f64) -> f64 {
    let mut mags: Vec<f64> = c.iter().map(|v| v.abs()).collect();
    mags.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, &u) in mags.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - lambda) / (k + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        } else {
            break;
        }
    }
    theta.max(0.0)
}

/// Exact Euclidean projection onto `{v : |v|_1 <= lambda}` by sorting.
pub fn exact_l1_project(c: &[f64], lambda: f64) -> Vec<f64> {
    let mass: f64 = c.iter().map(|v| v.abs()).sum();
    let mut out = c.to_vec();
    if mass <= lambda {
        return out;
    }
    soft_threshold(&mut out, exact_threshold(c, lambda));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn l1(v: &[f64]) -> f64 {
        v.iter().map(|x| x.abs()).sum()
    }

    fn l2sq(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    #[test]
    fn inside_band_is_unchanged() {
        let p = ProjectionParams::new(2.0, 0.1).unwrap();
        assert_eq!(epsilon_l1_project(&[1.0, -0.5], &p), vec![1.0, -0.5]);
    }

    #[test]
    fn symmetric_case_exact() {
        let p = ProjectionParams::new(2.0, 0.0).unwrap();
        let out = epsilon_l1_project(&[2.0, 2.0], &p);
        assert_eq!(out, vec![1.0, 1.0]);
        assert_eq!(exact_l1_project(&[2.0, 2.0], 2.0), vec![1.0, 1.0]);
    }

    #[test]
    fn three_entry_case_lands_in_band() {
        let c = [3.0, -1.0, 0.5];
        let p = ProjectionParams::new(2.0, 0.1).unwrap();
        let mut out = c.to_vec();
        let outcome = epsilon_l1_project_in_place(&mut out, &p);
        let norm = l1(&out);
        assert!((2.0..=2.2).contains(&norm), "norm {norm}");
        // exact projection: only the 3.0 survives, theta = 1.0
        let exact = exact_l1_project(&c, 2.0);
        assert_eq!(exact, vec![2.0, 0.0, 0.0]);
        // r(theta) = 4 - 2 theta on [0.5, 1], so the band is theta in [0.9, 1.0]
        let ProjectionOutcome::Bisection { theta, .. } = outcome else {
            panic!("expected bisection, got {outcome:?}");
        };
        assert!((0.9..=1.0).contains(&theta), "theta {theta}");
    }

    #[test]
    fn zero_vector_is_inside() {
        let p = ProjectionParams::new(1.0, 0.1).unwrap();
        assert_eq!(epsilon_l1_project(&[0.0; 4], &p), vec![0.0; 4]);
    }

    #[test]
    fn disabled_projection_is_identity() {
        let p = ProjectionParams::disabled();
        let c = [1e9, -3e8];
        assert_eq!(epsilon_l1_project(&c, &p), c.to_vec());
    }

    #[test]
    fn invalid_params() {
        assert!(ProjectionParams::new(0.0, 0.1).is_err());
        assert!(ProjectionParams::new(f64::NAN, 0.1).is_err());
        assert!(ProjectionParams::new(1.0, -0.1).is_err());
    }

    #[test]
    fn exhausted_bisection_falls_back_to_exact() {
        let p = ProjectionParams::new(2.0, 0.0).unwrap().with_max_bisection_iters(1);
        let mut c = vec![3.0, -1.0, 0.5, 0.25];
        let outcome = epsilon_l1_project_in_place(&mut c, &p);
        assert!(matches!(outcome, ProjectionOutcome::ExactFallback { .. }));
        assert!((l1(&c) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn exact_projection_is_the_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let n = rng.random_range(1..12);
            let c: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let lambda = rng.random_range(0.1..4.0);
            let out = exact_l1_project(&c, lambda);
            if l1(&c) > lambda {
                assert!((l1(&out) - lambda).abs() <= 1e-10);
            } else {
                assert_eq!(out, c);
            }
            let best = l2sq(&c, &out);
            for _ in 0..100 {
                // random feasible point: random direction scaled into the ball
                let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let scale = lambda * rng.random::<f64>() / l1(&v).max(1e-300);
                let v: Vec<f64> = v.iter().map(|x| x * scale.min(1e300)).collect();
                assert!(best <= l2sq(&c, &v) + 1e-12);
            }
        }
    }
}
