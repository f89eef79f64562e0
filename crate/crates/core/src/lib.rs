//! Sparse matrix sketching with a data-dependent count-sketch.
//!
//! Count-sketch maps `X (n x d)` to `X D Phi (n x r)` in `O(nnz(X))` time
//! using a random sign diagonal `D` and a random column-to-bucket map `Phi`.
//! Its reconstruction error `|X - X D Phi S Phi^T D^T|_F^2` is exactly the
//! k-means objective of the columns of `M = X D` under the membership `Phi`,
//! so learning `Phi` by k-means gives a better sketch. [`esck`] does this by
//! gradient descent with an L1-ball projection on the centers after every
//! step, which also makes the sketch sparse.
//!
//! Modules:
//! - [`matrix`]: dense/CSC matrices and kernels
//! - [`l1ball`]: epsilon-approximate and exact L1-ball projection
//! - [`sketchers`]: Gaussian, Achlioptas, count-sketch, SRHT and SRHT-topr
//! - [`esck`]: the learned count-sketch and its reconstruction-error identity
//! - [`classifier`]: linear SVM and cross-validated sketch-and-solve runs
//! - [`io`]: LIBSVM datasets, min-max scaling, benchmark reports
//! - [`experiment`]: the `sketch` / `bench` / `sweep` command drivers
//! - [`synthetic`]: planted-structure data generators

pub mod classifier;
pub mod esck;
pub mod experiment;
pub mod io;
pub mod l1ball;
pub mod matrix;
pub mod rng;
pub mod sketchers;
pub mod synthetic;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/matrices.md")]
    mod matrices {}
    #[doc = include_str!("../../../book/src/sketching.md")]
    mod sketching {}
    #[doc = include_str!("../../../book/src/esck.md")]
    mod esck {}
    #[doc = include_str!("../../../book/src/l1-projection.md")]
    mod l1_projection {}
    #[doc = include_str!("../../../book/src/classification.md")]
    mod classification {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
