//! Gaussian-process machinery: kernels, exact and sparse objectives,
//! structured kernel interpolation on regular grids and whitened
//! variational posteriors.

pub mod exact;
pub mod grid;
pub mod kernel;
pub mod likelihood;
pub mod ski;
pub mod svgp;
pub mod toeplitz;
pub mod vfe;

use ndarray::Array2;

pub use exact::{exact_log_marginal, exact_log_marginal_with_grad, exact_posterior, HyperObjective};
pub use grid::{interpolation_weights, GridAxis, InducingGrid, SparseInterpolation};
pub use kernel::{rbf_kernel_matrix, RbfKernelParams};
pub use likelihood::{bernoulli_predict, bernoulli_probability, gauss_hermite, NormalQuadrature};
pub use ski::{ski_cross_cov, ski_qff_quadform, SkiCrossCov};
pub use svgp::{
    bernoulli_elbo, bernoulli_elbo_with_grad, kl_whitened, latent_posterior_predict, VariationalGradient,
    WhitenedVariationalState,
};
pub use toeplitz::{toeplitz_matvec, GridKernel};
pub use vfe::{vfe_elbo, vfe_elbo_with_grad, vfe_trace_term};

/// Inducing inputs: free points `Z` (`M × d`) or a regular grid.
#[derive(Clone, Debug, PartialEq)]
pub enum InducingSet {
    Points(Array2<f64>),
    Grid(InducingGrid),
}

impl InducingSet {
    pub fn points(&self) -> Array2<f64> {
        match self {
            InducingSet::Points(z) => z.clone(),
            InducingSet::Grid(g) => g.points(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            InducingSet::Points(z) => z.nrows(),
            InducingSet::Grid(g) => g.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
