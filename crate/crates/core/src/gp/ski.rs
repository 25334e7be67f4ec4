//! Structured kernel interpolation: cross-covariances and Nyström products
//! expressed through sparse interpolation onto a Kronecker–Toeplitz grid.

use crate::error::{Error, Result};
use crate::gp::grid::{InducingGrid, SparseInterpolation};
use crate::gp::kernel::RbfKernelParams;
use crate::gp::toeplitz::GridKernel;

/// Implicit cross-covariance between grid inducing values and data points,
/// `K_uf ≈ K_uu Wᵀ`.
#[derive(Clone, Debug)]
pub struct SkiCrossCov {
    pub interp: SparseInterpolation,
    pub kernel: GridKernel,
}

impl SkiCrossCov {
    /// `K_uf v` (length `N` in, length `M` out).
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_points(v.len())?;
        self.kernel.matvec(&self.interp.apply_transpose(v))
    }

    /// `K_fu u` (length `M` in, length `N` out).
    pub fn apply_transpose(&self, u: &[f64]) -> Result<Vec<f64>> {
        Ok(self.interp.apply(&self.kernel.matvec(u)?))
    }

    fn check_points(&self, n: usize) -> Result<()> {
        if n != self.interp.n_points() {
            return Err(Error::Dimension(format!(
                "vector of length {n} for {} interpolated points",
                self.interp.n_points()
            )));
        }
        Ok(())
    }
}

pub fn ski_cross_cov(
    w: &SparseInterpolation,
    grid: &InducingGrid,
    params: &RbfKernelParams,
) -> Result<SkiCrossCov> {
    if w.n_grid != grid.len() {
        return Err(Error::Dimension(format!(
            "interpolation built for {} grid points, grid has {}",
            w.n_grid,
            grid.len()
        )));
    }
    Ok(SkiCrossCov {
        interp: w.clone(),
        kernel: GridKernel::new(grid, params)?,
    })
}

/// `Q_ff v ≈ W K_uu Wᵀ v` without forming any `N × N` or `M × M` matrix.
pub fn ski_qff_quadform(
    w: &SparseInterpolation,
    kernel: &GridKernel,
    v: &[f64],
) -> Result<Vec<f64>> {
    if v.len() != w.n_points() {
        return Err(Error::Dimension(format!(
            "vector of length {} for {} interpolated points",
            v.len(),
            w.n_points()
        )));
    }
    if kernel.len() != w.n_grid {
        return Err(Error::Dimension("grid kernel and interpolation sizes differ".into()));
    }
    Ok(w.apply(&kernel.matvec(&w.apply_transpose(v))?))
}
