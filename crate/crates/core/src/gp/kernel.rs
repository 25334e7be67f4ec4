//! Squared-exponential (ARD RBF) kernel.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ARD RBF hyperparameters, stored on the log scale so every positive
/// quantity stays positive under unconstrained optimization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfKernelParams {
    pub log_lengthscale: Vec<f64>,
    pub log_outputscale: f64,
    pub log_noise: f64,
}

impl RbfKernelParams {
    pub fn new(lengthscale: &[f64], outputscale: f64, noise_variance: f64) -> Result<Self> {
        if lengthscale.is_empty() {
            return Err(Error::config("gp.lengthscale", "needs at least one dimension"));
        }
        for (d, &l) in lengthscale.iter().enumerate() {
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::config(
                    format!("gp.lengthscale[{d}]"),
                    format!("must be positive and finite, got {l}"),
                ));
            }
        }
        if !(outputscale > 0.0) || !outputscale.is_finite() {
            return Err(Error::config("gp.outputscale", "must be positive and finite"));
        }
        if !(noise_variance > 0.0) || !noise_variance.is_finite() {
            return Err(Error::config("gp.noise_variance", "must be positive and finite"));
        }
        Ok(Self {
            log_lengthscale: lengthscale.iter().map(|l| l.ln()).collect(),
            log_outputscale: outputscale.ln(),
            log_noise: noise_variance.ln(),
        })
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscale.len()
    }

    pub fn lengthscale(&self) -> Vec<f64> {
        self.log_lengthscale.iter().map(|l| l.exp()).collect()
    }

    pub fn outputscale(&self) -> f64 {
        self.log_outputscale.exp()
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise.exp()
    }

    pub(crate) fn log_lengthscale_row(&self) -> Array2<f64> {
        Array2::from_shape_vec((1, self.dim()), self.log_lengthscale.clone()).unwrap()
    }

    pub(crate) fn check_dim(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::Dimension(format!(
                "inputs have {} columns but the kernel has {} lengthscales",
                x.ncols(),
                self.dim()
            )));
        }
        Ok(())
    }
}

/// `k(x, x') = σ_f² exp(−½ Σ_d (x_d − x'_d)² / ℓ_d²)` for every row pair.
pub fn rbf_kernel_matrix(
    x1: ArrayView2<f64>,
    x2: ArrayView2<f64>,
    params: &RbfKernelParams,
) -> Result<Array2<f64>> {
    params.check_dim(x1)?;
    params.check_dim(x2)?;
    let inv_ls: Vec<f64> = params.lengthscale().iter().map(|l| 1.0 / l).collect();
    let os = params.outputscale();
    let mut k = Array2::zeros((x1.nrows(), x2.nrows()));
    for (i, a) in x1.rows().into_iter().enumerate() {
        for (j, b) in x2.rows().into_iter().enumerate() {
            let mut r2 = 0.0;
            for d in 0..inv_ls.len() {
                let t = (a[d] - b[d]) * inv_ls[d];
                r2 += t * t;
            }
            k[[i, j]] = os * (-0.5 * r2).exp();
        }
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn diagonal_equals_outputscale() {
        let p = RbfKernelParams::new(&[0.7, 1.3], 2.5, 0.1).unwrap();
        let x = array![[0.0, 1.0], [2.0, -1.0], [0.3, 0.3]];
        let k = rbf_kernel_matrix(x.view(), x.view(), &p).unwrap();
        for i in 0..3 {
            assert!((k[[i, i]] - 2.5).abs() < 1e-14);
        }
        assert!((k[[0, 1]] - k[[1, 0]]).abs() < 1e-15);
    }

    #[test]
    fn rejects_nonpositive_hyperparameters() {
        assert!(RbfKernelParams::new(&[0.0], 1.0, 0.1).is_err());
        assert!(RbfKernelParams::new(&[1.0], -1.0, 0.1).is_err());
        assert!(RbfKernelParams::new(&[1.0], 1.0, 0.0).is_err());
    }
}
