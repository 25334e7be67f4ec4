//! Fast products with symmetric Toeplitz matrices and their Kronecker
//! products, via circulant embedding and FFT.

use ndarray::{Array2, ArrayView2};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::gp::grid::InducingGrid;
use crate::gp::kernel::RbfKernelParams;

/// `T v` for the symmetric Toeplitz matrix with first column `first_col`.
pub fn toeplitz_matvec(first_col: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let n = first_col.len();
    if v.len() != n {
        return Err(Error::Dimension(format!(
            "toeplitz of size {n} applied to vector of length {}",
            v.len()
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // circulant of size 2n: [c_0 … c_{n−1}, 0, c_{n−1} … c_1]
    let size = 2 * n;
    let mut c: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); size];
    for j in 0..n {
        c[j].re = first_col[j];
    }
    for j in 1..n {
        c[size - j].re = first_col[j];
    }
    let mut x: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); size];
    for j in 0..n {
        x[j].re = v[j];
    }
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    fwd.process(&mut c);
    fwd.process(&mut x);
    for (xi, ci) in x.iter_mut().zip(&c) {
        *xi *= *ci;
    }
    inv.process(&mut x);
    let scale = 1.0 / size as f64;
    Ok(x[..n].iter().map(|z| z.re * scale).collect())
}

/// Dense symmetric Toeplitz matrix from its first column.
pub fn toeplitz_dense(first_col: &[f64]) -> Array2<f64> {
    let n = first_col.len();
    Array2::from_shape_fn((n, n), |(i, j)| first_col[i.abs_diff(j)])
}

/// Kernel covariance over a regular grid in Kronecker–Toeplitz form:
/// `K_uu = σ_f² (T_1 ⊗ … ⊗ T_D)` with unit-scale 1-D factors.
#[derive(Clone, Debug)]
pub struct GridKernel {
    pub first_columns: Vec<Vec<f64>>,
    pub outputscale: f64,
}

impl GridKernel {
    pub fn new(grid: &InducingGrid, params: &RbfKernelParams) -> Result<Self> {
        if params.dim() != grid.dim() {
            return Err(Error::Dimension(format!(
                "kernel has {} lengthscales, grid has {} dimensions",
                params.dim(),
                grid.dim()
            )));
        }
        let ls = params.lengthscale();
        let first_columns = grid
            .axes()
            .iter()
            .zip(&ls)
            .map(|(ax, l)| {
                (0..ax.count)
                    .map(|j| {
                        let t = j as f64 * ax.spacing / l;
                        (-0.5 * t * t).exp()
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            first_columns,
            outputscale: params.outputscale(),
        })
    }

    pub fn len(&self) -> usize {
        self.first_columns.iter().map(|c| c.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `K_uu v` in `O(M Σ_d log m_d)` time.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        let m = self.len();
        if v.len() != m {
            return Err(Error::Dimension(format!(
                "grid covariance of size {m} applied to vector of length {}",
                v.len()
            )));
        }
        let mut cur = v.to_vec();
        let mut inner = m;
        let mut outer = 1;
        for col in &self.first_columns {
            let n = col.len();
            inner /= n;
            let mut next = vec![0.0; m];
            let mut fiber = vec![0.0; n];
            for o in 0..outer {
                for i in 0..inner {
                    for j in 0..n {
                        fiber[j] = cur[(o * n + j) * inner + i];
                    }
                    let out = toeplitz_matvec(col, &fiber)?;
                    for j in 0..n {
                        next[(o * n + j) * inner + i] = out[j];
                    }
                }
            }
            cur = next;
            outer *= n;
        }
        for c in &mut cur {
            *c *= self.outputscale;
        }
        Ok(cur)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut k = Array2::from_elem((1, 1), self.outputscale);
        for col in &self.first_columns {
            k = kron(k.view(), toeplitz_dense(col).view());
        }
        k
    }
}

/// Dense Kronecker product.
pub fn kron(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    Array2::from_shape_fn((ar * br, ac * bc), |(i, j)| {
        a[[i / br, j / bc]] * b[[i % br, j % bc]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fft_product_matches_dense() {
        let col = [1.0, 0.6, 0.2, 0.05, 0.01];
        let v = [0.3, -1.0, 2.0, 0.5, -0.7];
        let fast = toeplitz_matvec(&col, &v).unwrap();
        let t = toeplitz_dense(&col);
        for i in 0..5 {
            let dense: f64 = (0..5).map(|j| t[[i, j]] * v[j]).sum();
            assert!((fast[i] - dense).abs() < 1e-12);
        }
    }

    #[test]
    fn single_element() {
        assert_eq!(toeplitz_matvec(&[2.0], &[3.0]).unwrap(), vec![6.0]);
    }

    #[test]
    fn kronecker_matvec_matches_dense() {
        let grid = InducingGrid::covering(&[-1.0, 0.0], &[1.0, 2.0], &[5, 6]).unwrap();
        let p = RbfKernelParams::new(&[0.8, 1.1], 1.7, 0.1).unwrap();
        let gk = GridKernel::new(&grid, &p).unwrap();
        let v: Vec<f64> = (0..30).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let fast = gk.matvec(&v).unwrap();
        let pts = grid.points();
        let k = crate::gp::kernel::rbf_kernel_matrix(pts.view(), pts.view(), &p).unwrap();
        for i in 0..30 {
            let dense: f64 = (0..30).map(|j| k[[i, j]] * v[j]).sum();
            assert!((fast[i] - dense).abs() < 1e-10, "{} vs {}", fast[i], dense);
        }
    }
}
