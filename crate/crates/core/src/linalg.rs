//! Dense linear-algebra kernels used by the GP machinery: Cholesky with a
//! deterministic jitter ladder and triangular solves.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Smallest relative jitter tried before a Cholesky factorization.
pub const JITTER_START: f64 = 1e-8;
/// First relative jitter tried when the plain factorization fails.
pub const JITTER_FLOOR: f64 = 1e-12;
/// Largest relative jitter before giving up.
pub const JITTER_MAX: f64 = 1e-4;

/// When to add jitter to the diagonal before factorizing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JitterPolicy {
    /// Always add `1e-8 * mean(diag)`, escalating ×10 on failure.
    Always,
    /// Try the plain matrix first; on failure climb the ladder from
    /// `JITTER_FLOOR`.
    OnFailure,
}

/// Plain lower Cholesky factor. Returns `None` if a pivot is not positive.
pub fn cholesky(a: ArrayView2<f64>) -> Option<Mat> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Mat::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Some(l)
}

/// Cholesky with the jitter ladder. Returns the factor of `a + jitter * I`
/// together with the absolute jitter that was used.
pub fn cholesky_jittered(a: ArrayView2<f64>, policy: JitterPolicy) -> Result<(Mat, f64)> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::Dimension(format!(
            "cholesky of non-square {}x{} matrix",
            n,
            a.ncols()
        )));
    }
    if policy == JitterPolicy::OnFailure {
        if let Some(l) = cholesky(a) {
            return Ok((l, 0.0));
        }
    }
    let mean_diag = if n == 0 {
        1.0
    } else {
        a.diag().iter().map(|v| v.abs()).sum::<f64>() / n as f64
    };
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut rel = match policy {
        JitterPolicy::Always => JITTER_START,
        JitterPolicy::OnFailure => JITTER_FLOOR,
    };
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = rel * scale;
        let mut aj = a.to_owned();
        for i in 0..n {
            aj[[i, i]] += jitter;
        }
        if let Some(l) = cholesky(aj.view()) {
            return Ok((l, jitter));
        }
        rel *= 10.0;
    }
    Err(Error::Numeric(format!(
        "cholesky of {n}x{n} matrix failed after jitter escalation to {JITTER_MAX:e}"
    )))
}

/// Solves `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: ArrayView2<f64>, b: ArrayView2<f64>) -> Mat {
    let n = l.nrows();
    let mut x = b.to_owned();
    for c in 0..x.ncols() {
        for i in 0..n {
            let mut s = x[[i, c]];
            for k in 0..i {
                s -= l[[i, k]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
    }
    x
}

/// Solves `Lᵀ X = B` for lower-triangular `L`.
pub fn solve_upper_t(l: ArrayView2<f64>, b: ArrayView2<f64>) -> Mat {
    let n = l.nrows();
    let mut x = b.to_owned();
    for c in 0..x.ncols() {
        for i in (0..n).rev() {
            let mut s = x[[i, c]];
            for k in (i + 1)..n {
                s -= l[[k, i]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
    }
    x
}

/// Solves `X L = B` for lower-triangular `L` (right division).
pub fn solve_lower_right(l: ArrayView2<f64>, b: ArrayView2<f64>) -> Mat {
    // X L = B  <=>  Lᵀ Xᵀ = Bᵀ
    solve_upper_t(l, b.t()).reversed_axes()
}

/// Solves `X Lᵀ = B` for lower-triangular `L`.
pub fn solve_upper_t_right(l: ArrayView2<f64>, b: ArrayView2<f64>) -> Mat {
    // X Lᵀ = B  <=>  L Xᵀ = Bᵀ
    solve_lower(l, b.t()).reversed_axes()
}

/// `log |A|` from the Cholesky factor of `A`.
pub fn logdet_from_cholesky(l: ArrayView2<f64>) -> f64 {
    2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>()
}
