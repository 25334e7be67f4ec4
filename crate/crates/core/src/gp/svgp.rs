//! Whitened variational posteriors over inducing values, their predictive
//! marginals and the Bernoulli variational objective.
//!
//! With `u = L_uu v` and `q(v) = N(m, S)`, `S = L Lᵀ`, the latent marginal
//! at `x` is `N(aᵀm, k(x,x) − aᵀa + aᵀSa)` where `a = L_uu⁻¹ k_u(x)`.

use std::sync::Arc;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autograd::{eye, Tape, Var};
use crate::error::{Error, Result};
use crate::gp::grid::InducingGrid;
use crate::gp::kernel::{rbf_kernel_matrix, RbfKernelParams};
use crate::gp::likelihood::NormalQuadrature;
use crate::gp::InducingSet;
use crate::linalg::{cholesky_jittered, solve_lower, JitterPolicy, Mat};

/// Floor applied to latent predictive variances.
pub const VARIANCE_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhitenedVariationalState {
    pub mean: Vec<f64>,
    /// Lower-triangular factor of the whitened covariance.
    pub chol: Mat,
}

impl WhitenedVariationalState {
    /// `q(v) = p(v) = N(0, I)`.
    pub fn prior(m: usize) -> Self {
        Self {
            mean: vec![0.0; m],
            chol: eye(m),
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.mean.len();
        if self.chol.dim() != (m, m) {
            return Err(Error::Dimension(format!(
                "variational factor is {:?} for {m} inducing values",
                self.chol.dim()
            )));
        }
        for i in 0..m {
            if !(self.chol[[i, i]] > 0.0) {
                return Err(Error::Numeric(format!(
                    "variational factor has non-positive diagonal at {i}"
                )));
            }
            for j in (i + 1)..m {
                if self.chol[[i, j]] != 0.0 {
                    return Err(Error::Numeric(
                        "variational factor is not lower triangular".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn mean_column(&self) -> Mat {
        Array2::from_shape_vec((self.len(), 1), self.mean.clone()).unwrap()
    }

    /// Optimal `q(v)` for a Gaussian likelihood with noise `σ_n²`:
    /// precision `I + AAᵀ/σ²`, mean `S A y / σ²`, `A = L_uu⁻¹ K_uf`.
    pub fn optimal_gaussian(
        y: ArrayView1<f64>,
        x: ArrayView2<f64>,
        inducing: &InducingSet,
        params: &RbfKernelParams,
    ) -> Result<Self> {
        let z = inducing.points();
        let kuu = rbf_kernel_matrix(z.view(), z.view(), params)?;
        let (luu, _) = cholesky_jittered(kuu.view(), JitterPolicy::Always)?;
        let kuf = rbf_kernel_matrix(z.view(), x, params)?;
        let a = solve_lower(luu.view(), kuf.view());
        let noise = params.noise_variance();
        let m = z.nrows();
        let mut prec = a.dot(&a.t()) / noise;
        for i in 0..m {
            prec[[i, i]] += 1.0;
        }
        let (lp, _) = cholesky_jittered(prec.view(), JitterPolicy::OnFailure)?;
        let rhs = a.dot(&y.to_owned().insert_axis(ndarray::Axis(1))) / noise;
        let t = solve_lower(lp.view(), rhs.view());
        let mean = crate::linalg::solve_upper_t(lp.view(), t.view());
        // S = P⁻¹ = Lp⁻ᵀ Lp⁻¹; its Cholesky factor via the inverse of Lp
        let lp_inv = solve_lower(lp.view(), eye(m).view());
        let s = lp_inv.t().dot(&lp_inv);
        let (chol, _) = cholesky_jittered(s.view(), JitterPolicy::OnFailure)?;
        Ok(Self {
            mean: mean.column(0).to_vec(),
            chol,
        })
    }
}

/// `KL(q(v) ‖ N(0, I)) = ½[tr S + mᵀm − M − log|S|]`.
pub fn kl_whitened(state: &WhitenedVariationalState) -> Result<f64> {
    state.validate()?;
    let m = state.len() as f64;
    let tr: f64 = state.chol.iter().map(|v| v * v).sum();
    let mm: f64 = state.mean.iter().map(|v| v * v).sum();
    let logdet: f64 = 2.0 * state.chol.diag().iter().map(|d| d.ln()).sum::<f64>();
    Ok(0.5 * (tr + mm - m - logdet))
}

/// Where the inducing values of a GP head live on the tape.
#[derive(Clone)]
pub(crate) enum HeadInducing {
    Points(Var),
    Grid(Arc<InducingGrid>),
}

/// Tape handles of a whitened GP head.
#[derive(Clone, Copy)]
pub(crate) struct GpHeadVars {
    pub log_ls: Var,
    pub log_os: Var,
    pub mean: Var,
    pub chol: Var,
}

/// Latent predictive mean and variance columns (`B × 1`) at the rows of `x`.
pub(crate) fn latent_graph(
    tape: &mut Tape,
    inducing: &HeadInducing,
    v: GpHeadVars,
    x: Var,
) -> Result<(Var, Var)> {
    let b = tape.shape(x).0;
    let l = tape.tril(v.chol);
    let os = tape.exp(v.log_os);
    let (mean, a_sq, q_sq) = match inducing {
        HeadInducing::Points(z) => {
            let kuu = tape.rbf(*z, *z, v.log_ls, v.log_os);
            let luu = tape.cholesky(kuu, JitterPolicy::Always)?;
            let kuf = tape.rbf(*z, x, v.log_ls, v.log_os);
            let a = tape.solve_lower(luu, kuf);
            let at = tape.transpose(a);
            let mean = tape.matmul(at, v.mean);
            let lt = tape.transpose(l);
            let q = tape.matmul(lt, a);
            let a2 = tape.square(a);
            let a2 = tape.sum_rows(a2);
            let a2 = tape.transpose(a2);
            let q2 = tape.square(q);
            let q2 = tape.sum_rows(q2);
            let q2 = tape.transpose(q2);
            (mean, a2, q2)
        }
        HeadInducing::Grid(grid) => {
            let m = grid.len();
            let mut factors = Vec::with_capacity(grid.dim());
            for (d, ax) in grid.axes().iter().enumerate() {
                let r2 = Array2::from_shape_fn((ax.count, 1), |(j, _)| {
                    let r = j as f64 * ax.spacing;
                    r * r
                });
                let r2 = tape.constant(r2);
                let ll = tape.slice_cols(v.log_ls, d, 1);
                let inv_l2 = tape.scale(ll, -2.0);
                let inv_l2 = tape.exp(inv_l2);
                let s = tape.scale_by(r2, inv_l2);
                let s = tape.scale(s, -0.5);
                let col = tape.exp(s);
                let t = tape.toeplitz(col);
                factors.push(tape.cholesky(t, JitterPolicy::Always)?);
            }
            let ident = tape.constant(eye(m));
            let stacked = tape.concat_cols(&[v.mean, ident, l]);
            let g = tape.kron_matmul(&factors, stacked);
            let half = tape.scale(v.log_os, 0.5);
            let sqrt_os = tape.exp(half);
            let g = tape.scale_by(g, sqrt_os);
            let y = tape.interp(x, g, grid.clone())?;
            let mean = tape.slice_cols(y, 0, 1);
            let a = tape.slice_cols(y, 1, m);
            let q = tape.slice_cols(y, 1 + m, m);
            let a2 = tape.square(a);
            let a2 = tape.sum_cols(a2);
            let q2 = tape.square(q);
            let q2 = tape.sum_cols(q2);
            (mean, a2, q2)
        }
    };
    let ones = tape.constant(Mat::ones((b, 1)));
    let prior = tape.scale_by(ones, os);
    let var = tape.sub(prior, a_sq);
    let var = tape.add(var, q_sq);
    let var = tape.clamp_min(var, VARIANCE_FLOOR);
    Ok((mean, var))
}

/// Whitened KL on the tape; `chol` is masked to its lower triangle.
pub(crate) fn kl_graph(tape: &mut Tape, mean: Var, chol: Var) -> Var {
    let m = tape.shape(mean).0 as f64;
    let l = tape.tril(chol);
    let l2 = tape.square(l);
    let tr = tape.sum(l2);
    let m2 = tape.square(mean);
    let mm = tape.sum(m2);
    let d = tape.diag(l);
    let ld = tape.ln(d);
    let ld = tape.sum(ld);
    let s = tape.add(tr, mm);
    let s = tape.offset(s, -m);
    let s = tape.scale(s, 0.5);
    tape.sub(s, ld)
}

/// `Σ_i E_{N(f | μ_i, s_i²)}[log σ((2y_i − 1) f)]` by quadrature.
pub(crate) fn bernoulli_expected_loglik_graph(
    tape: &mut Tape,
    mean: Var,
    var: Var,
    labels: &[u8],
    quad: &NormalQuadrature,
) -> Var {
    let b = labels.len();
    let k = quad.points.len();
    let ones = tape.constant(Mat::ones((1, k)));
    let nodes = tape.constant(Array2::from_shape_vec((1, k), quad.points.clone()).unwrap());
    let weights = tape.constant(Array2::from_shape_vec((k, 1), quad.weights.clone()).unwrap());
    let signs = tape.constant(Array2::from_shape_fn((b, 1), |(i, _)| {
        if labels[i] == 1 {
            1.0
        } else {
            -1.0
        }
    }));
    let sd = tape.sqrt(var);
    let base = tape.matmul(mean, ones);
    let spread = tape.matmul(sd, nodes);
    let f = tape.add(base, spread);
    let f = tape.mul_col(f, signs);
    let lp = tape.log_sigmoid(f);
    let e = tape.matmul(lp, weights);
    tape.sum(e)
}

/// Latent predictive marginals of a whitened GP at `x_star`.
pub fn latent_posterior_predict(
    state: &WhitenedVariationalState,
    inducing: &InducingSet,
    x_star: ArrayView2<f64>,
    params: &RbfKernelParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    state.validate()?;
    params.check_dim(x_star)?;
    if state.len() != inducing.len() {
        return Err(Error::Dimension(format!(
            "variational state has {} values for {} inducing points",
            state.len(),
            inducing.len()
        )));
    }
    let mut tape = Tape::new();
    let log_ls = tape.constant(params.log_lengthscale_row());
    let log_os = tape.constant(Array2::from_elem((1, 1), params.log_outputscale));
    let mean = tape.constant(state.mean_column());
    let chol = tape.constant(state.chol.clone());
    let hi = match inducing {
        InducingSet::Points(z) => HeadInducing::Points(tape.constant(z.clone())),
        InducingSet::Grid(g) => HeadInducing::Grid(Arc::new(g.clone())),
    };
    let x = tape.constant(x_star.to_owned());
    let (mv, vv) = latent_graph(
        &mut tape,
        &hi,
        GpHeadVars {
            log_ls,
            log_os,
            mean,
            chol,
        },
        x,
    )?;
    Ok((
        tape.value(mv).column(0).to_vec(),
        tape.value(vv).column(0).to_vec(),
    ))
}

/// Bernoulli variational objective of a whitened GP on fixed latent
/// inputs: `Σ_i E_q[log p(y_i | f_i)] − KL(q(v) ‖ p(v))`.
pub fn bernoulli_elbo(
    state: &WhitenedVariationalState,
    inducing: &InducingSet,
    x: ArrayView2<f64>,
    labels: &[u8],
    params: &RbfKernelParams,
    quad: &NormalQuadrature,
) -> Result<f64> {
    Ok(bernoulli_elbo_with_grad(state, inducing, x, labels, params, quad)?.0)
}

/// Gradient of [`bernoulli_elbo`] with respect to the variational
/// parameters and the kernel log hyperparameters.
#[derive(Clone, Debug)]
pub struct VariationalGradient {
    pub mean: Vec<f64>,
    /// Lower triangle only; entries above the diagonal are zero.
    pub chol: Mat,
    pub log_lengthscale: Vec<f64>,
    pub log_outputscale: f64,
    /// Gradient with respect to the inducing points (free-point sets only).
    pub inducing_points: Option<Mat>,
}

pub fn bernoulli_elbo_with_grad(
    state: &WhitenedVariationalState,
    inducing: &InducingSet,
    x: ArrayView2<f64>,
    labels: &[u8],
    params: &RbfKernelParams,
    quad: &NormalQuadrature,
) -> Result<(f64, VariationalGradient)> {
    if labels.len() != x.nrows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} inputs",
            labels.len(),
            x.nrows()
        )));
    }
    state.validate()?;
    params.check_dim(x)?;
    let mut tape = Tape::new();
    let log_ls = tape.leaf(params.log_lengthscale_row());
    let log_os = tape.leaf(Array2::from_elem((1, 1), params.log_outputscale));
    let mean = tape.leaf(state.mean_column());
    let chol = tape.leaf(state.chol.clone());
    let (hi, zv) = match inducing {
        InducingSet::Points(z) => {
            let zv = tape.leaf(z.clone());
            (HeadInducing::Points(zv), Some(zv))
        }
        InducingSet::Grid(g) => (HeadInducing::Grid(Arc::new(g.clone())), None),
    };
    let xv = tape.constant(x.to_owned());
    let vars = GpHeadVars {
        log_ls,
        log_os,
        mean,
        chol,
    };
    let (mv, vv) = latent_graph(&mut tape, &hi, vars, xv)?;
    let ell = bernoulli_expected_loglik_graph(&mut tape, mv, vv, labels, quad);
    let kl = kl_graph(&mut tape, mean, chol);
    let root = tape.sub(ell, kl);
    let g = tape.backward(root);
    let m = state.len();
    let d = params.dim();
    let mut gl = g.get_or_zeros(chol, (m, m));
    for i in 0..m {
        for j in (i + 1)..m {
            gl[[i, j]] = 0.0;
        }
    }
    Ok((
        tape.scalar(root),
        VariationalGradient {
            mean: g.get_or_zeros(mean, (m, 1)).column(0).to_vec(),
            chol: gl,
            log_lengthscale: g.get_or_zeros(log_ls, (1, d)).iter().cloned().collect(),
            log_outputscale: g.get_or_zeros(log_os, (1, 1))[[0, 0]],
            inducing_points: zv.map(|z| g.get_or_zeros(z, (m, d))),
        },
    ))
}
