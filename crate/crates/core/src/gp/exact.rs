//! Exact GP regression marginal likelihood (dense reference path).

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::gp::kernel::RbfKernelParams;
use crate::linalg::{JitterPolicy, Mat};

/// Largest `N` accepted by the dense exact path.
pub const DEFAULT_DENSE_LIMIT: usize = 2048;

/// Value of a kernel-hyperparameter objective together with its gradient
/// with respect to the log hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperObjective {
    pub value: f64,
    pub grad_log_lengthscale: Vec<f64>,
    pub grad_log_outputscale: f64,
    pub grad_log_noise: f64,
}

/// Kernel hyperparameters as tape leaves.
pub(crate) struct KernelVars {
    pub log_ls: Var,
    pub log_os: Var,
    pub log_noise: Var,
}

impl KernelVars {
    pub fn new(tape: &mut Tape, params: &RbfKernelParams) -> Self {
        Self {
            log_ls: tape.leaf(params.log_lengthscale_row()),
            log_os: tape.leaf(Array2::from_elem((1, 1), params.log_outputscale)),
            log_noise: tape.leaf(Array2::from_elem((1, 1), params.log_noise)),
        }
    }

    pub fn finish(&self, tape: &Tape, root: Var) -> HyperObjective {
        let g = tape.backward(root);
        let d = tape.shape(self.log_ls).1;
        HyperObjective {
            value: tape.scalar(root),
            grad_log_lengthscale: g.get_or_zeros(self.log_ls, (1, d)).iter().cloned().collect(),
            grad_log_outputscale: g.get_or_zeros(self.log_os, (1, 1))[[0, 0]],
            grad_log_noise: g.get_or_zeros(self.log_noise, (1, 1))[[0, 0]],
        }
    }
}

pub(crate) fn check_regression_inputs(y: ArrayView1<f64>, x: ArrayView2<f64>, params: &RbfKernelParams) -> Result<()> {
    if y.len() != x.nrows() {
        return Err(Error::Dimension(format!(
            "{} targets for {} inputs",
            y.len(),
            x.nrows()
        )));
    }
    if y.is_empty() {
        return Err(Error::Dimension("no training points".into()));
    }
    params.check_dim(x)
}

pub(crate) fn column(y: ArrayView1<f64>) -> Mat {
    y.to_owned().insert_axis(ndarray::Axis(1))
}

fn exact_graph(
    tape: &mut Tape,
    kv: &KernelVars,
    y: ArrayView1<f64>,
    x: ArrayView2<f64>,
) -> Result<Var> {
    let n = y.len();
    let xv = tape.constant(x.to_owned());
    let yv = tape.constant(column(y));
    let k = tape.rbf(xv, xv, kv.log_ls, kv.log_os);
    let noise = tape.exp(kv.log_noise);
    let eye = tape.constant(crate::autograd::eye(n));
    let noise_eye = tape.scale_by(eye, noise);
    let kn = tape.add(k, noise_eye);
    let l = tape.cholesky(kn, JitterPolicy::OnFailure)?;
    let alpha = tape.solve_lower(l, yv);
    let quad = tape.square(alpha);
    let quad = tape.sum(quad);
    let dg = tape.diag(l);
    let logd = tape.ln(dg);
    let half_logdet = tape.sum(logd);
    let a = tape.scale(quad, -0.5);
    let b = tape.sub(a, half_logdet);
    Ok(tape.offset(b, -0.5 * n as f64 * (2.0 * PI).ln()))
}

/// `log p(y | X, θ) = −½ yᵀK_n⁻¹y − ½ log|K_n| − (N/2) log 2π` with
/// `K_n = K_ff + σ_n² I`.
pub fn exact_log_marginal(
    y: ArrayView1<f64>,
    x: ArrayView2<f64>,
    params: &RbfKernelParams,
) -> Result<f64> {
    Ok(exact_log_marginal_with_grad(y, x, params, DEFAULT_DENSE_LIMIT)?.value)
}

/// Exact marginal likelihood and its hyperparameter gradient. Fails with a
/// configuration error when `N` exceeds `dense_limit`.
pub fn exact_log_marginal_with_grad(
    y: ArrayView1<f64>,
    x: ArrayView2<f64>,
    params: &RbfKernelParams,
    dense_limit: usize,
) -> Result<HyperObjective> {
    check_regression_inputs(y, x, params)?;
    if y.len() > dense_limit {
        return Err(Error::config(
            "gp.dense_limit",
            format!(
                "exact GP requested for N = {} above the dense limit {dense_limit}",
                y.len()
            ),
        ));
    }
    let mut tape = Tape::new();
    let kv = KernelVars::new(&mut tape, params);
    let root = exact_graph(&mut tape, &kv, y, x)?;
    Ok(kv.finish(&tape, root))
}

/// Exact GP posterior of the latent function at `x_star`: mean and
/// marginal variance.
pub fn exact_posterior(
    y: ArrayView1<f64>,
    x: ArrayView2<f64>,
    x_star: ArrayView2<f64>,
    params: &RbfKernelParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    use crate::gp::kernel::rbf_kernel_matrix;
    use crate::linalg::{cholesky_jittered, solve_lower};
    check_regression_inputs(y, x, params)?;
    let mut kn = rbf_kernel_matrix(x, x, params)?;
    for i in 0..kn.nrows() {
        kn[[i, i]] += params.noise_variance();
    }
    let (l, _) = cholesky_jittered(kn.view(), JitterPolicy::OnFailure)?;
    let ks = rbf_kernel_matrix(x, x_star, params)?;
    let a = solve_lower(l.view(), ks.view());
    let b = solve_lower(l.view(), column(y).view());
    let os = params.outputscale();
    let mean = a.t().dot(&b).column(0).to_vec();
    let var = a
        .columns()
        .into_iter()
        .map(|c| os - c.dot(&c))
        .collect();
    Ok((mean, var))
}
