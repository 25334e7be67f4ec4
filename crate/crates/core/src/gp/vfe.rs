//! Collapsed variational free energy (Titsias bound) for sparse GP
//! regression, evaluated through the Woodbury identity.

use std::f64::consts::PI;

use ndarray::{ArrayView1, ArrayView2};

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::gp::exact::{check_regression_inputs, column, HyperObjective, KernelVars};
use crate::gp::kernel::RbfKernelParams;
use crate::gp::InducingSet;
use crate::linalg::JitterPolicy;

/// Returns the bound and the trace term `t = tr(K_ff − Q_ff)`.
pub(crate) fn vfe_graph(
    tape: &mut Tape,
    kv: &KernelVars,
    y: ArrayView1<f64>,
    x: ArrayView2<f64>,
    z: ArrayView2<f64>,
) -> Result<(Var, Var)> {
    let n = y.len() as f64;
    let m = z.nrows();
    let xv = tape.constant(x.to_owned());
    let zv = tape.constant(z.to_owned());
    let yv = tape.constant(column(y));
    let kuu = tape.rbf(zv, zv, kv.log_ls, kv.log_os);
    let luu = tape.cholesky(kuu, JitterPolicy::OnFailure)?;
    let kuf = tape.rbf(zv, xv, kv.log_ls, kv.log_os);
    // A' = L⁻¹ K_uf, so that Q_ff = A'ᵀ A'
    let a_raw = tape.solve_lower(luu, kuf);
    let inv_sigma = {
        let half = tape.scale(kv.log_noise, -0.5);
        tape.exp(half)
    };
    let a = tape.scale_by(a_raw, inv_sigma);
    let at = tape.transpose(a);
    let aat = tape.matmul(a, at);
    let eye = tape.constant(crate::autograd::eye(m));
    let bmat = tape.add(aat, eye);
    let lb = tape.cholesky(bmat, JitterPolicy::OnFailure)?;
    let ay = tape.matmul(a, yv);
    let c0 = tape.solve_lower(lb, ay);
    let c = tape.scale_by(c0, inv_sigma);

    // yᵀ(Q_ff + σ²I)⁻¹y = yᵀy/σ² − cᵀc
    let yy: f64 = y.dot(&y);
    let yy_over = {
        let ys = tape.scalar_const(yy);
        let inv_noise = tape.scale(kv.log_noise, -1.0);
        let inv_noise = tape.exp(inv_noise);
        tape.mul(ys, inv_noise)
    };
    let cc = tape.square(c);
    let cc = tape.sum(cc);
    let quad = tape.sub(yy_over, cc);

    // log|Q_ff + σ²I| = N log σ² + log|B|
    let dlb = tape.diag(lb);
    let ldl = tape.ln(dlb);
    let ldl = tape.sum(ldl);
    let logdet_b = tape.scale(ldl, 2.0);
    let n_logn = tape.scale(kv.log_noise, n);
    let logdet = tape.add(n_logn, logdet_b);

    // trace term: (N σ_f² − tr Q_ff) / σ²
    let os = tape.exp(kv.log_os);
    let tr_kff = tape.scale(os, n);
    let a2 = tape.square(a_raw);
    let tr_q = tape.sum(a2);
    let resid = tape.sub(tr_kff, tr_q);
    let trace = {
        let inv_noise = tape.scale(kv.log_noise, -1.0);
        let inv_noise = tape.exp(inv_noise);
        tape.mul(resid, inv_noise)
    };

    let t1 = tape.add(quad, logdet);
    let t2 = tape.add(t1, trace);
    let half = tape.scale(t2, -0.5);
    Ok((tape.offset(half, -0.5 * n * (2.0 * PI).ln()), resid))
}

/// Collapsed bound `log N(y | 0, Q_ff + σ_n²I) − tr(K_ff − Q_ff)/(2σ_n²)`.
pub fn vfe_elbo(
    y: ArrayView1<f64>,
    x: ArrayView2<f64>,
    inducing: &InducingSet,
    params: &RbfKernelParams,
) -> Result<f64> {
    Ok(vfe_elbo_with_grad(y, x, inducing, params)?.value)
}

pub fn vfe_elbo_with_grad(
    y: ArrayView1<f64>,
    x: ArrayView2<f64>,
    inducing: &InducingSet,
    params: &RbfKernelParams,
) -> Result<HyperObjective> {
    check_regression_inputs(y, x, params)?;
    let z = inducing.points();
    params.check_dim(z.view())?;
    let mut tape = Tape::new();
    let kv = KernelVars::new(&mut tape, params);
    let (root, _) = vfe_graph(&mut tape, &kv, y, x, z.view())?;
    Ok(kv.finish(&tape, root))
}

/// Trace term `tr(K_ff − Q_ff)` of the collapsed bound.
pub fn vfe_trace_term(
    x: ArrayView2<f64>,
    inducing: &InducingSet,
    params: &RbfKernelParams,
) -> Result<f64> {
    let z = inducing.points();
    params.check_dim(x)?;
    params.check_dim(z.view())?;
    let y = ndarray::Array1::zeros(x.nrows());
    let mut tape = Tape::new();
    let kv = KernelVars::new(&mut tape, params);
    let (_, t) = vfe_graph(&mut tape, &kv, y.view(), x, z.view())?;
    Ok(tape.scalar(t))
}
