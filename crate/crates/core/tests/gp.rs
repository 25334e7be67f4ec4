use std::f64::consts::PI;

use approx::assert_abs_diff_eq;
use dbgp_core::gp::*;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_inputs(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.random_range(-scale..scale))
}

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Independent dense evaluation with nalgebra's LU inverse and determinant.
fn oracle_log_marginal(y: &Array1<f64>, x: &Array2<f64>, p: &RbfKernelParams) -> f64 {
    let n = y.len();
    let ls = p.lengthscale();
    let os = p.outputscale();
    let k = DMatrix::from_fn(n, n, |i, j| {
        let mut r2 = 0.0;
        for d in 0..ls.len() {
            r2 += ((x[[i, d]] - x[[j, d]]) / ls[d]).powi(2);
        }
        os * (-0.5 * r2).exp() + if i == j { p.noise_variance() } else { 0.0 }
    });
    let yv = DVector::from_iterator(n, y.iter().cloned());
    let kinv = k.clone().try_inverse().unwrap();
    let quad = (yv.transpose() * kinv * &yv)[(0, 0)];
    -0.5 * quad - 0.5 * k.determinant().ln() - 0.5 * n as f64 * (2.0 * PI).ln()
}

#[test]
fn rbf_closed_forms() {
    let p = RbfKernelParams::new(&[1.0], 1.0, 0.1).unwrap();
    let x1 = Array2::from_shape_vec((2, 1), vec![0.0, 0.0]).unwrap();
    let x2 = Array2::from_shape_vec((2, 1), vec![0.0, 1.0]).unwrap();
    let k = rbf_kernel_matrix(x1.view(), x2.view(), &p).unwrap();
    assert_abs_diff_eq!(k[[0, 0]], 1.0, epsilon = 1e-15);
    assert_abs_diff_eq!(k[[0, 1]], (-0.5f64).exp(), epsilon = 1e-15);
    assert_abs_diff_eq!(k[[0, 1]], 0.60653, epsilon = 1e-5);
}

#[test]
fn rbf_matrix_is_psd() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = RbfKernelParams::new(&[0.6, 1.4], 1.3, 0.1).unwrap();
    let x = random_inputs(&mut rng, 5, 2, 2.0);
    let k = rbf_kernel_matrix(x.view(), x.view(), &p).unwrap();
    let eig = to_na(&k).symmetric_eigen();
    assert!(eig.eigenvalues.min() >= -1e-10);
}

#[test]
fn rbf_dimension_mismatch_is_error() {
    let p = RbfKernelParams::new(&[1.0, 1.0], 1.0, 0.1).unwrap();
    let x = Array2::zeros((3, 1));
    assert!(rbf_kernel_matrix(x.view(), x.view(), &p).is_err());
}

#[test]
fn exact_marginal_scalar_case() {
    // zero noise is outside the log-parametrized domain, so use a tiny one
    let p = RbfKernelParams::new(&[1.0], 1.0, 1e-300).unwrap();
    let v = exact_log_marginal(Array1::zeros(1).view(), Array2::zeros((1, 1)).view(), &p).unwrap();
    assert_abs_diff_eq!(v, -0.5 * (2.0 * PI).ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(v, -0.91894, epsilon = 1e-5);
}

#[test]
fn exact_marginal_zero_data_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_inputs(&mut rng, 8, 1, 3.0);
    let p = RbfKernelParams::new(&[0.8], 1.5, 0.2).unwrap();
    let y = Array1::zeros(8);
    let v = exact_log_marginal(y.view(), x.view(), &p).unwrap();
    assert_abs_diff_eq!(v, oracle_log_marginal(&y, &x, &p), epsilon = 1e-9);
}

#[test]
fn exact_marginal_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_inputs(&mut rng, 20, 2, 2.0);
    let y = Array1::from_shape_fn(20, |_| rng.random_range(-2.0..2.0));
    let p = RbfKernelParams::new(&[0.7, 1.2], 1.1, 0.15).unwrap();
    let v = exact_log_marginal(y.view(), x.view(), &p).unwrap();
    assert_abs_diff_eq!(v, oracle_log_marginal(&y, &x, &p), epsilon = 1e-8);
}

#[test]
fn exact_marginal_respects_dense_limit() {
    let x = Array2::zeros((5, 1));
    let y = Array1::zeros(5);
    let p = RbfKernelParams::new(&[1.0], 1.0, 0.1).unwrap();
    let err = exact_log_marginal_with_grad(y.view(), x.view(), &p, 4).unwrap_err();
    assert!(matches!(err, dbgp_core::Error::Config { .. }));
}

fn regression_problem(seed: u64, n: usize) -> (Array1<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_inputs(&mut rng, n, 1, 3.0);
    let y = Array1::from_shape_fn(n, |i| (1.3 * x[[i, 0]]).sin() + 0.1 * rng.random_range(-1.0..1.0));
    (y, x)
}

#[test]
fn vfe_collapses_to_exact_when_inducing_equals_inputs() {
    let (y, x) = regression_problem(6, 20);
    let p = RbfKernelParams::new(&[0.9], 1.2, 0.05).unwrap();
    let z = InducingSet::Points(x.clone());
    let vfe = vfe_elbo(y.view(), x.view(), &z, &p).unwrap();
    let exact = exact_log_marginal(y.view(), x.view(), &p).unwrap();
    assert_abs_diff_eq!(vfe, exact, epsilon = 1e-6);
    assert!(vfe_trace_term(x.view(), &z, &p).unwrap().abs() < 1e-6);
}

#[test]
fn vfe_is_a_lower_bound_and_tightens_with_nested_inducing_sets() {
    let (y, x) = regression_problem(7, 50);
    let p = RbfKernelParams::new(&[0.8], 1.0, 0.1).unwrap();
    let exact = exact_log_marginal(y.view(), x.view(), &p).unwrap();
    let mut prev_gap = f64::INFINITY;
    for m in [2, 4, 6, 10, 20, 35, 50] {
        let z = InducingSet::Points(x.slice(ndarray::s![..m, ..]).to_owned());
        let vfe = vfe_elbo(y.view(), x.view(), &z, &p).unwrap();
        let gap = exact - vfe;
        assert!(gap >= -1e-6, "bound violated at M={m}: gap {gap}");
        assert!(gap <= prev_gap + 1e-9, "gap grew at M={m}: {prev_gap} -> {gap}");
        assert!(vfe_trace_term(x.view(), &z, &p).unwrap() >= -1e-9);
        prev_gap = gap;
    }
}

fn fd_hyper<F: Fn(&RbfKernelParams) -> f64>(p: &RbfKernelParams, f: F) -> Vec<f64> {
    let h = 1e-5;
    let mut out = Vec::new();
    let n_ls = p.log_lengthscale.len();
    for k in 0..n_ls + 2 {
        let bump = |delta: f64| {
            let mut q = p.clone();
            if k < n_ls {
                q.log_lengthscale[k] += delta;
            } else if k == n_ls {
                q.log_outputscale += delta;
            } else {
                q.log_noise += delta;
            }
            f(&q)
        };
        out.push((bump(h) - bump(-h)) / (2.0 * h));
    }
    out
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn exact_and_vfe_hyperparameter_gradients_match_finite_differences() {
    let (y, x) = regression_problem(8, 25);
    let p = RbfKernelParams::new(&[0.7], 1.3, 0.2).unwrap();
    let z = InducingSet::Points(x.slice(ndarray::s![..8, ..]).to_owned());
    let ex = exact_log_marginal_with_grad(y.view(), x.view(), &p, 2048).unwrap();
    let vf = vfe_elbo_with_grad(y.view(), x.view(), &z, &p).unwrap();
    let fd_ex = fd_hyper(&p, |q| exact_log_marginal(y.view(), x.view(), q).unwrap());
    let fd_vf = fd_hyper(&p, |q| vfe_elbo(y.view(), x.view(), &z, q).unwrap());
    let an_ex = [ex.grad_log_lengthscale[0], ex.grad_log_outputscale, ex.grad_log_noise];
    let an_vf = [vf.grad_log_lengthscale[0], vf.grad_log_outputscale, vf.grad_log_noise];
    for k in 0..3 {
        assert!(rel_err(an_ex[k], fd_ex[k]) < 1e-4, "exact {k}: {} vs {}", an_ex[k], fd_ex[k]);
        assert!(rel_err(an_vf[k], fd_vf[k]) < 1e-4, "vfe {k}: {} vs {}", an_vf[k], fd_vf[k]);
    }
}

#[test]
fn ski_is_exact_at_grid_knots() {
    let grid = InducingGrid::covering(&[-1.0], &[1.0], &[12]).unwrap();
    let pts = grid.points();
    let idx = [0usize, 3, 7, 11, 5];
    let x = Array2::from_shape_fn((idx.len(), 1), |(i, _)| pts[[idx[i], 0]]);
    let p = RbfKernelParams::new(&[0.5], 1.4, 0.1).unwrap();
    let w = interpolation_weights(x.view(), &grid).unwrap();
    let gk = GridKernel::new(&grid, &p).unwrap();
    let kuu = rbf_kernel_matrix(pts.view(), pts.view(), &p).unwrap();
    for c in 0..idx.len() {
        let mut e = vec![0.0; idx.len()];
        e[c] = 1.0;
        let col = ski_qff_quadform(&w, &gk, &e).unwrap();
        for r in 0..idx.len() {
            assert_abs_diff_eq!(col[r], kuu[[idx[r], idx[c]]], epsilon = 1e-12);
        }
    }
    let zero = ski_qff_quadform(&w, &gk, &vec![0.0; idx.len()]).unwrap();
    assert!(zero.iter().all(|v| *v == 0.0));
}

#[test]
fn ski_cross_covariance_matches_dense_interpolated_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let grid = InducingGrid::covering(&[-1.0, -1.0], &[1.0, 1.0], &[8, 9]).unwrap();
    let p = RbfKernelParams::new(&[0.6, 0.9], 1.1, 0.1).unwrap();
    let x = random_inputs(&mut rng, 7, 2, 1.0);
    let w = interpolation_weights(x.view(), &grid).unwrap();
    let kxu = ski_cross_cov(&w, &grid, &p).unwrap();
    let pts = grid.points();
    let kuu = rbf_kernel_matrix(pts.view(), pts.view(), &p).unwrap();
    let wd = w.to_dense();
    let dense = kuu.dot(&wd.t());
    let v: Vec<f64> = (0..7).map(|i| i as f64 - 3.0).collect();
    let fast = kxu.apply(&v).unwrap();
    let slow = dense.dot(&Array1::from(v.clone()));
    for j in 0..pts.nrows() {
        assert_abs_diff_eq!(fast[j], slow[j], epsilon = 1e-10);
    }
    assert!(kxu.apply(&[1.0]).is_err());
}

fn ski_relative_error(m: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let grid = InducingGrid::covering(&[-1.0], &[1.0], &[m]).unwrap();
    // lengthscale fixed relative to the coarsest grid so that it is ≥ 4h
    // on every grid considered
    let coarse = InducingGrid::covering(&[-1.0], &[1.0], &[64]).unwrap();
    let ls = 4.0 * coarse.axes()[0].spacing;
    let p = RbfKernelParams::new(&[ls], 1.0, 0.1).unwrap();
    let x = random_inputs(&mut rng, 30, 1, 1.0);
    let kff = rbf_kernel_matrix(x.view(), x.view(), &p).unwrap();
    let w = interpolation_weights(x.view(), &grid).unwrap();
    let gk = GridKernel::new(&grid, &p).unwrap();
    let mut num = 0.0;
    let mut den = 0.0;
    for c in 0..30 {
        let mut e = vec![0.0; 30];
        e[c] = 1.0;
        let col = ski_qff_quadform(&w, &gk, &e).unwrap();
        for r in 0..30 {
            num += (col[r] - kff[[r, c]]).powi(2);
            den += kff[[r, c]].powi(2);
        }
    }
    (num / den).sqrt()
}

#[test]
fn ski_error_decreases_with_grid_resolution() {
    let e64 = ski_relative_error(64);
    let e128 = ski_relative_error(128);
    let e256 = ski_relative_error(256);
    assert!(e128 < e64 && e256 < e128, "{e64} {e128} {e256}");
    assert!(e256 < 1e-2, "{e256}");
}

#[test]
fn toeplitz_identity_and_column_extraction() {
    let mut e1 = vec![0.0; 6];
    e1[0] = 1.0;
    let v = vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.5];
    let out = toeplitz_matvec(&e1, &v).unwrap();
    for i in 0..6 {
        assert_abs_diff_eq!(out[i], v[i], epsilon = 1e-14);
    }
    let col = vec![3.0, 1.0, 0.5, 0.2, 0.1, 0.05];
    let out = toeplitz_matvec(&col, &e1).unwrap();
    for i in 0..6 {
        assert_abs_diff_eq!(out[i], col[i], epsilon = 1e-14);
    }
    assert!(toeplitz_matvec(&col, &[1.0]).is_err());
}

proptest! {
    #[test]
    fn toeplitz_matches_dense(col in prop::collection::vec(-2.0f64..2.0, 17), v in prop::collection::vec(-2.0f64..2.0, 17)) {
        let fast = toeplitz_matvec(&col, &v).unwrap();
        for i in 0..17usize {
            let dense: f64 = (0..17usize).map(|j| col[i.abs_diff(j)] * v[j]).sum();
            prop_assert!((fast[i] - dense).abs() < 1e-10);
        }
    }

    #[test]
    fn interpolation_weights_are_convex(xs in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..20)) {
        let grid = InducingGrid::covering(&[-1.0, -1.0], &[1.0, 1.0], &[7, 5]).unwrap();
        let x = Array2::from_shape_fn((xs.len(), 2), |(i, k)| if k == 0 { xs[i].0 } else { xs[i].1 });
        let w = interpolation_weights(x.view(), &grid).unwrap();
        let pts = grid.points();
        for (i, row) in w.entries.iter().enumerate() {
            prop_assert!(row.len() <= 4);
            prop_assert!(row.iter().all(|e| e.1 >= 0.0));
            let total: f64 = row.iter().map(|e| e.1).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for k in 0..2 {
                let recon: f64 = row.iter().map(|&(j, wt)| wt * pts[[j, k]]).sum();
                prop_assert!((recon - x[[i, k]]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn untrained_state_recovers_prior() {
    let p = RbfKernelParams::new(&[0.5, 0.7], 1.7, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xs = random_inputs(&mut rng, 6, 2, 0.9);
    let z = InducingSet::Points(random_inputs(&mut rng, 10, 2, 1.0));
    let grid = InducingSet::Grid(InducingGrid::covering(&[-1.0, -1.0], &[1.0, 1.0], &[6, 6]).unwrap());
    for set in [z, grid] {
        let st = WhitenedVariationalState::prior(set.len());
        let (m, v) = latent_posterior_predict(&st, &set, xs.view(), &p).unwrap();
        for i in 0..6 {
            assert_abs_diff_eq!(m[i], 0.0, epsilon = 1e-14);
            assert_abs_diff_eq!(v[i], 1.7, epsilon = 1e-6);
        }
    }
}

#[test]
fn optimal_whitened_posterior_matches_exact_gp() {
    let (y, x) = regression_problem(12, 40);
    let p = RbfKernelParams::new(&[0.8], 1.1, 0.05).unwrap();
    let set = InducingSet::Points(x.clone());
    let st = WhitenedVariationalState::optimal_gaussian(y.view(), x.view(), &set, &p).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let xs = random_inputs(&mut rng, 15, 1, 3.0);
    let (m, v) = latent_posterior_predict(&st, &set, xs.view(), &p).unwrap();
    let (me, ve) = exact_posterior(y.view(), x.view(), xs.view(), &p).unwrap();
    for i in 0..15 {
        assert_abs_diff_eq!(m[i], me[i], epsilon = 1e-4);
        assert_abs_diff_eq!(v[i], ve[i], epsilon = 1e-4);
    }
}

#[test]
fn heavily_observed_point_contracts_variance() {
    let x = Array2::from_shape_vec((30, 1), vec![0.3; 30]).unwrap();
    let y = Array1::from_elem(30, 0.8);
    let p = RbfKernelParams::new(&[0.5], 1.0, 1e-4).unwrap();
    let set = InducingSet::Points(Array2::from_shape_vec((3, 1), vec![-0.5, 0.3, 0.9]).unwrap());
    let st = WhitenedVariationalState::optimal_gaussian(y.view(), x.view(), &set, &p).unwrap();
    let xs = Array2::from_shape_vec((1, 1), vec![0.3]).unwrap();
    let (m, v) = latent_posterior_predict(&st, &set, xs.view(), &p).unwrap();
    assert!(v[0] < 1e-2 * p.outputscale());
    assert_abs_diff_eq!(m[0], 0.8, epsilon = 1e-3);
}

fn dense_chol(a: &Array2<f64>) -> Array2<f64> {
    let c = to_na(a).cholesky().unwrap().l();
    Array2::from_shape_fn(a.dim(), |(i, j)| c[(i, j)])
}

#[test]
fn grid_predictive_matches_dense_whitened_oracle() {
    let grid = InducingGrid::covering(&[-1.0, -1.0], &[1.0, 1.0], &[5, 6]).unwrap();
    let p = RbfKernelParams::new(&[0.9, 1.2], 1.3, 0.1).unwrap();
    let m = grid.len();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mean: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let chol = Array2::from_shape_fn((m, m), |(i, j)| {
        if i == j {
            0.5 + rng.random_range(0.0..0.5)
        } else if j < i {
            rng.random_range(-0.1..0.1)
        } else {
            0.0
        }
    });
    let st = WhitenedVariationalState { mean: mean.clone(), chol: chol.clone() };
    let xs = random_inputs(&mut rng, 9, 2, 1.0);
    let (pm, pv) = latent_posterior_predict(&st, &InducingSet::Grid(grid.clone()), xs.view(), &p).unwrap();

    // oracle: L_uu = sqrt(os) · chol(T_1 + εI) ⊗ chol(T_2 + εI)
    let gk = GridKernel::new(&grid, &p).unwrap();
    let mut luu = Array2::from_elem((1, 1), p.outputscale().sqrt());
    for col in &gk.first_columns {
        let mut t = dbgp_core::gp::toeplitz::toeplitz_dense(col);
        for i in 0..t.nrows() {
            t[[i, i]] += 1e-8;
        }
        luu = dbgp_core::gp::toeplitz::kron(luu.view(), dense_chol(&t).view());
    }
    let w = interpolation_weights(xs.view(), &grid).unwrap().to_dense();
    let a = w.dot(&luu);
    let mcol = Array1::from(mean);
    let om = a.dot(&mcol);
    let q = a.dot(&chol);
    for i in 0..9 {
        let ov = p.outputscale() - a.row(i).dot(&a.row(i)) + q.row(i).dot(&q.row(i));
        assert_abs_diff_eq!(pm[i], om[i], epsilon = 1e-10);
        assert_abs_diff_eq!(pv[i], ov, epsilon = 1e-9);
    }
}

#[test]
fn kl_whitened_is_zero_at_prior_and_positive_elsewhere() {
    let st = WhitenedVariationalState::prior(4);
    assert_abs_diff_eq!(kl_whitened(&st).unwrap(), 0.0, epsilon = 1e-15);
    let mut st2 = st.clone();
    st2.mean[1] = 0.5;
    st2.chol[[2, 2]] = 0.7;
    // oracle: ½(tr S + mᵀm − M − log|S|)
    let expect = 0.5 * (3.0 + 0.49 + 0.25 - 4.0 - (0.49f64).ln());
    assert_abs_diff_eq!(kl_whitened(&st2).unwrap(), expect, epsilon = 1e-14);
}

fn classification_problem(seed: u64, n: usize) -> (Array2<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_inputs(&mut rng, n, 2, 0.9);
    let labels = (0..n).map(|i| u8::from(x[[i, 0]] + 0.5 * x[[i, 1]] > 0.0)).collect();
    (x, labels)
}

fn check_variational_gradients(set: InducingSet) {
    let (x, labels) = classification_problem(15, 12);
    let p = RbfKernelParams::new(&[0.6, 0.8], 1.2, 0.1).unwrap();
    let m = set.len();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let st = WhitenedVariationalState {
        mean: (0..m).map(|_| rng.random_range(-1.0..1.0)).collect(),
        chol: Array2::from_shape_fn((m, m), |(i, j)| {
            if i == j {
                0.6 + rng.random_range(0.0..0.3)
            } else if j < i {
                rng.random_range(-0.1..0.1)
            } else {
                0.0
            }
        }),
    };
    let quad = NormalQuadrature::new(20).unwrap();
    let (_, g) = bernoulli_elbo_with_grad(&st, &set, x.view(), &labels, &p, &quad).unwrap();
    let f = |s: &WhitenedVariationalState, q: &RbfKernelParams| {
        bernoulli_elbo(s, &set, x.view(), &labels, q, &quad).unwrap()
    };
    let h = 1e-6;
    for k in [0, m / 2, m - 1] {
        let (mut a, mut b) = (st.clone(), st.clone());
        a.mean[k] += h;
        b.mean[k] -= h;
        let fd = (f(&a, &p) - f(&b, &p)) / (2.0 * h);
        assert!(rel_err(g.mean[k], fd) < 1e-4, "mean[{k}] {} vs {fd}", g.mean[k]);
    }
    for (i, j) in [(0, 0), (m - 1, 0), (m - 1, m - 1), (m / 2, 1)] {
        let (mut a, mut b) = (st.clone(), st.clone());
        a.chol[[i, j]] += h;
        b.chol[[i, j]] -= h;
        let fd = (f(&a, &p) - f(&b, &p)) / (2.0 * h);
        assert!(rel_err(g.chol[[i, j]], fd) < 1e-4, "chol[{i},{j}] {} vs {fd}", g.chol[[i, j]]);
    }
    let h = 1e-5;
    for d in 0..2 {
        let (mut a, mut b) = (p.clone(), p.clone());
        a.log_lengthscale[d] += h;
        b.log_lengthscale[d] -= h;
        let fd = (f(&st, &a) - f(&st, &b)) / (2.0 * h);
        assert!(rel_err(g.log_lengthscale[d], fd) < 1e-4, "log_ls[{d}] {} vs {fd}", g.log_lengthscale[d]);
    }
    let (mut a, mut b) = (p.clone(), p.clone());
    a.log_outputscale += h;
    b.log_outputscale -= h;
    let fd = (f(&st, &a) - f(&st, &b)) / (2.0 * h);
    assert!(rel_err(g.log_outputscale, fd) < 1e-4, "log_os {} vs {fd}", g.log_outputscale);
}

#[test]
fn whitened_point_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    check_variational_gradients(InducingSet::Points(random_inputs(&mut rng, 6, 2, 1.0)));
}

#[test]
fn grid_gradients_match_finite_differences() {
    check_variational_gradients(InducingSet::Grid(
        InducingGrid::covering(&[-1.0, -1.0], &[1.0, 1.0], &[5, 5]).unwrap(),
    ));
}

#[test]
fn bernoulli_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let s = bernoulli_predict(1.3, 0.0, 10, &mut rng).unwrap();
    let expect = 1.0 / (1.0 + (-1.3f64).exp());
    assert!(s.iter().all(|v| (v - expect).abs() < 1e-15));
    let s = bernoulli_predict(0.0, 0.0, 5, &mut rng).unwrap();
    assert!(s.iter().all(|v| *v == 0.5));
    let s = bernoulli_predict(0.0, 1.0, 100_000, &mut rng).unwrap();
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s.len() - 1) as f64;
    let se = (var / s.len() as f64).sqrt();
    assert!((mean - 0.5).abs() < 3.0 * se);
}
