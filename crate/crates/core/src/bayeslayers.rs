//! Mean-field Gaussian weight blocks: reparameterized sampling and the
//! closed-form KL divergence to an isotropic Gaussian prior.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{softplus, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Prior standard deviation of stochastic embedding tables.
pub const EMBEDDING_PRIOR_STD: f64 = 0.374;
/// Prior standard deviation of stochastic output layers.
pub const OUTPUT_PRIOR_STD: f64 = 1.0;

/// `q(w) = N(mu, softplus(rho)²)` elementwise, with prior `N(0, prior_std²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldTensor {
    pub mu: Mat,
    pub rho: Mat,
    pub prior_std: f64,
}

/// `softplus⁻¹(y) = ln(exp(y) − 1)`.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn check_prior(prior_std: f64) -> Result<()> {
    if !(prior_std > 0.0) || !prior_std.is_finite() {
        return Err(Error::config("prior_std", format!("must be positive, got {prior_std}")));
    }
    Ok(())
}

impl MeanFieldTensor {
    pub fn new(mu: Mat, rho: Mat, prior_std: f64) -> Result<Self> {
        check_prior(prior_std)?;
        if mu.dim() != rho.dim() {
            return Err(Error::Dimension(format!(
                "mean {:?} and scale {:?} shapes differ",
                mu.dim(),
                rho.dim()
            )));
        }
        Ok(Self { mu, rho, prior_std })
    }

    /// Block centred on `mu` with scale `prior_std / 10`.
    pub fn from_mean(mu: Mat, prior_std: f64) -> Result<Self> {
        check_prior(prior_std)?;
        let rho = Mat::from_elem(mu.dim(), inverse_softplus(prior_std / 10.0));
        Ok(Self { mu, rho, prior_std })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mu.dim()
    }

    pub fn scale(&self) -> Mat {
        self.rho.mapv(softplus)
    }

    pub fn draw_eps<R: Rng + ?Sized>(&self, rng: &mut R) -> Mat {
        draw_standard_normal(rng, self.shape())
    }
}

pub fn draw_standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize)) -> Mat {
    Mat::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// `mu + softplus(rho) ⊙ eps`.
pub fn sample_mean_field(mf: &MeanFieldTensor, eps: &Mat) -> Result<Mat> {
    if eps.dim() != mf.shape() {
        return Err(Error::Dimension(format!(
            "noise {:?} does not match block {:?}",
            eps.dim(),
            mf.shape()
        )));
    }
    let mut out = mf.mu.clone();
    ndarray::Zip::from(&mut out)
        .and(&mf.rho)
        .and(eps)
        .for_each(|o, &r, &e| *o += softplus(r) * e);
    Ok(out)
}

fn kl_element(mu: f64, s: f64, p: f64) -> f64 {
    (p / s).ln() + (s * s + mu * mu) / (2.0 * p * p) - 0.5
}

/// `Σ_i KL(N(mu_i, s_i²) ‖ N(0, prior_std²))`.
pub fn kl_mean_field(mf: &MeanFieldTensor) -> Result<f64> {
    check_prior(mf.prior_std)?;
    if !mf.mu.iter().chain(mf.rho.iter()).all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite variational parameter".into()));
    }
    Ok(mf
        .mu
        .iter()
        .zip(mf.rho.iter())
        .map(|(&m, &r)| kl_element(m, softplus(r), mf.prior_std))
        .sum())
}

/// Analytic gradient of [`kl_mean_field`] with respect to `(mu, rho)`.
pub fn kl_mean_field_grad(mf: &MeanFieldTensor) -> (Mat, Mat) {
    let p2 = mf.prior_std * mf.prior_std;
    let gmu = mf.mu.mapv(|m| m / p2);
    let grho = mf.rho.mapv(|r| {
        let s = softplus(r);
        let ds = crate::autograd::sigmoid_f(r);
        (-1.0 / s + s / p2) * ds
    });
    (gmu, grho)
}

/// `input · W + b` with one realization of `(W, b)` for the whole call.
pub fn bayesian_dense_forward<R: Rng + ?Sized>(
    input: &Mat,
    weight: &MeanFieldTensor,
    bias: &MeanFieldTensor,
    rng: &mut R,
) -> Result<Mat> {
    let (fan_in, fan_out) = weight.shape();
    if input.ncols() != fan_in || bias.shape() != (1, fan_out) {
        return Err(Error::Dimension(format!(
            "input {:?}, weight {:?}, bias {:?}",
            input.dim(),
            weight.shape(),
            bias.shape()
        )));
    }
    let w = sample_mean_field(weight, &weight.draw_eps(rng))?;
    let b = sample_mean_field(bias, &bias.draw_eps(rng))?;
    Ok(input.dot(&w) + &b)
}

/// Realized block `mu + softplus(rho) ⊙ eps` on the tape.
pub(crate) fn sample_graph(tape: &mut Tape, mu: Var, rho: Var, eps: Mat) -> Var {
    let s = tape.softplus(rho);
    let e = tape.constant(eps);
    let noise = tape.mul(s, e);
    tape.add(mu, noise)
}

/// Mean-field KL on the tape.
pub(crate) fn kl_graph(tape: &mut Tape, mu: Var, rho: Var, prior_std: f64) -> Var {
    let n = tape.shape(mu).0 * tape.shape(mu).1;
    let p2 = prior_std * prior_std;
    let s = tape.softplus(rho);
    let ln_s = tape.ln(s);
    let ln_s = tape.sum(ln_s);
    let s2 = tape.square(s);
    let m2 = tape.square(mu);
    let q = tape.add(s2, m2);
    let q = tape.sum(q);
    let q = tape.scale(q, 1.0 / (2.0 * p2));
    let t = tape.sub(q, ln_s);
    tape.offset(t, n as f64 * (prior_std.ln() - 0.5))
}
