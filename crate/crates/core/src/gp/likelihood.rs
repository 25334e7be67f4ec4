//! Bernoulli likelihood with a logistic link, integrated against Gaussian
//! latent marginals by Gauss–Hermite quadrature.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::sigmoid_f;
use crate::error::{Error, Result};

/// Default number of quadrature nodes.
pub const DEFAULT_QUADRATURE_NODES: usize = 20;

/// Nodes and weights of `∫ e^{−t²} g(t) dt ≈ Σ_k w_k g(t_k)`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5; // π^(−1/4)
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 1.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 3e-14 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Quadrature rule for expectations under a standard normal:
/// `E[g(ε)] ≈ Σ_k a_k g(b_k)` with `b_k = √2 t_k`, `a_k = w_k / √π`.
#[derive(Clone, Debug)]
pub struct NormalQuadrature {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl NormalQuadrature {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("gp.quadrature_nodes", "must be at least 1"));
        }
        let (t, w) = gauss_hermite(n);
        let sqrt_pi = std::f64::consts::PI.sqrt();
        Ok(Self {
            points: t.iter().map(|v| v * std::f64::consts::SQRT_2).collect(),
            weights: w.iter().map(|v| v / sqrt_pi).collect(),
        })
    }

    pub fn expect(&self, mean: f64, std: f64, g: impl Fn(f64) -> f64) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(b, a)| a * g(mean + std * b))
            .sum()
    }
}

/// Monte Carlo class-1 probabilities: `σ(f_s)` for `f_s ~ N(μ, s²)`.
pub fn bernoulli_predict<R: Rng + ?Sized>(
    latent_mean: f64,
    latent_var: f64,
    samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(latent_var >= 0.0) || !latent_mean.is_finite() || !latent_var.is_finite() {
        return Err(Error::Numeric(format!(
            "invalid latent marginal N({latent_mean}, {latent_var})"
        )));
    }
    if samples == 0 {
        return Err(Error::config("predict.mc_samples", "must be at least 1"));
    }
    let sd = latent_var.sqrt();
    Ok((0..samples)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            sigmoid_f(latent_mean + sd * z)
        })
        .collect())
}

/// Predictive class-1 probabilities `∫ σ(f) N(f | μ, s²) df` by quadrature.
pub fn bernoulli_probability(means: &[f64], variances: &[f64]) -> Result<Vec<f64>> {
    bernoulli_probability_with(means, variances, &NormalQuadrature::new(DEFAULT_QUADRATURE_NODES)?)
}

pub fn bernoulli_probability_with(
    means: &[f64],
    variances: &[f64],
    quad: &NormalQuadrature,
) -> Result<Vec<f64>> {
    if means.len() != variances.len() {
        return Err(Error::Dimension(format!(
            "{} means but {} variances",
            means.len(),
            variances.len()
        )));
    }
    means
        .iter()
        .zip(variances)
        .map(|(&m, &v)| {
            if !(v >= 0.0) || !m.is_finite() || !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "invalid latent marginal N({m}, {v})"
                )));
            }
            Ok(quad.expect(m, v.sqrt(), sigmoid_f).clamp(0.0, 1.0))
        })
        .collect()
}
