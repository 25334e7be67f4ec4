//! Monte Carlo predictive sampling and mean-weight probabilities.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{composite_forward_with, head_from_pooled, pooled_features, HeadOutput, ModelState, WeightDraw};
use crate::autograd::sigmoid_f;
use crate::error::{Error, Result};
use crate::gp::likelihood::bernoulli_probability_with;
use crate::gp::svgp::VARIANCE_FLOOR;
use crate::linalg::Mat;
use crate::rng::{domain, hash_str, substream};
use crate::synthdata::PatientRecord;

/// Patients per forward pass at prediction time.
pub const PREDICT_CHUNK: usize = 256;

/// `n × S` predictive probabilities with the patients' labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSamples {
    pub patient_ids: Vec<String>,
    pub labels: Vec<u8>,
    pub probs: Mat,
}

impl PredictiveSamples {
    pub fn n_patients(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.probs.ncols()
    }

    /// Row means.
    pub fn mean(&self) -> Vec<f64> {
        self.probs.rows().into_iter().map(|r| r.sum() / r.len() as f64).collect()
    }

    /// Row standard deviations (ddof 1; zero for a single draw), computed
    /// on values shifted by the first draw so identical draws give exactly 0.
    pub fn std(&self) -> Vec<f64> {
        self.probs
            .rows()
            .into_iter()
            .map(|r| {
                let s = r.len();
                if s < 2 {
                    return 0.0;
                }
                let (sum, sum_sq) = r.iter().fold((0.0, 0.0), |(a, b), p| {
                    let d = p - r[0];
                    (a + d, b + d * d)
                });
                ((sum_sq - sum * sum / s as f64).max(0.0) / (s - 1) as f64).sqrt()
            })
            .collect()
    }
}

fn forward_chunks(state: &ModelState, records: &[&PatientRecord], draw: &WeightDraw) -> Result<HeadOutput> {
    let parts = records
        .chunks(PREDICT_CHUNK)
        .map(|chunk| composite_forward_with(state, chunk, draw))
        .collect::<Result<Vec<_>>>()?;
    Ok(merge(state, parts))
}

fn merge(state: &ModelState, parts: Vec<HeadOutput>) -> HeadOutput {
    let mut logits = Vec::new();
    let (mut means, mut vars) = (Vec::new(), Vec::new());
    for p in parts {
        match p {
            HeadOutput::Logits(z) => logits.extend(z),
            HeadOutput::Latent { mean, var } => {
                means.extend(mean);
                vars.extend(var);
            }
        }
    }
    if state.variant.has_gp_head() {
        HeadOutput::Latent { mean: means, var: vars }
    } else {
        HeadOutput::Logits(logits)
    }
}

fn head_chunks(state: &ModelState, pooled: &Mat, draw: &WeightDraw) -> Result<HeadOutput> {
    let mut parts = Vec::new();
    for chunk in pooled.axis_chunks_iter(ndarray::Axis(0), PREDICT_CHUNK) {
        parts.push(head_from_pooled(state, &chunk.to_owned(), draw)?);
    }
    Ok(merge(state, parts))
}

fn pooled_chunks(state: &ModelState, records: &[&PatientRecord]) -> Result<Mat> {
    let mut rows = Vec::new();
    for chunk in records.chunks(PREDICT_CHUNK) {
        rows.push(pooled_features(state, chunk, &WeightDraw::Mean)?);
    }
    let views: Vec<_> = rows.iter().map(|m| m.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Dimension(e.to_string()))
}

/// Mean-weight predictive probabilities: `σ(logit)` for dense heads and
/// `∫ σ(f) N(f | μ, s²) df` for GP heads.
pub fn predict_mean_probability(state: &ModelState, records: &[&PatientRecord]) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    match forward_chunks(state, records, &WeightDraw::Mean)? {
        HeadOutput::Logits(z) => Ok(z.into_iter().map(sigmoid_f).collect()),
        HeadOutput::Latent { mean, var } => bernoulli_probability_with(&mean, &var, &state.quadrature()?),
    }
}

/// `S` predictive draws per patient. Every draw realizes all stochastic
/// weights once (shared by the whole dataset) and, for GP heads, one latent
/// value per patient from a stream keyed by the patient id, so results do
/// not depend on the order of `records`.
pub fn mc_predict(state: &ModelState, records: &[&PatientRecord], s: usize, seed: u64) -> Result<PredictiveSamples> {
    if s == 0 {
        return Err(Error::config("predict.samples", "at least one draw is required"));
    }
    let n = records.len();
    let mut probs = Mat::zeros((n, s));
    if n > 0 {
        // the encoder is deterministic unless the embeddings are stochastic
        let cached_pool = if state.variant.embedding_stochastic() {
            None
        } else {
            Some(pooled_chunks(state, records)?)
        };
        let mut fixed: Option<HeadOutput> = None;
        for d in 0..s {
            let out = match &fixed {
                Some(h) => h.clone(),
                None => {
                    let draw = if state.variant.has_stochastic_weights() {
                        WeightDraw::sample(state, &mut substream(seed, &[domain::PREDICT_WEIGHTS, d as u64]))
                    } else {
                        WeightDraw::Mean
                    };
                    let o = match &cached_pool {
                        Some(pool) => head_chunks(state, pool, &draw)?,
                        None => forward_chunks(state, records, &draw)?,
                    };
                    if !state.variant.has_stochastic_weights() {
                        fixed = Some(o.clone());
                    }
                    o
                }
            };
            match &out {
                HeadOutput::Logits(z) => {
                    for (i, &zi) in z.iter().enumerate() {
                        probs[[i, d]] = sigmoid_f(zi);
                    }
                }
                HeadOutput::Latent { mean, var } => {
                    for i in 0..n {
                        let key = hash_str(&records[i].patient_id);
                        let mut rng = substream(seed, &[domain::PREDICT_LATENT, key, d as u64]);
                        let z: f64 = StandardNormal.sample(&mut rng);
                        // a variance at the numerical floor is a point mass
                        let sd = if var[i] > VARIANCE_FLOOR { var[i].sqrt() } else { 0.0 };
                        probs[[i, d]] = sigmoid_f(mean[i] + sd * z);
                    }
                }
            }
        }
    }
    Ok(PredictiveSamples {
        patient_ids: records.iter().map(|r| r.patient_id.clone()).collect(),
        labels: records.iter().map(|r| r.label).collect(),
        probs,
    })
}
