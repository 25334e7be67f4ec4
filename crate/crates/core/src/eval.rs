//! Evaluation of predictive samples: ranking metrics, confidence-filtered
//! curves, reliability bins, the per-outcome spread of predictive standard
//! deviations with the DIV statistic, and embedding entropy rankings.
//!
//! Every analysis works on the per-patient mean probability; the decision
//! rule is `mean > 0.5`.

use std::f64::consts::{E, PI};

use serde::{Deserialize, Serialize};

use crate::bayeslayers::MeanFieldTensor;
use crate::dbgp::PredictiveSamples;
use crate::error::{Error, Result};
use crate::synthdata::Vocabulary;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score {s}")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "ranking metrics need both classes ({pos} positive, {neg} negative)"
        )));
    }
    Ok((pos, neg))
}

/// Indices sorted by descending score, grouped into runs of equal scores.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Area under the ROC curve as the Mann–Whitney statistic with midranks.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut groups = tie_groups(scores);
    groups.reverse();
    let mut rank_sum = 0.0;
    let mut seen = 0usize;
    for g in &groups {
        let mid = seen as f64 + (g.len() as f64 + 1.0) / 2.0;
        rank_sum += mid * g.iter().filter(|&&i| labels[i] == 1).count() as f64;
        seen += g.len();
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Area under the precision-recall step curve, `Σ (R_k − R_{k−1}) P_k`, with
/// one step per distinct score.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check_inputs(scores, labels)?;
    let (mut tp, mut taken, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    for g in tie_groups(scores) {
        tp += g.iter().filter(|&&i| labels[i] == 1).count();
        taken += g.len();
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * tp as f64 / taken as f64;
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub auroc: f64,
    pub average_precision: f64,
}

pub fn ranking_metrics(samples: &PredictiveSamples) -> Result<RankingMetrics> {
    let means = samples.mean();
    Ok(RankingMetrics {
        auroc: auroc(&means, &samples.labels)?,
        average_precision: average_precision(&means, &samples.labels)?,
    })
}

fn predicted(p: f64) -> u8 {
    u8::from(p > 0.5)
}

/// Confidence of the predicted class, `max(p, 1 − p)`.
pub fn confidence(p: f64) -> f64 {
    p.max(1.0 - p)
}

/// `τ ∈ {0.50, 0.55, …, 0.95}`.
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

/// A metric evaluated on the patients whose confidence reaches each
/// threshold. `None` marks thresholds where the metric is undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceCurve {
    pub thresholds: Vec<f64>,
    pub values: Vec<Option<f64>>,
    pub retained: Vec<usize>,
}

/// Accuracy and AUROC curves over confidence thresholds.
pub fn confidence_curves(
    samples: &PredictiveSamples,
    thresholds: &[f64],
) -> Result<(ConfidenceCurve, ConfidenceCurve)> {
    for w in thresholds.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::config("report.thresholds", "thresholds must be strictly ascending"));
        }
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t >= 0.5 && **t < 1.0)) {
        return Err(Error::config("report.thresholds", format!("threshold {t} outside [0.5, 1)")));
    }
    let means = samples.mean();
    let (mut acc, mut roc, mut kept) = (Vec::new(), Vec::new(), Vec::new());
    for &t in thresholds {
        let idx: Vec<usize> = (0..means.len()).filter(|&i| confidence(means[i]) >= t).collect();
        kept.push(idx.len());
        if idx.is_empty() {
            acc.push(None);
            roc.push(None);
            continue;
        }
        let correct = idx
            .iter()
            .filter(|&&i| predicted(means[i]) == samples.labels[i])
            .count();
        acc.push(Some(correct as f64 / idx.len() as f64));
        let s: Vec<f64> = idx.iter().map(|&i| means[i]).collect();
        let l: Vec<u8> = idx.iter().map(|&i| samples.labels[i]).collect();
        roc.push(auroc(&s, &l).ok());
    }
    let curve = |values| ConfidenceCurve {
        thresholds: thresholds.to_vec(),
        values,
        retained: kept.clone(),
    };
    Ok((curve(acc), curve(roc)))
}

/// One equal-width reliability bin; means are `None` for empty bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_predicted: Option<f64>,
    pub positive_fraction: Option<f64>,
}

pub const DEFAULT_CALIBRATION_BINS: usize = 10;

/// Reliability curve on `[0, 1]`; bins are `[k/n, (k+1)/n)` except the last,
/// which also holds 1.
pub fn calibration_curve(samples: &PredictiveSamples, n_bins: usize) -> Result<Vec<CalibrationBin>> {
    if n_bins < 2 {
        return Err(Error::config("report.calibration_bins", "needs at least 2 bins"));
    }
    let means = samples.mean();
    let mut sum_p = vec![0.0; n_bins];
    let mut sum_y = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for (p, &y) in means.iter().zip(&samples.labels) {
        let k = ((p * n_bins as f64).floor().max(0.0) as usize).min(n_bins - 1);
        sum_p[k] += p;
        sum_y[k] += y as f64;
        count[k] += 1;
    }
    Ok((0..n_bins)
        .map(|k| {
            let c = count[k];
            CalibrationBin {
                lower: k as f64 / n_bins as f64,
                upper: (k + 1) as f64 / n_bins as f64,
                count: c,
                mean_predicted: (c > 0).then(|| sum_p[k] / c as f64),
                positive_fraction: (c > 0).then(|| sum_y[k] / c as f64),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    TrueNegative,
    FalseNegative,
}

impl Outcome {
    pub const ALL: [Outcome; 4] = [
        Outcome::TruePositive,
        Outcome::FalsePositive,
        Outcome::TrueNegative,
        Outcome::FalseNegative,
    ];

    pub fn of(mean: f64, label: u8) -> Self {
        match (predicted(mean), label) {
            (1, 1) => Outcome::TruePositive,
            (1, _) => Outcome::FalsePositive,
            (_, 1) => Outcome::FalseNegative,
            _ => Outcome::TrueNegative,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Outcome::TruePositive => "TP",
            Outcome::FalsePositive => "FP",
            Outcome::TrueNegative => "TN",
            Outcome::FalseNegative => "FN",
        }
    }
}

/// Predictive standard deviations grouped by outcome.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySplit {
    pub tp: Vec<f64>,
    pub fp: Vec<f64>,
    pub tn: Vec<f64>,
    #[serde(rename = "fn")]
    pub fn_: Vec<f64>,
}

/// Count and five-number summary of a group; quantiles are `None` when the
/// group is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub count: usize,
    pub min: Option<f64>,
    pub q1: Option<f64>,
    pub median: Option<f64>,
    pub q3: Option<f64>,
    pub max: Option<f64>,
    pub mean: Option<f64>,
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

pub fn summarize(values: &[f64]) -> GroupSummary {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    GroupSummary {
        count: v.len(),
        min: v.first().copied(),
        q1: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        q3: quantile(&v, 0.75),
        max: v.last().copied(),
        mean: (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64),
    }
}

impl UncertaintySplit {
    pub fn group(&self, o: Outcome) -> &[f64] {
        match o {
            Outcome::TruePositive => &self.tp,
            Outcome::FalsePositive => &self.fp,
            Outcome::TrueNegative => &self.tn,
            Outcome::FalseNegative => &self.fn_,
        }
    }

    pub fn len(&self) -> usize {
        self.tp.len() + self.fp.len() + self.tn.len() + self.fn_.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn summaries(&self) -> Vec<(Outcome, GroupSummary)> {
        Outcome::ALL.iter().map(|&o| (o, summarize(self.group(o)))).collect()
    }
}

pub fn uncertainty_split(samples: &PredictiveSamples) -> UncertaintySplit {
    let mut split = UncertaintySplit::default();
    for ((m, s), &y) in samples.mean().into_iter().zip(samples.std()).zip(&samples.labels) {
        match Outcome::of(m, y) {
            Outcome::TruePositive => split.tp.push(s),
            Outcome::FalsePositive => split.fp.push(s),
            Outcome::TrueNegative => split.tn.push(s),
            Outcome::FalseNegative => split.fn_.push(s),
        }
    }
    split
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Positive,
    Negative,
}

/// `KL(N(m_p, s_p²) ‖ N(m_q, s_q²))`.
pub fn gaussian_kl(m_p: f64, s_p: f64, m_q: f64, s_q: f64) -> f64 {
    (s_q / s_p).ln() + (s_p * s_p + (m_p - m_q).powi(2)) / (2.0 * s_q * s_q) - 0.5
}

/// Sample mean and ddof-1 standard deviation.
fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let ss: f64 = v.iter().map(|x| (x - m) * (x - m)).sum();
    (m, (ss / (n - 1.0)).sqrt())
}

/// KL divergence from the Gaussian fitted to the incorrect group's stds to
/// the one fitted to the correct group's. On the negative side, false
/// negatives take the role of false positives and true negatives that of
/// true positives.
pub fn div_metric(split: &UncertaintySplit, side: Side) -> Result<f64> {
    let (wrong, right) = match side {
        Side::Positive => (Outcome::FalsePositive, Outcome::TruePositive),
        Side::Negative => (Outcome::FalseNegative, Outcome::TrueNegative),
    };
    let mut fitted = Vec::with_capacity(2);
    for o in [wrong, right] {
        let g = split.group(o);
        if g.len() < 2 {
            return Err(Error::UndefinedMetric(format!(
                "DIV needs at least 2 {} patients, found {}",
                o.short(),
                g.len()
            )));
        }
        let (m, s) = moments(g);
        if !(s > 0.0) {
            return Err(Error::UndefinedMetric(format!(
                "the {} stds have zero sample variance",
                o.short()
            )));
        }
        fitted.push((m, s));
    }
    Ok(gaussian_kl(fitted[0].0, fitted[0].1, fitted[1].0, fitted[1].1))
}

/// Total entropy of one code's embedding distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenEntropy {
    pub token: String,
    pub id: u32,
    /// `Σ_d ½ ln(2πe s_d²)`; `−∞` when some scale is zero.
    pub entropy: f64,
    pub degenerate: bool,
}

/// Code tokens ordered by ascending entropy (ties by id).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyRanking {
    pub entries: Vec<TokenEntropy>,
}

impl EntropyRanking {
    /// Zero-based rank of a token id, if it is a ranked code.
    pub fn rank_of(&self, id: u32) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }
}

/// Entropy of a diagonal Gaussian with the given scales.
pub fn diagonal_gaussian_entropy(scales: impl IntoIterator<Item = f64>) -> f64 {
    let c = 0.5 * (2.0 * PI * E).ln();
    scales.into_iter().map(|s| c + s.ln()).sum()
}

/// Ranks the code rows of a stochastic embedding table by entropy.
pub fn embedding_entropy(block: &MeanFieldTensor, vocab: &Vocabulary) -> Result<EntropyRanking> {
    if block.mu.nrows() != vocab.size() {
        return Err(Error::Dimension(format!(
            "embedding table has {} rows for a vocabulary of {}",
            block.mu.nrows(),
            vocab.size()
        )));
    }
    let scales = block.scale();
    let mut entries = Vec::with_capacity(vocab.n_codes());
    for (id, row) in scales.rows().into_iter().enumerate() {
        let id = id as u32;
        if !vocab.is_code(id) {
            continue;
        }
        let degenerate = row.iter().any(|&s| s <= 0.0);
        let entropy = if degenerate {
            f64::NEG_INFINITY
        } else {
            diagonal_gaussian_entropy(row.iter().copied())
        };
        if entropy.is_nan() {
            return Err(Error::Numeric(format!("entropy of token {id} is NaN")));
        }
        entries.push(TokenEntropy {
            token: vocab.token(id).unwrap_or_default().to_string(),
            id,
            entropy,
            degenerate,
        });
    }
    entries.sort_by(|a, b| a.entropy.total_cmp(&b.entropy).then(a.id.cmp(&b.id)));
    Ok(EntropyRanking { entries })
}
