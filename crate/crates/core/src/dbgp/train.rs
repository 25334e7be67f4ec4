//! Stochastic-gradient training of a model variant with per-epoch
//! validation and early stopping.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{
    init_inducing_from_data, init_model, objective_graph, training_records, validation_records, ModelConfig,
    ModelState, WeightDraw,
};
use super::predict::predict_mean_probability;
use super::variant::ModelVariant;
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::eval::auroc;
use crate::optim::Adam;
use crate::params::{Binder, GradMap, ParamStore};
use crate::rng::{domain, substream};
use crate::synthdata::{PatientRecord, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight draws averaged per optimization step.
    pub mc_train_samples: usize,
    pub seed: u64,
    /// Leading epochs trained on the likelihood alone.
    pub kl_delay_epochs: usize,
    /// Epochs over which the KL weight then ramps linearly from 0 up to 1;
    /// 0 disables the ramp.
    pub kl_warmup_epochs: usize,
    /// Epochs without a validation improvement before stopping; 0 disables
    /// early stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 256,
            learning_rate: 1e-3,
            mc_train_samples: 1,
            seed: 1,
            kl_delay_epochs: 0,
            kl_warmup_epochs: 0,
            patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.mc_train_samples == 0 {
            return Err(Error::config("train.mc_train_samples", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive and finite"));
        }
        Ok(())
    }

    /// KL weight used during `epoch`: 0 for the first `kl_delay_epochs`
    /// epochs, then a linear ramp over `kl_warmup_epochs` epochs up to 1.
    pub fn kl_weight(&self, epoch: usize) -> f64 {
        if epoch < self.kl_delay_epochs {
            0.0
        } else if self.kl_warmup_epochs == 0 {
            1.0
        } else {
            (epoch.saturating_sub(self.kl_delay_epochs) as f64 / self.kl_warmup_epochs as f64).min(1.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-patient objective over the epoch's steps.
    pub objective: f64,
    /// Mean per-patient expected log-likelihood.
    pub fit: f64,
    /// Mean unscaled KL of the epoch's steps.
    pub kl: f64,
    pub kl_weight: f64,
    /// `None` when the validation split lacks one of the classes.
    pub val_auroc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub log: Vec<EpochMetrics>,
    /// Epoch whose parameters were kept, if validation was possible.
    pub best_epoch: Option<usize>,
}

/// Validation AUROC of the mean-weight predictive, `None` when undefined.
pub fn validation_auroc(state: &ModelState, records: &[&PatientRecord]) -> Result<Option<f64>> {
    if records.is_empty() {
        return Ok(None);
    }
    let probs = predict_mean_probability(state, records)?;
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    match auroc(&probs, &labels) {
        Ok(a) => Ok(Some(a)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn finite_grads(g: &GradMap) -> bool {
    g.values().all(|m| m.iter().all(|v| v.is_finite()))
}

fn accumulate(into: &mut GradMap, g: GradMap, scale: f64) {
    for (k, v) in g {
        match into.get_mut(&k) {
            Some(acc) => acc.scaled_add(scale, &v),
            None => {
                into.insert(k, v * scale);
            }
        }
    }
}

/// Trains `variant` on the training split of `records` and validates on the
/// validation split. Encoder blocks start from `pretrained` when given; the
/// pooler and classifier are always freshly initialized.
pub fn train(
    records: &[PatientRecord],
    vocab: &Vocabulary,
    variant: ModelVariant,
    model_config: &ModelConfig,
    config: &TrainConfig,
    pretrained: Option<&ParamStore>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_set = training_records(records);
    let val_set = validation_records(records);
    if train_set.is_empty() {
        return Err(Error::config("train", "dataset has no training split"));
    }
    let mut state = init_model(variant, model_config, vocab, train_set.len(), pretrained, config.seed)?;
    init_inducing_from_data(&mut state, &train_set, config.seed)?;
    let mut opt = Adam::new(config.learning_rate);
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 0..config.epochs {
        let epoch_start = state.clone();
        let kl_weight = config.kl_weight(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut substream(config.seed, &[domain::SHUFFLE, epoch as u64]));
        let (mut obj_sum, mut fit_sum, mut kl_sum, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&PatientRecord> = chunk.iter().map(|&i| train_set[i]).collect();
            let mut grads = GradMap::new();
            let s = config.mc_train_samples;
            let scale = -1.0 / (batch.len() * s) as f64;
            let mut dropout = substream(config.seed, &[domain::DROPOUT, epoch as u64, b as u64]);
            for k in 0..s {
                let draw = if state.variant.has_stochastic_weights() {
                    let mut rng = substream(config.seed, &[domain::WEIGHTS, epoch as u64, b as u64, k as u64]);
                    WeightDraw::sample(&state, &mut rng)
                } else {
                    WeightDraw::Mean
                };
                let mut tape = Tape::new();
                let mut binder = Binder::new();
                let step = objective_graph(&mut tape, &mut binder, &state, &batch, &draw, Some(&mut dropout), kl_weight)
                    .map(|g| {
                        let gr = tape.backward(g.total);
                        (g.value, binder.gradients(&tape, &gr))
                    });
                let (value, g) = match step {
                    Ok(v) => v,
                    Err(e @ (Error::Numeric(_) | Error::Extrapolation { .. })) => {
                        return Err(Error::Divergence {
                            epoch,
                            message: e.to_string(),
                            last_good: Box::new(epoch_start),
                        });
                    }
                    Err(e) => return Err(e),
                };
                if !value.objective.is_finite() || !finite_grads(&g) {
                    return Err(Error::Divergence {
                        epoch,
                        message: format!("non-finite objective or gradient in batch {b}"),
                        last_good: Box::new(epoch_start),
                    });
                }
                accumulate(&mut grads, g, scale);
                obj_sum += value.objective / s as f64;
                fit_sum += value.fit / s as f64;
                kl_sum += value.kl / s as f64;
            }
            opt.step(&mut state.params, &grads);
            steps += 1;
        }
        let val_auroc = validation_auroc(&state, &val_set)?;
        let n = train_set.len() as f64;
        let m = EpochMetrics {
            epoch,
            objective: obj_sum / n,
            fit: fit_sum / n,
            kl: kl_sum / steps.max(1) as f64,
            kl_weight,
            val_auroc,
        };
        log::info!(
            "{} epoch {epoch}: objective {:.5} val AUROC {}",
            state.variant,
            m.objective,
            val_auroc.map_or("undefined".to_string(), |a| format!("{a:.4}"))
        );
        log.push(m);
        // only epochs trained on the full objective are eligible; ties keep
        // the later epoch
        if let (Some(a), true) = (val_auroc, kl_weight >= 1.0) {
            if best.as_ref().is_none_or(|(top, _, _)| a >= *top) {
                best = Some((a, epoch, state.params.clone()));
            }
        }
        if config.patience > 0 {
            if let Some((_, at, _)) = &best {
                if epoch - at >= config.patience {
                    break;
                }
            }
        }
    }
    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, _, params)) = best {
        state.params = params;
    }
    Ok(TrainOutcome { state, log, best_epoch })
}
