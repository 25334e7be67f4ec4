use std::collections::BTreeMap;

use approx::assert_abs_diff_eq;
use dbgp_core::autograd::log_sigmoid;
use dbgp_core::bayeslayers::kl_mean_field;
use dbgp_core::dbgp::*;
use dbgp_core::encoder::{names, EncoderConfig};
use dbgp_core::error::Error;
use dbgp_core::gp::{bernoulli_elbo, kl_whitened};
use dbgp_core::params::{GradMap, ParamStore};
use dbgp_core::rng::substream;
use dbgp_core::synthdata::{generate_cohort, Cohort, CohortConfig, PatientRecord};
use ndarray::Array2;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            max_sequence_length: 64,
            hidden_size: 12,
            n_layers: 1,
            n_heads: 2,
            intermediate_size: 16,
            dropout: 0.1,
            pool_size_dense: 12,
            pool_size_gp: 6,
        },
        gp: GpConfig {
            grid_size: 8,
            n_inducing: 10,
            ..GpConfig::default()
        },
        ..ModelConfig::default()
    }
}

fn tiny_cohort(n: usize, noise: f64, seed: u64) -> Cohort {
    generate_cohort(&CohortConfig {
        n_patients: n,
        positive_rate: 0.3,
        n_codes: 30,
        noise_rate: noise,
        seed,
        max_sequence_length: 64,
        ..CohortConfig::default()
    })
    .unwrap()
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 16,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    }
}

/// Moves q(u) off the prior so the GP fit depends on its inputs.
fn perturb_posterior_mean(state: &mut ModelState, seed: u64) {
    let m = state.n_inducing();
    let mut rng = substream(seed, &[2]);
    *state.params.get_mut(head_names::MEAN).unwrap() =
        Array2::from_shape_fn((m, 1), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
}

fn sample_draw(state: &ModelState, seed: u64) -> WeightDraw {
    WeightDraw::sample(state, &mut substream(seed, &[99]))
}

#[test]
fn gradients_match_finite_differences_for_every_variant() {
    let cohort = tiny_cohort(60, 0.1, 3);
    let train = training_records(&cohort.records);
    let batch: Vec<_> = train.iter().take(16).copied().collect();
    for v in ModelVariant::ALL {
        let state = init_model(v, &tiny_config(), &cohort.vocabulary, train.len(), None, 5).unwrap();
        let r = finite_difference_grad_check(&state, &batch, None, &GradCheckOptions::default()).unwrap();
        assert!(r.n_checked > 0);
        assert!(r.max_rel_error < 1e-4, "{v}: {:?}", r.per_block);
    }
}

#[test]
fn quadratic_gradient_check_is_exact() {
    let mut store = ParamStore::new();
    store.insert("a", Array2::from_shape_vec((2, 2), vec![0.3, -1.2, 2.0, 0.7]).unwrap());
    let value = |s: &ParamStore| {
        let a = s.get("a").unwrap();
        Ok((a.iter().enumerate().map(|(i, x)| (i + 1) as f64 * x * x).sum::<f64>(), 0))
    };
    let a = store.get("a").unwrap();
    let mut grads = GradMap::new();
    grads.insert("a".into(), Array2::from_shape_fn((2, 2), |(i, j)| 2.0 * (2 * i + j + 1) as f64 * a[[i, j]]));
    let opts = GradCheckOptions {
        coords_per_block: 4,
        ..Default::default()
    };
    let r = finite_difference_check(&store, &grads, &["a".to_string()], &opts, value).unwrap();
    assert_eq!(r.n_checked, 4);
    assert!(r.max_rel_error < 1e-10, "{}", r.max_rel_error);

    grads.get_mut("a").unwrap()[[1, 0]] *= 1.5;
    let r = finite_difference_check(&store, &grads, &["a".to_string()], &opts, value).unwrap();
    assert!(r.max_rel_error > 0.1);
    assert_eq!(r.worst_block().unwrap().0, "a");
}

#[test]
fn grid_head_objective_is_the_gp_objective() {
    let cohort = tiny_cohort(80, 0.1, 4);
    let train = training_records(&cohort.records);
    let batch: Vec<_> = train.iter().take(20).copied().collect();
    let mut state = init_model(ModelVariant::KissGp, &tiny_config(), &cohort.vocabulary, batch.len(), None, 6).unwrap();
    perturb_posterior_mean(&mut state, 2);
    let value = dbgp_elbo(&state, &batch, &WeightDraw::Mean).unwrap();
    let x = latent_inputs(&state, &batch, &WeightDraw::Mean).unwrap();
    let labels: Vec<u8> = batch.iter().map(|r| r.label).collect();
    let gp = bernoulli_elbo(
        &state.variational_state().unwrap(),
        &state.inducing_set().unwrap(),
        x.view(),
        &labels,
        &state.kernel_params().unwrap(),
        &state.quadrature().unwrap(),
    )
    .unwrap();
    assert_abs_diff_eq!(value.kl_scale, 1.0);
    assert!(value.kl > 0.0);
    assert_abs_diff_eq!(value.objective, gp, epsilon = 1e-9 * gp.abs());
    assert_abs_diff_eq!(value.kl, kl_whitened(&state.variational_state().unwrap()).unwrap(), epsilon = 1e-9);
}

/// KISS_GP state carrying the DBGP state's means as plain tables.
fn collapse_to_grid_model(dbgp: &ModelState, vocab: &dbgp_core::synthdata::Vocabulary) -> ModelState {
    let mut kiss = init_model(ModelVariant::KissGp, &dbgp.config, vocab, dbgp.n_train, None, 0).unwrap();
    for (name, value) in dbgp.params.iter() {
        if let Some(base) = name.strip_suffix(".mu") {
            *kiss.params.get_mut(base).unwrap() = value.clone();
        } else if !name.ends_with(".rho") {
            *kiss.params.get_mut(name).unwrap() = value.clone();
        }
    }
    kiss
}

#[test]
fn vanishing_scales_reduce_the_composite_objective() {
    let cohort = tiny_cohort(100, 0.1, 5);
    let train = training_records(&cohort.records);
    let batch: Vec<_> = train.iter().take(24).copied().collect();
    let mut state = init_model(ModelVariant::Dbgp, &tiny_config(), &cohort.vocabulary, train.len(), None, 7).unwrap();
    perturb_posterior_mean(&mut state, 3);
    let kiss = collapse_to_grid_model(&state, &cohort.vocabulary);
    let gp = dbgp_elbo(&kiss, &batch, &WeightDraw::Mean).unwrap().objective;
    let mut errors = Vec::new();
    for scale in [1e-2, 1e-4, 1e-6] {
        state.set_posterior_scale(scale).unwrap();
        let kl: f64 = state
            .stochastic_blocks()
            .iter()
            .map(|(b, _)| kl_mean_field(&state.mean_field(b).unwrap()).unwrap())
            .sum();
        let value = dbgp_elbo(&state, &batch, &sample_draw(&state, 3)).unwrap();
        let scaled = batch.len() as f64 / train.len() as f64;
        assert_abs_diff_eq!(value.kl_scale, scaled);
        let kl_u = kl_whitened(&state.variational_state().unwrap()).unwrap();
        assert_abs_diff_eq!(value.kl, kl + kl_u, epsilon = 1e-9 * kl);
        errors.push((value.objective - (gp - scaled * kl)).abs());
    }
    assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
    assert!(errors[2] < 1e-6 * gp.abs(), "{errors:?}");
}

#[test]
fn dense_objective_matches_an_independent_evaluation() {
    let cohort = tiny_cohort(60, 0.1, 6);
    let train = training_records(&cohort.records);
    let batch: Vec<_> = train.iter().take(12).copied().collect();
    for v in [ModelVariant::Be, ModelVariant::Bo, ModelVariant::BeBo, ModelVariant::Deterministic] {
        let state = init_model(v, &tiny_config(), &cohort.vocabulary, train.len(), None, 8).unwrap();
        let draw = if v.has_stochastic_weights() { sample_draw(&state, 4) } else { WeightDraw::Mean };
        let HeadOutput::Logits(z) = composite_forward_with(&state, &batch, &draw).unwrap() else {
            panic!("{v} should emit logits");
        };
        let fit: f64 = z
            .iter()
            .zip(&batch)
            .map(|(z, r)| log_sigmoid(if r.label == 1 { *z } else { -z }))
            .sum();
        let kl: f64 = state
            .stochastic_blocks()
            .iter()
            .map(|(b, _)| kl_mean_field(&state.mean_field(b).unwrap()).unwrap())
            .sum();
        let value = dbgp_elbo(&state, &batch, &draw).unwrap();
        assert_abs_diff_eq!(value.fit, fit, epsilon = 1e-10);
        assert_abs_diff_eq!(value.kl, kl, epsilon = 1e-9);
        assert_abs_diff_eq!(value.objective, fit - value.kl_scale * kl, epsilon = 1e-9);
    }
}

#[test]
fn objective_is_finite_at_initialization() {
    let cohort = tiny_cohort(60, 0.1, 7);
    let train = training_records(&cohort.records);
    for v in ModelVariant::ALL {
        let state = init_model(v, &tiny_config(), &cohort.vocabulary, train.len(), None, 9).unwrap();
        let value = dbgp_elbo(&state, &train, &WeightDraw::Mean).unwrap();
        assert!(value.objective.is_finite() && value.fit < 0.0, "{v}: {value:?}");
        // q(u) starts at the prior
        assert_eq!(value.kl == 0.0, !v.has_stochastic_weights(), "{v}");
    }
}

#[test]
fn forward_pass_is_independent_of_batching() {
    let cohort = tiny_cohort(40, 0.1, 8);
    let all: Vec<&PatientRecord> = cohort.records.iter().collect();
    for v in [ModelVariant::Dbgp, ModelVariant::BeBo] {
        let state = init_model(v, &tiny_config(), &cohort.vocabulary, 30, None, 10).unwrap();
        let draw = sample_draw(&state, 5);
        let whole = composite_forward_with(&state, &all, &draw).unwrap();
        let mut parts = Vec::new();
        for chunk in all.chunks(7) {
            parts.push(composite_forward_with(&state, chunk, &draw).unwrap());
        }
        let flat = |h: &HeadOutput| match h {
            HeadOutput::Logits(z) => z.clone(),
            HeadOutput::Latent { mean, var } => mean.iter().chain(var).copied().collect(),
        };
        let joined: Vec<f64> = match &whole {
            HeadOutput::Logits(_) => parts.iter().flat_map(flat).collect(),
            HeadOutput::Latent { .. } => {
                let means = parts.iter().flat_map(|p| match p {
                    HeadOutput::Latent { mean, .. } => mean.clone(),
                    _ => unreachable!(),
                });
                let vars = parts.iter().flat_map(|p| match p {
                    HeadOutput::Latent { var, .. } => var.clone(),
                    _ => unreachable!(),
                });
                means.chain(vars).collect()
            }
        };
        for (a, b) in flat(&whole).iter().zip(&joined) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}

#[test]
fn predictions_follow_patients_not_positions() {
    let cohort = tiny_cohort(30, 0.1, 9);
    let records: Vec<&PatientRecord> = cohort.records.iter().collect();
    let mut reversed = records.clone();
    reversed.reverse();
    for v in [ModelVariant::Dbgp, ModelVariant::WhitenedGp, ModelVariant::Bo] {
        let state = init_model(v, &tiny_config(), &cohort.vocabulary, 20, None, 11).unwrap();
        let a = mc_predict(&state, &records, 5, 3).unwrap();
        let b = mc_predict(&state, &reversed, 5, 3).unwrap();
        let by_id: BTreeMap<_, _> = b.patient_ids.iter().zip(b.probs.rows()).collect();
        for (id, row) in a.patient_ids.iter().zip(a.probs.rows()) {
            for (x, y) in row.iter().zip(by_id[id].iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn predictive_sampling_is_reproducible() {
    let cohort = tiny_cohort(30, 0.1, 10);
    let records: Vec<&PatientRecord> = cohort.records.iter().collect();
    let state = init_model(ModelVariant::Dbgp, &tiny_config(), &cohort.vocabulary, 20, None, 12).unwrap();
    let a = mc_predict(&state, &records, 4, 1).unwrap();
    assert_eq!(a, mc_predict(&state, &records, 4, 1).unwrap());
    assert_ne!(a.probs, mc_predict(&state, &records, 4, 2).unwrap().probs);
    assert_eq!((a.n_patients(), a.n_samples()), (30, 4));
    assert!(a.probs.iter().all(|p| (0.0..=1.0).contains(p)));
    assert!(a.std().iter().all(|s| *s > 0.0));
    assert!(matches!(mc_predict(&state, &records, 0, 1), Err(Error::Config { .. })));
}

#[test]
fn deterministic_baseline_has_point_mass_predictions() {
    let cohort = tiny_cohort(30, 0.1, 11);
    let records: Vec<&PatientRecord> = cohort.records.iter().collect();
    let state = init_model(ModelVariant::Deterministic, &tiny_config(), &cohort.vocabulary, 20, None, 13).unwrap();
    let s = mc_predict(&state, &records, 30, 1).unwrap();
    assert!(s.std().iter().all(|&v| v == 0.0));
    let p = predict_mean_probability(&state, &records).unwrap();
    for (a, b) in s.mean().iter().zip(&p) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-15);
    }
}

#[test]
fn zero_epochs_return_the_initial_state() {
    let cohort = tiny_cohort(60, 0.1, 12);
    let cfg = TrainConfig {
        epochs: 0,
        ..tiny_train()
    };
    let out = train(&cohort.records, &cohort.vocabulary, ModelVariant::Be, &tiny_config(), &cfg, None).unwrap();
    let train_set = training_records(&cohort.records);
    let fresh = init_model(ModelVariant::Be, &tiny_config(), &cohort.vocabulary, train_set.len(), None, cfg.seed).unwrap();
    assert_eq!(out.state, fresh);
    assert!(out.log.is_empty() && out.best_epoch.is_none());
}

#[test]
fn training_is_deterministic_and_logs_every_epoch() {
    let cohort = tiny_cohort(80, 0.0, 13);
    let cfg = TrainConfig {
        kl_delay_epochs: 1,
        kl_warmup_epochs: 0,
        patience: 0,
        ..tiny_train()
    };
    let a = train(&cohort.records, &cohort.vocabulary, ModelVariant::Dbgp, &tiny_config(), &cfg, None).unwrap();
    let b = train(&cohort.records, &cohort.vocabulary, ModelVariant::Dbgp, &tiny_config(), &cfg, None).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 2);
    assert_eq!((a.log[0].kl_weight, a.log[1].kl_weight), (0.0, 1.0));
    assert_eq!(a.best_epoch, Some(1));
    assert!(a.log.iter().all(|m| m.objective.is_finite() && m.val_auroc.is_some()));
}

#[test]
fn kl_schedule_delays_then_ramps() {
    let cfg = TrainConfig {
        kl_delay_epochs: 2,
        kl_warmup_epochs: 4,
        ..TrainConfig::default()
    };
    let w: Vec<f64> = (0..8).map(|e| cfg.kl_weight(e)).collect();
    assert_eq!(w, vec![0.0, 0.0, 0.0, 0.25, 0.5, 0.75, 1.0, 1.0]);
    assert_eq!(TrainConfig::default().kl_weight(0), 1.0);
    let bad = TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config { .. })));
}

#[test]
fn checkpoints_round_trip_and_reject_bad_shapes() {
    let cohort = tiny_cohort(30, 0.1, 14);
    for v in ModelVariant::ALL {
        let state = init_model(v, &tiny_config(), &cohort.vocabulary, 20, None, 15).unwrap();
        let text = checkpoint_to_string(&state).unwrap();
        assert_eq!(checkpoint_from_str(&text).unwrap(), state, "{v}");
    }
    let state = init_model(ModelVariant::Dbgp, &tiny_config(), &cohort.vocabulary, 20, None, 15).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_checkpoint(&state, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), state);

    let mut broken = state.clone();
    broken.params.insert(names::rho(names::CODE), Array2::zeros((2, 2)));
    let text = checkpoint_to_string(&broken).unwrap();
    assert!(matches!(checkpoint_from_str(&text), Err(Error::Checkpoint(_))));
    let mut missing = state.clone();
    missing.params.remove(head_names::MEAN);
    assert!(matches!(checkpoint_from_str(&checkpoint_to_string(&missing).unwrap()), Err(Error::Checkpoint(_))));
    assert!(checkpoint_from_str("{\"format\":\"other\",\"version\":1}").is_err());
    assert!(matches!(load_checkpoint(&dir.path().join("absent.json")), Err(Error::Io { .. })));
}

#[test]
fn pretrained_weights_must_match_the_encoder() {
    let cohort = tiny_cohort(30, 0.1, 15);
    let mut store = ParamStore::new();
    store.insert(names::CODE, Array2::zeros((3, 3)));
    let err = init_model(ModelVariant::Be, &tiny_config(), &cohort.vocabulary, 20, Some(&store), 1);
    assert!(matches!(err, Err(Error::Checkpoint(_))));
}

#[test]
fn variants_expose_their_structure() {
    assert_eq!(ModelVariant::PROBABILISTIC.len(), 6);
    assert!(ModelVariant::Dbgp.embedding_stochastic() && ModelVariant::Dbgp.has_gp_head());
    assert!(!ModelVariant::KissGp.has_stochastic_weights());
    assert!(!ModelVariant::Deterministic.is_probabilistic());
    assert_eq!("be+bo".parse::<ModelVariant>().unwrap(), ModelVariant::BeBo);
    assert!("nope".parse::<ModelVariant>().is_err());
}
