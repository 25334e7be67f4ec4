//! The six pipeline commands.

use std::path::{Path, PathBuf};

use dbgp_core::dbgp::{
    checkpoint_from_str, checkpoint_to_string, mc_predict, train, validation_records, ModelState, PredictiveSamples,
};
use dbgp_core::encoder::{names, pretrain};
use dbgp_core::eval::{
    calibration_curve, confidence_curves, div_metric, embedding_entropy, ranking_metrics, uncertainty_split, Side,
};
use dbgp_core::params::ParamStore;
use dbgp_core::synthdata::{generate_cohort, read_dataset_with_limit, write_dataset, PatientRecord, Split, Vocabulary};
use dbgp_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::artifacts::{create_run_dir, digest_files, num, opt, read_field, Envelope, Table};
use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ENCODER_FILE: &str = "encoder.json";
pub const MODEL_FILE: &str = "model.json";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const SUMMARY_FILE: &str = "summary.json";

const DATA_FILES: [&str; 2] = [dbgp_core::synthdata::VOCAB_FILE, dbgp_core::synthdata::RECORDS_FILE];

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Generate,
    Pretrain,
    Train,
    Predict,
    Report,
    Repro,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Pretrain => "pretrain",
            Command::Train => "train",
            Command::Predict => "predict",
            Command::Report => "report",
            Command::Repro => "repro",
        }
    }
}

/// Executes `command` into a fresh run directory under `out` and returns it.
pub fn run(command: Command, config: &RunConfig, out: &Path) -> Result<PathBuf> {
    let dir = create_run_dir(out, command.name(), config)?;
    match command {
        Command::Generate => generate(config, &dir),
        Command::Pretrain => pretrain_encoder(config, &dir),
        Command::Train => train_model(config, &dir),
        Command::Predict => predict(config, &dir),
        Command::Report => report(config, &dir),
        Command::Repro => repro(config, &dir),
    }?;
    Ok(dir)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RiskCode {
    id: u32,
    token: String,
}

struct Dataset {
    vocab: Vocabulary,
    records: Vec<PatientRecord>,
    digest: String,
    risk_codes: Option<Vec<u32>>,
}

fn load_data(config: &RunConfig) -> Result<Dataset> {
    let dir = config.path("data")?;
    let (vocab, records) = read_dataset_with_limit(&dir, config.encoder.max_sequence_length)?;
    let manifest = dir.join(MANIFEST_FILE);
    let risk_codes = if manifest.exists() {
        let codes: Vec<RiskCode> = read_field(&manifest, "cohort", "risk_codes")?;
        Some(codes.into_iter().map(|c| c.id).collect())
    } else {
        None
    };
    Ok(Dataset {
        vocab,
        records,
        digest: digest_files(&dir, &DATA_FILES)?,
        risk_codes,
    })
}

fn load_model(config: &RunConfig) -> Result<(ModelState, String)> {
    let dir = config.path("checkpoint")?;
    let value: Value = read_field(&dir.join(MODEL_FILE), "model", "checkpoint")?;
    let state = checkpoint_from_str(&value.to_string())?;
    Ok((state, digest_files(&dir, &[MODEL_FILE])?))
}

fn generate(config: &RunConfig, dir: &Path) -> Result<()> {
    let cohort = generate_cohort(&config.cohort)?;
    write_dataset(dir, &cohort.vocabulary, &cohort.records)?;
    let risk: Vec<RiskCode> = cohort
        .risk_codes
        .iter()
        .map(|&id| RiskCode {
            id,
            token: cohort.vocabulary.token(id).unwrap_or_default().to_string(),
        })
        .collect();
    let count = |f: &dyn Fn(&PatientRecord) -> bool| cohort.records.iter().filter(|r| f(r)).count();
    Envelope::new("cohort", config, &[])
        .with("n_patients", cohort.records.len())?
        .with("n_train", count(&|r| r.split == Split::Train))?
        .with("n_validation", count(&|r| r.split == Split::Validation))?
        .with("n_positive", count(&|r| r.label == 1))?
        .with("risk_codes", risk)?
        .write(&dir.join(MANIFEST_FILE), true)
}

fn pretrain_encoder(config: &RunConfig, dir: &Path) -> Result<()> {
    let data = load_data(config)?;
    let (params, losses) = pretrain(&data.records, &data.vocab, &config.encoder, &config.pretrain)?;
    let mut log = Table::new(config, &["epoch", "masked_code_loss"]);
    for (e, l) in losses.iter().enumerate() {
        log.row(&[e.to_string(), num(*l)]);
    }
    log.write(&dir.join("pretrain_log.tsv"))?;
    Envelope::new("pretrained-encoder", config, &[("data", data.digest)])
        .with("losses", &losses)?
        .with("params", &params)?
        .write(&dir.join(ENCODER_FILE), false)
}

fn train_model(config: &RunConfig, dir: &Path) -> Result<()> {
    let data = load_data(config)?;
    let mut inputs = vec![("data", data.digest.clone())];
    let pretrained = match config.optional_path("pretrained") {
        Some(p) => {
            let params: ParamStore = read_field(&p.join(ENCODER_FILE), "pretrained-encoder", "params")?;
            inputs.push(("pretrained", digest_files(&p, &[ENCODER_FILE])?));
            Some(params)
        }
        None => None,
    };
    let outcome = train(
        &data.records,
        &data.vocab,
        config.variant,
        &config.model(),
        &config.train,
        pretrained.as_ref(),
    )?;
    let mut log = Table::new(config, &["epoch", "kl_weight", "objective", "fit", "kl", "val_auroc"]);
    for m in &outcome.log {
        log.row(&[m.epoch.to_string(), num(m.kl_weight), num(m.objective), num(m.fit), num(m.kl), opt(m.val_auroc)]);
    }
    log.write(&dir.join("training_log.tsv"))?;
    let best_auroc = outcome
        .best_epoch
        .and_then(|e| outcome.log.iter().find(|m| m.epoch == e))
        .and_then(|m| m.val_auroc);
    let checkpoint: Value =
        serde_json::from_str(&checkpoint_to_string(&outcome.state)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Envelope::new("model", config, &inputs)
        .with("best_epoch", outcome.best_epoch)?
        .with("checkpoint", checkpoint)?
        .write(&dir.join(MODEL_FILE), false)?;
    Envelope::new("train-summary", config, &inputs)
        .with("variant", outcome.state.variant)?
        .with("epochs_run", outcome.log.len())?
        .with("best_epoch", outcome.best_epoch)?
        .with("best_val_auroc", best_auroc)?
        .write(&dir.join(SUMMARY_FILE), true)
}

fn write_predictions(
    config: &RunConfig,
    path: &Path,
    tsv: &Path,
    samples: &PredictiveSamples,
    state: &ModelState,
    inputs: &[(&str, String)],
) -> Result<()> {
    let mut table = Table::new(config, &["patient_id", "label", "mean", "std"]);
    for ((id, &y), (m, s)) in samples
        .patient_ids
        .iter()
        .zip(&samples.labels)
        .zip(samples.mean().into_iter().zip(samples.std()))
    {
        table.row(&[id.clone(), y.to_string(), num(m), num(s)]);
    }
    table.write(tsv)?;
    Envelope::new("predictions", config, inputs)
        .with("variant", state.variant)?
        .with("n_samples", samples.n_samples())?
        .with("samples", samples)?
        .write(path, false)
}

type Digests = Vec<(&'static str, String)>;

fn validation_samples(config: &RunConfig, s: usize) -> Result<(PredictiveSamples, ModelState, Digests)> {
    let data = load_data(config)?;
    let (state, model_digest) = load_model(config)?;
    let val = validation_records(&data.records);
    if val.is_empty() {
        return Err(Error::config("paths.data", "dataset has no validation split"));
    }
    let samples = mc_predict(&state, &val, s, config.seed)?;
    Ok((samples, state, vec![("data", data.digest), ("checkpoint", model_digest)]))
}

fn predict(config: &RunConfig, dir: &Path) -> Result<()> {
    let (samples, state, inputs) = validation_samples(config, config.eval.samples)?;
    write_predictions(
        config,
        &dir.join(PREDICTIONS_FILE),
        &dir.join("predictions.tsv"),
        &samples,
        &state,
        &inputs,
    )
}

fn report(config: &RunConfig, dir: &Path) -> Result<()> {
    let pdir = config.path("predictions")?;
    let samples: PredictiveSamples = read_field(&pdir.join(PREDICTIONS_FILE), "predictions", "samples")?;
    let mut inputs = vec![("predictions", digest_files(&pdir, &[PREDICTIONS_FILE])?)];
    let ranking = ranking_metrics(&samples)?;

    let (acc, auc) = confidence_curves(&samples, &config.eval.thresholds)?;
    let mut t = Table::new(config, &["threshold", "retained", "accuracy", "auroc"]);
    for (i, tau) in acc.thresholds.iter().enumerate() {
        t.row(&[num(*tau), acc.retained[i].to_string(), opt(acc.values[i]), opt(auc.values[i])]);
    }
    t.write(&dir.join("confidence.tsv"))?;

    let bins = calibration_curve(&samples, config.eval.calibration_bins)?;
    let mut t = Table::new(config, &["lower", "upper", "count", "mean_predicted", "positive_fraction"]);
    for b in &bins {
        t.row(&[num(b.lower), num(b.upper), b.count.to_string(), opt(b.mean_predicted), opt(b.positive_fraction)]);
    }
    t.write(&dir.join("calibration.tsv"))?;

    let split = uncertainty_split(&samples);
    let mut t = Table::new(config, &["group", "count", "min", "q1", "median", "q3", "max", "mean"]);
    for (o, g) in split.summaries() {
        t.row(&[
            o.short().into(),
            g.count.to_string(),
            opt(g.min),
            opt(g.q1),
            opt(g.median),
            opt(g.q3),
            opt(g.max),
            opt(g.mean),
        ]);
    }
    t.write(&dir.join("uncertainty.tsv"))?;

    let div = |side| match div_metric(&split, side) {
        Ok(v) => Ok(serde_json::json!({ "value": v })),
        Err(Error::UndefinedMetric(m)) => Ok(serde_json::json!({ "value": null, "undefined": m })),
        Err(e) => Err(e),
    };
    let div_positive = div(Side::Positive)?;
    let div_negative = div(Side::Negative)?;

    let mut entropy_ranks = None;
    if let (Some(_), Some(_)) = (config.optional_path("checkpoint"), config.optional_path("data")) {
        let (state, model_digest) = load_model(config)?;
        inputs.push(("checkpoint", model_digest));
        if state.variant.embedding_stochastic() {
            let data = load_data(config)?;
            inputs.push(("data", data.digest.clone()));
            let ranking = embedding_entropy(&state.mean_field(names::CODE)?, &data.vocab)?;
            let risk = data.risk_codes.unwrap_or_default();
            let mut t = Table::new(config, &["rank", "id", "token", "entropy", "risk_code"]);
            for (r, e) in ranking.entries.iter().enumerate() {
                t.row(&[r.to_string(), e.id.to_string(), e.token.clone(), num(e.entropy), risk.contains(&e.id).to_string()]);
            }
            t.write(&dir.join("entropy.tsv"))?;
            let ranks: Vec<Option<usize>> = risk.iter().map(|&id| ranking.rank_of(id)).collect();
            entropy_ranks = Some(serde_json::json!({ "n_codes": ranking.entries.len(), "risk_code_ranks": ranks }));
        }
    }

    Envelope::new("report", config, &inputs)
        .with("n_patients", samples.n_patients())?
        .with("n_samples", samples.n_samples())?
        .with("auroc", ranking.auroc)?
        .with("average_precision", ranking.average_precision)?
        .with("div_positive", div_positive)?
        .with("div_negative", div_negative)?
        .with("entropy", entropy_ranks)?
        .write(&dir.join(SUMMARY_FILE), true)
}

fn repro(config: &RunConfig, dir: &Path) -> Result<()> {
    let counts = [config.eval.samples, config.eval.repro_samples];
    let mut t = Table::new(config, &["samples", "auroc", "average_precision", "mean_std"]);
    let mut aurocs = Vec::new();
    let mut inputs = Vec::new();
    for s in counts {
        let (samples, state, inp) = validation_samples(config, s)?;
        let r = ranking_metrics(&samples)?;
        let std = samples.std();
        t.row(&[s.to_string(), num(r.auroc), num(r.average_precision), num(std.iter().sum::<f64>() / std.len() as f64)]);
        write_predictions(
            config,
            &dir.join(format!("predictions_s{s}.json")),
            &dir.join(format!("predictions_s{s}.tsv")),
            &samples,
            &state,
            &inp,
        )?;
        aurocs.push(r.auroc);
        inputs = inp;
    }
    t.write(&dir.join("comparison.tsv"))?;
    Envelope::new("repro", config, &inputs)
        .with("samples", counts)?
        .with("auroc", &aurocs)?
        .with("auroc_difference", (aurocs[1] - aurocs[0]).abs())?
        .write(&dir.join(SUMMARY_FILE), true)
}
