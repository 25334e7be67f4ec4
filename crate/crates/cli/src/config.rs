//! Run configuration: built-in defaults, TOML files and `--set` overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dbgp_core::dbgp::{GpConfig, ModelConfig, ModelVariant, PriorConfig, TrainConfig};
use dbgp_core::encoder::{EncoderConfig, PretrainConfig};
use dbgp_core::eval::{default_thresholds, DEFAULT_CALIBRATION_BINS};
use dbgp_core::synthdata::CohortConfig;
use dbgp_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

/// Sections whose `seed` field is filled from the run seed.
const SEEDED_SECTIONS: [&str; 3] = ["cohort", "pretrain", "train"];

/// Keys whose defaults come from the published model description.
const PAPER_KEYS: &[&str] = &[
    "cohort.positive_rate",
    "encoder.max_sequence_length",
    "encoder.hidden_size",
    "encoder.n_layers",
    "encoder.n_heads",
    "encoder.intermediate_size",
    "encoder.dropout",
    "encoder.pool_size_dense",
    "encoder.pool_size_gp",
    "prior.embedding_prior_std",
    "prior.output_prior_std",
    "eval.samples",
    "eval.repro_samples",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Predictive draws per patient.
    pub samples: usize,
    /// Draws of the second prediction made by `repro`.
    pub repro_samples: usize,
    pub calibration_bins: usize,
    pub thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 30,
            repro_samples: 60,
            calibration_bins: DEFAULT_CALIBRATION_BINS,
            thresholds: default_thresholds(),
        }
    }
}

/// Input locations; an empty string means unset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory written by `generate`.
    pub data: String,
    /// Directory written by `pretrain`.
    pub pretrained: String,
    /// Directory written by `train`.
    pub checkpoint: String,
    /// Directory written by `predict`.
    pub predictions: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: ModelVariant,
    pub cohort: CohortConfig,
    pub encoder: EncoderConfig,
    pub gp: GpConfig,
    pub prior: PriorConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 1,
            variant: ModelVariant::Dbgp,
            cohort: CohortConfig::default(),
            encoder: EncoderConfig::default(),
            gp: GpConfig::default(),
            prior: PriorConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        };
        c.propagate_seed();
        c
    }
}

impl RunConfig {
    fn propagate_seed(&mut self) {
        self.cohort.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            gp: self.gp.clone(),
            prior: self.prior.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        self.model().validate()?;
        if self.cohort.max_sequence_length > self.encoder.max_sequence_length {
            return Err(Error::config(
                "cohort.max_sequence_length",
                "exceeds encoder.max_sequence_length",
            ));
        }
        if self.pretrain.batch_size == 0 {
            return Err(Error::config("pretrain.batch_size", "must be positive"));
        }
        if !(self.pretrain.mask_fraction > 0.0 && self.pretrain.mask_fraction < 1.0) {
            return Err(Error::config("pretrain.mask_fraction", "must lie in (0, 1)"));
        }
        self.train.validate()?;
        if self.eval.samples == 0 || self.eval.repro_samples == 0 {
            return Err(Error::config("eval.samples", "draw counts must be positive"));
        }
        if self.eval.calibration_bins < 2 {
            return Err(Error::config("eval.calibration_bins", "needs at least 2 bins"));
        }
        Ok(())
    }

    /// Resolved configuration as TOML; section seeds are implied by `seed`.
    pub fn to_toml(&self) -> String {
        toml::to_string(&user_tree(self)).expect("configuration serializes to TOML")
    }

    /// The configuration without its input locations, as embedded in
    /// artifacts so that they do not depend on where inputs live.
    pub fn embedded(&self) -> serde_json::Value {
        let mut t = user_tree(self);
        t.remove("paths");
        serde_json::to_value(&t).expect("configuration serializes to JSON")
    }

    /// Short content hash of the resolved configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(6).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        let value = match key {
            "data" => &self.paths.data,
            "pretrained" => &self.paths.pretrained,
            "checkpoint" => &self.paths.checkpoint,
            "predictions" => &self.paths.predictions,
            _ => unreachable!("unknown path key {key}"),
        };
        if value.is_empty() {
            return Err(Error::config(format!("paths.{key}"), "required by this command"));
        }
        Ok(PathBuf::from(value))
    }

    pub fn optional_path(&self, key: &str) -> Option<PathBuf> {
        self.path(key).ok()
    }
}

/// The defaults as a TOML tree of user-settable keys.
fn user_tree(config: &RunConfig) -> Table {
    let mut t = Table::try_from(config).expect("configuration serializes to TOML");
    for section in SEEDED_SECTIONS {
        if let Some(Value::Table(s)) = t.get_mut(section) {
            s.remove("seed");
        }
    }
    t
}

fn merge(base: &mut Table, over: Table, prefix: &str) -> Result<()> {
    for (k, v) in over {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let Some(slot) = base.get_mut(&k) else {
            let hint = if k == "seed" { "; set the top-level `seed` instead" } else { "" };
            return Err(Error::config(key, format!("unknown key{hint}")));
        };
        match (slot, v) {
            (Value::Table(b), Value::Table(o)) => merge(b, o, &key)?,
            (Value::Table(_), _) => return Err(Error::config(key, "expected a table")),
            (_, Value::Table(_)) => return Err(Error::config(key, "expected a value, found a table")),
            (slot, v) => *slot = v,
        }
    }
    Ok(())
}

/// Parses a `key=value` override. Values are read as TOML and fall back to
/// bare strings.
pub fn parse_override(text: &str) -> Result<(String, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::config(text, "overrides take the form key=value"))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    if key == "variant" {
        let v = ModelVariant::from_str(raw.trim_matches('"'))?;
        return Ok((key, Value::try_from(v).expect("variant serializes")));
    }
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key, value))
}

fn nested(key: &str, value: Value) -> Table {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().unwrap_or_default();
    let mut t = Table::new();
    t.insert(last.to_string(), value);
    for p in parts.into_iter().rev() {
        let mut outer = Table::new();
        outer.insert(p.to_string(), Value::Table(t));
        t = outer;
    }
    t
}

/// Resolves defaults, then the optional file, then overrides in order, then
/// the seed flag.
pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut tree = user_tree(&RunConfig::default());
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: Table = toml::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        merge(&mut tree, doc, "")?;
    }
    for o in overrides {
        let (key, value) = parse_override(o)?;
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(Error::config(o, "empty key"));
        }
        merge(&mut tree, nested(&key, value), "")?;
    }
    if let Some(s) = seed {
        tree.insert("seed".into(), Value::Integer(s as i64));
    }
    let run_seed = tree.get("seed").cloned().unwrap_or(Value::Integer(1));
    for section in SEEDED_SECTIONS {
        if let Some(Value::Table(s)) = tree.get_mut(section) {
            s.insert("seed".into(), run_seed.clone());
        }
    }
    let mut config: RunConfig = Value::Table(tree)
        .try_into()
        .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
    config.propagate_seed();
    config.validate()?;
    Ok(config)
}

fn flatten(t: &Table, prefix: &str, out: &mut Vec<(String, String)>) {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(inner) => flatten(inner, &key, out),
            v => out.push((key, v.to_string())),
        }
    }
}

pub fn provenance(key: &str) -> &'static str {
    if PAPER_KEYS.contains(&key) {
        "paper"
    } else {
        "toolkit"
    }
}

/// Every configuration key with its default and provenance.
pub fn key_listing() -> String {
    let mut rows = Vec::new();
    flatten(&user_tree(&RunConfig::default()), "", &mut rows);
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Configuration keys (default, provenance):\n");
    for (k, v) in rows {
        let _ = writeln!(s, "  {k:<width$}  {v}  [{}]", provenance(&k));
    }
    s
}
