//! Small BEHRT-style encoder: four summed embedding tables, a post-norm
//! multi-head self-attention stack, first-token pooling and a masked-code
//! pretraining objective.
//!
//! Forward passes work on a packed batch: the tokens of all patients are
//! stacked into one matrix so the dense layers run as single products and
//! only attention is evaluated per patient.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::bayeslayers::{sample_mean_field, MeanFieldTensor};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::optim::Adam;
use crate::params::{linear_init, uniform, Binder, ParamStore};
use crate::rng::{domain, substream};
use crate::synthdata::{PatientRecord, Split, Vocabulary, AGE_VOCAB_SIZE, MASK, PAD, SEGMENT_VOCAB_SIZE};

pub const LAYER_NORM_EPS: f64 = 1e-12;
/// Half-width of the uniform initialization of embedding tables.
const EMBEDDING_INIT: f64 = 0.17;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub max_sequence_length: usize,
    pub hidden_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub intermediate_size: usize,
    pub dropout: f64,
    /// Pooler width in front of dense (Bayesian or deterministic) heads.
    pub pool_size_dense: usize,
    /// Pooler width in front of GP heads.
    pub pool_size_gp: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            max_sequence_length: 256,
            hidden_size: 150,
            n_layers: 4,
            n_heads: 6,
            intermediate_size: 108,
            dropout: 0.29,
            pool_size_dense: 150,
            pool_size_gp: 24,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder.max_sequence_length", self.max_sequence_length),
            ("encoder.hidden_size", self.hidden_size),
            ("encoder.n_heads", self.n_heads),
            ("encoder.intermediate_size", self.intermediate_size),
            ("encoder.pool_size_dense", self.pool_size_dense),
            ("encoder.pool_size_gp", self.pool_size_gp),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if !self.hidden_size.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "encoder.n_heads",
                format!("hidden_size {} is not divisible by {} heads", self.hidden_size, self.n_heads),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("encoder.dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads
    }
}

/// Stable block names.
pub mod names {
    pub const CODE: &str = "emb.code";
    pub const AGE: &str = "emb.age";
    pub const SEGMENT: &str = "emb.segment";
    pub const POSITION: &str = "emb.position";
    pub const TABLES: [&str; 4] = [CODE, AGE, SEGMENT, POSITION];
    pub const POOL_W: &str = "pool.w";
    pub const POOL_B: &str = "pool.b";
    pub const MLM_BIAS: &str = "mlm.bias";
    pub const LAYER_PARTS: [&str; 16] = [
        "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b", "w1", "b1", "w2", "b2",
        "ln2_g", "ln2_b",
    ];

    pub fn layer(l: usize, part: &str) -> String {
        format!("enc.{l}.{part}")
    }

    pub fn mu(table: &str) -> String {
        format!("{table}.mu")
    }

    pub fn rho(table: &str) -> String {
        format!("{table}.rho")
    }
}

/// Row counts of the four embedding tables.
pub fn table_rows(config: &EncoderConfig, vocab: &Vocabulary) -> [usize; 4] {
    [vocab.size(), AGE_VOCAB_SIZE, SEGMENT_VOCAB_SIZE, config.max_sequence_length]
}

/// Deterministic embeddings and transformer layers (no pooler).
pub fn init_encoder<R: Rng + ?Sized>(config: &EncoderConfig, vocab: &Vocabulary, rng: &mut R) -> Result<ParamStore> {
    config.validate()?;
    let h = config.hidden_size;
    let mut store = ParamStore::new();
    for (name, rows) in names::TABLES.iter().zip(table_rows(config, vocab)) {
        store.insert(*name, uniform(rng, rows, h, EMBEDDING_INIT));
    }
    for l in 0..config.n_layers {
        for part in ["wq", "wk", "wv", "wo"] {
            store.insert(names::layer(l, part), linear_init(rng, h, h));
        }
        for part in ["bq", "bk", "bv", "bo", "ln1_b", "ln2_b"] {
            store.insert(names::layer(l, part), Mat::zeros((1, h)));
        }
        store.insert(names::layer(l, "ln1_g"), Mat::ones((1, h)));
        store.insert(names::layer(l, "ln2_g"), Mat::ones((1, h)));
        store.insert(names::layer(l, "w1"), linear_init(rng, h, config.intermediate_size));
        store.insert(names::layer(l, "b1"), Mat::zeros((1, config.intermediate_size)));
        store.insert(names::layer(l, "w2"), linear_init(rng, config.intermediate_size, h));
        store.insert(names::layer(l, "b2"), Mat::zeros((1, h)));
    }
    store.insert(names::MLM_BIAS, Mat::zeros((1, vocab.size())));
    Ok(store)
}

pub fn init_pooler<R: Rng + ?Sized>(store: &mut ParamStore, hidden: usize, pool: usize, rng: &mut R) {
    store.insert(names::POOL_W, linear_init(rng, hidden, pool));
    store.insert(names::POOL_B, Mat::zeros((1, pool)));
}

/// An embedding table that is either a point estimate or a mean-field block.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightBlock {
    Deterministic(Mat),
    Stochastic(MeanFieldTensor),
}

impl WeightBlock {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            WeightBlock::Deterministic(m) => m.dim(),
            WeightBlock::Stochastic(mf) => mf.shape(),
        }
    }

    /// One realization: a draw when `rng` is given, the mean otherwise.
    pub fn realize<R: Rng + ?Sized>(&self, rng: Option<&mut R>) -> Result<Mat> {
        match (self, rng) {
            (WeightBlock::Deterministic(m), _) => Ok(m.clone()),
            (WeightBlock::Stochastic(mf), Some(rng)) => sample_mean_field(mf, &mf.draw_eps(rng)),
            (WeightBlock::Stochastic(mf), None) => Ok(mf.mu.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBlock {
    pub code: WeightBlock,
    pub age: WeightBlock,
    pub segment: WeightBlock,
    pub position: WeightBlock,
}

/// Encoded sequence: one row per position; `mask[i]` is false for PAD.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    pub values: Mat,
    pub mask: Vec<bool>,
}

/// Token-level view of a batch of records, stacked patient after patient.
pub(crate) struct PackedBatch {
    pub spans: Vec<(usize, usize)>,
    pub ids: [Vec<usize>; 4],
    pub key_mask: Vec<bool>,
}

const TABLE_LABELS: [&str; 4] = ["code", "age", "segment", "position"];

impl PackedBatch {
    pub fn new(records: &[&PatientRecord], rows: [usize; 4]) -> Result<Self> {
        let total: usize = records.iter().map(|r| r.len()).sum();
        let mut ids: [Vec<usize>; 4] = Default::default();
        for v in ids.iter_mut() {
            v.reserve(total);
        }
        let mut spans = Vec::with_capacity(records.len());
        let mut key_mask = Vec::with_capacity(total);
        for r in records {
            if r.is_empty() {
                return Err(Error::Validation {
                    patient_id: r.patient_id.clone(),
                    message: "empty sequence".into(),
                });
            }
            spans.push((key_mask.len(), r.len()));
            for i in 0..r.len() {
                let row = [
                    r.codes[i] as usize,
                    r.ages[i] as usize,
                    r.segments[i] as usize,
                    r.positions[i] as usize,
                ];
                for t in 0..4 {
                    if row[t] >= rows[t] {
                        return Err(Error::Lookup {
                            table: TABLE_LABELS[t],
                            position: i,
                            id: row[t],
                            size: rows[t],
                        });
                    }
                    ids[t].push(row[t]);
                }
                key_mask.push(r.codes[i] != PAD);
            }
        }
        Ok(Self {
            spans,
            ids,
            key_mask,
        })
    }

    /// Row index of every patient's first (CLS) token.
    pub fn first_rows(&self) -> Vec<usize> {
        self.spans.iter().map(|s| s.0).collect()
    }
}

/// Sum of the four table lookups for every packed token.
pub(crate) fn embed_graph(tape: &mut Tape, tables: [Var; 4], batch: &PackedBatch) -> Var {
    let mut x = tape.gather(tables[0], &batch.ids[0]);
    for (&table, ids) in tables.iter().zip(&batch.ids).skip(1) {
        let e = tape.gather(table, ids);
        x = tape.add(x, e);
    }
    x
}

/// Inverted-dropout mask applied to a packed activation.
fn dropout<R: Rng + ?Sized>(tape: &mut Tape, x: Var, p: f64, rng: Option<&mut R>) -> Var {
    let Some(rng) = rng else { return x };
    if p <= 0.0 {
        return x;
    }
    let keep = 1.0 / (1.0 - p);
    let mask = Mat::from_shape_simple_fn(tape.shape(x), || if rng.random_bool(p) { 0.0 } else { keep });
    let m = tape.constant(mask);
    tape.mul(x, m)
}

struct LayerVars {
    v: Vec<Var>,
}

impl LayerVars {
    fn bind(tape: &mut Tape, binder: &mut Binder, store: &ParamStore, l: usize) -> Result<Self> {
        let v = names::LAYER_PARTS
            .iter()
            .map(|p| binder.var(tape, store, &names::layer(l, p)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { v })
    }

    fn get(&self, part: &str) -> Var {
        self.v[names::LAYER_PARTS.iter().position(|p| *p == part).unwrap()]
    }
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

/// Multi-head self-attention sublayer output (before the residual).
fn attention_graph(
    tape: &mut Tape,
    lv: &LayerVars,
    x: Var,
    batch: &PackedBatch,
    n_heads: usize,
) -> Var {
    let hidden = tape.shape(x).1;
    let dh = hidden / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = affine(tape, x, lv.get("wq"), lv.get("bq"));
    let k = affine(tape, x, lv.get("wk"), lv.get("bk"));
    let v = affine(tape, x, lv.get("wv"), lv.get("bv"));
    let mut per_patient = Vec::with_capacity(batch.spans.len());
    for &(start, len) in &batch.spans {
        let mask = &batch.key_mask[start..start + len];
        let (qp, kp, vp) = if batch.spans.len() == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_rows(q, start, len),
                tape.slice_rows(k, start, len),
                tape.slice_rows(v, start, len),
            )
        };
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let (qh, kh, vh) = if n_heads == 1 {
                (qp, kp, vp)
            } else {
                (
                    tape.slice_cols(qp, h * dh, dh),
                    tape.slice_cols(kp, h * dh, dh),
                    tape.slice_cols(vp, h * dh, dh),
                )
            };
            let kt = tape.transpose(kh);
            let s = tape.matmul(qh, kt);
            let s = tape.scale(s, scale);
            let a = tape.masked_softmax(s, mask);
            heads.push(tape.matmul(a, vh));
        }
        per_patient.push(if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) });
    }
    let ctx = if per_patient.len() == 1 {
        per_patient[0]
    } else {
        tape.concat_rows(&per_patient)
    };
    affine(tape, ctx, lv.get("wo"), lv.get("bo"))
}

fn norm(tape: &mut Tape, x: Var, g: Var, b: Var) -> Var {
    let n = tape.layer_norm(x, LAYER_NORM_EPS);
    let n = tape.mul_row(n, g);
    tape.add_row(n, b)
}

/// Post-norm transformer stack over a packed batch.
pub(crate) fn encoder_graph<R: Rng + ?Sized>(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    config: &EncoderConfig,
    mut x: Var,
    batch: &PackedBatch,
    mut rng: Option<&mut R>,
) -> Result<Var> {
    for l in 0..config.n_layers {
        let lv = LayerVars::bind(tape, binder, store, l)?;
        let att = attention_graph(tape, &lv, x, batch, config.n_heads);
        let att = dropout(tape, att, config.dropout, rng.as_deref_mut());
        let r = tape.add(x, att);
        let x1 = norm(tape, r, lv.get("ln1_g"), lv.get("ln1_b"));
        let f = affine(tape, x1, lv.get("w1"), lv.get("b1"));
        let f = tape.gelu(f);
        let f = affine(tape, f, lv.get("w2"), lv.get("b2"));
        let f = dropout(tape, f, config.dropout, rng.as_deref_mut());
        let r = tape.add(x1, f);
        x = norm(tape, r, lv.get("ln2_g"), lv.get("ln2_b"));
    }
    Ok(x)
}

/// `tanh(h_CLS W + b)` for every patient (`B × pool`).
pub(crate) fn pool_graph(tape: &mut Tape, x: Var, w: Var, b: Var, batch: &PackedBatch) -> Var {
    let cls = tape.gather(x, &batch.first_rows());
    let p = affine(tape, cls, w, b);
    tape.tanh(p)
}

fn check_hidden(values: &Mat, config: &EncoderConfig) -> Result<()> {
    if values.ncols() != config.hidden_size {
        return Err(Error::Dimension(format!(
            "latent width {} but hidden_size {}",
            values.ncols(),
            config.hidden_size
        )));
    }
    Ok(())
}

/// Sum of the code, age, segment and position embeddings of every token.
/// Stochastic tables are realized once for the whole call when `rng` is
/// given and replaced by their means otherwise.
pub fn embed_sequence<R: Rng + ?Sized>(
    record: &PatientRecord,
    block: &EmbeddingBlock,
    mut rng: Option<&mut R>,
) -> Result<LatentSequence> {
    let tables = [&block.code, &block.age, &block.segment, &block.position];
    let hidden = block.code.shape().1;
    let mut realized = Vec::with_capacity(4);
    for t in tables {
        if t.shape().1 != hidden {
            return Err(Error::Dimension("embedding tables differ in width".into()));
        }
        realized.push(t.realize(rng.as_deref_mut())?);
    }
    let rows = [realized[0].nrows(), realized[1].nrows(), realized[2].nrows(), realized[3].nrows()];
    let batch = PackedBatch::new(&[record], rows)?;
    let mut values = Mat::zeros((record.len(), hidden));
    for (t, table) in realized.iter().enumerate() {
        for (i, &id) in batch.ids[t].iter().enumerate() {
            values.row_mut(i).scaled_add(1.0, &table.row(id));
        }
    }
    Ok(LatentSequence {
        values,
        mask: batch.key_mask,
    })
}

fn single_batch(latent: &LatentSequence) -> PackedBatch {
    let n = latent.values.nrows();
    PackedBatch {
        spans: vec![(0, n)],
        ids: Default::default(),
        key_mask: latent.mask.clone(),
    }
}

/// Runs the transformer stack in evaluation mode (no dropout).
pub fn encode(latent: &LatentSequence, config: &EncoderConfig, weights: &ParamStore) -> Result<LatentSequence> {
    config.validate()?;
    check_hidden(&latent.values, config)?;
    if latent.mask.len() != latent.values.nrows() {
        return Err(Error::Dimension("mask length differs from sequence length".into()));
    }
    let mut tape = Tape::new();
    let mut binder = Binder::frozen();
    let x = tape.constant(latent.values.clone());
    let batch = single_batch(latent);
    let y = encoder_graph::<rand_chacha::ChaCha8Rng>(&mut tape, &mut binder, weights, config, x, &batch, None)?;
    Ok(LatentSequence {
        values: tape.value(y).clone(),
        mask: latent.mask.clone(),
    })
}

/// Output of the attention sublayer of `layer` (before residual and norm).
pub fn self_attention(
    latent: &LatentSequence,
    config: &EncoderConfig,
    weights: &ParamStore,
    layer: usize,
) -> Result<Mat> {
    config.validate()?;
    check_hidden(&latent.values, config)?;
    let mut tape = Tape::new();
    let mut binder = Binder::frozen();
    let lv = LayerVars::bind(&mut tape, &mut binder, weights, layer)?;
    let x = tape.constant(latent.values.clone());
    let y = attention_graph(&mut tape, &lv, x, &single_batch(latent), config.n_heads);
    Ok(tape.value(y).clone())
}

/// `tanh(W_poolᵀ h_0 + b)` on the first row.
pub fn pool_first(latent: &LatentSequence, w: &Mat, b: &Mat) -> Result<Vec<f64>> {
    if latent.values.nrows() == 0 {
        return Err(Error::Dimension("empty sequence".into()));
    }
    if w.nrows() != latent.values.ncols() || b.dim() != (1, w.ncols()) {
        return Err(Error::Dimension(format!(
            "pool weights {:?} / bias {:?} for width {}",
            w.dim(),
            b.dim(),
            latent.values.ncols()
        )));
    }
    let cls = latent.values.row(0);
    Ok((0..w.ncols())
        .map(|j| (cls.dot(&w.column(j)) + b[[0, j]]).tanh())
        .collect())
}

/// Mean softmax cross-entropy of `logits` rows against `targets`.
pub fn masked_cross_entropy(logits: &Mat, targets: &[usize]) -> Result<f64> {
    if logits.nrows() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} logit rows for {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Ok(0.0);
    }
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let x = tape.softmax_xent(l, targets);
    Ok(tape.scalar(x) / targets.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlmLoss {
    pub loss: f64,
    pub n_masked: usize,
    /// Set when a record had no maskable code position (loss defined as 0).
    pub no_maskable_positions: bool,
}

/// Positions to mask: `max(1, round(fraction · n))` of the clinical-code
/// positions, or none when the record has no code position.
fn choose_masked<R: Rng + ?Sized>(record: &PatientRecord, vocab: &Vocabulary, fraction: f64, rng: &mut R) -> Vec<usize> {
    let candidates: Vec<usize> = (0..record.len()).filter(|&i| vocab.is_code(record.codes[i])).collect();
    if candidates.is_empty() {
        return Vec::new();
    }
    let k = ((fraction * candidates.len() as f64).round() as usize).clamp(1, candidates.len());
    let mut picked: Vec<usize> = sample(rng, candidates.len(), k).into_iter().map(|j| candidates[j]).collect();
    picked.sort_unstable();
    picked
}

/// Masked-code loss of a batch on the tape. Returns `(sum of token
/// cross-entropies, number of masked tokens)`.
#[allow(clippy::too_many_arguments)]
fn mlm_graph<R: Rng + ?Sized>(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    config: &EncoderConfig,
    vocab: &Vocabulary,
    records: &[&PatientRecord],
    fraction: f64,
    mask_rng: &mut R,
    dropout_rng: Option<&mut R>,
) -> Result<Option<(Var, usize)>> {
    let mut masked_records = Vec::with_capacity(records.len());
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut offset = 0;
    for r in records {
        let picks = choose_masked(r, vocab, fraction, mask_rng);
        let mut m = (*r).clone();
        for &i in &picks {
            targets.push(m.codes[i] as usize);
            m.codes[i] = MASK;
            rows.push(offset + i);
        }
        offset += r.len();
        masked_records.push(m);
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let refs: Vec<&PatientRecord> = masked_records.iter().collect();
    let batch = PackedBatch::new(&refs, table_rows(config, vocab))?;
    let tables = [
        binder.var(tape, store, names::CODE)?,
        binder.var(tape, store, names::AGE)?,
        binder.var(tape, store, names::SEGMENT)?,
        binder.var(tape, store, names::POSITION)?,
    ];
    let x = embed_graph(tape, tables, &batch);
    let h = encoder_graph(tape, binder, store, config, x, &batch, dropout_rng)?;
    let hm = tape.gather(h, &rows);
    let et = tape.transpose(tables[0]);
    let logits = tape.matmul(hm, et);
    let bias = binder.var(tape, store, names::MLM_BIAS)?;
    let logits = tape.add_row(logits, bias);
    Ok(Some((tape.softmax_xent(logits, &targets), rows.len())))
}

/// Masked-code loss of one record in evaluation mode.
pub fn mlm_loss<R: Rng + ?Sized>(
    record: &PatientRecord,
    vocab: &Vocabulary,
    mask_fraction: f64,
    config: &EncoderConfig,
    weights: &ParamStore,
    rng: &mut R,
) -> Result<MlmLoss> {
    if !(mask_fraction > 0.0 && mask_fraction < 1.0) {
        return Err(Error::config("pretrain.mask_fraction", "must lie in (0, 1)"));
    }
    let mut tape = Tape::new();
    let mut binder = Binder::frozen();
    match mlm_graph(&mut tape, &mut binder, weights, config, vocab, &[record], mask_fraction, rng, None)? {
        None => {
            log::warn!("patient {} has no maskable code position", record.patient_id);
            Ok(MlmLoss {
                loss: 0.0,
                n_masked: 0,
                no_maskable_positions: true,
            })
        }
        Some((x, n)) => Ok(MlmLoss {
            loss: tape.scalar(x) / n as f64,
            n_masked: n,
            no_maskable_positions: false,
        }),
    }
}

/// Loss value and gradient of the batch masked-code objective (mean over
/// masked tokens).
pub fn mlm_loss_and_grad<R: Rng + ?Sized>(
    records: &[&PatientRecord],
    vocab: &Vocabulary,
    mask_fraction: f64,
    config: &EncoderConfig,
    weights: &ParamStore,
    mask_rng: &mut R,
    dropout_rng: Option<&mut R>,
) -> Result<Option<(f64, crate::params::GradMap)>> {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let Some((x, n)) = mlm_graph(
        &mut tape, &mut binder, weights, config, vocab, records, mask_fraction, mask_rng, dropout_rng,
    )?
    else {
        return Ok(None);
    };
    let loss = tape.scale(x, 1.0 / n as f64);
    let g = tape.backward(loss);
    Ok(Some((tape.scalar(loss), binder.gradients(&tape, &g))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mask_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 64,
            learning_rate: 1e-3,
            mask_fraction: 0.15,
            seed: 1,
        }
    }
}

/// Masked-code pretraining of the deterministic encoder on the training
/// split. Returns the weights and the mean loss of every epoch.
pub fn pretrain(
    records: &[PatientRecord],
    vocab: &Vocabulary,
    config: &EncoderConfig,
    pc: &PretrainConfig,
) -> Result<(ParamStore, Vec<f64>)> {
    config.validate()?;
    if pc.batch_size == 0 {
        return Err(Error::config("pretrain.batch_size", "must be positive"));
    }
    if !(pc.mask_fraction > 0.0 && pc.mask_fraction < 1.0) {
        return Err(Error::config("pretrain.mask_fraction", "must lie in (0, 1)"));
    }
    let mut init_rng = substream(pc.seed, &[domain::INIT, 0]);
    let mut store = init_encoder(config, vocab, &mut init_rng)?;
    let train: Vec<&PatientRecord> = records.iter().filter(|r| r.split == Split::Train).collect();
    let mut opt = Adam::new(pc.learning_rate);
    let mut history = Vec::with_capacity(pc.epochs);
    for epoch in 0..pc.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut substream(pc.seed, &[domain::SHUFFLE, epoch as u64]));
        let (mut total, mut batches) = (0.0, 0usize);
        for (b, chunk) in order.chunks(pc.batch_size).enumerate() {
            let batch: Vec<&PatientRecord> = chunk.iter().map(|&i| train[i]).collect();
            let key = [epoch as u64, b as u64];
            let mut mask_rng = substream(pc.seed, &[domain::MASKING, key[0], key[1]]);
            let mut drop_rng = substream(pc.seed, &[domain::DROPOUT, key[0], key[1]]);
            let Some((loss, grads)) = mlm_loss_and_grad(
                &batch, vocab, pc.mask_fraction, config, &store, &mut mask_rng, Some(&mut drop_rng),
            )?
            else {
                continue;
            };
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("pretraining loss became {loss} in epoch {epoch}")));
            }
            opt.step(&mut store, &grads);
            total += loss;
            batches += 1;
        }
        let mean = if batches > 0 { total / batches as f64 } else { 0.0 };
        log::info!("pretrain epoch {epoch}: masked-code loss {mean:.4}");
        history.push(mean);
    }
    Ok((store, history))
}
