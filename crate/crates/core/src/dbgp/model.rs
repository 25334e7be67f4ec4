//! Model configuration, parameter layout, initialization and the composite
//! forward pass (embeddings → encoder → pooler → head) with its objective.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::variant::{HeadKind, ModelVariant};
use crate::autograd::{eye, Tape, Var};
use crate::bayeslayers::{
    self, draw_standard_normal, inverse_softplus, MeanFieldTensor, EMBEDDING_PRIOR_STD, OUTPUT_PRIOR_STD,
};
use crate::encoder::{embed_graph, encoder_graph, init_encoder, init_pooler, names, pool_graph, EncoderConfig, PackedBatch};
use crate::error::{Error, Result};
use crate::gp::likelihood::{NormalQuadrature, DEFAULT_QUADRATURE_NODES};
use crate::gp::svgp::{self, bernoulli_expected_loglik_graph, latent_graph, GpHeadVars, HeadInducing};
use crate::gp::{InducingGrid, InducingSet, RbfKernelParams, WhitenedVariationalState};
use crate::linalg::Mat;
use crate::params::{linear_init, uniform, Binder, GradMap, ParamStore};
use crate::rng::{self, domain, substream};
use crate::synthdata::{PatientRecord, Split, Vocabulary};

/// Classifier block names.
pub mod head_names {
    pub const OUT_W: &str = "out.w";
    pub const OUT_B: &str = "out.b";
    pub const PROJ_W: &str = "proj.w";
    pub const PROJ_B: &str = "proj.b";
    pub const LOG_LENGTHSCALE: &str = "gp.log_ls";
    pub const LOG_OUTPUTSCALE: &str = "gp.log_os";
    pub const MEAN: &str = "gp.m";
    pub const CHOL: &str = "gp.chol";
    pub const INDUCING: &str = "gp.z";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpConfig {
    /// Width of the bounded projection from the pooled vector to GP inputs.
    pub latent_dim: usize,
    /// Points per dimension of the KISS inducing grid.
    pub grid_size: usize,
    /// Free inducing points of the whitened head.
    pub n_inducing: usize,
    pub init_lengthscale: f64,
    pub init_outputscale: f64,
    pub quadrature_nodes: usize,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            grid_size: 64,
            n_inducing: 64,
            init_lengthscale: 0.7,
            init_outputscale: 1.0,
            quadrature_nodes: DEFAULT_QUADRATURE_NODES,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::config("gp.latent_dim", "must be positive"));
        }
        if self.grid_size < 4 {
            return Err(Error::config("gp.grid_size", "needs at least 4 points per dimension"));
        }
        if self.n_inducing == 0 {
            return Err(Error::config("gp.n_inducing", "must be positive"));
        }
        for (name, v) in [("gp.init_lengthscale", self.init_lengthscale), ("gp.init_outputscale", self.init_outputscale)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be positive and finite"));
            }
        }
        if self.quadrature_nodes == 0 {
            return Err(Error::config("gp.quadrature_nodes", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub embedding_prior_std: f64,
    pub output_prior_std: f64,
    /// Initial posterior scale as a fraction of the prior std.
    pub init_scale_fraction: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            embedding_prior_std: EMBEDDING_PRIOR_STD,
            output_prior_std: OUTPUT_PRIOR_STD,
            init_scale_fraction: 0.1,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("prior.embedding_prior_std", self.embedding_prior_std),
            ("prior.output_prior_std", self.output_prior_std),
            ("prior.init_scale_fraction", self.init_scale_fraction),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be positive and finite"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub gp: GpConfig,
    pub prior: PriorConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.gp.validate()?;
        self.prior.validate()
    }
}

/// Everything needed to run or resume a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub variant: ModelVariant,
    pub config: ModelConfig,
    pub vocab_size: usize,
    /// Training-set size used to scale the KL terms of a minibatch.
    pub n_train: usize,
    pub grid: Option<InducingGrid>,
    pub params: ParamStore,
}

/// Weight-block realization shared by one forward pass.
#[derive(Clone, Debug)]
pub enum WeightDraw {
    /// Every stochastic block replaced by its variational mean.
    Mean,
    /// Standard-normal noise per stochastic block, keyed by block name.
    Sample(BTreeMap<String, Mat>),
}

impl WeightDraw {
    pub fn sample<R: rand::Rng + ?Sized>(state: &ModelState, rng: &mut R) -> Self {
        let mut eps = BTreeMap::new();
        for (base, _) in state.stochastic_blocks() {
            let shape = state.block_shape(&base);
            eps.insert(base, draw_standard_normal(rng, shape));
        }
        WeightDraw::Sample(eps)
    }
}

/// Per-patient head output.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadOutput {
    Logits(Vec<f64>),
    Latent { mean: Vec<f64>, var: Vec<f64> },
}

impl HeadOutput {
    pub fn len(&self) -> usize {
        match self {
            HeadOutput::Logits(z) => z.len(),
            HeadOutput::Latent { mean, .. } => mean.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Value of the variational objective on one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveValue {
    /// `fit − scale · kl`.
    pub objective: f64,
    /// Expected Bernoulli log-likelihood summed over the batch.
    pub fit: f64,
    /// Unscaled sum of every KL term.
    pub kl: f64,
    /// `batch_size / n_train`.
    pub kl_scale: f64,
}

impl ModelState {
    pub fn head(&self) -> HeadKind {
        self.variant.head()
    }

    pub fn pool_size(&self) -> usize {
        if self.variant.has_gp_head() {
            self.config.encoder.pool_size_gp
        } else {
            self.config.encoder.pool_size_dense
        }
    }

    pub fn table_rows(&self) -> [usize; 4] {
        [
            self.vocab_size,
            crate::synthdata::AGE_VOCAB_SIZE,
            crate::synthdata::SEGMENT_VOCAB_SIZE,
            self.config.encoder.max_sequence_length,
        ]
    }

    pub fn n_inducing(&self) -> usize {
        match self.head() {
            HeadKind::BayesDense => 0,
            HeadKind::WhitenedGp => self.config.gp.n_inducing,
            HeadKind::KissGp => self.grid.as_ref().map_or(0, |g| g.len()),
        }
    }

    /// Base names and prior std of every stochastic block, in a fixed order.
    pub fn stochastic_blocks(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        if self.variant.embedding_stochastic() {
            for t in names::TABLES {
                out.push((t.to_string(), self.config.prior.embedding_prior_std));
            }
        }
        if self.variant.output_stochastic() {
            for b in [head_names::OUT_W, head_names::OUT_B] {
                out.push((b.to_string(), self.config.prior.output_prior_std));
            }
        }
        out
    }

    fn is_stochastic(&self, base: &str) -> bool {
        let emb = names::TABLES.contains(&base);
        let out = base == head_names::OUT_W || base == head_names::OUT_B;
        (emb && self.variant.embedding_stochastic()) || (out && self.variant.output_stochastic())
    }

    /// Shape of a logical block (stochastic or not).
    pub fn block_shape(&self, base: &str) -> (usize, usize) {
        let shapes = self.expected_shapes();
        shapes
            .get(base)
            .or_else(|| shapes.get(&names::mu(base)))
            .copied()
            .unwrap_or((0, 0))
    }

    /// Expected shape of every stored block.
    pub fn expected_shapes(&self) -> BTreeMap<String, (usize, usize)> {
        let cfg = &self.config.encoder;
        let h = cfg.hidden_size;
        let p = self.pool_size();
        let mut out = BTreeMap::new();
        let mut put = |name: String, shape: (usize, usize), stochastic: bool| {
            if stochastic {
                out.insert(names::mu(&name), shape);
                out.insert(names::rho(&name), shape);
            } else {
                out.insert(name, shape);
            }
        };
        for (t, rows) in names::TABLES.iter().zip(self.table_rows()) {
            put(t.to_string(), (rows, h), self.variant.embedding_stochastic());
        }
        for l in 0..cfg.n_layers {
            for part in names::LAYER_PARTS {
                let shape = match part {
                    "wq" | "wk" | "wv" | "wo" => (h, h),
                    "w1" => (h, cfg.intermediate_size),
                    "b1" => (1, cfg.intermediate_size),
                    "w2" => (cfg.intermediate_size, h),
                    _ => (1, h),
                };
                put(names::layer(l, part), shape, false);
            }
        }
        put(names::POOL_W.to_string(), (h, p), false);
        put(names::POOL_B.to_string(), (1, p), false);
        let d = self.config.gp.latent_dim;
        match self.head() {
            HeadKind::BayesDense => {
                let s = self.variant.output_stochastic();
                put(head_names::OUT_W.to_string(), (p, 1), s);
                put(head_names::OUT_B.to_string(), (1, 1), s);
            }
            head => {
                let m = self.n_inducing();
                put(head_names::PROJ_W.to_string(), (p, d), false);
                put(head_names::PROJ_B.to_string(), (1, d), false);
                put(head_names::LOG_LENGTHSCALE.to_string(), (1, d), false);
                put(head_names::LOG_OUTPUTSCALE.to_string(), (1, 1), false);
                put(head_names::MEAN.to_string(), (m, 1), false);
                put(head_names::CHOL.to_string(), (m, m), false);
                if head == HeadKind::WhitenedGp {
                    put(head_names::INDUCING.to_string(), (m, d), false);
                }
            }
        }
        out
    }

    /// Every expected block is present with the right shape and no others.
    pub fn check_blocks(&self) -> Result<()> {
        let expected = self.expected_shapes();
        for (name, shape) in &expected {
            let got = self
                .params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("missing block `{name}` for variant {}", self.variant)))?;
            if got.dim() != *shape {
                return Err(Error::Checkpoint(format!(
                    "block `{name}` has shape {:?}, expected {:?}",
                    got.dim(),
                    shape
                )));
            }
        }
        if let Some(extra) = self.params.names().find(|n| !expected.contains_key(*n)) {
            return Err(Error::Checkpoint(format!(
                "unexpected block `{extra}` for variant {}",
                self.variant
            )));
        }
        if self.head() == HeadKind::KissGp {
            let g = self
                .grid
                .as_ref()
                .ok_or_else(|| Error::Checkpoint("KISS head without an inducing grid".into()))?;
            if g.dim() != self.config.gp.latent_dim {
                return Err(Error::Checkpoint("grid dimension differs from latent_dim".into()));
            }
        }
        if !self.params.all_finite() {
            return Err(Error::Checkpoint("non-finite parameter values".into()));
        }
        Ok(())
    }

    /// Mean-field view of a stochastic block.
    pub fn mean_field(&self, base: &str) -> Result<MeanFieldTensor> {
        let prior = self
            .stochastic_blocks()
            .into_iter()
            .find(|(b, _)| b == base)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::config("block", format!("`{base}` is not stochastic in {}", self.variant)))?;
        MeanFieldTensor::new(
            self.params.get(&names::mu(base))?.clone(),
            self.params.get(&names::rho(base))?.clone(),
            prior,
        )
    }

    /// Sets every posterior scale of the stochastic blocks to `scale`.
    pub fn set_posterior_scale(&mut self, scale: f64) -> Result<()> {
        let rho = inverse_softplus(scale);
        for (base, _) in self.stochastic_blocks() {
            self.params.get_mut(&names::rho(&base))?.fill(rho);
        }
        Ok(())
    }

    /// Kernel hyperparameters of the GP head.
    pub fn kernel_params(&self) -> Result<RbfKernelParams> {
        let ls = self.params.get(head_names::LOG_LENGTHSCALE)?;
        let os = self.params.get(head_names::LOG_OUTPUTSCALE)?;
        Ok(RbfKernelParams {
            log_lengthscale: ls.iter().copied().collect(),
            log_outputscale: os[[0, 0]],
            log_noise: 0.0,
        })
    }

    /// Inducing inputs of the GP head.
    pub fn inducing_set(&self) -> Result<InducingSet> {
        match self.head() {
            HeadKind::BayesDense => Err(Error::config("variant", "dense heads have no inducing set")),
            HeadKind::WhitenedGp => Ok(InducingSet::Points(self.params.get(head_names::INDUCING)?.clone())),
            HeadKind::KissGp => Ok(InducingSet::Grid(
                self.grid.clone().ok_or_else(|| Error::Checkpoint("missing grid".into()))?,
            )),
        }
    }

    /// Whitened variational state of the GP head (lower triangle of `chol`).
    pub fn variational_state(&self) -> Result<WhitenedVariationalState> {
        let m = self.params.get(head_names::MEAN)?;
        let mut l = self.params.get(head_names::CHOL)?.clone();
        for i in 0..l.nrows() {
            for j in (i + 1)..l.ncols() {
                l[[i, j]] = 0.0;
            }
        }
        Ok(WhitenedVariationalState {
            mean: m.column(0).to_vec(),
            chol: l,
        })
    }

    pub fn quadrature(&self) -> Result<NormalQuadrature> {
        NormalQuadrature::new(self.config.gp.quadrature_nodes)
    }
}

/// Fresh model. Encoder blocks come from `pretrained` when given (means of
/// stochastic tables are copied from it); the pooler and the classifier are
/// always randomly initialized.
pub fn init_model(
    variant: ModelVariant,
    config: &ModelConfig,
    vocab: &Vocabulary,
    n_train: usize,
    pretrained: Option<&ParamStore>,
    seed: u64,
) -> Result<ModelState> {
    config.validate()?;
    if n_train == 0 {
        return Err(Error::config("train", "the training split is empty"));
    }
    let mut encoder_rng = substream(seed, &[domain::INIT, 0]);
    let fresh = init_encoder(&config.encoder, vocab, &mut encoder_rng)?;
    let mut params = ParamStore::new();
    for (name, value) in fresh.iter() {
        if name == names::MLM_BIAS {
            continue;
        }
        let value = match pretrained {
            Some(p) => {
                let v = p.get(name).map_err(|_| {
                    Error::Checkpoint(format!("pretrained weights lack block `{name}`"))
                })?;
                if v.dim() != value.dim() {
                    return Err(Error::Checkpoint(format!(
                        "pretrained block `{name}` has shape {:?}, expected {:?}",
                        v.dim(),
                        value.dim()
                    )));
                }
                v.clone()
            }
            None => value.clone(),
        };
        params.insert(name, value);
    }
    if variant.embedding_stochastic() {
        let s0 = config.prior.embedding_prior_std * config.prior.init_scale_fraction;
        for t in names::TABLES {
            let mu = params.remove(t).expect("table initialized");
            let rho = Mat::from_elem(mu.dim(), inverse_softplus(s0));
            params.insert(names::mu(t), mu);
            params.insert(names::rho(t), rho);
        }
    }
    let mut state = ModelState {
        variant,
        config: config.clone(),
        vocab_size: vocab.size(),
        n_train,
        grid: None,
        params,
    };
    let h = config.encoder.hidden_size;
    let p = state.pool_size();
    init_pooler(&mut state.params, h, p, &mut substream(seed, &[domain::INIT, 1]));
    let mut rng = substream(seed, &[domain::INIT, 2]);
    let d = config.gp.latent_dim;
    match variant.head() {
        HeadKind::BayesDense => {
            let w = linear_init(&mut rng, p, 1);
            let b = Mat::zeros((1, 1));
            if variant.output_stochastic() {
                let s0 = config.prior.output_prior_std * config.prior.init_scale_fraction;
                for (name, mu) in [(head_names::OUT_W, w), (head_names::OUT_B, b)] {
                    state.params.insert(names::rho(name), Mat::from_elem(mu.dim(), inverse_softplus(s0)));
                    state.params.insert(names::mu(name), mu);
                }
            } else {
                state.params.insert(head_names::OUT_W, w);
                state.params.insert(head_names::OUT_B, b);
            }
        }
        head => {
            state.params.insert(head_names::PROJ_W, linear_init(&mut rng, p, d));
            state.params.insert(head_names::PROJ_B, Mat::zeros((1, d)));
            state.params.insert(
                head_names::LOG_LENGTHSCALE,
                Mat::from_elem((1, d), config.gp.init_lengthscale.ln()),
            );
            state
                .params
                .insert(head_names::LOG_OUTPUTSCALE, Mat::from_elem((1, 1), config.gp.init_outputscale.ln()));
            if head == HeadKind::KissGp {
                state.grid = Some(InducingGrid::covering(&vec![-1.0; d], &vec![1.0; d], &vec![config.gp.grid_size; d])?);
            } else {
                state.params.insert(head_names::INDUCING, uniform(&mut rng, config.gp.n_inducing, d, 1.0));
            }
            let m = state.n_inducing();
            state.params.insert(head_names::MEAN, Mat::zeros((m, 1)));
            state.params.insert(head_names::CHOL, eye(m));
        }
    }
    state.check_blocks()?;
    Ok(state)
}

/// Places the free inducing points of a whitened head on the projected
/// latents of a random subset of training patients. Falls back to the
/// uniform initialization when there are fewer patients than points.
pub fn init_inducing_from_data(state: &mut ModelState, records: &[&PatientRecord], seed: u64) -> Result<()> {
    if state.head() != HeadKind::WhitenedGp {
        return Ok(());
    }
    let m = state.config.gp.n_inducing;
    if records.len() < m {
        return Ok(());
    }
    let mut rng = substream(seed, &[domain::INIT, 3]);
    let chosen: Vec<&PatientRecord> = sample(&mut rng, records.len(), m).into_iter().map(|i| records[i]).collect();
    let x = latent_inputs(state, &chosen, &WeightDraw::Mean)?;
    // tiny spread so identical sequences do not collapse onto one point
    let z = Array2::from_shape_fn(x.dim(), |(i, j)| x[[i, j]] + rng.random_range(-1e-3..1e-3));
    *state.params.get_mut(head_names::INDUCING)? = z;
    Ok(())
}

pub(crate) enum HeadVars {
    Logit(Var),
    Latent(Var, Var),
}

/// Binds a logical block: its plain value, its mean, or a reparameterized
/// draw from its mean-field posterior.
fn block_var(
    tape: &mut Tape,
    binder: &mut Binder,
    state: &ModelState,
    base: &str,
    draw: &WeightDraw,
) -> Result<Var> {
    if !state.is_stochastic(base) {
        return binder.var(tape, &state.params, base);
    }
    let mu = binder.var(tape, &state.params, &names::mu(base))?;
    match draw {
        WeightDraw::Mean => Ok(mu),
        WeightDraw::Sample(eps) => {
            let e = eps
                .get(base)
                .ok_or_else(|| Error::config("draw", format!("no noise drawn for block `{base}`")))?;
            if e.dim() != state.block_shape(base) {
                return Err(Error::Dimension(format!("noise for `{base}` has shape {:?}", e.dim())));
            }
            let rho = binder.var(tape, &state.params, &names::rho(base))?;
            Ok(bayeslayers::sample_graph(tape, mu, rho, e.clone()))
        }
    }
}

/// Pooled representation (`B × pool`).
pub(crate) fn pooled_graph(
    tape: &mut Tape,
    binder: &mut Binder,
    state: &ModelState,
    batch: &PackedBatch,
    draw: &WeightDraw,
    dropout: Option<&mut rng::Rng>,
) -> Result<Var> {
    let mut tables = Vec::with_capacity(4);
    for t in names::TABLES {
        tables.push(block_var(tape, binder, state, t, draw)?);
    }
    let x = embed_graph(tape, [tables[0], tables[1], tables[2], tables[3]], batch);
    let x = encoder_graph(tape, binder, &state.params, &state.config.encoder, x, batch, dropout)?;
    let w = binder.var(tape, &state.params, names::POOL_W)?;
    let b = binder.var(tape, &state.params, names::POOL_B)?;
    Ok(pool_graph(tape, x, w, b, batch))
}

/// Bounded GP inputs `softsign(pooled · W + b)`.
fn projection_graph(tape: &mut Tape, binder: &mut Binder, state: &ModelState, pooled: Var) -> Result<Var> {
    let w = binder.var(tape, &state.params, head_names::PROJ_W)?;
    let b = binder.var(tape, &state.params, head_names::PROJ_B)?;
    let z = tape.matmul(pooled, w);
    let z = tape.add_row(z, b);
    Ok(tape.softsign(z))
}

struct GpBinding {
    inducing: HeadInducing,
    vars: GpHeadVars,
}

fn bind_gp(tape: &mut Tape, binder: &mut Binder, state: &ModelState) -> Result<GpBinding> {
    let p = &state.params;
    let vars = GpHeadVars {
        log_ls: binder.var(tape, p, head_names::LOG_LENGTHSCALE)?,
        log_os: binder.var(tape, p, head_names::LOG_OUTPUTSCALE)?,
        mean: binder.var(tape, p, head_names::MEAN)?,
        chol: binder.var(tape, p, head_names::CHOL)?,
    };
    let inducing = match state.head() {
        HeadKind::KissGp => HeadInducing::Grid(Arc::new(
            state.grid.clone().ok_or_else(|| Error::Checkpoint("missing grid".into()))?,
        )),
        _ => HeadInducing::Points(binder.var(tape, p, head_names::INDUCING)?),
    };
    Ok(GpBinding { inducing, vars })
}

pub(crate) fn head_graph(
    tape: &mut Tape,
    binder: &mut Binder,
    state: &ModelState,
    pooled: Var,
    draw: &WeightDraw,
) -> Result<HeadVars> {
    match state.head() {
        HeadKind::BayesDense => {
            let w = block_var(tape, binder, state, head_names::OUT_W, draw)?;
            let b = block_var(tape, binder, state, head_names::OUT_B, draw)?;
            let z = tape.matmul(pooled, w);
            Ok(HeadVars::Logit(tape.add_row(z, b)))
        }
        _ => {
            let x = projection_graph(tape, binder, state, pooled)?;
            let gp = bind_gp(tape, binder, state)?;
            let (m, v) = latent_graph(tape, &gp.inducing, gp.vars, x)?;
            Ok(HeadVars::Latent(m, v))
        }
    }
}

fn column(tape: &Tape, v: Var) -> Vec<f64> {
    tape.value(v).column(0).to_vec()
}

fn check_batch(state: &ModelState, records: &[&PatientRecord]) -> Result<PackedBatch> {
    if records.is_empty() {
        return Err(Error::config("batch", "empty batch"));
    }
    PackedBatch::new(records, state.table_rows())
}

/// Composite forward pass under a fixed weight realization: latent mean and
/// variance per patient for GP heads, a logit for dense heads.
pub fn composite_forward_with(
    state: &ModelState,
    records: &[&PatientRecord],
    draw: &WeightDraw,
) -> Result<HeadOutput> {
    let batch = check_batch(state, records)?;
    let mut tape = Tape::new();
    let mut binder = Binder::frozen();
    let pooled = pooled_graph(&mut tape, &mut binder, state, &batch, draw, None)?;
    Ok(match head_graph(&mut tape, &mut binder, state, pooled, draw)? {
        HeadVars::Logit(z) => HeadOutput::Logits(column(&tape, z)),
        HeadVars::Latent(m, v) => HeadOutput::Latent {
            mean: column(&tape, m),
            var: column(&tape, v),
        },
    })
}

/// Composite forward pass. Stochastic blocks are drawn once from `rng` for
/// the whole batch, or replaced by their means when `rng` is `None`.
pub fn composite_forward<R: rand::Rng + ?Sized>(
    state: &ModelState,
    records: &[&PatientRecord],
    rng: Option<&mut R>,
) -> Result<HeadOutput> {
    let draw = match rng {
        Some(r) if state.variant.has_stochastic_weights() => WeightDraw::sample(state, r),
        _ => WeightDraw::Mean,
    };
    composite_forward_with(state, records, &draw)
}

/// Pooled representation of every record (`B × pool`).
pub fn pooled_features(state: &ModelState, records: &[&PatientRecord], draw: &WeightDraw) -> Result<Mat> {
    let batch = check_batch(state, records)?;
    let mut tape = Tape::new();
    let mut binder = Binder::frozen();
    let pooled = pooled_graph(&mut tape, &mut binder, state, &batch, draw, None)?;
    Ok(tape.value(pooled).clone())
}

/// Projected GP inputs of every record (`B × latent_dim`).
pub fn latent_inputs(state: &ModelState, records: &[&PatientRecord], draw: &WeightDraw) -> Result<Mat> {
    if !state.variant.has_gp_head() {
        return Err(Error::config("variant", format!("{} has no GP head", state.variant)));
    }
    let batch = check_batch(state, records)?;
    let mut tape = Tape::new();
    let mut binder = Binder::frozen();
    let pooled = pooled_graph(&mut tape, &mut binder, state, &batch, draw, None)?;
    let x = projection_graph(&mut tape, &mut binder, state, pooled)?;
    Ok(tape.value(x).clone())
}

/// Head output on precomputed pooled features.
pub(crate) fn head_from_pooled(state: &ModelState, pooled: &Mat, draw: &WeightDraw) -> Result<HeadOutput> {
    let mut tape = Tape::new();
    let mut binder = Binder::frozen();
    let p = tape.constant(pooled.clone());
    Ok(match head_graph(&mut tape, &mut binder, state, p, draw)? {
        HeadVars::Logit(z) => HeadOutput::Logits(column(&tape, z)),
        HeadVars::Latent(m, v) => HeadOutput::Latent {
            mean: column(&tape, m),
            var: column(&tape, v),
        },
    })
}

pub(crate) struct ObjectiveGraph {
    pub total: Var,
    pub value: ObjectiveValue,
}

/// Builds `Σ_i E[log p(y_i | ·)] − (B / N) · (Σ_blocks KL + KL_u)` on the tape.
pub(crate) fn objective_graph(
    tape: &mut Tape,
    binder: &mut Binder,
    state: &ModelState,
    records: &[&PatientRecord],
    draw: &WeightDraw,
    dropout: Option<&mut rng::Rng>,
    kl_weight: f64,
) -> Result<ObjectiveGraph> {
    let batch = check_batch(state, records)?;
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let pooled = pooled_graph(tape, binder, state, &batch, draw, dropout)?;
    let mut kls = Vec::new();
    let fit = match head_graph(tape, binder, state, pooled, draw)? {
        HeadVars::Logit(z) => {
            let signs = Array2::from_shape_fn((labels.len(), 1), |(i, _)| if labels[i] == 1 { 1.0 } else { -1.0 });
            let s = tape.constant(signs);
            let z = tape.mul_col(z, s);
            let lp = tape.log_sigmoid(z);
            tape.sum(lp)
        }
        HeadVars::Latent(m, v) => {
            let quad = state.quadrature()?;
            let mean = binder.var(tape, &state.params, head_names::MEAN)?;
            let chol = binder.var(tape, &state.params, head_names::CHOL)?;
            kls.push(svgp::kl_graph(tape, mean, chol));
            bernoulli_expected_loglik_graph(tape, m, v, &labels, &quad)
        }
    };
    for (base, prior) in state.stochastic_blocks() {
        let mu = binder.var(tape, &state.params, &names::mu(&base))?;
        let rho = binder.var(tape, &state.params, &names::rho(&base))?;
        kls.push(bayeslayers::kl_graph(tape, mu, rho, prior));
    }
    let kl_scale = records.len() as f64 / state.n_train as f64;
    let (total, kl) = if kls.is_empty() {
        (fit, 0.0)
    } else {
        let mut k = kls[0];
        for &extra in &kls[1..] {
            k = tape.add(k, extra);
        }
        let kl = tape.scalar(k);
        let scaled = tape.scale(k, kl_scale * kl_weight);
        (tape.sub(fit, scaled), kl)
    };
    let value = ObjectiveValue {
        objective: tape.scalar(total),
        fit: tape.scalar(fit),
        kl,
        kl_scale,
    };
    Ok(ObjectiveGraph { total, value })
}

/// Variational objective of one batch under a fixed weight realization.
pub fn dbgp_elbo(state: &ModelState, records: &[&PatientRecord], draw: &WeightDraw) -> Result<ObjectiveValue> {
    let mut tape = Tape::new();
    let mut binder = Binder::frozen();
    Ok(objective_graph(&mut tape, &mut binder, state, records, draw, None, 1.0)?.value)
}

/// Objective and its gradient with respect to every trainable block.
pub fn dbgp_elbo_with_grad(
    state: &ModelState,
    records: &[&PatientRecord],
    draw: &WeightDraw,
    dropout: Option<&mut rng::Rng>,
) -> Result<(ObjectiveValue, GradMap)> {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let g = objective_graph(&mut tape, &mut binder, state, records, draw, dropout, 1.0)?;
    let grads = tape.backward(g.total);
    Ok((g.value, binder.gradients(&tape, &grads)))
}

/// Objective value together with the tape signature.
pub(crate) fn objective_with_signature(
    state: &ModelState,
    records: &[&PatientRecord],
    draw: &WeightDraw,
) -> Result<(f64, u64)> {
    let mut tape = Tape::new();
    let mut binder = Binder::frozen();
    let g = objective_graph(&mut tape, &mut binder, state, records, draw, None, 1.0)?;
    Ok((g.value.objective, tape.signature()))
}

/// Training records of a dataset.
pub fn training_records(records: &[PatientRecord]) -> Vec<&PatientRecord> {
    records.iter().filter(|r| r.split == Split::Train).collect()
}

/// Validation records of a dataset.
pub fn validation_records(records: &[PatientRecord]) -> Vec<&PatientRecord> {
    records.iter().filter(|r| r.split == Split::Validation).collect()
}

