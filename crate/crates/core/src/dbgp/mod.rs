//! Model assembly for the variant ladder: stochastic embeddings and output
//! layers, whitened and grid-structured GP heads, the combined variational
//! objective, training, Monte Carlo prediction and gradient checks.

mod checkpoint;
mod gradcheck;
mod model;
mod predict;
mod train;
mod variant;

pub use checkpoint::{checkpoint_from_str, checkpoint_to_string, load_checkpoint, save_checkpoint};
pub use gradcheck::{
    finite_difference_check, finite_difference_grad_check, relative_error, GradCheckOptions, GradCheckReport,
    RELATIVE_ERROR_FLOOR,
};
pub use model::{
    composite_forward, composite_forward_with, dbgp_elbo, dbgp_elbo_with_grad, head_names, init_inducing_from_data,
    init_model, latent_inputs, pooled_features, training_records, validation_records, GpConfig, HeadOutput,
    ModelConfig, ModelState, ObjectiveValue, PriorConfig, WeightDraw,
};
pub use predict::{mc_predict, predict_mean_probability, PredictiveSamples, PREDICT_CHUNK};
pub use train::{train, validation_auroc, EpochMetrics, TrainConfig, TrainOutcome};
pub use variant::{HeadKind, ModelVariant};
