//! Core engine for test-time adaptation of a small volumetric
//! segmentation network, verified end to end on synthetic labeled
//! phantoms under simulated domain shifts.

pub mod adapt;
pub mod checkpoint;
pub mod error;
pub mod loss;
pub mod net;
pub mod phantom;
pub mod rng;
pub mod shift;
pub mod tensor;
pub mod volume;

pub use adapt::{
    adapt_entropy_kl, adapt_layer_inspect, adapt_tent, cache_source_importance, run_adaptation,
    select_layers, taylor_importance, AdaptationConfig, AdaptedModel, BatchMode, BnStatsMode,
    ImportanceVector, ParameterMask, SampleOutcome, Strategy,
};
pub use checkpoint::Checkpoint;
pub use error::{CoreError, Result};
pub use loss::{
    cross_entropy, dice_score, entropy_kl_loss, kl_divergence, mean_foreground_dice,
    predicted_class_ratio, shannon_entropy, ClassRatioPrior, LossValue, SoftPrediction,
};
pub use net::Network;
pub use phantom::{build_atlas, class_ratio_prior, generate_phantom, Atlas, PhantomSpec};
pub use shift::{histogram_match, ShiftSpec, ShiftedSample};
pub use tensor::Tensor;
pub use volume::{LabelMap, Volume};
