//! Test-time adaptation strategies.
//!
//! Each strategy minimizes a prediction-quality objective on unlabeled
//! target data, updating only a masked subset of parameters with Adam:
//!
//! * `Tent` - prediction entropy, batch-norm scale/shift only.
//! * `EntropyKl` - entropy plus a weighted KL pull of the predicted class
//!   ratio towards an atlas prior, batch-norm only.
//! * `LayerInspect` - entropy, restricted to the `m` layers whose
//!   activation importance differs most between source and target.

pub mod adam;
pub mod inspect;

use std::collections::BTreeSet;

use crate::checkpoint::Checkpoint;
use crate::error::{CoreError, Result};
use crate::loss::{
    entropy_kl_loss_with_grad, shannon_entropy, shannon_entropy_with_grad, ClassRatioPrior,
    SoftPrediction,
};
use crate::net::Network;
use crate::tensor::Tensor;
use crate::volume::{batch_tensor, Volume};

pub use adam::AdamState;
pub use inspect::{
    select_layers, taylor_importance, ImportanceAccumulator, ImportanceVector, Provenance,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Tent,
    EntropyKl,
    LayerInspect,
}

impl Strategy {
    pub fn label(&self) -> &'static str {
        match self {
            Strategy::Tent => "tent",
            Strategy::EntropyKl => "entropy_kl",
            Strategy::LayerInspect => "layer_inspect",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    SingleSample,
    FullDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnStatsMode {
    /// Normalize with statistics of the data being adapted to (and keep
    /// doing so for the prediction on that data).
    Batch,
    /// Keep the frozen running statistics from source training.
    Running,
}

#[derive(Debug, Clone)]
pub struct AdaptationConfig {
    pub strategy: Strategy,
    pub learning_rate: f32,
    /// Backward passes per adaptation (per batch in full-dataset mode).
    pub num_passes: usize,
    /// KL weight (EntropyKl only).
    pub lambda: f64,
    /// Number of layers to update (LayerInspect only).
    pub m: usize,
    pub batch_mode: BatchMode,
    pub batch_size: usize,
    pub bn_stats_mode: BnStatsMode,
}

impl AdaptationConfig {
    pub fn tent() -> Self {
        Self {
            strategy: Strategy::Tent,
            learning_rate: 1e-3,
            num_passes: 1,
            lambda: 1.0,
            m: 1,
            batch_mode: BatchMode::SingleSample,
            batch_size: 2,
            bn_stats_mode: BnStatsMode::Batch,
        }
    }

    pub fn entropy_kl() -> Self {
        Self {
            strategy: Strategy::EntropyKl,
            ..Self::tent()
        }
    }

    pub fn layer_inspect() -> Self {
        Self {
            strategy: Strategy::LayerInspect,
            learning_rate: 1e-4,
            ..Self::tent()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(CoreError::InvalidConfig(format!(
                "learning rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        if self.num_passes == 0 {
            return Err(CoreError::InvalidConfig("num_passes must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(CoreError::InvalidConfig("lambda must be nonnegative".into()));
        }
        if self.m == 0 {
            return Err(CoreError::InvalidConfig("m must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }

    fn training_forward(&self) -> bool {
        self.bn_stats_mode == BnStatsMode::Batch
    }
}

/// Parameter names eligible for update.
#[derive(Debug, Clone, Default)]
pub struct ParameterMask {
    names: BTreeSet<String>,
}

impl ParameterMask {
    pub fn from_names<I: IntoIterator<Item = String>>(names: I) -> Self {
        Self {
            names: names.into_iter().collect(),
        }
    }

    /// All batch-norm scale and shift parameters.
    pub fn bn(net: &Network) -> Self {
        Self::from_names(net.bn_param_names())
    }

    /// All parameters of the given layers.
    pub fn for_layers(net: &Network, layers: &[usize]) -> Self {
        let mut names = BTreeSet::new();
        for &li in layers {
            for (name, _) in net.layers[li].params() {
                names.insert(name);
            }
        }
        Self { names }
    }

    pub fn all(net: &Network) -> Self {
        Self::from_names(net.param_names())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.names.iter()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// One optimization pass record.
#[derive(Debug, Clone)]
pub struct PassLog {
    pub pass: usize,
    pub total: f64,
    pub entropy: f64,
    pub kl: f64,
}

/// Result of one adaptation: the adapted network plus the per-pass loss
/// trace. Parameters outside `mask` are bit-identical to the source
/// (checked after every adaptation).
#[derive(Debug)]
pub struct AdaptedModel {
    pub net: Network,
    pub log: Vec<PassLog>,
    pub mask: ParameterMask,
    pub selected_layers: Option<Vec<usize>>,
}

enum LossSpec<'a> {
    Entropy,
    EntropyKl {
        prior: &'a ClassRatioPrior,
        lambda: f64,
    },
}

fn descent_passes(
    net: &mut Network,
    x: &Tensor,
    mask: &ParameterMask,
    cfg: &AdaptationConfig,
    loss: &LossSpec,
    adam: &mut AdamState,
    log: &mut Vec<PassLog>,
) -> Result<()> {
    for _ in 0..cfg.num_passes {
        let pred = net.forward(x, cfg.training_forward())?;
        let (lv, pgrad) = match loss {
            LossSpec::Entropy => shannon_entropy_with_grad(&pred)?,
            LossSpec::EntropyKl { prior, lambda } => {
                entropy_kl_loss_with_grad(&pred, prior, *lambda)?
            }
        };
        if !lv.total.is_finite() {
            return Err(CoreError::Numeric("adaptation loss is not finite".into()));
        }
        let grads = net.backward(&pgrad)?;
        adam.step(net, &grads.params, mask, cfg.learning_rate)?;
        log.push(PassLog {
            pass: log.len(),
            total: lv.total,
            entropy: lv.component("entropy").unwrap_or(lv.total),
            kl: lv.component("kl").unwrap_or(0.0),
        });
    }
    Ok(())
}

fn audit_mask(source: &Network, adapted: &Network, mask: &ParameterMask) -> Result<()> {
    for (name, t) in source.params() {
        if !mask.contains(&name) {
            let after = adapted
                .param(&name)
                .ok_or_else(|| CoreError::UnknownParameter(name.clone()))?;
            if !t.bit_eq(after) {
                return Err(CoreError::MaskViolation(name));
            }
        }
    }
    Ok(())
}

fn require_batch(batch: &[&Volume]) -> Result<()> {
    if batch.is_empty() {
        return Err(CoreError::InvalidConfig("empty adaptation batch".into()));
    }
    Ok(())
}

/// Entropy minimization over the batch-norm parameters.
pub fn adapt_tent(
    source: &Network,
    batch: &[&Volume],
    cfg: &AdaptationConfig,
) -> Result<AdaptedModel> {
    cfg.validate()?;
    require_batch(batch)?;
    let x = batch_tensor(batch)?;
    let mut net = source.clone();
    let mask = ParameterMask::bn(&net);
    let mut adam = AdamState::new();
    let mut log = Vec::new();
    descent_passes(&mut net, &x, &mask, cfg, &LossSpec::Entropy, &mut adam, &mut log)?;
    audit_mask(source, &net, &mask)?;
    Ok(AdaptedModel {
        net,
        log,
        mask,
        selected_layers: None,
    })
}

/// Entropy + class-ratio KL minimization over the batch-norm parameters.
pub fn adapt_entropy_kl(
    source: &Network,
    batch: &[&Volume],
    prior: &ClassRatioPrior,
    cfg: &AdaptationConfig,
) -> Result<AdaptedModel> {
    cfg.validate()?;
    require_batch(batch)?;
    if prior.num_classes() != source.num_classes {
        return Err(CoreError::InvalidConfig(format!(
            "prior has {} classes, network has {}",
            prior.num_classes(),
            source.num_classes
        )));
    }
    let x = batch_tensor(batch)?;
    let mut net = source.clone();
    let mask = ParameterMask::bn(&net);
    let mut adam = AdamState::new();
    let mut log = Vec::new();
    descent_passes(
        &mut net,
        &x,
        &mask,
        cfg,
        &LossSpec::EntropyKl {
            prior,
            lambda: cfg.lambda,
        },
        &mut adam,
        &mut log,
    )?;
    audit_mask(source, &net, &mask)?;
    Ok(AdaptedModel {
        net,
        log,
        mask,
        selected_layers: None,
    })
}

/// Entropy minimization restricted to the `m` layers whose activation
/// importance moved most from the cached source importance.
pub fn adapt_layer_inspect(
    source: &Network,
    batch: &[&Volume],
    theta_source: &ImportanceVector,
    cfg: &AdaptationConfig,
) -> Result<AdaptedModel> {
    cfg.validate()?;
    require_batch(batch)?;
    if theta_source.len() != source.num_layers() {
        return Err(CoreError::ShapeMismatch(format!(
            "source importance has {} entries for {} layers",
            theta_source.len(),
            source.num_layers()
        )));
    }
    let x = batch_tensor(batch)?;
    let mut net = source.clone();
    // Target importance is computed once, at the source parameters,
    // before any update.
    let theta_target =
        taylor_importance(&mut net, &x, cfg.training_forward(), Provenance::Target)?;
    let selected = select_layers(theta_source, &theta_target, cfg.m)?;
    let mask = ParameterMask::for_layers(&net, &selected);
    let mut adam = AdamState::new();
    let mut log = Vec::new();
    descent_passes(&mut net, &x, &mask, cfg, &LossSpec::Entropy, &mut adam, &mut log)?;
    audit_mask(source, &net, &mask)?;
    Ok(AdaptedModel {
        net,
        log,
        mask,
        selected_layers: Some(selected),
    })
}

/// Compute and return the per-layer source importance over
/// source-distribution data, for caching in a checkpoint. The network is
/// left untouched.
pub fn cache_source_importance(
    net: &Network,
    data: &[&Volume],
    batch_size: usize,
    bn_stats_mode: BnStatsMode,
) -> Result<ImportanceVector> {
    if data.is_empty() {
        return Err(CoreError::InvalidConfig(
            "source importance requires data".into(),
        ));
    }
    let mut scratch = net.clone();
    let mut acc = ImportanceAccumulator::new(net.num_layers());
    for chunk in data.chunks(batch_size.max(1)) {
        let x = batch_tensor(chunk)?;
        acc.accumulate(&mut scratch, &x, bn_stats_mode == BnStatsMode::Batch)?;
    }
    acc.finish(Provenance::Source)
}

/// Per-sample outcome of [`run_adaptation`].
#[derive(Debug)]
pub struct SampleOutcome {
    pub sample_index: usize,
    pub prediction: SoftPrediction,
    pub entropy_pre: f64,
    pub entropy_post: f64,
    pub log: Vec<PassLog>,
    pub selected_layers: Option<Vec<usize>>,
}

fn adapt_batch(
    source: &Network,
    batch: &[&Volume],
    cfg: &AdaptationConfig,
    prior: Option<&ClassRatioPrior>,
    theta_source: Option<&ImportanceVector>,
) -> Result<AdaptedModel> {
    match cfg.strategy {
        Strategy::Tent => adapt_tent(source, batch, cfg),
        Strategy::EntropyKl => {
            let prior = prior.ok_or_else(|| {
                CoreError::InvalidConfig("EntropyKl requires a class ratio prior".into())
            })?;
            adapt_entropy_kl(source, batch, prior, cfg)
        }
        Strategy::LayerInspect => {
            let theta = theta_source.ok_or(CoreError::MissingSourceImportance)?;
            adapt_layer_inspect(source, batch, theta, cfg)
        }
    }
}

/// Adapt and predict over a dataset.
///
/// In single-sample mode every sample gets a fresh copy of the source
/// model and its own optimizer; in full-dataset mode one model is adapted
/// sequentially over batches of `cfg.batch_size` and then predicts every
/// sample. Predictions come from the adapted model on the same data it
/// was adapted to.
pub fn run_adaptation(
    source: &Checkpoint,
    dataset: &[Volume],
    cfg: &AdaptationConfig,
    prior: Option<&ClassRatioPrior>,
) -> Result<Vec<SampleOutcome>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(CoreError::InvalidConfig("empty dataset".into()));
    }
    let theta_source = source
        .source_importance
        .as_ref()
        .map(|values| ImportanceVector {
            values: values.clone(),
            provenance: Provenance::Source,
        });
    let training = cfg.training_forward();

    match cfg.batch_mode {
        BatchMode::SingleSample => dataset
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let adapted =
                    adapt_batch(&source.net, &[v], cfg, prior, theta_source.as_ref())?;
                let mut net = adapted.net;
                let pred = net.forward(&v.to_input_tensor(), training)?;
                let entropy_post = shannon_entropy(&pred)?.total;
                Ok(SampleOutcome {
                    sample_index: i,
                    prediction: pred,
                    // First pass evaluates the loss at the source weights.
                    entropy_pre: adapted.log[0].entropy,
                    entropy_post,
                    log: adapted.log,
                    selected_layers: adapted.selected_layers,
                })
            })
            .collect(),
        BatchMode::FullDataset => {
            let refs: Vec<&Volume> = dataset.iter().collect();
            let mut net = source.net.clone();
            let mut adam = AdamState::new();
            let mut log = Vec::new();

            let (mask, selected) = match cfg.strategy {
                Strategy::Tent | Strategy::EntropyKl => (ParameterMask::bn(&net), None),
                Strategy::LayerInspect => {
                    let theta_s = theta_source
                        .as_ref()
                        .ok_or(CoreError::MissingSourceImportance)?;
                    let mut acc = ImportanceAccumulator::new(net.num_layers());
                    for chunk in refs.chunks(cfg.batch_size) {
                        let x = batch_tensor(chunk)?;
                        acc.accumulate(&mut net, &x, training)?;
                    }
                    let theta_t = acc.finish(Provenance::Target)?;
                    let selected = select_layers(theta_s, &theta_t, cfg.m)?;
                    (ParameterMask::for_layers(&net, &selected), Some(selected))
                }
            };
            let loss = match cfg.strategy {
                Strategy::EntropyKl => LossSpec::EntropyKl {
                    prior: prior.ok_or_else(|| {
                        CoreError::InvalidConfig(
                            "EntropyKl requires a class ratio prior".into(),
                        )
                    })?,
                    lambda: cfg.lambda,
                },
                _ => LossSpec::Entropy,
            };
            for chunk in refs.chunks(cfg.batch_size) {
                let x = batch_tensor(chunk)?;
                descent_passes(&mut net, &x, &mask, cfg, &loss, &mut adam, &mut log)?;
            }
            audit_mask(&source.net, &net, &mask)?;

            let mut pristine = source.net.clone();
            dataset
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let x = v.to_input_tensor();
                    let pre = shannon_entropy(&pristine.forward(&x, training)?)?.total;
                    let pred = net.forward(&x, training)?;
                    let entropy_post = shannon_entropy(&pred)?.total;
                    Ok(SampleOutcome {
                        sample_index: i,
                        prediction: pred,
                        entropy_pre: pre,
                        entropy_post,
                        log: log.clone(),
                        selected_layers: selected.clone(),
                    })
                })
                .collect()
        }
    }
}
