//! Scalar objectives and evaluation metrics: prediction entropy, class
//! ratio KL term and their combination, cross-entropy for source
//! training, and Dice overlap.
//!
//! Scalars are returned in f64 (sums over full volumes exceed 1e5 terms);
//! gradients are f32 tensors w.r.t. the softmax probabilities. All voxel
//! reductions are means, so loss weights stay comparable across volume
//! sizes. Logs are natural and clamped at probabilities below 1e-12.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use crate::volume::LabelMap;

/// Probability floor inside logarithms.
pub const P_MIN: f32 = 1e-12;
/// Class ratio floor applied by [`ClassRatioPrior`].
pub const TAU_FLOOR: f32 = 1e-6;

/// Per-voxel class probability field of shape (batch, C, d, h, w).
#[derive(Debug, Clone)]
pub struct SoftPrediction {
    probs: Tensor,
}

impl SoftPrediction {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.shape().len() != 5 {
            return Err(CoreError::ShapeMismatch(format!(
                "prediction must be rank 5, got {:?}",
                probs.shape()
            )));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.dims5()[1]
    }

    pub fn batch(&self) -> usize {
        self.probs.dims5()[0]
    }

    /// Number of voxels per sample.
    pub fn voxels_per_sample(&self) -> usize {
        let [_, _, d, h, w] = self.probs.dims5();
        d * h * w
    }

    /// Hard labels by per-voxel argmax (ties resolved to the lower class).
    pub fn argmax_labels(&self, voxel_mm: f32) -> Vec<LabelMap> {
        let [b, c, d, h, w] = self.probs.dims5();
        let vol = d * h * w;
        let pd = self.probs.data();
        (0..b)
            .map(|bi| {
                let base = bi * c * vol;
                let mut labels = vec![0u8; vol];
                for k in 0..vol {
                    let mut best = pd[base + k];
                    let mut arg = 0u8;
                    for ch in 1..c {
                        let v = pd[base + ch * vol + k];
                        if v > best {
                            best = v;
                            arg = ch as u8;
                        }
                    }
                    labels[k] = arg;
                }
                LabelMap::new([d, h, w], voxel_mm, labels).expect("dims consistent")
            })
            .collect()
    }
}

/// Per-class proportion vector derived from an atlas; floored and
/// normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRatioPrior {
    tau: Vec<f32>,
}

impl ClassRatioPrior {
    /// Floors entries at [`TAU_FLOOR`] and renormalizes to sum 1.
    pub fn new(raw: &[f32]) -> Result<Self> {
        if raw.len() < 2 {
            return Err(CoreError::InvalidConfig(
                "class ratio prior needs at least 2 classes".into(),
            ));
        }
        if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CoreError::InvalidConfig(
                "class ratio prior entries must be finite and nonnegative".into(),
            ));
        }
        let floored: Vec<f64> = raw.iter().map(|&v| (v as f64).max(TAU_FLOOR as f64)).collect();
        let sum: f64 = floored.iter().sum();
        if sum <= 0.0 {
            return Err(CoreError::InvalidConfig("class ratio prior sums to 0".into()));
        }
        Ok(Self {
            tau: floored.iter().map(|&v| (v / sum) as f32).collect(),
        })
    }

    pub fn tau(&self) -> &[f32] {
        &self.tau
    }

    pub fn num_classes(&self) -> usize {
        self.tau.len()
    }
}

/// A scalar objective with its named components.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub total: f64,
    pub components: Vec<(&'static str, f64)>,
}

impl LossValue {
    pub fn component(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
    }
}

fn validate_pred(pred: &SoftPrediction) -> Result<()> {
    if pred.num_classes() < 2 {
        return Err(CoreError::InvalidConfig(
            "prediction entropy needs at least 2 classes".into(),
        ));
    }
    Ok(())
}

/// Mean over voxels of the per-voxel Shannon entropy -sum_c p_c ln p_c.
pub fn shannon_entropy(pred: &SoftPrediction) -> Result<LossValue> {
    let (loss, _) = entropy_impl(pred, false)?;
    Ok(loss)
}

/// Entropy plus its gradient w.r.t. the probabilities.
pub fn shannon_entropy_with_grad(pred: &SoftPrediction) -> Result<(LossValue, Tensor)> {
    let (loss, grad) = entropy_impl(pred, true)?;
    Ok((loss, grad.expect("grad requested")))
}

fn entropy_impl(pred: &SoftPrediction, with_grad: bool) -> Result<(LossValue, Option<Tensor>)> {
    validate_pred(pred)?;
    let p = pred.probs();
    let [b, _, d, h, w] = p.dims5();
    let voxels = (b * d * h * w) as f64;
    let mut sum = 0.0f64;
    for &v in p.data() {
        let pv = v.max(P_MIN);
        sum -= (v as f64) * (pv as f64).ln();
    }
    let total = sum / voxels;
    let grad = if with_grad {
        let inv = (1.0 / voxels) as f32;
        let mut g = Tensor::zeros(p.shape());
        for (gv, &v) in g.data_mut().iter_mut().zip(p.data()) {
            let pv = v.max(P_MIN);
            // d/dp of -p ln(max(p, eps)): the p/p term vanishes below the clamp
            let indicator = if v > P_MIN { 1.0 } else { 0.0 };
            *gv = (-pv.ln() - indicator) * inv;
        }
        Some(g)
    } else {
        None
    };
    Ok((
        LossValue {
            total,
            components: vec![("entropy", total)],
        },
        grad,
    ))
}

/// Mean predicted probability per class over all voxels of the batch.
pub fn predicted_class_ratio(pred: &SoftPrediction) -> Result<Vec<f64>> {
    validate_pred(pred)?;
    let p = pred.probs();
    let [b, c, d, h, w] = p.dims5();
    let vol = d * h * w;
    let voxels = (b * vol) as f64;
    let pd = p.data();
    let mut tau_hat = vec![0.0f64; c];
    for bi in 0..b {
        for (ch, t) in tau_hat.iter_mut().enumerate() {
            let base = (bi * c + ch) * vol;
            let mut s = 0.0f64;
            for &v in &pd[base..base + vol] {
                s += v as f64;
            }
            *t += s;
        }
    }
    for t in &mut tau_hat {
        *t /= voxels;
    }
    Ok(tau_hat)
}

/// KL(tau_hat || tau) = sum_k tau_hat_k ln(tau_hat_k / tau_k), with
/// tau_hat clamped at [`P_MIN`] inside the log.
pub fn kl_divergence(tau_hat: &[f64], tau: &ClassRatioPrior) -> Result<f64> {
    if tau_hat.len() != tau.num_classes() {
        return Err(CoreError::ShapeMismatch(format!(
            "ratio vector length {} vs prior length {}",
            tau_hat.len(),
            tau.num_classes()
        )));
    }
    let mut kl = 0.0f64;
    for (&th, &t) in tau_hat.iter().zip(tau.tau()) {
        let clamped = th.max(P_MIN as f64);
        kl += th * (clamped / t as f64).ln();
    }
    Ok(kl.max(0.0))
}

/// Combined objective: entropy + lambda * KL(predicted ratio || prior).
pub fn entropy_kl_loss(
    pred: &SoftPrediction,
    tau: &ClassRatioPrior,
    lambda: f64,
) -> Result<LossValue> {
    let (loss, _) = entropy_kl_impl(pred, tau, lambda, false)?;
    Ok(loss)
}

/// Combined objective plus its gradient w.r.t. the probabilities.
///
/// With lambda == 0 the gradient path is exactly the entropy gradient
/// (the KL term contributes no arithmetic), so parameter trajectories
/// match plain entropy minimization bit for bit.
pub fn entropy_kl_loss_with_grad(
    pred: &SoftPrediction,
    tau: &ClassRatioPrior,
    lambda: f64,
) -> Result<(LossValue, Tensor)> {
    let (loss, grad) = entropy_kl_impl(pred, tau, lambda, true)?;
    Ok((loss, grad.expect("grad requested")))
}

fn entropy_kl_impl(
    pred: &SoftPrediction,
    tau: &ClassRatioPrior,
    lambda: f64,
    with_grad: bool,
) -> Result<(LossValue, Option<Tensor>)> {
    if lambda < 0.0 {
        return Err(CoreError::InvalidConfig(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    if pred.num_classes() != tau.num_classes() {
        return Err(CoreError::ShapeMismatch(format!(
            "prediction has {} classes, prior has {}",
            pred.num_classes(),
            tau.num_classes()
        )));
    }
    let (entropy, mut grad) = entropy_impl(pred, with_grad)?;
    let tau_hat = predicted_class_ratio(pred)?;
    let kl = kl_divergence(&tau_hat, tau)?;

    if lambda == 0.0 {
        let total = entropy.total;
        return Ok((
            LossValue {
                total,
                components: vec![("entropy", entropy.total), ("kl", 0.0)],
            },
            grad,
        ));
    }

    let total = entropy.total + lambda * kl;
    if let Some(g) = grad.as_mut() {
        let p = pred.probs();
        let [b, c, d, h, w] = p.dims5();
        let vol = d * h * w;
        let voxels = (b * vol) as f64;
        // dKL/dtau_hat_k = ln(tau_hat_k / tau_k) + 1 (clamped below P_MIN),
        // and dtau_hat_k/dp_k(v) = 1/voxels.
        let per_class: Vec<f32> = tau_hat
            .iter()
            .zip(tau.tau())
            .map(|(&th, &t)| {
                let clamped = th.max(P_MIN as f64);
                let indicator = if th > P_MIN as f64 { 1.0 } else { 0.0 };
                ((lambda * ((clamped / t as f64).ln() + indicator)) / voxels) as f32
            })
            .collect();
        let gd = g.data_mut();
        for bi in 0..b {
            for (ch, &add) in per_class.iter().enumerate() {
                let base = (bi * c + ch) * vol;
                for gv in &mut gd[base..base + vol] {
                    *gv += add;
                }
            }
        }
    }
    Ok((
        LossValue {
            total,
            components: vec![("entropy", entropy.total), ("kl", lambda * kl)],
        },
        grad,
    ))
}

/// Mean over voxels of -ln p_true(v); gradient on request.
pub fn cross_entropy_with_grad(
    pred: &SoftPrediction,
    truth: &LabelMap,
    with_grad: bool,
) -> Result<(LossValue, Option<Tensor>)> {
    validate_pred(pred)?;
    let p = pred.probs();
    let [b, c, d, h, w] = p.dims5();
    let vol = d * h * w;
    if truth.numel() * b != b * vol || truth.dims != [d, h, w] {
        return Err(CoreError::ShapeMismatch(format!(
            "labels {:?} do not match prediction spatial dims ({d}, {h}, {w})",
            truth.dims
        )));
    }
    let voxels = (b * vol) as f64;
    let pd = p.data();
    let mut sum = 0.0f64;
    let mut grad = if with_grad {
        Some(Tensor::zeros(p.shape()))
    } else {
        None
    };
    for bi in 0..b {
        for k in 0..vol {
            let cls = truth.data[k] as usize;
            if cls >= c {
                return Err(CoreError::InvalidConfig(format!(
                    "label {cls} out of range for {c} classes"
                )));
            }
            let idx = (bi * c + cls) * vol + k;
            let pv = pd[idx].max(P_MIN);
            sum -= (pv as f64).ln();
            if let Some(g) = grad.as_mut() {
                if pd[idx] > P_MIN {
                    g.data_mut()[idx] = (-1.0f64 / pv as f64 / voxels) as f32;
                }
            }
        }
    }
    Ok((
        LossValue {
            total: sum / voxels,
            components: vec![("cross_entropy", sum / voxels)],
        },
        grad,
    ))
}

pub fn cross_entropy(pred: &SoftPrediction, truth: &LabelMap) -> Result<LossValue> {
    cross_entropy_with_grad(pred, truth, false).map(|(l, _)| l)
}

/// Dice overlap 2|A∩B| / (|A|+|B|) for one class; 1.0 when both masks are
/// empty.
pub fn dice_score(pred: &LabelMap, truth: &LabelMap, class_id: u8) -> Result<f64> {
    if pred.dims != truth.dims {
        return Err(CoreError::ShapeMismatch(format!(
            "label maps {:?} vs {:?}",
            pred.dims, truth.dims
        )));
    }
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&pv, &tv) in pred.data.iter().zip(&truth.data) {
        let pa = pv == class_id;
        let tb = tv == class_id;
        a += pa as usize;
        b += tb as usize;
        inter += (pa && tb) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Mean Dice over the foreground classes 1..num_classes.
pub fn mean_foreground_dice(pred: &LabelMap, truth: &LabelMap, num_classes: usize) -> Result<f64> {
    let mut sum = 0.0;
    for cls in 1..num_classes {
        sum += dice_score(pred, truth, cls as u8)?;
    }
    Ok(sum / (num_classes - 1) as f64)
}

/// Per-class Dice for the foreground classes 1..num_classes.
pub fn per_class_dice(pred: &LabelMap, truth: &LabelMap, num_classes: usize) -> Result<Vec<f64>> {
    (1..num_classes)
        .map(|cls| dice_score(pred, truth, cls as u8))
        .collect()
}
