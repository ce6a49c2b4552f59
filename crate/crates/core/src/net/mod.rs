//! A small encoder-decoder segmentation network with explicit forward and
//! backward passes.
//!
//! The reference architecture has two resolution levels with one skip
//! connection: Conv(1->w1,k3)/BN/ReLU, MaxPool2, Conv(w1->w2,k3)/BN/ReLU,
//! NearestUpsample2, Concat skip, Conv(w1+w2->w1,k3)/BN/ReLU,
//! Conv(w1->C,k1), Softmax.

pub mod kernels;

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::loss::SoftPrediction;
use crate::rng::rng_from;
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone)]
pub struct Conv3d {
    /// (out_channels, in_channels, kd, kh, kw), odd kernel extents.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Debug, Clone)]
pub enum LayerKind {
    Conv3d(Conv3d),
    BatchNorm(BatchNorm),
    Relu,
    MaxPool,
    NearestUpsample,
    Softmax,
    /// Concatenates the previous layer's output with the cached output of
    /// `skip_from` along the channel axis.
    Concat { skip_from: usize },
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn kind_tag(&self) -> u8 {
        match self.kind {
            LayerKind::Conv3d(_) => 0,
            LayerKind::BatchNorm(_) => 1,
            LayerKind::Relu => 2,
            LayerKind::MaxPool => 3,
            LayerKind::NearestUpsample => 4,
            LayerKind::Softmax => 5,
            LayerKind::Concat { .. } => 6,
        }
    }

    /// Learnable parameters as ("layer.tensor", tensor) pairs.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        match &self.kind {
            LayerKind::Conv3d(c) => vec![
                (format!("{}.weight", self.name), &c.weight),
                (format!("{}.bias", self.name), &c.bias),
            ],
            LayerKind::BatchNorm(bn) => vec![
                (format!("{}.gamma", self.name), &bn.gamma),
                (format!("{}.beta", self.name), &bn.beta),
            ],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match &mut self.kind {
            LayerKind::Conv3d(c) => vec![
                (format!("{}.weight", self.name), &mut c.weight),
                (format!("{}.bias", self.name), &mut c.bias),
            ],
            LayerKind::BatchNorm(bn) => vec![
                (format!("{}.gamma", self.name), &mut bn.gamma),
                (format!("{}.beta", self.name), &mut bn.beta),
            ],
            _ => Vec::new(),
        }
    }

    pub fn is_batch_norm(&self) -> bool {
        matches!(self.kind, LayerKind::BatchNorm(_))
    }
}

/// Per-BN-layer statistics actually used to normalize in the last forward.
#[derive(Debug, Clone)]
pub struct BnSaved {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Debug)]
struct ForwardCache {
    input: Tensor,
    outputs: Vec<Tensor>,
    bn_saved: Vec<Option<BnSaved>>,
    pool_argmax: Vec<Option<Vec<u32>>>,
    training: bool,
}

/// Gradient store produced by [`Network::backward`].
#[derive(Debug)]
pub struct Gradients {
    /// dLoss/dParam keyed by "layer.tensor".
    pub params: BTreeMap<String, Tensor>,
    /// dLoss/dActivation for every layer output.
    pub activations: Vec<Tensor>,
    /// dLoss/dInput.
    pub input: Tensor,
}

#[derive(Debug)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub num_classes: usize,
    cache: Option<ForwardCache>,
}

impl Clone for Network {
    /// Clones parameters and buffers; the activation cache is not carried
    /// over.
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            num_classes: self.num_classes,
            cache: None,
        }
    }
}

impl Network {
    pub fn new(layers: Vec<Layer>, num_classes: usize) -> Result<Self> {
        let softmax_positions: Vec<usize> = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.kind, LayerKind::Softmax))
            .map(|(i, _)| i)
            .collect();
        if softmax_positions != vec![layers.len() - 1] {
            return Err(CoreError::InvalidConfig(
                "softmax must appear exactly once, as the final layer".into(),
            ));
        }
        for layer in &layers {
            match &layer.kind {
                LayerKind::Conv3d(c) => {
                    let ws = c.weight.shape();
                    if ws.len() != 5 || ws[2] % 2 == 0 || ws[3] % 2 == 0 || ws[4] % 2 == 0 {
                        return Err(CoreError::InvalidConfig(format!(
                            "conv {} kernel extents must be odd, got {:?}",
                            layer.name, ws
                        )));
                    }
                }
                LayerKind::BatchNorm(bn) => {
                    if bn.running_var.data().iter().any(|&v| v <= 0.0) {
                        return Err(CoreError::InvalidConfig(format!(
                            "batch norm {} running variance must be strictly positive",
                            layer.name
                        )));
                    }
                }
                LayerKind::Concat { skip_from } => {
                    if *skip_from >= layers.len() {
                        return Err(CoreError::InvalidConfig(
                            "concat skip source out of range".into(),
                        ));
                    }
                }
                _ => {}
            }
        }
        Ok(Self {
            layers,
            num_classes,
            cache: None,
        })
    }

    /// The fixed reference architecture with encoder width 8 and
    /// bottleneck width 16, seeded init.
    pub fn reference(num_classes: usize, seed: u64) -> Result<Self> {
        Self::reference_with_widths(8, 16, num_classes, seed)
    }

    /// Reference architecture with configurable widths (used by tests at
    /// tiny scales).
    pub fn reference_with_widths(
        w1: usize,
        w2: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(CoreError::InvalidConfig(
                "at least 2 classes required".into(),
            ));
        }
        let mut rng = rng_from(seed);
        let layers = vec![
            Layer {
                name: "enc_conv".into(),
                kind: LayerKind::Conv3d(conv_init(&mut rng, w1, 1, 3)),
            },
            Layer {
                name: "enc_bn".into(),
                kind: LayerKind::BatchNorm(bn_init(w1)),
            },
            Layer {
                name: "enc_relu".into(),
                kind: LayerKind::Relu,
            },
            Layer {
                name: "pool".into(),
                kind: LayerKind::MaxPool,
            },
            Layer {
                name: "mid_conv".into(),
                kind: LayerKind::Conv3d(conv_init(&mut rng, w2, w1, 3)),
            },
            Layer {
                name: "mid_bn".into(),
                kind: LayerKind::BatchNorm(bn_init(w2)),
            },
            Layer {
                name: "mid_relu".into(),
                kind: LayerKind::Relu,
            },
            Layer {
                name: "up".into(),
                kind: LayerKind::NearestUpsample,
            },
            Layer {
                name: "skip".into(),
                kind: LayerKind::Concat { skip_from: 2 },
            },
            Layer {
                name: "dec_conv".into(),
                kind: LayerKind::Conv3d(conv_init(&mut rng, w1, w2 + w1, 3)),
            },
            Layer {
                name: "dec_bn".into(),
                kind: LayerKind::BatchNorm(bn_init(w1)),
            },
            Layer {
                name: "dec_relu".into(),
                kind: LayerKind::Relu,
            },
            Layer {
                name: "head".into(),
                kind: LayerKind::Conv3d(conv_init(&mut rng, num_classes, w1, 1)),
            },
            Layer {
                name: "softmax".into(),
                kind: LayerKind::Softmax,
            },
        ];
        Self::new(layers, num_classes)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params().into_iter().map(|(n, _)| n).collect()
    }

    /// Names of all batch-norm scale/shift parameters.
    pub fn bn_param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| l.is_batch_norm())
            .flat_map(|l| l.params().into_iter().map(|(n, _)| n))
            .collect()
    }

    /// Per-layer outputs from the most recent forward pass.
    pub fn activation_cache(&self) -> Option<&[Tensor]> {
        self.cache.as_ref().map(|c| c.outputs.as_slice())
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Run the network. In training mode batch-norm layers normalize with
    /// batch statistics and update their running statistics; otherwise
    /// they use the stored running statistics.
    pub fn forward(&mut self, x: &Tensor, training: bool) -> Result<SoftPrediction> {
        let dims = x.dims5();
        if x.shape().len() != 5 {
            return Err(CoreError::ShapeMismatch(format!(
                "expected rank-5 input (b, 1, d, h, w), got {:?}",
                x.shape()
            )));
        }
        let [_, c_in, d, h, w] = dims;
        let expected_in = match &self.layers[0].kind {
            LayerKind::Conv3d(c) => c.weight.shape()[1],
            _ => 1,
        };
        if c_in != expected_in {
            return Err(CoreError::ShapeMismatch(format!(
                "expected {expected_in} input channel(s), got {c_in}"
            )));
        }
        let has_pool = self
            .layers
            .iter()
            .any(|l| matches!(l.kind, LayerKind::MaxPool));
        if has_pool && (d % 2 != 0 || h % 2 != 0 || w % 2 != 0) {
            return Err(CoreError::ShapeMismatch(format!(
                "spatial extents must be divisible by 2, got ({d}, {h}, {w})"
            )));
        }
        x.ensure_finite("network input")?;

        let n_layers = self.layers.len();
        let mut outputs: Vec<Tensor> = Vec::with_capacity(n_layers);
        let mut bn_saved: Vec<Option<BnSaved>> = vec![None; n_layers];
        let mut pool_argmax: Vec<Option<Vec<u32>>> = vec![None; n_layers];

        for li in 0..n_layers {
            let prev = if li == 0 { x } else { &outputs[li - 1] };
            let out = match &mut self.layers[li].kind {
                LayerKind::Conv3d(c) => kernels::conv3d_forward(prev, &c.weight, &c.bias),
                LayerKind::BatchNorm(bn) => {
                    let (mean, var) = if training {
                        let (m, v) = kernels::bn_batch_stats(prev);
                        let n = (prev.numel() / v.len()) as f32;
                        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                        for (rm, &bm) in bn.running_mean.data_mut().iter_mut().zip(&m) {
                            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * bm;
                        }
                        for (rv, &bv) in bn.running_var.data_mut().iter_mut().zip(&v) {
                            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * bv * unbias;
                        }
                        (m, v)
                    } else {
                        (
                            bn.running_mean.data().to_vec(),
                            bn.running_var.data().to_vec(),
                        )
                    };
                    let out =
                        kernels::bn_forward(prev, &bn.gamma, &bn.beta, &mean, &var, BN_EPS);
                    bn_saved[li] = Some(BnSaved { mean, var });
                    out
                }
                LayerKind::Relu => kernels::relu_forward(prev),
                LayerKind::MaxPool => {
                    let (out, idx) = kernels::maxpool_forward(prev);
                    pool_argmax[li] = Some(idx);
                    out
                }
                LayerKind::NearestUpsample => kernels::upsample_forward(prev),
                LayerKind::Softmax => kernels::softmax_forward(prev),
                LayerKind::Concat { skip_from } => {
                    kernels::concat_forward(prev, &outputs[*skip_from])
                }
            };
            outputs.push(out);
        }

        let prediction = SoftPrediction::new(outputs[n_layers - 1].clone())?;
        self.cache = Some(ForwardCache {
            input: x.clone(),
            outputs,
            bn_saved,
            pool_argmax,
            training,
        });
        Ok(prediction)
    }

    /// Reverse pass from a gradient w.r.t. the softmax output. Returns
    /// gradients for every parameter and every cached activation.
    pub fn backward(&self, loss_grad: &Tensor) -> Result<Gradients> {
        let cache = self
            .cache
            .as_ref()
            .ok_or(CoreError::BackwardBeforeForward)?;
        let n_layers = self.layers.len();
        if loss_grad.shape() != cache.outputs[n_layers - 1].shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "loss gradient shape {:?} does not match output {:?}",
                loss_grad.shape(),
                cache.outputs[n_layers - 1].shape()
            )));
        }

        let mut act_grads: Vec<Option<Tensor>> = (0..n_layers).map(|_| None).collect();
        act_grads[n_layers - 1] = Some(loss_grad.clone());
        let mut param_grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut input_grad: Option<Tensor> = None;

        let send = |slot: &mut Option<Tensor>, t: Tensor| {
            match slot {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
                None => *slot = Some(t),
            };
        };

        for li in (0..n_layers).rev() {
            // Consumers of z_li all have higher indices, so this grad is final.
            let dy = match act_grads[li].take() {
                Some(g) => g,
                None => Tensor::zeros(cache.outputs[li].shape()),
            };
            let prev = if li == 0 {
                &cache.input
            } else {
                &cache.outputs[li - 1]
            };
            let layer = &self.layers[li];
            let dx_prev = match &layer.kind {
                LayerKind::Conv3d(c) => {
                    let (dx, dw, db) = kernels::conv3d_backward(prev, &c.weight, &dy);
                    param_grads.insert(format!("{}.weight", layer.name), dw);
                    param_grads.insert(format!("{}.bias", layer.name), db);
                    dx
                }
                LayerKind::BatchNorm(bn) => {
                    let saved = cache.bn_saved[li]
                        .as_ref()
                        .expect("bn stats cached by forward");
                    let (dx, dgamma, dbeta) = if cache.training {
                        kernels::bn_backward_batch(
                            prev, &bn.gamma, &saved.mean, &saved.var, BN_EPS, &dy,
                        )
                    } else {
                        kernels::bn_backward_frozen(
                            prev, &bn.gamma, &saved.mean, &saved.var, BN_EPS, &dy,
                        )
                    };
                    param_grads.insert(format!("{}.gamma", layer.name), dgamma);
                    param_grads.insert(format!("{}.beta", layer.name), dbeta);
                    dx
                }
                LayerKind::Relu => kernels::relu_backward(prev, &dy),
                LayerKind::MaxPool => {
                    let idx = cache.pool_argmax[li]
                        .as_ref()
                        .expect("pool argmax cached by forward");
                    kernels::maxpool_backward(prev.shape(), idx, &dy)
                }
                LayerKind::NearestUpsample => kernels::upsample_backward(prev.shape(), &dy),
                LayerKind::Softmax => kernels::softmax_backward(&cache.outputs[li], &dy),
                LayerKind::Concat { skip_from } => {
                    let ca = prev.dims5()[1];
                    let cb = cache.outputs[*skip_from].dims5()[1];
                    let (da, dskip) = kernels::concat_backward(&dy, ca, cb);
                    send(&mut act_grads[*skip_from], dskip);
                    da
                }
            };
            act_grads[li] = Some(dy);
            if li == 0 {
                send(&mut input_grad, dx_prev);
            } else {
                send(&mut act_grads[li - 1], dx_prev);
            }
        }

        Ok(Gradients {
            params: param_grads,
            activations: act_grads
                .into_iter()
                .map(|g| g.expect("all activation grads populated"))
                .collect(),
            input: input_grad.expect("input grad populated"),
        })
    }
}

fn conv_init<R: Rng>(rng: &mut R, out_c: usize, in_c: usize, k: usize) -> Conv3d {
    let fan_in = (in_c * k * k * k) as f32;
    let bound = (6.0 / fan_in).sqrt();
    let n = out_c * in_c * k * k * k;
    let data: Vec<f32> = (0..n)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Conv3d {
        weight: Tensor::from_vec(&[out_c, in_c, k, k, k], data).unwrap(),
        bias: Tensor::zeros(&[out_c]),
    }
}

fn bn_init(c: usize) -> BatchNorm {
    BatchNorm {
        gamma: Tensor::full(&[c], 1.0),
        beta: Tensor::zeros(&[c]),
        running_mean: Tensor::zeros(&[c]),
        running_var: Tensor::full(&[c], 1.0),
    }
}
