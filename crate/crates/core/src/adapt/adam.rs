//! Adam with a parameter mask: only masked parameters own optimizer
//! state and receive updates.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::net::Network;
use crate::tensor::Tensor;

use super::ParameterMask;

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    step: u32,
}

impl AdamState {
    pub fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u32 {
        self.step
    }

    /// One update over the masked parameters. Gradients must cover every
    /// masked parameter; parameters outside the mask are left untouched.
    pub fn step(
        &mut self,
        net: &mut Network,
        grads: &BTreeMap<String, Tensor>,
        mask: &ParameterMask,
        lr: f32,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for name in mask.names() {
            let grad = grads
                .get(name)
                .ok_or_else(|| CoreError::UnknownParameter(format!("{name} (gradient)")))?;
            let param = net
                .param_mut(name)
                .ok_or_else(|| CoreError::UnknownParameter(name.clone()))?;
            if grad.shape() != param.shape() {
                return Err(CoreError::ShapeMismatch(format!(
                    "gradient {:?} vs parameter {:?} for {name}",
                    grad.shape(),
                    param.shape()
                )));
            }
            let n = param.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let pd = param.data_mut();
            let gd = grad.data();
            for i in 0..n {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gd[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gd[i] * gd[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_net() -> Network {
        Network::reference_with_widths(2, 2, 2, 5).unwrap()
    }

    fn grads_like(net: &Network, value: f32) -> BTreeMap<String, Tensor> {
        net.params()
            .into_iter()
            .map(|(n, t)| (n, Tensor::full(t.shape(), value)))
            .collect()
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut net = toy_net();
        let before: Vec<_> = net.params().iter().map(|(_, t)| (*t).clone()).collect();
        let grads = grads_like(&net, 0.0);
        let mask = ParameterMask::all(&net);
        AdamState::new().step(&mut net, &grads, &mask, 1e-3).unwrap();
        for ((_, after), b) in net.params().iter().zip(&before) {
            assert!(after.bit_eq(b));
        }
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_lr() {
        // m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps) ~ lr
        let mut net = toy_net();
        let before = net.param("enc_bn.gamma").unwrap().data()[0];
        let grads = grads_like(&net, 1.0);
        let mask = ParameterMask::from_names(["enc_bn.gamma".to_string()]);
        AdamState::new().step(&mut net, &grads, &mask, 1e-3).unwrap();
        let after = net.param("enc_bn.gamma").unwrap().data()[0];
        let delta = before - after;
        assert!((delta - 1e-3).abs() < 1e-6, "delta = {delta}");
    }

    #[test]
    fn unmasked_parameters_do_not_move() {
        let mut net = toy_net();
        let before = net.param("enc_conv.weight").unwrap().clone();
        let grads = grads_like(&net, 1.0);
        let mask = ParameterMask::from_names(["enc_bn.gamma".to_string()]);
        AdamState::new().step(&mut net, &grads, &mask, 1e-3).unwrap();
        assert!(net.param("enc_conv.weight").unwrap().bit_eq(&before));
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut net = toy_net();
        let grads = BTreeMap::new();
        let mask = ParameterMask::from_names(["enc_bn.gamma".to_string()]);
        assert!(AdamState::new()
            .step(&mut net, &grads, &mask, 1e-3)
            .is_err());
    }
}
