//! Central finite-difference checks of every analytic gradient.
//!
//! The oracle is independent of the backward implementation: it only
//! calls `forward` plus the scalar loss evaluation at perturbed
//! parameters and compares (L(p + e) - L(p - e)) / 2e against the
//! reported gradient.

use rand::Rng;
use voltta_core::loss::{
    cross_entropy_with_grad, entropy_kl_loss_with_grad, shannon_entropy_with_grad,
    ClassRatioPrior,
};
use voltta_core::net::Network;
use voltta_core::rng::rng_for;
use voltta_core::tensor::Tensor;
use voltta_core::volume::LabelMap;

const EPS: f32 = 1e-3;
const REL_TOL: f64 = 1e-2;
/// Deviations this small are f32 forward noise, not backward defects
/// (a sign or scale bug would miss by orders of magnitude more).
const ABS_TOL: f64 = 2e-5;

#[derive(Clone, Copy)]
enum LossKind {
    Entropy,
    EntropyKl(f64),
    CrossEntropy,
}

fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_for(seed, "fd.input", 0);
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| rng.random_range(0.0..1.0f32)).collect(),
    )
    .unwrap()
}

fn random_labels(dims: [usize; 3], num_classes: usize, seed: u64) -> LabelMap {
    let mut rng = rng_for(seed, "fd.labels", 0);
    let n = dims[0] * dims[1] * dims[2];
    LabelMap::new(
        dims,
        1.0,
        (0..n)
            .map(|_| rng.random_range(0..num_classes as u8))
            .collect(),
    )
    .unwrap()
}

fn loss_of(
    net: &mut Network,
    x: &Tensor,
    training: bool,
    kind: LossKind,
    prior: &ClassRatioPrior,
    labels: &LabelMap,
) -> f64 {
    let pred = net.forward(x, training).unwrap();
    match kind {
        LossKind::Entropy => shannon_entropy_with_grad(&pred).unwrap().0.total,
        LossKind::EntropyKl(lambda) => {
            entropy_kl_loss_with_grad(&pred, prior, lambda).unwrap().0.total
        }
        LossKind::CrossEntropy => cross_entropy_with_grad(&pred, labels, false).unwrap().0.total,
    }
}

fn check_gradients(
    net: Network,
    x: &Tensor,
    training: bool,
    kind: LossKind,
    sample_per_tensor: Option<usize>,
    seed: u64,
) -> usize {
    check_gradients_tol(net, x, training, kind, sample_per_tensor, seed, EPS, ABS_TOL)
}

/// Check all (or `sample` random) parameter gradients of `net` against
/// central differences. Returns the number of parameters checked.
fn check_gradients_tol(
    mut net: Network,
    x: &Tensor,
    training: bool,
    kind: LossKind,
    sample_per_tensor: Option<usize>,
    seed: u64,
    eps: f32,
    abs_tol: f64,
) -> usize {
    let num_classes = net.num_classes;
    let prior_raw: Vec<f32> = (1..=num_classes).map(|i| i as f32).collect();
    let prior = ClassRatioPrior::new(&prior_raw).unwrap();
    let [_, _, d, h, w] = x.dims5();
    let labels = random_labels([d, h, w], num_classes, seed);

    let pred = net.forward(x, training).unwrap();
    let pgrad = match kind {
        LossKind::Entropy => shannon_entropy_with_grad(&pred).unwrap().1,
        LossKind::EntropyKl(lambda) => {
            entropy_kl_loss_with_grad(&pred, &prior, lambda).unwrap().1
        }
        LossKind::CrossEntropy => cross_entropy_with_grad(&pred, &labels, true)
            .unwrap()
            .1
            .unwrap(),
    };
    let grads = net.backward(&pgrad).unwrap();

    let mut rng = rng_for(seed, "fd.pick", 1);
    let names = net.param_names();
    let mut checked = 0usize;
    for name in names {
        let n = net.param(&name).unwrap().numel();
        let picks: Vec<usize> = match sample_per_tensor {
            None => (0..n).collect(),
            Some(k) => (0..k.min(n)).map(|_| rng.random_range(0..n)).collect(),
        };
        for i in picks {
            let analytic = grads.params[&name].data()[i] as f64;
            let original = net.param(&name).unwrap().data()[i];
            net.param_mut(&name).unwrap().data_mut()[i] = original + eps;
            let lp = loss_of(&mut net, x, training, kind, &prior, &labels);
            net.param_mut(&name).unwrap().data_mut()[i] = original - eps;
            let lm = loss_of(&mut net, x, training, kind, &prior, &labels);
            net.param_mut(&name).unwrap().data_mut()[i] = original;
            let fd = (lp - lm) / (2.0 * eps as f64);
            let abs_err = (analytic - fd).abs();
            let denom = analytic.abs().max(fd.abs());
            let rel = if denom > 0.0 { abs_err / denom } else { 0.0 };
            assert!(
                rel <= REL_TOL || abs_err <= abs_tol,
                "{name}[{i}]: analytic {analytic:.6e} vs fd {fd:.6e} (rel {rel:.3e})"
            );
            checked += 1;
        }
    }
    checked
}

fn tiny_net(seed: u64) -> Network {
    Network::reference_with_widths(2, 3, 3, seed).unwrap()
}

#[test]
fn every_parameter_matches_fd_entropy_batch_stats() {
    let net = tiny_net(11);
    let x = random_input(&[1, 1, 4, 4, 4], 21);
    let checked = check_gradients(net, &x, true, LossKind::Entropy, None, 31);
    assert!(checked > 400, "only {checked} parameters checked");
}

#[test]
fn every_parameter_matches_fd_entropy_running_stats() {
    let net = tiny_net(12);
    let x = random_input(&[1, 1, 4, 4, 4], 22);
    check_gradients(net, &x, false, LossKind::Entropy, None, 32);
}

#[test]
fn every_parameter_matches_fd_entropy_kl() {
    let net = tiny_net(13);
    let x = random_input(&[1, 1, 4, 4, 4], 23);
    check_gradients(net, &x, true, LossKind::EntropyKl(1.0), None, 33);
}

#[test]
fn every_parameter_matches_fd_cross_entropy() {
    // The 1/p curvature of cross-entropy leaves a visible O(eps^2)
    // central-difference bias at eps = 1e-3; a smaller step converges.
    let net = tiny_net(14);
    let x = random_input(&[1, 1, 4, 4, 4], 24);
    check_gradients_tol(net, &x, true, LossKind::CrossEntropy, None, 34, 3e-4, 2.5e-4);
}

#[test]
fn batched_input_gradients_match_fd() {
    let net = tiny_net(15);
    let x = random_input(&[2, 1, 4, 4, 4], 25);
    check_gradients(net, &x, true, LossKind::Entropy, Some(6), 35);
}

#[test]
fn gradient_is_exactly_zero_when_downstream_activations_are_zeroed() {
    // Force the mid block output below zero so its ReLU blocks every path
    // through the bottleneck; the shift parameter then cannot influence
    // the loss and its gradient must be exactly zero.
    let mut net = tiny_net(16);
    for v in net.param_mut("mid_bn.gamma").unwrap().data_mut() {
        *v = 0.0;
    }
    for v in net.param_mut("mid_bn.beta").unwrap().data_mut() {
        *v = -1.0;
    }
    let x = random_input(&[1, 1, 4, 4, 4], 26);
    let pred = net.forward(&x, true).unwrap();
    let (_, pgrad) = shannon_entropy_with_grad(&pred).unwrap();
    let grads = net.backward(&pgrad).unwrap();
    for &g in grads.params["mid_bn.beta"].data() {
        assert_eq!(g, 0.0);
    }
    for &g in grads.params["mid_conv.weight"].data() {
        assert_eq!(g, 0.0);
    }
}

#[test]
fn backward_before_forward_is_a_state_error() {
    let net = tiny_net(17);
    let g = Tensor::zeros(&[1, 3, 4, 4, 4]);
    assert!(matches!(
        net.backward(&g),
        Err(voltta_core::CoreError::BackwardBeforeForward)
    ));
}
