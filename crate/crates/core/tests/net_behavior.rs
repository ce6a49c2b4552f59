//! Forward-pass contracts of the reference network.

use rand::Rng;
use voltta_core::net::{kernels, Network};
use voltta_core::phantom::{generate_phantom, PhantomSpec};
use voltta_core::rng::rng_for;
use voltta_core::tensor::Tensor;

fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_for(seed, "net.input", 0);
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| rng.random_range(-1.0..1.0f32)).collect(),
    )
    .unwrap()
}

#[test]
fn output_has_input_spatial_shape_with_c_channels() {
    let mut net = Network::reference_with_widths(4, 6, 5, 3).unwrap();
    let x = random_input(&[2, 1, 8, 6, 10], 1);
    let pred = net.forward(&x, true).unwrap();
    assert_eq!(pred.probs().shape(), &[2, 5, 8, 6, 10]);
}

#[test]
fn probabilities_sum_to_one_on_random_voxels() {
    let mut net = Network::reference_with_widths(4, 6, 5, 4).unwrap();
    let x = random_input(&[1, 1, 10, 10, 10], 2);
    let pred = net.forward(&x, true).unwrap();
    let p = pred.probs();
    let [_, c, d, h, w] = p.dims5();
    let vol = d * h * w;
    let mut rng = rng_for(7, "net.pick", 0);
    for _ in 0..1000 {
        let k = rng.random_range(0..vol);
        let mut sum = 0.0f32;
        for ch in 0..c {
            let v = p.data()[ch * vol + k];
            assert!((0.0..=1.0).contains(&v));
            sum += v;
        }
        assert!((sum - 1.0).abs() <= 1e-5, "voxel {k} sums to {sum}");
    }
}

#[test]
fn zero_input_gives_uniform_probabilities() {
    // Bias starts at zero, so a zero volume stays zero through every conv
    // and batch norm; the softmax of equal logits is uniform.
    let mut net = Network::reference(5, 5).unwrap();
    let x = Tensor::zeros(&[1, 1, 8, 8, 8]);
    let pred = net.forward(&x, true).unwrap();
    for &v in pred.probs().data() {
        assert!((v - 0.2).abs() <= 1e-6, "expected 1/C, got {v}");
    }
}

#[test]
fn forward_rejects_bad_inputs() {
    let mut net = Network::reference(3, 6).unwrap();
    // wrong channel count
    assert!(net.forward(&Tensor::zeros(&[1, 2, 8, 8, 8]), true).is_err());
    // odd spatial extent with a pooling level
    assert!(net.forward(&Tensor::zeros(&[1, 1, 7, 8, 8]), true).is_err());
    // non-finite input
    let mut x = Tensor::zeros(&[1, 1, 8, 8, 8]);
    x.data_mut()[0] = f32::NAN;
    assert!(net.forward(&x, true).is_err());
}

#[test]
fn all_outputs_finite_on_random_input() {
    let mut net = Network::reference(5, 7).unwrap();
    let x = random_input(&[1, 1, 8, 8, 8], 3);
    let pred = net.forward(&x, true).unwrap();
    assert!(pred.probs().is_finite());
    for act in net.activation_cache().unwrap() {
        assert!(act.is_finite());
    }
}

#[test]
fn forward_is_deterministic() {
    let x = random_input(&[1, 1, 8, 8, 8], 4);
    let run = || {
        let mut net = Network::reference(5, 8).unwrap();
        net.forward(&x, true).unwrap()
    };
    assert!(run().probs().bit_eq(run().probs()));
}

#[test]
fn training_mode_updates_running_stats_inference_does_not() {
    let mut net = Network::reference(3, 9).unwrap();
    let x = random_input(&[1, 1, 8, 8, 8], 5);
    let before = net.param("enc_bn.gamma").unwrap().clone();
    let rm_before = match &net.layers[1].kind {
        voltta_core::net::LayerKind::BatchNorm(bn) => bn.running_mean.clone(),
        _ => unreachable!(),
    };
    net.forward(&x, false).unwrap();
    let rm_inference = match &net.layers[1].kind {
        voltta_core::net::LayerKind::BatchNorm(bn) => bn.running_mean.clone(),
        _ => unreachable!(),
    };
    assert!(rm_before.bit_eq(&rm_inference));
    net.forward(&x, true).unwrap();
    let rm_training = match &net.layers[1].kind {
        voltta_core::net::LayerKind::BatchNorm(bn) => bn.running_mean.clone(),
        _ => unreachable!(),
    };
    assert!(!rm_before.bit_eq(&rm_training));
    // parameters (as opposed to buffers) never move in a forward pass
    assert!(net.param("enc_bn.gamma").unwrap().bit_eq(&before));
}

#[test]
fn inference_batch_norm_is_affine() {
    // With frozen stats the layer is a per-channel affine map, so the
    // midpoint of two inputs maps to the midpoint of the outputs.
    let gamma = Tensor::from_vec(&[2], vec![1.3, 0.7]).unwrap();
    let beta = Tensor::from_vec(&[2], vec![0.2, -0.4]).unwrap();
    let mean = vec![0.1, -0.3];
    let var = vec![0.9, 2.1];
    let a = random_input(&[1, 2, 4, 4, 4], 6);
    let b = random_input(&[1, 2, 4, 4, 4], 7);
    let mid = Tensor::from_vec(
        a.shape(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| 0.5 * (x + y))
            .collect(),
    )
    .unwrap();
    let ya = kernels::bn_forward(&a, &gamma, &beta, &mean, &var, 1e-5);
    let yb = kernels::bn_forward(&b, &gamma, &beta, &mean, &var, 1e-5);
    let ymid = kernels::bn_forward(&mid, &gamma, &beta, &mean, &var, 1e-5);
    for ((&va, &vb), &vm) in ya.data().iter().zip(yb.data()).zip(ymid.data()) {
        assert!((0.5 * (va + vb) - vm).abs() <= 1e-5);
    }
}

#[test]
fn seeded_phantom_forward_matches_golden_checksum() {
    let (volume, _) = generate_phantom(&PhantomSpec {
        grid: 8,
        seed: 2,
        ..Default::default()
    })
    .unwrap();
    let mut net = Network::reference(5, 515).unwrap();
    let pred = net.forward(&volume.to_input_tensor(), true).unwrap();
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &v in pred.probs().data() {
        for b in v.to_le_bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x1000_0000_01b3);
        }
    }
    let digest = format!("{hash:016x}");
    let golden = include_str!("data/forward_golden.txt").trim().to_string();
    assert_eq!(digest, golden, "forward output drifted from the frozen golden checksum");
}
