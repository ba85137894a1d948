//! Central finite differences against analytic backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikeconv::ann::{Layer, LayerParams, LayerSpec};
use spikeconv::tensor::Tensor;

const EPS: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;
const SEEDS: u64 = 10;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Scalar objective `sum(r * layer(x))` in training mode.
fn objective(layer: &Layer, x: &Tensor, r: &Tensor) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (y, _) = layer.forward_train(x, &mut rng).unwrap();
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn central(f: impl Fn(f64) -> f64, x0: f64) -> f64 {
    (f(x0 + EPS) - f(x0 - EPS)) / (2.0 * EPS)
}

/// Compare every trainable gradient entry and every input gradient entry.
fn check_layer(layer: &Layer, input_shape: &[usize], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(input_shape, &mut rng);
    let mut fwd_rng = ChaCha8Rng::seed_from_u64(0);
    let (y, cache) = layer.forward_train(&x, &mut fwd_rng).unwrap();
    let r = random_tensor(y.shape(), &mut rng);
    let (grad_x, grads) = layer.backward(Some(&cache), &r).unwrap();
    let mut worst: f64 = 0.0;

    for i in 0..x.len() {
        let numeric = central(
            |v| {
                let mut xp = x.clone();
                xp.data_mut()[i] = v;
                objective(layer, &xp, &r)
            },
            x.data()[i],
        );
        worst = worst.max(rel_err(grad_x.data()[i], numeric));
    }
    for (p, grad) in grads.iter().enumerate() {
        for i in 0..grad.len() {
            let numeric = central(
                |v| {
                    let mut perturbed = layer.clone();
                    perturbed.params.trainable_mut()[p].data_mut()[i] = v;
                    objective(&perturbed, &x, &r)
                },
                layer.params.trainable()[p].data()[i],
            );
            worst = worst.max(rel_err(grad.data()[i], numeric));
        }
    }
    worst
}

fn random_layer(spec: LayerSpec, seed: u64) -> Layer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut layer = Layer::init(spec, &mut rng);
    // Non-trivial biases and affine batch-norm parameters.
    for t in layer.params.trainable_mut() {
        for v in t.data_mut() {
            if *v == 0.0 || *v == 1.0 {
                *v += rng.random_range(-0.5..0.5);
            }
        }
    }
    layer
}

fn assert_all_seeds(name: &str, spec: LayerSpec, input_shape: &[usize]) {
    for seed in 0..SEEDS {
        let layer = random_layer(spec.clone(), seed);
        let worst = check_layer(&layer, input_shape, seed);
        assert!(
            worst <= TOLERANCE,
            "{name} seed {seed}: relative error {worst:e}"
        );
    }
}

#[test]
fn conv2d_gradients() {
    let spec = LayerSpec::Conv2d {
        in_channels: 2,
        out_channels: 3,
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    assert_all_seeds("conv2d", spec, &[2, 2, 5, 5]);
}

#[test]
fn strided_unpadded_conv2d_gradients() {
    let spec = LayerSpec::Conv2d {
        in_channels: 1,
        out_channels: 2,
        kernel: 3,
        stride: 2,
        padding: 0,
    };
    assert_all_seeds("conv2d stride 2", spec, &[3, 1, 7, 7]);
}

#[test]
fn dense_gradients() {
    assert_all_seeds(
        "dense",
        LayerSpec::Dense {
            inputs: 7,
            outputs: 4,
        },
        &[3, 7],
    );
}

#[test]
fn batch_norm_gradients_on_images() {
    assert_all_seeds(
        "batch_norm",
        LayerSpec::BatchNorm { channels: 3 },
        &[4, 3, 3, 3],
    );
}

#[test]
fn batch_norm_gradients_on_features() {
    assert_all_seeds(
        "batch_norm flat",
        LayerSpec::BatchNorm { channels: 5 },
        &[6, 5],
    );
}

#[test]
fn parameter_free_layers() {
    // Random inputs keep ReLU and max-pool away from their kinks with
    // probability one; EPS is far below the typical gap.
    for seed in 0..SEEDS {
        for (name, spec, shape) in [
            ("relu", LayerSpec::Relu, vec![2, 3, 4, 4]),
            (
                "max_pool",
                LayerSpec::MaxPool { window: 2 },
                vec![2, 2, 4, 4],
            ),
            (
                "avg_pool",
                LayerSpec::AvgPool { window: 2 },
                vec![2, 2, 4, 4],
            ),
            ("flatten", LayerSpec::Flatten, vec![2, 2, 3, 3]),
            ("softmax", LayerSpec::Softmax, vec![3, 6]),
        ] {
            let layer = Layer::new(spec, LayerParams::None);
            let worst = check_layer(&layer, &shape, seed);
            assert!(
                worst <= TOLERANCE,
                "{name} seed {seed}: relative error {worst:e}"
            );
        }
    }
}
