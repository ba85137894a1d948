//! Conversion against trained MNIST networks and closed-form rate laws.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikeconv::ann::{
    build_vgg_mini, images_to_tensor, train, FeatureShape, Layer, LayerParams, LayerSpec,
    TrainConfig, TrainedNetwork, VggMiniConfig,
};
use spikeconv::convert::{
    convert, fold_batch_norm, map_to_spiking, normalize_weights, ConversionConfig, Rule,
};
use spikeconv::encoding::{poisson_encode, EncoderConfig, Scheme};
use spikeconv::neuron::NeuronParams;
use spikeconv::sim::{run, SimConfig};
use spikeconv::tensor::Tensor;

/// Raw default build (batch norm, max pooling) after a short training run,
/// so the batch-norm running statistics are far from the identity.
fn trained_raw_build() -> TrainedNetwork {
    let spec = build_vgg_mini(&VggMiniConfig::default());
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    train(&spec, &common::mnist().train.head(2_000), &cfg)
        .unwrap()
        .0
}

#[test]
fn folding_trained_batch_norm_preserves_outputs() {
    let net = trained_raw_build();
    let (folded, subs) = fold_batch_norm(&net).unwrap();
    assert_eq!(subs.len(), 2);
    assert!(folded
        .layers
        .iter()
        .all(|l| !matches!(l.spec, LayerSpec::BatchNorm { .. })));
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let data: Vec<f64> = (0..100 * 784).map(|_| rng.random_range(0.0..1.0)).collect();
    let x = Tensor::new(vec![100, 1, 28, 28], data).unwrap();
    let a = net.forward_infer(&x).unwrap();
    let b = folded.forward_infer(&x).unwrap();
    let worst = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-6, "max deviation {worst:e}");
}

#[test]
fn raw_build_report_has_one_entry_per_batch_norm_and_max_pool() {
    let net = trained_raw_build();
    let calibration = common::mnist().train.head(200);
    let (snn, report) = convert(&net, &calibration, &ConversionConfig::default()).unwrap();
    let count = |rule: Rule| {
        report
            .substitutions
            .iter()
            .filter(|s| s.rule == rule)
            .count()
    };
    assert_eq!(count(Rule::FoldBatchNorm), 2);
    assert_eq!(count(Rule::MaxToAvgPool), 2);
    assert_eq!(count(Rule::DropSoftmax), 1);
    assert_eq!(report.replay().unwrap(), snn.topology());
}

#[test]
fn normalization_never_flips_a_prediction() {
    let net = common::quick_network();
    let calibration = common::mnist().train.head(100);
    let cfg = ConversionConfig {
        calibration_sample_count: 100,
        ..ConversionConfig::default()
    };
    let compliant = TrainedNetwork {
        layers: net
            .layers
            .iter()
            .filter(|l| !matches!(l.spec, LayerSpec::Dropout { .. }))
            .cloned()
            .collect(),
        ..net.clone()
    };
    let (normalized, scales) = normalize_weights(&compliant, &calibration, &cfg).unwrap();
    assert!(scales.iter().all(|&s| s > 0.0 && s.is_finite()));
    assert_ne!(scales, vec![1.0; scales.len()]);
    assert_eq!(
        normalized.predict(&calibration).unwrap(),
        compliant.predict(&calibration).unwrap()
    );

    // After normalization the chosen percentile of the first pre-activation
    // (the input to its ReLU) is 1.
    let idx: Vec<usize> = (0..100).collect();
    let trace = normalized
        .forward_trace(&images_to_tensor(&calibration, &idx, normalized.input))
        .unwrap();
    let first_relu = normalized
        .layers
        .iter()
        .position(|l| l.spec == LayerSpec::Relu)
        .unwrap();
    let mut values = trace[first_relu].data().to_vec();
    let p = spikeconv::convert::percentile(&mut values, cfg.normalization_percentile);
    assert!((p - 1.0).abs() < 1e-9, "{p}");
}

fn dense(weight: f64) -> Layer {
    Layer::new(
        LayerSpec::Dense {
            inputs: 1,
            outputs: 1,
        },
        LayerParams::Affine {
            weight: Tensor::new(vec![1, 1], vec![weight]).unwrap(),
            bias: Tensor::new(vec![1], vec![0.0]).unwrap(),
        },
    )
}

/// One analog ReLU unit between a single input and a single output, mapped
/// to IF neurons with C_m = 1 and V_th = 1.
fn single_unit(weight: f64, replication: usize) -> spikeconv::convert::SpikingNetwork {
    let net = TrainedNetwork {
        input: FeatureShape::Flat(1),
        class_count: 1,
        layers: vec![
            dense(weight),
            Layer::new(LayerSpec::Relu, LayerParams::None),
            dense(1.0),
        ],
        train_config: None,
    };
    let cfg = ConversionConfig {
        neuron_template: NeuronParams::default(),
        replication_factor: replication,
        ..ConversionConfig::default()
    };
    map_to_spiking(&net, &cfg).unwrap()
}

struct UnitRun {
    input_rate: f64,
    replica_rates: Vec<f64>,
    output_count: u64,
}

fn drive(weight: f64, replication: usize, rate: f64, seed: u64) -> UnitRun {
    const STEPS: u32 = 10_000;
    let dt = 1e-3;
    let enc = EncoderConfig {
        lambda_max: rate,
        dt,
        horizon_steps: STEPS,
        seed,
        scheme: Scheme::Poisson,
    };
    let input = poisson_encode(&[1.0], &enc).unwrap();
    let mut cfg = SimConfig::new(rate, STEPS, seed);
    cfg.record_rasters.insert(0);
    let result = run(&single_unit(weight, replication), &input, &cfg).unwrap();
    let duration = STEPS as f64 * dt;
    let replica_rates = result
        .raster(0)
        .unwrap()
        .counts(replication)
        .iter()
        .map(|&c| c as f64 / duration)
        .collect();
    UnitRun {
        input_rate: input.len() as f64 / duration,
        replica_rates,
        output_count: result.counts_until(STEPS)[0],
    }
}

#[test]
fn unit_weight_neuron_fires_at_the_input_rate() {
    // At 250 Hz and above the Poisson count over 10,000 steps has a
    // relative spread below 2%, so 5% is more than 2.5 sigma.
    for (seed, rate) in [(1, 250.0), (2, 300.0)] {
        let r = drive(1.0, 1, rate, seed);
        let rel = (r.replica_rates[0] - rate).abs() / rate;
        assert!(rel <= 0.05, "rate {rate}: {} Hz", r.replica_rates[0]);
    }
    // Each input spike carries exactly one threshold of charge, so the
    // neuron reproduces the realized input count, up to the spike still in
    // flight at the horizon.
    for (seed, rate) in [(3, 20.0), (4, 120.0), (5, 300.0)] {
        let r = drive(1.0, 1, rate, seed);
        assert!((r.replica_rates[0] - r.input_rate).abs() * 10.0 <= 1.0 + 1e-9);
    }
}

#[test]
fn replicated_unit_keeps_the_summed_output() {
    for (seed, rate) in [(6, 250.0), (7, 300.0)] {
        let single = drive(1.0, 1, rate, seed);
        let replicated = drive(1.0, 4, rate, seed);
        assert_eq!(replicated.replica_rates.len(), 4);
        // Every replica sees the full input; outgoing weights carry 1/4.
        let summed: f64 = replicated.replica_rates.iter().sum::<f64>() / 4.0;
        assert!(
            (summed - rate).abs() / rate <= 0.05,
            "rate {rate}: summed {summed}"
        );
        assert_eq!(replicated.output_count, single.output_count);
    }
}

#[test]
fn zero_weight_unit_is_silent() {
    for replication in [1, 4] {
        let r = drive(0.0, replication, 300.0, 8);
        assert!(r.input_rate > 0.0);
        assert!(r.replica_rates.iter().all(|&x| x == 0.0));
        assert_eq!(r.output_count, 0);
    }
}

#[test]
fn converted_quick_network_tracks_its_analog_counterpart() {
    let net = common::quick_network();
    let test = common::mnist().test.head(200);
    let (snn, _) = convert(
        net,
        &common::mnist().train.head(500),
        &ConversionConfig::default(),
    )
    .unwrap();
    let analog = snn.to_trained();
    let a = net.predict(&test).unwrap();
    let b = analog.predict(&test).unwrap();
    assert_eq!(a, b);
}
