//! End-to-end behaviour of converted MNIST networks.

mod common;

use std::sync::OnceLock;

use spikeconv::ann::{images_to_tensor, LayerSpec};
use spikeconv::convert::{convert, ConversionConfig, SpikingNetwork};
use spikeconv::encoding::parse_events_csv;
use spikeconv::sim::{accuracy_curve, classify, export_raster, rate_sweep, SimConfig};
use spikeconv::tensor::argmax;

fn snn() -> &'static SpikingNetwork {
    static NET: OnceLock<SpikingNetwork> = OnceLock::new();
    NET.get_or_init(|| {
        convert(
            common::quick_network(),
            &common::mnist().train.head(500),
            &ConversionConfig::default(),
        )
        .unwrap()
        .0
    })
}

/// Index of the test "7" among the first 100 images on which the analog
/// network has the largest softmax margin.
fn clearest_seven() -> usize {
    let test = &common::mnist().test;
    let net = common::quick_network();
    let idx: Vec<usize> = (0..100).filter(|&i| test.label(i) == 7).collect();
    let probs = net
        .forward_infer(&images_to_tensor(test, &idx, net.input))
        .unwrap();
    let margin = |row: &[f64]| {
        let mut sorted = row.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        sorted[0] - sorted[1]
    };
    let best = (0..idx.len())
        .max_by(|&a, &b| margin(probs.item(a)).total_cmp(&margin(probs.item(b))))
        .unwrap();
    assert_eq!(argmax(probs.item(best)), 7);
    idx[best]
}

fn label_zero_frequency(labels: &[u8]) -> f64 {
    labels.iter().filter(|&&l| l == 0).count() as f64 / labels.len() as f64
}

#[test]
fn clear_seven_is_classified_as_seven() {
    let image = common::mnist().test.image_f64(clearest_seven());
    let (label, confidence, result) =
        classify(snn(), &image, &SimConfig::new(300.0, 200, 1)).unwrap();
    assert_eq!(label, 7);
    assert_eq!(argmax(&confidence), 7);
    assert!((confidence.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(result.first_output_step.is_some());
}

#[test]
fn high_margin_image_keeps_its_label_across_seeds() {
    let image = common::mnist().test.image_f64(clearest_seven());
    let mut votes = [0usize; 10];
    for seed in 0..20 {
        let (label, _, _) =
            classify(snn(), &image, &SimConfig::new(300.0, 200, 100 + seed)).unwrap();
        votes[label] += 1;
    }
    let modal = argmax(&votes);
    assert!(votes[modal] >= 18, "votes {votes:?}");
}

#[test]
fn accuracy_curve_starts_at_label_zero_frequency_and_rises() {
    let data = common::mnist().test.head(200);
    let cfg = SimConfig::new(300.0, 200, 1);
    let curve = accuracy_curve(snn(), &data, &cfg).unwrap();
    assert_eq!(curve.len(), 201);
    assert!((curve[0] - label_zero_frequency(data.labels())).abs() < 1e-12);
    let sweep = rate_sweep(snn(), &data, &[300.0], &cfg).unwrap();
    assert_eq!(sweep.curves[0], curve);
    assert_eq!(sweep.rows[0].accuracy, curve[200]);

    // Least-squares slope over the first quarter.
    let n = 51.0;
    let mean_t = 25.0;
    let mean_a = curve[..=50].iter().sum::<f64>() / n;
    let cov: f64 = curve[..=50]
        .iter()
        .enumerate()
        .map(|(t, a)| (t as f64 - mean_t) * (a - mean_a))
        .sum();
    assert!(cov > 0.0, "first-quarter slope {cov}");
}

#[test]
fn zero_rate_reads_out_label_zero_and_spikes_grow_with_rate() {
    let data = common::mnist().test.head(100);
    let sweep = rate_sweep(
        snn(),
        &data,
        &[0.0, 100.0, 200.0, 300.0],
        &SimConfig::new(300.0, 100, 1),
    )
    .unwrap();
    let rows = &sweep.rows;
    assert!((rows[0].accuracy - label_zero_frequency(data.labels())).abs() < 1e-12);
    assert_eq!(rows[0].mean_spikes, 0.0);
    assert_eq!(rows[0].mean_latency_steps, 100.0);
    assert!(
        rows.windows(2).all(|w| w[0].mean_spikes < w[1].mean_spikes),
        "{rows:?}"
    );
}

#[test]
fn accuracy_trend_over_rates_is_monotone_within_two_points() {
    let data = common::mnist().test.head(1000);
    let sweep = rate_sweep(
        snn(),
        &data,
        &[100.0, 200.0, 300.0],
        &SimConfig::new(300.0, 100, 1),
    )
    .unwrap();
    let acc: Vec<f64> = sweep.rows.iter().map(|r| r.accuracy).collect();
    assert!(acc.windows(2).all(|w| w[1] >= w[0] - 0.02), "{acc:?}");
}

#[test]
fn first_hidden_rates_correlate_with_analog_activations() {
    const T: u32 = 500;
    let net = snn();
    let analog = net.to_trained();
    let relu = analog
        .layers
        .iter()
        .position(|l| l.spec == LayerSpec::Relu)
        .unwrap();
    let data = common::mnist().test.head(100);
    let idx: Vec<usize> = (0..100).collect();
    let trace = analog
        .forward_trace(&images_to_tensor(&data, &idx, analog.input))
        .unwrap();
    // Entry i of the trace is the input to layer i.
    let activations = &trace[relu + 1];
    let width = activations.item(0).len();

    let mut cfg = SimConfig::new(300.0, T, 3);
    cfg.record_rasters.insert(0);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for i in 0..100 {
        let (_, _, result) = classify(
            net,
            &data.image_f64(i),
            &cfg.clone().with_seed(3 + i as u64),
        )
        .unwrap();
        let counts = result.raster(0).unwrap().counts(width);
        xs.extend_from_slice(activations.item(i));
        ys.extend(counts.iter().map(|&c| c as f64 / T as f64));
    }
    let r = pearson(&xs, &ys);
    assert!(r > 0.9, "pearson r {r}");
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[test]
fn exported_raster_parses_back() {
    let image = common::mnist().test.image_f64(0);
    let mut cfg = SimConfig::new(300.0, 50, 2);
    cfg.record_rasters.extend([0, 1]);
    let (_, _, result) = classify(snn(), &image, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for layer in [0, 1] {
        let path = dir.path().join(format!("raster_{layer}.csv"));
        export_raster(&result, layer, &path).unwrap();
        let parsed = parse_events_csv(&std::fs::read_to_string(&path).unwrap(), 50, 1e-3).unwrap();
        assert_eq!(&parsed, result.raster(layer).unwrap());
        assert!(!parsed.is_empty());
    }
    assert!(export_raster(&result, 2, &dir.path().join("x.csv")).is_err());
}
