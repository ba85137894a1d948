//! Encoder statistics and DVS emulation against hand-derived references.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikeconv::encoding::{
    dvs_emulate, dvs_emulate_irradiance, poisson_encode, EncoderConfig, Polarity, SaccadeConfig,
    Scheme, SpikeEvent,
};

fn poisson_cfg(lambda_max: f64, horizon_steps: u32, seed: u64) -> EncoderConfig {
    EncoderConfig {
        lambda_max,
        dt: 1e-3,
        horizon_steps,
        seed,
        scheme: Scheme::Poisson,
    }
}

/// Number of standard deviations between `count` and Binomial(n, p).
fn z_score(count: u64, n: u32, p: f64) -> f64 {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (count as f64 - mean) / sd
}

#[test]
fn poisson_counts_within_four_sigma() {
    let horizon = 10_000;
    for (seed, v) in [(11, 0.1), (12, 0.5), (13, 0.9)] {
        let values = vec![v; 50];
        let cfg = poisson_cfg(1000.0, horizon, seed);
        let counts = poisson_encode(&values, &cfg).unwrap().counts(values.len());
        for (i, &c) in counts.iter().enumerate() {
            let z = z_score(c, horizon, v);
            assert!(z.abs() <= 4.0, "v {v} element {i}: count {c}, z {z:.2}");
        }
    }
}

#[test]
fn poisson_at_300_hz_within_three_sigma() {
    let cfg = poisson_cfg(300.0, 1000, 7);
    let count = poisson_encode(&[1.0], &cfg).unwrap().len() as u64;
    assert!(z_score(count, 1000, 0.3).abs() <= 3.0, "count {count}");
}

#[test]
fn poisson_mean_count_grows_with_value() {
    let values: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let mut totals = vec![0u64; values.len()];
    for seed in 0..20 {
        let counts = poisson_encode(&values, &poisson_cfg(300.0, 1000, seed))
            .unwrap()
            .counts(values.len());
        totals.iter_mut().zip(counts).for_each(|(t, c)| *t += c);
    }
    assert!(totals.windows(2).all(|w| w[0] < w[1]), "{totals:?}");
}

fn dvs_cfg(horizon_steps: u32) -> EncoderConfig {
    EncoderConfig {
        horizon_steps,
        scheme: Scheme::Dvs,
        ..EncoderConfig::default()
    }
}

fn random_image(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| rng.random_range(0.0..1.0))
        .collect()
}

#[test]
fn static_path_is_silent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sac = SaccadeConfig {
        path: vec![(1.0, -2.0), (1.0, -2.0), (1.0, -2.0)],
        ..SaccadeConfig::default()
    };
    for _ in 0..5 {
        let image = random_image(&mut rng, 12, 9);
        assert!(dvs_emulate(&image, 12, 9, &sac, &dvs_cfg(100))
            .unwrap()
            .is_empty());
    }
}

#[test]
fn uniform_image_is_silent_under_motion() {
    for level in [0.0, 0.3, 1.0] {
        let image = vec![level; 28 * 28];
        let events = dvs_emulate(&image, 28, 28, &SaccadeConfig::default(), &dvs_cfg(100)).unwrap();
        assert!(events.is_empty(), "level {level}");
    }
}

#[test]
fn default_saccade_on_a_digit_like_image_emits_sorted_events() {
    let mut image = vec![0.0; 28 * 28];
    for r in 6..22 {
        image[r * 28 + 14] = 1.0;
    }
    let events = dvs_emulate(&image, 28, 28, &SaccadeConfig::default(), &dvs_cfg(100)).unwrap();
    assert!(!events.is_empty());
    assert!(events.events().windows(2).all(|w| w[0] < w[1]));
    assert!(events
        .events()
        .iter()
        .all(|e| e.polarity.is_some() && (e.neuron as usize) < 28 * 28));
}

#[test]
fn global_gain_does_not_change_events() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let (rows, cols) = (10, 8);
        let irradiance: Vec<f64> = (0..rows * cols)
            .map(|_| rng.random_range(0.05..1.05))
            .collect();
        let sac = SaccadeConfig::default();
        let reference =
            dvs_emulate_irradiance(&irradiance, rows, cols, &sac, &dvs_cfg(40)).unwrap();
        assert!(!reference.is_empty());
        for gain in [0.25, 3.7, 1000.0] {
            let scaled: Vec<f64> = irradiance.iter().map(|v| v * gain).collect();
            let events = dvs_emulate_irradiance(&scaled, rows, cols, &sac, &dvs_cfg(40)).unwrap();
            assert_eq!(events, reference, "gain {gain}");
        }
    }
}

#[test]
fn single_pixel_moving_right_one_pixel_per_step() {
    // One bright pixel at row 5, column 10 on a 12x28 dark image, shifted one
    // column right per step for four steps. The log contrast ln(1.05/0.05)
    // is far above the threshold, so at step s the pixel it leaves (column
    // 9 + s) goes OFF and the pixel it enters (column 10 + s) goes ON.
    let (rows, cols) = (12, 28);
    let mut image = vec![0.0; rows * cols];
    image[5 * cols + 10] = 1.0;
    let sac = SaccadeConfig {
        path: vec![(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0), (4.0, 0.0)],
        steps_per_segment: 1,
        ..SaccadeConfig::default()
    };
    let events = dvs_emulate(&image, rows, cols, &sac, &dvs_cfg(10)).unwrap();
    let px = |c: u32| 5 * cols as u32 + c;
    let expected = [
        SpikeEvent {
            t: 1,
            neuron: px(10),
            polarity: Some(Polarity::Off),
        },
        SpikeEvent {
            t: 1,
            neuron: px(11),
            polarity: Some(Polarity::On),
        },
        SpikeEvent {
            t: 2,
            neuron: px(11),
            polarity: Some(Polarity::Off),
        },
        SpikeEvent {
            t: 2,
            neuron: px(12),
            polarity: Some(Polarity::On),
        },
        SpikeEvent {
            t: 3,
            neuron: px(12),
            polarity: Some(Polarity::Off),
        },
        SpikeEvent {
            t: 3,
            neuron: px(13),
            polarity: Some(Polarity::On),
        },
        SpikeEvent {
            t: 4,
            neuron: px(13),
            polarity: Some(Polarity::Off),
        },
        SpikeEvent {
            t: 4,
            neuron: px(14),
            polarity: Some(Polarity::On),
        },
    ];
    assert_eq!(events.events(), &expected[..]);
    // Traversed pixels 11..=13 each fire exactly one ON followed by one OFF.
    for c in 11..=13 {
        let seq: Vec<_> = events
            .events()
            .iter()
            .filter(|e| e.neuron == px(c))
            .map(|e| e.polarity)
            .collect();
        assert_eq!(seq, [Some(Polarity::On), Some(Polarity::Off)]);
    }
}

#[test]
fn dvs_requires_path_inside_padding() {
    let sac = SaccadeConfig {
        path: vec![(0.0, 0.0), (5.0, 0.0)],
        ..SaccadeConfig::default()
    };
    assert!(dvs_emulate(&[0.5; 16], 4, 4, &sac, &dvs_cfg(20)).is_err());
}
