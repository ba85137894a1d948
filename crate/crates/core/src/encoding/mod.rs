//! Spike encoders (Poisson rate coding, time-to-first-spike, emulated DVS
//! saccades) and the count-based output decoder.

mod dvs;
mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dvs::{dvs_emulate, dvs_emulate_irradiance, SaccadeConfig};
pub use io::{
    events_from_bytes, events_to_bytes, parse_events_csv, write_events_csv, EVENTS_FORMAT_VERSION,
    EVENTS_MAGIC,
};

use crate::tensor::argmax;

#[derive(Debug, Error)]
pub enum EncodingError {
    #[error("rate overflow: value {value} gives per-step spike probability {probability} > 1")]
    RateOverflow { value: f64, probability: f64 },
    #[error("invalid encoder configuration: {0}")]
    InvalidConfig(String),
    #[error("input element {index} = {value} lies outside [0, 1]")]
    InvalidValue { index: usize, value: f64 },
    #[error("encoder called with scheme {found:?}, expected {expected:?}")]
    SchemeMismatch { expected: Scheme, found: Scheme },
    #[error("saccade displacement ({dx}, {dy}) leaves the canvas padded by {padding} pixels")]
    PathOutOfBounds { dx: f64, dy: f64, padding: usize },
    #[error(
        "event {index} breaks (timestep, neuron, polarity) ordering or duplicates its predecessor"
    )]
    Unsorted { index: usize },
    #[error("event {index} has timestep {t}, outside the horizon of {horizon} steps")]
    OutOfHorizon { index: usize, t: u32, horizon: u32 },
    #[error("event CSV line {line}: {detail}")]
    Csv { line: usize, detail: String },
    #[error("event container: {0}")]
    Binary(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    On,
    Off,
}

impl Polarity {
    /// CSV/binary code: 1 for ON, -1 for OFF, 0 for untagged.
    pub fn code(p: Option<Polarity>) -> i32 {
        match p {
            None => 0,
            Some(Polarity::On) => 1,
            Some(Polarity::Off) => -1,
        }
    }

    pub fn from_code(code: i32) -> Option<Option<Polarity>> {
        match code {
            0 => Some(None),
            1 => Some(Some(Polarity::On)),
            -1 => Some(Some(Polarity::Off)),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SpikeEvent {
    pub t: u32,
    pub neuron: u32,
    pub polarity: Option<Polarity>,
}

impl SpikeEvent {
    pub fn new(t: u32, neuron: u32) -> Self {
        Self {
            t,
            neuron,
            polarity: None,
        }
    }
}

/// Time-ordered spike events over a horizon of `horizon_steps` steps.
///
/// Events are strictly increasing in `(t, neuron, polarity)` with untagged
/// before ON before OFF, so no event is duplicated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeEvents {
    events: Vec<SpikeEvent>,
    horizon_steps: u32,
    dt: f64,
}

impl SpikeEvents {
    pub fn new(
        events: Vec<SpikeEvent>,
        horizon_steps: u32,
        dt: f64,
    ) -> Result<Self, EncodingError> {
        if horizon_steps == 0 || !(dt > 0.0 && dt.is_finite()) {
            return Err(EncodingError::InvalidConfig(format!(
                "horizon {horizon_steps} and dt {dt} must both be positive"
            )));
        }
        for (index, e) in events.iter().enumerate() {
            if e.t >= horizon_steps {
                return Err(EncodingError::OutOfHorizon {
                    index,
                    t: e.t,
                    horizon: horizon_steps,
                });
            }
            if index > 0 && events[index - 1] >= *e {
                return Err(EncodingError::Unsorted { index });
            }
        }
        Ok(Self {
            events,
            horizon_steps,
            dt,
        })
    }

    pub fn empty(horizon_steps: u32, dt: f64) -> Result<Self, EncodingError> {
        Self::new(Vec::new(), horizon_steps, dt)
    }

    pub fn events(&self) -> &[SpikeEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<SpikeEvent> {
        self.events
    }

    pub fn horizon_steps(&self) -> u32 {
        self.horizon_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events of each timestep as contiguous slices; `result.len() == horizon`.
    pub fn by_step(&self) -> Vec<&[SpikeEvent]> {
        let mut out = Vec::with_capacity(self.horizon_steps as usize);
        let mut start = 0;
        for t in 0..self.horizon_steps {
            let end = start + self.events[start..].partition_point(|e| e.t == t);
            out.push(&self.events[start..end]);
            start = end;
        }
        out
    }

    /// Spike count of every neuron in `0..width`; events on wider indices are
    /// ignored.
    pub fn counts(&self, width: usize) -> Vec<u64> {
        let mut counts = vec![0; width];
        for e in &self.events {
            if let Some(c) = counts.get_mut(e.neuron as usize) {
                *c += 1;
            }
        }
        counts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Poisson,
    Ttfs,
    Dvs,
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "poisson" => Ok(Self::Poisson),
            "ttfs" => Ok(Self::Ttfs),
            "dvs" => Ok(Self::Dvs),
            other => Err(format!("unknown encoding scheme `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Peak firing rate in Hz, reached by an input of value 1.
    pub lambda_max: f64,
    pub dt: f64,
    pub horizon_steps: u32,
    pub seed: u64,
    pub scheme: Scheme,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            lambda_max: 300.0,
            dt: 1e-3,
            horizon_steps: 200,
            seed: 1,
            scheme: Scheme::Poisson,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncodingError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(EncodingError::InvalidConfig(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if self.horizon_steps == 0 {
            return Err(EncodingError::InvalidConfig(
                "horizon_steps must be positive".into(),
            ));
        }
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return Err(EncodingError::InvalidConfig(format!(
                "lambda_max must be finite and non-negative, got {}",
                self.lambda_max
            )));
        }
        let p = self.lambda_max * self.dt;
        if p > 1.0 {
            return Err(EncodingError::RateOverflow {
                value: 1.0,
                probability: p,
            });
        }
        Ok(())
    }

    /// The same configuration with the seed replaced by one derived from
    /// `index`, so per-image streams do not depend on evaluation order.
    pub fn for_item(&self, index: u64) -> Self {
        Self {
            seed: derive_seed(self.seed, index),
            ..self.clone()
        }
    }

    fn expect(&self, expected: Scheme) -> Result<(), EncodingError> {
        if self.scheme != expected {
            return Err(EncodingError::SchemeMismatch {
                expected,
                found: self.scheme,
            });
        }
        self.validate()
    }
}

/// SplitMix64 finalizer applied to `base` offset by `index`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_unit(values: &[f64]) -> Result<(), EncodingError> {
    match values.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(index) => Err(EncodingError::InvalidValue {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

/// Bernoulli-per-step rate coding: element `i` spikes at each step with
/// probability `values[i] * lambda_max * dt`.
///
/// One uniform draw is consumed per step for every element with non-zero
/// probability, in step-major order, and compared against the probability.
/// Raising one element's value therefore never removes any of its spikes
/// under a fixed seed.
pub fn poisson_encode(values: &[f64], cfg: &EncoderConfig) -> Result<SpikeEvents, EncodingError> {
    cfg.expect(Scheme::Poisson)?;
    check_unit(values)?;
    let scale = cfg.lambda_max * cfg.dt;
    let active: Vec<(u32, f64)> = values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(i, &v)| (i as u32, v * scale))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let expected = active.iter().map(|a| a.1).sum::<f64>() * cfg.horizon_steps as f64;
    let mut events = Vec::with_capacity(expected as usize + 16);
    for t in 0..cfg.horizon_steps {
        for &(neuron, p) in &active {
            if rng.random::<f64>() < p {
                events.push(SpikeEvent::new(t, neuron));
            }
        }
    }
    SpikeEvents::new(events, cfg.horizon_steps, cfg.dt)
}

/// Timestep at which a time-to-first-spike input of value `v` fires, or
/// `None` for `v == 0`.
pub fn ttfs_time(v: f64, horizon_steps: u32) -> Option<u32> {
    (v > 0.0).then(|| ((1.0 - v) * (horizon_steps - 1) as f64).round() as u32)
}

/// Time-to-first-spike coding: at most one spike per element, earlier for
/// larger values; zero-valued elements stay silent.
pub fn ttfs_encode(values: &[f64], cfg: &EncoderConfig) -> Result<SpikeEvents, EncodingError> {
    cfg.expect(Scheme::Ttfs)?;
    check_unit(values)?;
    let mut events: Vec<SpikeEvent> = values
        .iter()
        .enumerate()
        .filter_map(|(i, &v)| ttfs_time(v, cfg.horizon_steps).map(|t| SpikeEvent::new(t, i as u32)))
        .collect();
    events.sort_unstable();
    SpikeEvents::new(events, cfg.horizon_steps, cfg.dt)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub counts: Vec<u64>,
    pub label: usize,
    /// Counts divided by their sum; all zero when there are no spikes.
    pub confidence: Vec<f64>,
}

/// Count output spikes per class with timestep below `up_to_step` and pick
/// the most active class, ties going to the lowest index. Events on neurons
/// at or beyond `class_count` are ignored.
pub fn decode_counts(output: &SpikeEvents, class_count: usize, up_to_step: u32) -> Decoded {
    let mut counts = vec![0u64; class_count];
    let end = output.events.partition_point(|e| e.t < up_to_step);
    for e in &output.events[..end] {
        if let Some(c) = counts.get_mut(e.neuron as usize) {
            *c += 1;
        }
    }
    decode_count_vector(counts)
}

/// Decode an already accumulated count vector.
pub fn decode_count_vector(counts: Vec<u64>) -> Decoded {
    let total: u64 = counts.iter().sum();
    let confidence = counts
        .iter()
        .map(|&c| {
            if total == 0 {
                0.0
            } else {
                c as f64 / total as f64
            }
        })
        .collect();
    let label = if counts.is_empty() {
        0
    } else {
        argmax(&counts)
    };
    Decoded {
        counts,
        label,
        confidence,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn poisson(lambda: f64, t: u32, seed: u64) -> EncoderConfig {
        EncoderConfig {
            lambda_max: lambda,
            horizon_steps: t,
            seed,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn checked_constructor() {
        let e = |t, n| SpikeEvent::new(t, n);
        assert!(SpikeEvents::new(vec![e(0, 1), e(0, 2), e(3, 0)], 4, 1e-3).is_ok());
        assert!(matches!(
            SpikeEvents::new(vec![e(0, 2), e(0, 1)], 4, 1e-3),
            Err(EncodingError::Unsorted { index: 1 })
        ));
        assert!(matches!(
            SpikeEvents::new(vec![e(1, 1), e(1, 1)], 4, 1e-3),
            Err(EncodingError::Unsorted { .. })
        ));
        assert!(matches!(
            SpikeEvents::new(vec![e(4, 0)], 4, 1e-3),
            Err(EncodingError::OutOfHorizon { .. })
        ));
        let on = SpikeEvent {
            polarity: Some(Polarity::On),
            ..e(2, 5)
        };
        let off = SpikeEvent {
            polarity: Some(Polarity::Off),
            ..e(2, 5)
        };
        assert!(SpikeEvents::new(vec![on, off], 4, 1e-3).is_ok());
        assert!(SpikeEvents::new(vec![off, on], 4, 1e-3).is_err());
    }

    #[test]
    fn by_step_partitions() {
        let ev = SpikeEvents::new(
            vec![
                SpikeEvent::new(0, 1),
                SpikeEvent::new(2, 0),
                SpikeEvent::new(2, 3),
            ],
            4,
            1.0,
        )
        .unwrap();
        let steps = ev.by_step();
        assert_eq!(
            steps.iter().map(|s| s.len()).collect::<Vec<_>>(),
            [1, 0, 2, 0]
        );
    }

    #[test]
    fn poisson_zero_input_is_silent() {
        let ev = poisson_encode(&[0.0; 50], &poisson(300.0, 1000, 3)).unwrap();
        assert!(ev.is_empty());
    }

    #[test]
    fn poisson_saturates() {
        let ev = poisson_encode(&[1.0], &poisson(1000.0, 100, 3)).unwrap();
        assert_eq!(ev.len(), 100);
    }

    #[test]
    fn poisson_rate_overflow() {
        assert!(matches!(
            poisson_encode(&[1.0], &poisson(1500.0, 10, 0)),
            Err(EncodingError::RateOverflow { .. })
        ));
        assert!(matches!(
            poisson_encode(&[1.5], &poisson(300.0, 10, 0)),
            Err(EncodingError::InvalidValue { index: 0, .. })
        ));
    }

    #[test]
    fn poisson_300hz_within_3_sigma() {
        let ev = poisson_encode(&[1.0], &poisson(300.0, 1000, 11)).unwrap();
        let sigma = (1000.0f64 * 0.3 * 0.7).sqrt();
        assert!(
            (ev.len() as f64 - 300.0).abs() <= 3.0 * sigma,
            "{}",
            ev.len()
        );
    }

    #[test]
    fn poisson_is_seeded() {
        let v = [0.2, 0.9, 0.5];
        assert_eq!(
            poisson_encode(&v, &poisson(300.0, 500, 4)).unwrap(),
            poisson_encode(&v, &poisson(300.0, 500, 4)).unwrap()
        );
        assert_ne!(
            poisson_encode(&v, &poisson(300.0, 500, 4)).unwrap(),
            poisson_encode(&v, &poisson(300.0, 500, 5)).unwrap()
        );
    }

    #[test]
    fn scheme_is_checked() {
        let cfg = EncoderConfig {
            scheme: Scheme::Ttfs,
            ..EncoderConfig::default()
        };
        assert!(matches!(
            poisson_encode(&[0.5], &cfg),
            Err(EncodingError::SchemeMismatch { .. })
        ));
    }

    #[test]
    fn ttfs_examples() {
        let cfg = EncoderConfig {
            scheme: Scheme::Ttfs,
            horizon_steps: 101,
            ..EncoderConfig::default()
        };
        let ev = ttfs_encode(&[1.0, 0.0, 0.5], &cfg).unwrap();
        assert_eq!(
            ev.events(),
            &[SpikeEvent::new(0, 0), SpikeEvent::new(50, 2)]
        );
    }

    #[test]
    fn decode_examples() {
        let ev = |counts: &[u32]| {
            let mut events = vec![];
            for t in 0..10 {
                for (n, &c) in counts.iter().enumerate() {
                    if t < c {
                        events.push(SpikeEvent::new(t, n as u32));
                    }
                }
            }
            SpikeEvents::new(events, 10, 1e-3).unwrap()
        };
        assert_eq!(decode_counts(&ev(&[0, 5, 2]), 3, 10).label, 1);
        assert_eq!(decode_counts(&ev(&[0, 0, 0]), 3, 10).label, 0);
        assert_eq!(decode_counts(&ev(&[3, 3, 1]), 3, 10).label, 0);
        let d = decode_counts(&ev(&[3, 3, 1]), 3, 2);
        assert_eq!(d.counts, [2, 2, 1]);
        assert_eq!(d.confidence, [0.4, 0.4, 0.2]);
        assert_eq!(decode_counts(&ev(&[0, 0]), 2, 10).confidence, [0.0, 0.0]);
    }

    #[test]
    fn seeds_differ_per_item() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| derive_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(derive_seed(7, 0), derive_seed(8, 0));
    }

    proptest! {
        #[test]
        fn poisson_output_is_valid_and_monotone(
            values in prop::collection::vec(0.0f64..=1.0, 1..20),
            bump in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let cfg = poisson(250.0, 200, seed);
            let low = poisson_encode(&values, &cfg).unwrap();
            prop_assert!(SpikeEvents::new(low.events().to_vec(), 200, 1e-3).is_ok());
            // Raising every value keeps the set of active elements, so the
            // draws line up and spikes can only be added.
            let raised: Vec<f64> = values.iter().map(|&v| if v > 0.0 { v + (1.0 - v) * bump } else { 0.0 }).collect();
            let high = poisson_encode(&raised, &cfg).unwrap();
            let high_set: std::collections::HashSet<_> = high.events().iter().collect();
            prop_assert!(low.events().iter().all(|e| high_set.contains(e)));
        }

        #[test]
        fn ttfs_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0, t in 2u32..500) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            if lo > 0.0 {
                prop_assert!(ttfs_time(hi, t).unwrap() <= ttfs_time(lo, t).unwrap());
            }
            prop_assert!(ttfs_time(hi, t).is_none_or(|s| s < t));
        }
    }
}
