//! Clock-driven simulation of converted networks.
//!
//! Every synaptic hop, including input to first layer, takes one step: a
//! spike emitted at step `t` changes its targets' potentials at `t + 1`, so a
//! network of `D` neuron layers needs `D` steps before its first output spike.
//! A spike through a synapse of weight `w` deposits charge `w`, i.e. a current
//! `w / dt` for one step. Bias `b` is a constant current `b * lambda_max`, so
//! every drive scales with the peak input rate.

mod compile;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use compile::{CompiledLayer, CompiledNetwork, Synapses};

use crate::ann::FeatureShape;
use crate::convert::{ConvertError, SpikingNetwork};
use crate::dataset::{normalize, LabeledDataset};
use crate::encoding::{
    derive_seed, dvs_emulate, poisson_encode, ttfs_encode, write_events_csv, EncoderConfig,
    EncodingError, Polarity, SaccadeConfig, Scheme, SpikeEvent, SpikeEvents,
};
use crate::neuron::{step_layer_into, NeuronError, NeuronState};
use crate::tensor::argmax;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("input spans {input} steps but the simulation runs {config}")]
    HorizonMismatch { input: u32, config: u32 },
    #[error("invalid simulation configuration: {0}")]
    InvalidConfig(String),
    #[error("layer {0} was not recorded")]
    LayerNotRecorded(usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Neuron(#[from] NeuronError),
    #[error(transparent)]
    Convert(#[from] ConvertError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// How polarity-tagged input events drive the first layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputPolarity {
    /// ON events carry +1, OFF events -1.
    Signed,
    /// OFF events are dropped.
    OnOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon_steps: u32,
    pub encoder: EncoderConfig,
    /// Base seed from which dataset-level operations derive a per-image
    /// encoder seed.
    pub seed: u64,
    /// Neuron layers (0 = first) whose spikes are kept in the result.
    pub record_rasters: BTreeSet<usize>,
    pub input_polarity: InputPolarity,
    pub saccade: SaccadeConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        let encoder = EncoderConfig {
            horizon_steps: 100,
            ..EncoderConfig::default()
        };
        Self {
            dt: encoder.dt,
            horizon_steps: encoder.horizon_steps,
            seed: encoder.seed,
            encoder,
            record_rasters: BTreeSet::new(),
            input_polarity: InputPolarity::Signed,
            saccade: SaccadeConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn new(lambda_max: f64, horizon_steps: u32, seed: u64) -> Self {
        Self::default()
            .with_rate(lambda_max)
            .with_horizon(horizon_steps)
            .with_seed(seed)
    }

    pub fn with_rate(mut self, lambda_max: f64) -> Self {
        self.encoder.lambda_max = lambda_max;
        self
    }

    pub fn with_horizon(mut self, horizon_steps: u32) -> Self {
        self.horizon_steps = horizon_steps;
        self.encoder.horizon_steps = horizon_steps;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.encoder.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.horizon_steps == 0 {
            return Err(SimError::InvalidConfig(
                "horizon_steps must be at least 1".into(),
            ));
        }
        if self.encoder.dt != self.dt || self.encoder.horizon_steps != self.horizon_steps {
            return Err(SimError::InvalidConfig(
                "encoder dt and horizon must match the simulation".into(),
            ));
        }
        self.encoder.validate()?;
        if self.encoder.scheme == Scheme::Dvs {
            self.saccade.validate()?;
        }
        Ok(())
    }

    /// Encoder settings for item `index` of a dataset.
    pub fn encoder_for(&self, index: usize) -> EncoderConfig {
        EncoderConfig {
            seed: derive_seed(self.seed, index as u64),
            ..self.encoder.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimResult {
    pub class_count: usize,
    pub horizon_steps: u32,
    /// Output spikes per step and class, row-major `[step][class]`.
    pub output_counts: Vec<u32>,
    pub predicted_label: usize,
    pub confidence: Vec<f64>,
    pub rasters: BTreeMap<usize, SpikeEvents>,
    pub wall_time: Duration,
    /// Spikes emitted by all network neurons.
    pub total_spikes: u64,
    pub input_spikes: u64,
    pub first_output_step: Option<u32>,
}

impl SimResult {
    /// Per-class output counts over steps `0..up_to`.
    pub fn counts_until(&self, up_to: u32) -> Vec<u64> {
        let mut counts = vec![0u64; self.class_count];
        for row in self
            .output_counts
            .chunks_exact(self.class_count)
            .take(up_to as usize)
        {
            for (c, &n) in counts.iter_mut().zip(row) {
                *c += n as u64;
            }
        }
        counts
    }

    /// Predicted label after each readout step `0..=T`; entry `t` counts
    /// spikes at steps below `t`.
    pub fn labels_over_time(&self) -> Vec<usize> {
        let mut counts = vec![0u64; self.class_count];
        let mut labels = Vec::with_capacity(self.horizon_steps as usize + 1);
        labels.push(0);
        for row in self.output_counts.chunks_exact(self.class_count) {
            for (c, &n) in counts.iter_mut().zip(row) {
                *c += n as u64;
            }
            labels.push(argmax(&counts));
        }
        labels
    }

    pub fn raster(&self, layer: usize) -> Result<&SpikeEvents, SimError> {
        self.rasters
            .get(&layer)
            .ok_or(SimError::LayerNotRecorded(layer))
    }
}

/// Simulate one input event stream.
pub fn run(
    net: &SpikingNetwork,
    input: &SpikeEvents,
    cfg: &SimConfig,
) -> Result<SimResult, SimError> {
    CompiledNetwork::new(net)?.run(input, cfg)
}

impl CompiledNetwork {
    pub fn run(&self, input: &SpikeEvents, cfg: &SimConfig) -> Result<SimResult, SimError> {
        let started = Instant::now();
        cfg.validate()?;
        let horizon = cfg.horizon_steps;
        if input.horizon_steps() != horizon {
            return Err(SimError::HorizonMismatch {
                input: input.horizon_steps(),
                config: horizon,
            });
        }
        if input.dt() != cfg.dt {
            return Err(SimError::InvalidConfig(format!(
                "input dt {} differs from {}",
                input.dt(),
                cfg.dt
            )));
        }
        let width = self.input_width();
        if let Some(e) = input.events().iter().find(|e| e.neuron as usize >= width) {
            return Err(SimError::ShapeMismatch(format!(
                "input neuron {} but the network takes {width} inputs",
                e.neuron
            )));
        }
        if let Some(&l) = cfg.record_rasters.iter().find(|&&l| l >= self.layers.len()) {
            return Err(SimError::InvalidConfig(format!(
                "cannot record layer {l} of {}",
                self.layers.len()
            )));
        }
        for layer in &self.layers {
            layer.params.check_dt(cfg.dt)?;
        }

        let dt = cfg.dt;
        let lambda = cfg.encoder.lambda_max;
        let last = self.layers.len() - 1;
        let mut states: Vec<Vec<NeuronState>> = self
            .layers
            .iter()
            .map(|l| vec![NeuronState::default(); l.neurons()])
            .collect();
        let mut incoming: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.units]).collect();
        let bias_current: Vec<Vec<f64>> = self
            .layers
            .iter()
            .map(|l| l.bias.iter().map(|b| b * lambda).collect())
            .collect();
        let mut currents: Vec<f64> = Vec::new();
        let mut spikes: Vec<u32> = Vec::new();
        let mut rasters: BTreeMap<usize, Vec<SpikeEvent>> = cfg
            .record_rasters
            .iter()
            .map(|&l| (l, Vec::new()))
            .collect();
        let mut output_counts = vec![0u32; horizon as usize * self.class_count];
        let mut total_spikes = 0u64;
        let mut input_spikes = 0u64;
        let mut first_output_step = None;

        for (t, events) in input.by_step().into_iter().enumerate() {
            // Later layers first, so each reads what its predecessor emitted
            // during the previous step.
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                currents.clear();
                for (q, b) in incoming[l].iter_mut().zip(&bias_current[l]) {
                    let c = b + *q / dt;
                    *q = 0.0;
                    currents.extend(std::iter::repeat_n(c, layer.replication));
                }
                spikes.clear();
                step_layer_into(&mut states[l], &layer.params, &currents, dt, &mut spikes)?;
                total_spikes += spikes.len() as u64;
                if let Some(raster) = rasters.get_mut(&l) {
                    raster.extend(spikes.iter().map(|&n| SpikeEvent::new(t as u32, n)));
                }
                if l == last {
                    if !spikes.is_empty() && first_output_step.is_none() {
                        first_output_step = Some(t as u32);
                    }
                    let row = &mut output_counts[t * self.class_count..(t + 1) * self.class_count];
                    for &n in &spikes {
                        row[n as usize] += 1;
                    }
                } else {
                    let sink = &mut incoming[l + 1];
                    let syn = &self.layers[l + 1].synapses;
                    for &n in &spikes {
                        let (targets, weights) = syn.row(n as usize / layer.replication);
                        for (&to, &w) in targets.iter().zip(weights) {
                            sink[to as usize] += w;
                        }
                    }
                }
            }
            let syn = &self.layers[0].synapses;
            for e in events {
                let sign = match e.polarity {
                    None | Some(Polarity::On) => 1.0,
                    Some(Polarity::Off) if cfg.input_polarity == InputPolarity::Signed => -1.0,
                    Some(Polarity::Off) => continue,
                };
                input_spikes += 1;
                let (targets, weights) = syn.row(e.neuron as usize);
                for (&to, &w) in targets.iter().zip(weights) {
                    incoming[0][to as usize] += sign * w;
                }
            }
        }

        let totals = {
            let mut c = vec![0u64; self.class_count];
            for row in output_counts.chunks_exact(self.class_count) {
                for (a, &b) in c.iter_mut().zip(row) {
                    *a += b as u64;
                }
            }
            c
        };
        let decoded = crate::encoding::decode_count_vector(totals);
        let rasters = rasters
            .into_iter()
            .map(|(l, ev)| Ok((l, SpikeEvents::new(ev, horizon, dt)?)))
            .collect::<Result<_, SimError>>()?;
        Ok(SimResult {
            class_count: self.class_count,
            horizon_steps: horizon,
            output_counts,
            predicted_label: decoded.label,
            confidence: decoded.confidence,
            rasters,
            wall_time: started.elapsed(),
            total_spikes,
            input_spikes,
            first_output_step,
        })
    }

    /// Encode a normalized image with `encoder` per the configured scheme.
    pub fn encode(
        &self,
        image: &[f64],
        encoder: &EncoderConfig,
        cfg: &SimConfig,
    ) -> Result<SpikeEvents, SimError> {
        if image.len() != self.input_width() {
            return Err(SimError::ShapeMismatch(format!(
                "image has {} values, the network takes {}",
                image.len(),
                self.input_width()
            )));
        }
        Ok(match encoder.scheme {
            Scheme::Poisson => poisson_encode(image, encoder)?,
            Scheme::Ttfs => ttfs_encode(image, encoder)?,
            Scheme::Dvs => {
                let FeatureShape::Image {
                    channels: 1,
                    height,
                    width,
                } = self.input
                else {
                    return Err(SimError::ShapeMismatch(
                        "DVS input needs a single-channel image network".into(),
                    ));
                };
                dvs_emulate(image, height, width, &cfg.saccade, encoder)?
            }
        })
    }

    fn classify_item(
        &self,
        data: &LabeledDataset,
        index: usize,
        cfg: &SimConfig,
    ) -> Result<SimResult, SimError> {
        let image = normalize(data.image(index));
        let input = self.encode(&image, &cfg.encoder_for(index), cfg)?;
        self.run(&input, cfg)
    }

    /// Simulate every item of `data` in parallel; per-item outcomes in item
    /// order.
    fn sweep_items(
        &self,
        data: &LabeledDataset,
        cfg: &SimConfig,
    ) -> Result<Vec<ItemOutcome>, SimError> {
        if data.is_empty() {
            return Err(SimError::EmptyDataset);
        }
        cfg.validate()?;
        (0..data.len())
            .into_par_iter()
            .map(|i| {
                let r = self.classify_item(data, i, cfg)?;
                let label = data.label(i) as usize;
                Ok(ItemOutcome {
                    correct_over_time: r
                        .labels_over_time()
                        .into_iter()
                        .map(|l| l == label)
                        .collect(),
                    spikes: r.total_spikes + r.input_spikes,
                    latency: r.first_output_step.unwrap_or(cfg.horizon_steps),
                })
            })
            .collect()
    }
}

struct ItemOutcome {
    correct_over_time: Vec<bool>,
    spikes: u64,
    latency: u32,
}

fn curve_of(outcomes: &[ItemOutcome]) -> Vec<f64> {
    let steps = outcomes[0].correct_over_time.len();
    (0..steps)
        .map(|t| {
            outcomes.iter().filter(|o| o.correct_over_time[t]).count() as f64
                / outcomes.len() as f64
        })
        .collect()
}

/// Encode `image`, simulate, and read out the class at the final step.
pub fn classify(
    net: &SpikingNetwork,
    image: &[f64],
    cfg: &SimConfig,
) -> Result<(usize, Vec<f64>, SimResult), SimError> {
    cfg.validate()?;
    let compiled = CompiledNetwork::new(net)?;
    let input = compiled.encode(image, &cfg.encoder, cfg)?;
    let result = compiled.run(&input, cfg)?;
    Ok((result.predicted_label, result.confidence.clone(), result))
}

/// Accuracy of the count readout after each step: entry `t` of the
/// `T + 1` values uses spikes from steps `0..t`.
pub fn accuracy_curve(
    net: &SpikingNetwork,
    data: &LabeledDataset,
    cfg: &SimConfig,
) -> Result<Vec<f64>, SimError> {
    let outcomes = CompiledNetwork::new(net)?.sweep_items(data, cfg)?;
    Ok(curve_of(&outcomes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rate_hz: f64,
    pub accuracy: f64,
    /// Input plus network spikes per image.
    pub mean_spikes: f64,
    /// Steps until the first output spike, counting silent runs as `T`.
    pub mean_latency_steps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateSweepResult {
    pub horizon_steps: u32,
    pub rows: Vec<SweepRow>,
    /// Accuracy curve (length `T + 1`) per rate.
    pub curves: Vec<Vec<f64>>,
}

/// Classify every image of `data` at each peak rate in `rates` (strictly
/// increasing). Per-image encoder seeds do not depend on the rate.
pub fn rate_sweep(
    net: &SpikingNetwork,
    data: &LabeledDataset,
    rates: &[f64],
    cfg: &SimConfig,
) -> Result<RateSweepResult, SimError> {
    if rates.is_empty() {
        return Err(SimError::InvalidConfig("no rates to sweep".into()));
    }
    if rates.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
        return Err(SimError::InvalidConfig(
            "rates must be strictly increasing".into(),
        ));
    }
    for &rate in rates {
        if rate * cfg.dt > 1.0 {
            return Err(EncodingError::RateOverflow {
                value: 1.0,
                probability: rate * cfg.dt,
            }
            .into());
        }
    }
    let compiled = CompiledNetwork::new(net)?;
    let mut rows = Vec::with_capacity(rates.len());
    let mut curves = Vec::with_capacity(rates.len());
    for &rate in rates {
        let rcfg = cfg.clone().with_rate(rate);
        let outcomes = compiled.sweep_items(data, &rcfg)?;
        let n = outcomes.len() as f64;
        let curve = curve_of(&outcomes);
        rows.push(SweepRow {
            rate_hz: rate,
            accuracy: *curve.last().unwrap(),
            mean_spikes: outcomes.iter().map(|o| o.spikes).sum::<u64>() as f64 / n,
            mean_latency_steps: outcomes.iter().map(|o| o.latency as u64).sum::<u64>() as f64 / n,
        });
        curves.push(curve);
    }
    Ok(RateSweepResult {
        horizon_steps: cfg.horizon_steps,
        rows,
        curves,
    })
}

/// Write the recorded spikes of `layer` as an event CSV.
pub fn export_raster(result: &SimResult, layer: usize, path: &Path) -> Result<(), SimError> {
    let raster = result.raster(layer)?;
    let io = |source| SimError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io)?;
    write_events_csv(raster, std::io::BufWriter::new(file)).map_err(io)
}

/// `%.6g`-style formatting: six significant digits, trailing zeros removed,
/// exponent form outside `[1e-4, 1e6)`.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = mantissa.trim_end_matches('0').trim_end_matches('.');
        return format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let fixed = format!("{x:.*}", (5 - exp) as usize);
    if fixed.contains('.') {
        fixed
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    } else {
        fixed
    }
}

impl RateSweepResult {
    /// `rate_hz,accuracy,mean_spikes,mean_latency_steps`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rate_hz,accuracy,mean_spikes,mean_latency_steps\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                format_sig6(r.rate_hz),
                format_sig6(r.accuracy),
                format_sig6(r.mean_spikes),
                format_sig6(r.mean_latency_steps)
            ));
        }
        out
    }

    /// `rate_hz,step,accuracy`, one row per rate and readout step.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("rate_hz,step,accuracy\n");
        for (row, curve) in self.rows.iter().zip(&self.curves) {
            for (t, a) in curve.iter().enumerate() {
                out.push_str(&format!(
                    "{},{t},{}\n",
                    format_sig6(row.rate_hz),
                    format_sig6(*a)
                ));
            }
        }
        out
    }
}
